//! 16-bit PGM label maps and PFM float maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::write_bytes;

/// Writes a 16-bit binary PGM (big-endian samples, maxval 65535).
pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, data: &[u16]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::InvalidInput("PGM buffer size does not match dimensions".into()));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(data.len() * 2);
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_bytes(path.as_ref(), &out)
}

/// Reads a binary PGM (8- or 16-bit). Returns `(width, height, samples)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, offset) = header_tokens(&bytes, 4, &name)?;
    if tokens[0] != "P5" {
        return Err(Error::parse(&name, "header", format!("expected P5, found {}", tokens[0])));
    }
    let num = |i: usize| -> Result<usize> {
        tokens[i]
            .parse()
            .map_err(|_| Error::parse(&name, "header", format!("bad number `{}`", tokens[i])))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    let body = &bytes[offset..];
    let data = if maxval < 256 {
        if body.len() < w * h {
            return Err(Error::parse(&name, "body", "truncated pixel data"));
        }
        body[..w * h].iter().map(|&b| b as u16).collect()
    } else {
        if body.len() < 2 * w * h {
            return Err(Error::parse(&name, "body", "truncated pixel data"));
        }
        body[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok((w, h, data))
}

/// Writes a little-endian PFM. `channels` must be 1 or 3; `data` is row-major,
/// top row first, and is flipped to PFM's bottom-up order on write.
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::InvalidInput("PFM supports 1 or 3 channels".into())),
    };
    if data.len() != width * height * channels {
        return Err(Error::InvalidInput("PFM buffer size does not match dimensions".into()));
    }
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        let start = row * width * channels;
        for v in &data[start..start + width * channels] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_bytes(path.as_ref(), &out)
}

/// Reads a PFM. Returns `(width, height, channels, data)` with the top row first.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, offset) = header_tokens(&bytes, 4, &name)?;
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::parse(&name, "header", format!("bad PFM magic `{other}`"))),
    };
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| Error::parse(&name, "header", "bad width"))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| Error::parse(&name, "header", "bad height"))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::parse(&name, "header", "bad scale"))?;
    let little = scale < 0.0;
    let n = w * h * channels;
    let body = &bytes[offset..];
    if body.len() < 4 * n {
        return Err(Error::parse(&name, "body", "truncated float data"));
    }
    let mut data = vec![0.0; n];
    for row in 0..h {
        let src_row = h - 1 - row;
        for i in 0..w * channels {
            let at = 4 * (src_row * w * channels + i);
            let b = [body[at], body[at + 1], body[at + 2], body[at + 3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            data[row * w * channels + i] = v as f64;
        }
    }
    Ok((w, h, channels, data))
}

/// Splits the whitespace-separated header of a Netpbm-style file into `count`
/// tokens. Returns the tokens and the offset of the first body byte.
fn header_tokens(bytes: &[u8], count: usize, name: &str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(name, "header", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates header and body.
    Ok((tokens, i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let data: Vec<u16> = (0..12).map(|i| i * 3000).collect();
        write_pgm16(&p, 4, 3, &data).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (4, 3, data));
    }

    #[test]
    fn pfm_round_trip_keeps_top_row_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pfm");
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5).collect();
        write_pfm(&p, 3, 2, 3, &data).unwrap();
        let (w, h, c, back) = read_pfm(&p).unwrap();
        assert_eq!((w, h, c), (3, 2, 3));
        assert_eq!(back, data);
    }
}
