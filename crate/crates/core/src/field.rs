//! Gaussian primitives, cameras, scenes and their file formats.
//!
//! Gaussian fields are stored as PLY vertex records (ASCII or binary
//! little-endian) with the properties
//! `x y z scale_0..2 rot_0..3 opacity red green blue nx ny nz desc_0..desc_{k-1} plane_id`.
//! Rotations are stored `w x y z`, scales and opacities are stored activated
//! (meters and `[0, 1]`), and `plane_id` is `-1` when absent. Cameras and
//! ground-truth planes are JSON arrays.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_DESCRIPTOR_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub descriptor: Vec<f64>,
    pub gt_plane_id: Option<u32>,
}

impl GaussianPrimitive {
    /// Checks the type invariants: finite values, unit rotation / normal /
    /// descriptor, opacity in `[0, 1]`, strictly positive scales.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = self.center.iter().all(|x| x.is_finite())
            && self.scale.iter().all(|x| x.is_finite())
            && self.rotation.coords.iter().all(|x| x.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|x| x.is_finite())
            && self.normal.iter().all(|x| x.is_finite())
            && self.descriptor.iter().all(|x| x.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        if (self.rotation.coords.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err("rotation quaternion is not unit length".into());
        }
        if (self.normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err("normal is not unit length".into());
        }
        if (crate::linalg::norm(&self.descriptor) - 1.0).abs() > UNIT_TOLERANCE {
            return Err("descriptor is not unit length".into());
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err("scale components must be positive".into());
        }
        Ok(())
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_of(&self.rotation, &self.scale)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor.len()
    }
}

pub fn covariance_of(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let cov = r * s2 * r.transpose();
    (cov + cov.transpose()) * 0.5
}

/// Pinhole camera. Camera looks along +z, `u` grows rightward and `v` downward:
/// `u = fx·x/z + u0`, `v = fy·y/z + v0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Matrix4<f64>,
}

impl CameraView {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        if self.world_to_camera.iter().any(|x| !x.is_finite()) {
            return Err("world_to_camera has non-finite entries".into());
        }
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).amax() > UNIT_TOLERANCE {
            return Err("rotation block of world_to_camera is not orthonormal".into());
        }
        let last = self.world_to_camera.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > UNIT_TOLERANCE {
            return Err("world_to_camera bottom row must be [0, 0, 0, 1]".into());
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * world + self.translation()
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (cam - self.translation())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Camera-frame point at z-depth `depth` along pixel `(u, v)`: `depth·K⁻¹(u, v, 1)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            depth * (u - self.u0) / self.fx,
            depth * (v - self.v0) / self.fy,
            depth,
        )
    }

    /// Builds a camera at `eye` looking at `target` with world `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<CameraView> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("camera target coincides with eye".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("camera up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut w = Matrix4::identity();
        w.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Ok(CameraView {
            fx,
            fy,
            u0: width as f64 / 2.0,
            v0: height as f64 / 2.0,
            width,
            height,
            world_to_camera: w,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtPlane {
    pub id: u32,
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub polygon: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub views: Vec<CameraView>,
    pub gt_planes: Option<Vec<GtPlane>>,
}

impl Scene {
    pub fn descriptor_dim(&self) -> usize {
        self.primitives
            .first()
            .map_or(DEFAULT_DESCRIPTOR_DIM, |p| p.descriptor.len())
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|p| p.center).collect()
    }

    /// Validates every primitive, view and ground-truth plane.
    pub fn validate(&self) -> Result<()> {
        let k = self.descriptor_dim();
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()
                .map_err(|m| Error::InvalidInput(format!("primitive {i}: {m}")))?;
            if p.descriptor.len() != k {
                return Err(Error::InvalidInput(format!(
                    "primitive {i}: descriptor length {} differs from {k}",
                    p.descriptor.len()
                )));
            }
        }
        for (i, v) in self.views.iter().enumerate() {
            v.validate()
                .map_err(|m| Error::InvalidInput(format!("view {i}: {m}")))?;
        }
        if let Some(planes) = &self.gt_planes {
            for (i, p) in planes.iter().enumerate() {
                if p.id as usize != i {
                    return Err(Error::InvalidInput(format!(
                        "ground-truth plane ids must be dense and ordered; entry {i} has id {}",
                        p.id
                    )));
                }
                if (p.normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::InvalidInput(format!("ground-truth plane {i}: normal not unit")));
                }
            }
        }
        Ok(())
    }
}

/// Random unit vector of dimension `k` drawn from `rng`.
pub fn random_unit(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if crate::linalg::normalize_in_place(&mut v) > 1e-6 {
            return v;
        }
    }
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Defaults applied to properties missing from an imported field.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Seed for random unit normals / descriptors when they are absent.
    pub seed: u64,
    /// Descriptor length used when the file has no `desc_*` properties.
    pub descriptor_dim: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            seed: 0,
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, PropertyKind)>,
}

#[derive(Debug, Clone)]
struct PlyHeader {
    format: PlyFormat,
    elements: Vec<Element>,
}

fn read_header(reader: &mut impl BufRead, file: &str) -> Result<PlyHeader> {
    let mut line = String::new();
    let mut line_no = 0usize;
    let mut next_line = |reader: &mut dyn BufRead, line: &mut String| -> Result<usize> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::parse(file, format!("header line {}", line_no + 1), e.to_string()))?;
        line_no += 1;
        if n == 0 {
            return Err(Error::parse(file, format!("header line {line_no}"), "unexpected end of file"));
        }
        Ok(line_no)
    };
    let no = next_line(reader, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::parse(file, format!("header line {no}"), "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let no = next_line(reader, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(Error::parse(
                            file,
                            format!("header line {no}"),
                            format!("unsupported PLY format `{other}`"),
                        ))
                    }
                })
            }
            ["element", name, count] => {
                let count = count.parse::<usize>().map_err(|_| {
                    Error::parse(file, format!("header line {no}"), format!("bad element count `{count}`"))
                })?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let (Some(count), Some(item)) = (ScalarType::parse(count), ScalarType::parse(item)) else {
                    return Err(Error::parse(file, format!("header line {no}"), "bad list property types"));
                };
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(file, format!("header line {no}"), "property before element"))?;
                el.properties.push((name.to_string(), PropertyKind::List { count, item }));
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| {
                    Error::parse(file, format!("header line {no}"), format!("unknown property type `{ty}`"))
                })?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(file, format!("header line {no}"), "property before element"))?;
                el.properties.push((name.to_string(), PropertyKind::Scalar(ty)));
            }
            _ => {
                return Err(Error::parse(
                    file,
                    format!("header line {no}"),
                    format!("unrecognized header line `{}`", line.trim_end()),
                ))
            }
        }
    }
    let format = format.ok_or_else(|| Error::parse(file, "header", "missing `format` line"))?;
    Ok(PlyHeader { format, elements })
}

/// Reads the scalar properties of the `vertex` element as rows of f64.
fn read_vertex_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = path.display().to_string();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let header = read_header(&mut reader, &file)?;
    let mut names = Vec::new();
    let mut rows = Vec::new();
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        if is_vertex {
            names = el.properties.iter().map(|(n, _)| n.clone()).collect();
        }
        match header.format {
            PlyFormat::Ascii => {
                let mut line = String::new();
                for rec in 0..el.count {
                    line.clear();
                    let n = reader
                        .read_line(&mut line)
                        .map_err(|e| Error::parse(&file, format!("{} record {rec}", el.name), e.to_string()))?;
                    if n == 0 {
                        return Err(Error::parse(&file, format!("{} record {rec}", el.name), "unexpected end of file"));
                    }
                    if !is_vertex {
                        continue;
                    }
                    let mut toks = line.split_whitespace();
                    let mut row = Vec::with_capacity(el.properties.len());
                    for (pname, kind) in &el.properties {
                        let mut take = || -> Result<f64> {
                            let t = toks.next().ok_or_else(|| {
                                Error::parse(&file, format!("vertex record {rec}"), format!("missing value for `{pname}`"))
                            })?;
                            t.parse::<f64>().map_err(|_| {
                                Error::parse(&file, format!("vertex record {rec}"), format!("bad number `{t}` for `{pname}`"))
                            })
                        };
                        match kind {
                            PropertyKind::Scalar(_) => row.push(take()?),
                            PropertyKind::List { .. } => {
                                let cnt = take()? as usize;
                                for _ in 0..cnt {
                                    take()?;
                                }
                                row.push(f64::NAN);
                            }
                        }
                    }
                    rows.push(row);
                }
            }
            PlyFormat::BinaryLittleEndian => {
                let fixed: Option<usize> = el
                    .properties
                    .iter()
                    .map(|(_, k)| match k {
                        PropertyKind::Scalar(t) => Some(t.size()),
                        PropertyKind::List { .. } => None,
                    })
                    .sum();
                for rec in 0..el.count {
                    let loc = || format!("{} record {rec}", el.name);
                    let mut row = Vec::with_capacity(el.properties.len());
                    if let Some(size) = fixed {
                        let mut buf = vec![0u8; size];
                        reader
                            .read_exact(&mut buf)
                            .map_err(|_| Error::parse(&file, loc(), "unexpected end of file"))?;
                        if is_vertex {
                            let mut off = 0;
                            for (_, kind) in &el.properties {
                                if let PropertyKind::Scalar(t) = kind {
                                    row.push(t.read_le(&buf[off..off + t.size()]));
                                    off += t.size();
                                }
                            }
                        }
                    } else {
                        for (_, kind) in &el.properties {
                            match kind {
                                PropertyKind::Scalar(t) => {
                                    let mut buf = [0u8; 8];
                                    reader
                                        .read_exact(&mut buf[..t.size()])
                                        .map_err(|_| Error::parse(&file, loc(), "unexpected end of file"))?;
                                    row.push(t.read_le(&buf));
                                }
                                PropertyKind::List { count, item } => {
                                    let mut buf = [0u8; 8];
                                    reader
                                        .read_exact(&mut buf[..count.size()])
                                        .map_err(|_| Error::parse(&file, loc(), "unexpected end of file"))?;
                                    let n = count.read_le(&buf) as usize;
                                    let mut skip = vec![0u8; n * item.size()];
                                    reader
                                        .read_exact(&mut skip)
                                        .map_err(|_| Error::parse(&file, loc(), "unexpected end of file"))?;
                                    row.push(f64::NAN);
                                }
                            }
                        }
                    }
                    if is_vertex {
                        rows.push(row);
                    }
                }
            }
        }
        if is_vertex {
            break;
        }
    }
    if names.is_empty() {
        return Err(Error::parse(&file, "header", "no `vertex` element"));
    }
    Ok((names, rows))
}

struct Columns<'a> {
    names: &'a [String],
    file: &'a str,
}

impl Columns<'_> {
    fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.find(name).ok_or_else(|| {
            Error::parse(self.file, "header", format!("missing required vertex property `{name}`"))
        })
    }

    fn optional_group(&self, names: &[&str]) -> Result<Option<Vec<usize>>> {
        let found: Vec<Option<usize>> = names.iter().map(|n| self.find(n)).collect();
        if found.iter().all(Option::is_none) {
            return Ok(None);
        }
        if found.iter().any(Option::is_none) {
            return Err(Error::parse(
                self.file,
                "header",
                format!("incomplete property group {names:?}"),
            ));
        }
        Ok(Some(found.into_iter().map(|x| x.expect("checked")).collect()))
    }
}

/// Loads a Gaussian field. The returned scene has no views or ground-truth planes.
pub fn load_field(path: impl AsRef<Path>) -> Result<Scene> {
    load_field_with(path, LoadOptions::default())
}

pub fn load_field_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Scene> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let (names, rows) = read_vertex_table(path)?;
    let cols = Columns {
        names: &names,
        file: &file,
    };
    let pos = [cols.require("x")?, cols.require("y")?, cols.require("z")?];
    let scale = [
        cols.require("scale_0")?,
        cols.require("scale_1")?,
        cols.require("scale_2")?,
    ];
    let rot = [
        cols.require("rot_0")?,
        cols.require("rot_1")?,
        cols.require("rot_2")?,
        cols.require("rot_3")?,
    ];
    let opacity = cols.require("opacity")?;
    let color = cols.optional_group(&["red", "green", "blue"])?;
    let normal = cols.optional_group(&["nx", "ny", "nz"])?;
    let mut desc_cols = Vec::new();
    while let Some(c) = cols.find(&format!("desc_{}", desc_cols.len())) {
        desc_cols.push(c);
    }
    let plane_id = cols.find("plane_id");

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut primitives = Vec::with_capacity(rows.len());
    for (rec, row) in rows.iter().enumerate() {
        let bad = |msg: String| Error::parse(&file, format!("vertex record {rec}"), msg);
        let get = |c: usize| -> Result<f64> {
            let v = row[c];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("non-finite value for `{}`", names[c])))
            }
        };
        let center = Vector3::new(get(pos[0])?, get(pos[1])?, get(pos[2])?);
        let s = Vector3::new(get(scale[0])?, get(scale[1])?, get(scale[2])?);
        if s.iter().any(|&v| v <= 0.0) {
            return Err(bad("scale components must be positive".into()));
        }
        let q = Quaternion::new(get(rot[0])?, get(rot[1])?, get(rot[2])?, get(rot[3])?);
        if q.norm() < 1e-12 {
            return Err(bad("zero rotation quaternion".into()));
        }
        let o = get(opacity)?;
        if !(0.0..=1.0).contains(&o) {
            return Err(bad(format!("opacity {o} outside [0, 1]")));
        }
        let c = match &color {
            Some(idx) => Vector3::new(get(idx[0])?, get(idx[1])?, get(idx[2])?),
            None => Vector3::repeat(0.5),
        };
        // All-zero normals (common in plain 3DGS exports) count as missing.
        let n = match &normal {
            Some(idx) => Vector3::new(get(idx[0])?, get(idx[1])?, get(idx[2])?),
            None => Vector3::zeros(),
        };
        let n = match n.try_normalize(1e-12) {
            Some(n) => n,
            None => {
                let v = random_unit(&mut rng, 3);
                Vector3::new(v[0], v[1], v[2])
            }
        };
        let descriptor = if desc_cols.is_empty() {
            random_unit(&mut rng, opts.descriptor_dim)
        } else {
            let mut d = desc_cols.iter().map(|&c| get(c)).collect::<Result<Vec<f64>>>()?;
            if crate::linalg::normalize_in_place(&mut d) < 1e-12 {
                return Err(bad("zero-length descriptor".into()));
            }
            d
        };
        let gt_plane_id = match plane_id {
            Some(c) => {
                let v = get(c)?;
                if v < 0.0 {
                    None
                } else {
                    Some(v as u32)
                }
            }
            None => None,
        };
        primitives.push(GaussianPrimitive {
            center,
            scale: s,
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: o,
            color: c,
            normal: n,
            descriptor,
            gt_plane_id,
        });
    }
    let scene = Scene {
        primitives,
        views: Vec::new(),
        gt_planes: None,
    };
    let k = scene.descriptor_dim();
    if scene.primitives.iter().any(|p| p.descriptor.len() != k) {
        return Err(Error::parse(&file, "vertex", "inconsistent descriptor lengths"));
    }
    Ok(scene)
}

/// Writes the primitives of `scene` as a PLY Gaussian field.
pub fn save_field(scene: &Scene, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let k = scene.descriptor_dim();
    let mut header = String::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = writeln!(header, "ply\nformat {fmt} 1.0\nelement vertex {}", scene.primitives.len());
    let mut float_names: Vec<String> = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green", "blue", "nx", "ny", "nz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    float_names.extend((0..k).map(|i| format!("desc_{i}")));
    for n in &float_names {
        let _ = writeln!(header, "property double {n}");
    }
    header.push_str("property int plane_id\nend_header\n");

    let mut out: Vec<u8> = header.into_bytes();
    for p in &scene.primitives {
        if p.descriptor.len() != k {
            return Err(Error::InvalidInput("inconsistent descriptor lengths".into()));
        }
        let q = p.rotation.quaternion();
        let mut vals = vec![
            p.center.x, p.center.y, p.center.z, p.scale.x, p.scale.y, p.scale.z, q.w, q.i, q.j, q.k,
            p.opacity, p.color.x, p.color.y, p.color.z, p.normal.x, p.normal.y, p.normal.z,
        ];
        vals.extend_from_slice(&p.descriptor);
        let id: i32 = p.gt_plane_id.map_or(-1, |v| v as i32);
        match format {
            PlyFormat::Ascii => {
                let mut line = String::new();
                for v in &vals {
                    // `{:?}` prints the shortest round-trip representation.
                    let _ = write!(line, "{v:?} ");
                }
                let _ = writeln!(line, "{id}");
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in &vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    write_bytes(path, &out)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Per-vertex integer labels from a PLY file: `plane_label` if present, else `plane_id`.
/// Negative values map to `None`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<Option<u32>>> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let (names, rows) = read_vertex_table(path)?;
    let col = names
        .iter()
        .position(|n| n == "plane_label")
        .or_else(|| names.iter().position(|n| n == "plane_id"))
        .ok_or_else(|| Error::parse(&file, "header", "no `plane_label` or `plane_id` property"))?;
    rows.iter()
        .enumerate()
        .map(|(rec, r)| {
            let v = r[col];
            if !v.is_finite() {
                Err(Error::parse(&file, format!("vertex record {rec}"), "non-finite label"))
            } else if v < 0.0 {
                Ok(None)
            } else {
                Ok(Some(v as u32))
            }
        })
        .collect()
}

/// Vertex positions `x y z` of any PLY file.
pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<Vector3<f64>>> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let (names, rows) = read_vertex_table(path)?;
    let col = |n: &str| {
        names
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| Error::parse(&file, "header", format!("missing required vertex property `{n}`")))
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    rows.iter()
        .enumerate()
        .map(|(rec, r)| {
            let p = Vector3::new(r[x], r[y], r[z]);
            if p.iter().all(|v| v.is_finite()) {
                Ok(p)
            } else {
                Err(Error::parse(&file, format!("vertex record {rec}"), "non-finite position"))
            }
        })
        .collect()
}

/// Writes a colored point cloud, one color per label and gray for `None`.
pub fn save_labeled_points(
    points: &[Vector3<f64>],
    labels: &[Option<u32>],
    path: impl AsRef<Path>,
) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::InvalidInput("points and labels differ in length".into()));
    }
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty int plane_label\nend_header\n",
        points.len()
    )
    .into_bytes();
    for (p, l) in points.iter().zip(labels) {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&label_color(*l));
        out.extend_from_slice(&l.map_or(-1i32, |v| v as i32).to_le_bytes());
    }
    write_bytes(path.as_ref(), &out)
}

/// Distinct colors from golden-ratio hue stepping; gray for unassigned.
pub fn label_color(label: Option<u32>) -> [u8; 3] {
    let Some(l) = label else {
        return [128, 128, 128];
    };
    let h = (l as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let to = |c: f64| (40.0 + 215.0 * c).round() as u8;
    [to(r), to(g), to(b)]
}

// ---------------------------------------------------------------------------
// JSON: cameras and ground-truth planes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    u0: f64,
    v0: f64,
    width: usize,
    height: usize,
    world_to_camera: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneRecord {
    id: u32,
    normal: [f64; 3],
    offset: f64,
    polygon: Vec<[f64; 3]>,
}

pub fn cameras_to_json(views: &[CameraView]) -> Result<String> {
    let recs: Vec<CameraRecord> = views
        .iter()
        .map(|v| {
            let mut w = Vec::with_capacity(16);
            for r in 0..4 {
                for c in 0..4 {
                    w.push(v.world_to_camera[(r, c)]);
                }
            }
            CameraRecord {
                fx: v.fx,
                fy: v.fy,
                u0: v.u0,
                v0: v.v0,
                width: v.width,
                height: v.height,
                world_to_camera: w,
            }
        })
        .collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn cameras_from_json(text: &str) -> Result<Vec<CameraView>> {
    let recs: Vec<CameraRecord> = serde_json::from_str(text)?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.world_to_camera.len() != 16 {
                return Err(Error::parse(
                    "cameras",
                    format!("camera {i}"),
                    "world_to_camera must have 16 entries",
                ));
            }
            let view = CameraView {
                fx: r.fx,
                fy: r.fy,
                u0: r.u0,
                v0: r.v0,
                width: r.width,
                height: r.height,
                world_to_camera: Matrix4::from_row_slice(&r.world_to_camera),
            };
            view.validate()
                .map_err(|m| Error::parse("cameras", format!("camera {i}"), m))?;
            Ok(view)
        })
        .collect()
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text)
}

pub fn save_cameras(views: &[CameraView], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), cameras_to_json(views)?.as_bytes())
}

pub fn gt_planes_to_json(planes: &[GtPlane]) -> Result<String> {
    let recs: Vec<PlaneRecord> = planes
        .iter()
        .map(|p| PlaneRecord {
            id: p.id,
            normal: [p.normal.x, p.normal.y, p.normal.z],
            offset: p.offset,
            polygon: p.polygon.iter().map(|v| [v.x, v.y, v.z]).collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn gt_planes_from_json(text: &str) -> Result<Vec<GtPlane>> {
    let recs: Vec<PlaneRecord> = serde_json::from_str(text)?;
    let planes: Vec<GtPlane> = recs
        .into_iter()
        .map(|r| GtPlane {
            id: r.id,
            normal: Vector3::from(r.normal),
            offset: r.offset,
            polygon: r.polygon.into_iter().map(Vector3::from).collect(),
        })
        .collect();
    for (i, p) in planes.iter().enumerate() {
        if p.id as usize != i {
            return Err(Error::parse("gt_planes", format!("plane {i}"), "plane ids must be dense and ordered"));
        }
        if (p.normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::parse("gt_planes", format!("plane {i}"), "normal is not unit length"));
        }
    }
    Ok(planes)
}

pub fn load_gt_planes(path: impl AsRef<Path>) -> Result<Vec<GtPlane>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    gt_planes_from_json(&text)
}

pub fn save_gt_planes(planes: &[GtPlane], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), gt_planes_to_json(planes)?.as_bytes())
}

/// Loads a field plus cameras and, optionally, ground-truth planes.
pub fn load_scene(
    field: impl AsRef<Path>,
    cameras: impl AsRef<Path>,
    gt_planes: Option<&Path>,
    opts: LoadOptions,
) -> Result<Scene> {
    let mut scene = load_field_with(field, opts)?;
    scene.views = load_cameras(cameras)?;
    scene.gt_planes = gt_planes.map(load_gt_planes).transpose()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn prim(rotation: UnitQuaternion<f64>, scale: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive {
            center: Vector3::new(0.1, -0.2, 1.5),
            scale,
            rotation,
            opacity: 0.7,
            color: Vector3::new(0.2, 0.4, 0.6),
            normal: Vector3::z(),
            descriptor: vec![1.0, 0.0, 0.0],
            gt_plane_id: Some(2),
        }
    }

    #[test]
    fn covariance_identity_and_diagonal() {
        let c = prim(UnitQuaternion::identity(), Vector3::new(1.0, 1.0, 1.0)).covariance();
        assert!((c - Matrix3::identity()).amax() < 1e-15);
        let c = prim(UnitQuaternion::identity(), Vector3::new(2.0, 1.0, 1.0)).covariance();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).amax() < 1e-15);
    }

    #[test]
    fn covariance_rotated_about_z() {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let c = prim(rot, Vector3::new(2.0, 1.0, 1.0)).covariance();
        // Oracle: explicit R·diag(s²)·Rᵀ with R = [[0,-1,0],[1,0,0],[0,0,1]].
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert!((c - expected).amax() < 1e-12);
        assert!((c - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).amax() < 1e-12);
    }

    #[test]
    fn look_at_convention() {
        let cam = CameraView::look_at(
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::z(),
            100.0,
            100.0,
            64,
            64,
        )
        .unwrap();
        cam.validate().unwrap();
        // A point to the right of the view direction (−y when looking along +x
        // with z up) lands at u > u0; a point above lands at v < v0.
        let p = cam.to_camera(&Vector3::new(2.0, -0.5, 0.0));
        assert!(p.z > 0.0 && p.x > 0.0);
        let p = cam.to_camera(&Vector3::new(2.0, 0.0, 0.5));
        assert!(p.y < 0.0);
        assert!((cam.center()).norm() < 1e-12);
    }

    #[test]
    fn nan_opacity_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float scale_0\nproperty float scale_1\nproperty float scale_2\nproperty float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\nproperty float opacity\nend_header\n0 0 0 1 1 1 1 0 0 0 0.5\n0 0 0 1 1 1 1 0 0 0 nan\n";
        fs::write(&path, text).unwrap();
        let err = load_field(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vertex record 1"), "{msg}");
        assert!(msg.contains("opacity"), "{msg}");
    }

    #[test]
    fn missing_required_property() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
        )
        .unwrap();
        let msg = load_field(&path).unwrap_err().to_string();
        assert!(msg.contains("scale_0"), "{msg}");
    }

    #[test]
    fn malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 1\nbogus line\nend_header\n").unwrap();
        let msg = load_field(&path).unwrap_err().to_string();
        assert!(msg.contains("header line 4"), "{msg}");
    }

    #[test]
    fn missing_descriptors_get_seeded_unit_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float scale_0\nproperty float scale_1\nproperty float scale_2\nproperty float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\nproperty float opacity\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n0 0 0 1 1 1 1 0 0 0 0.5 0 0 0\n1 0 0 1 1 1 1 0 0 0 0.5 0 0 0\n";
        fs::write(&path, text).unwrap();
        let a = load_field_with(&path, LoadOptions { seed: 7, descriptor_dim: 4 }).unwrap();
        let b = load_field_with(&path, LoadOptions { seed: 7, descriptor_dim: 4 }).unwrap();
        assert_eq!(a, b);
        for p in &a.primitives {
            assert_eq!(p.descriptor.len(), 4);
            p.validate().unwrap();
        }
        assert_ne!(a.primitives[0].descriptor, a.primitives[1].descriptor);
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = CameraView::look_at(
            Vector3::new(0.3, 0.1, 1.2),
            Vector3::new(2.0, 1.0, 0.9),
            Vector3::z(),
            91.4,
            91.4,
            128,
            96,
        )
        .unwrap();
        let back = cameras_from_json(&cameras_to_json(std::slice::from_ref(&cam)).unwrap()).unwrap();
        assert_eq!(back[0], cam);
    }
}
