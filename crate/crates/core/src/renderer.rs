//! CPU splatting renderer.
//!
//! Splats are projected with the affine (EWA) approximation, depth-sorted and
//! alpha-blended front to back per pixel. Each pixel is evaluated exactly
//! against every splat whose 3σ bounding box contains it; the pixel center of
//! column `x`, row `y` is the image point `(x, y)`.
//!
//! Normal maps are expressed in the camera frame.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{CameraView, GaussianPrimitive, Scene};
use crate::imageio::{write_pfm, write_pgm16};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    /// Splats with camera depth at or below this are culled (meters).
    pub near: f64,
    /// Added to the diagonal of every 2D covariance (pixels²).
    pub dilation: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Blending stops once transmittance drops below this.
    pub transmittance_min: f64,
    /// Depth, normal and descriptor are valid where accumulated alpha exceeds this.
    pub tau_alpha: f64,
    /// Footprint half-width in standard deviations.
    pub footprint_sigma: f64,
    /// Splats whose mean lies beyond this multiple of the half field of view are culled.
    pub frustum_guard: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            near: 0.05,
            dilation: 0.3,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            tau_alpha: 0.5,
            footprint_sigma: 3.0,
            frustum_guard: 1.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    pub mean: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub source: usize,
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]`, clipped to the image.
    pub bbox: [usize; 4],
}

/// Projects one primitive. `None` when culled (behind the near plane, outside
/// the frustum guard, or with a footprint entirely off-image).
pub fn project(prim: &GaussianPrimitive, source: usize, view: &CameraView) -> Option<ProjectedSplat> {
    project_with(prim, source, view, &RenderSettings::default())
}

pub fn project_with(
    prim: &GaussianPrimitive,
    source: usize,
    view: &CameraView,
    settings: &RenderSettings,
) -> Option<ProjectedSplat> {
    let rot = view.rotation();
    let p = rot * prim.center + view.translation();
    if p.z <= settings.near {
        return None;
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let lim_x = settings.frustum_guard * (view.width as f64 / 2.0) / view.fx;
    let lim_y = settings.frustum_guard * (view.height as f64 / 2.0) / view.fy;
    if (x / z).abs() > lim_x || (y / z).abs() > lim_y {
        return None;
    }
    let j = Matrix2x3::new(
        view.fx / z,
        0.0,
        -view.fx * x / (z * z),
        0.0,
        view.fy / z,
        -view.fy * y / (z * z),
    );
    let sigma_cam = rot * prim.covariance() * rot.transpose();
    let mut cov2d = j * sigma_cam * j.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += settings.dilation;
    cov2d[(1, 1)] += settings.dilation;
    let det = cov2d.determinant();
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean = Vector2::new(view.fx * x / z + view.u0, view.fy * y / z + view.v0);
    let half = 0.5 * (cov2d[(0, 0)] - cov2d[(1, 1)]);
    let lambda_max = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]) + (half * half + cov2d[(0, 1)].powi(2)).sqrt();
    let r = settings.footprint_sigma * lambda_max.sqrt();
    let x0 = (mean.x - r).ceil().max(0.0);
    let x1 = (mean.x + r).floor().min(view.width as f64 - 1.0);
    let y0 = (mean.y - r).ceil().max(0.0);
    let y1 = (mean.y + r).floor().min(view.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(ProjectedSplat {
        mean,
        cov2d,
        conic,
        depth: z,
        opacity: prim.opacity,
        source,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

/// Per-pixel blend weights `wᵢ = αᵢ Πⱼ<ᵢ (1 − αⱼ)`, stored CSR-style in
/// row-major pixel order. Entries within a pixel are front to back.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelWeights {
    pub offsets: Vec<usize>,
    pub entries: Vec<(u32, f64)>,
}

impl PixelWeights {
    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    /// Blends a per-primitive attribute of dimension `dim` (row-major
    /// `values[i * dim + c]`). Returns a `pixels × dim` buffer.
    pub fn blend(&self, values: &[f64], dim: usize) -> Vec<f64> {
        let rows = par::map_range(self.pixel_count(), |p| {
            let mut acc = vec![0.0; dim];
            for &(i, w) in self.pixel(p) {
                let v = &values[i as usize * dim..(i as usize + 1) * dim];
                for c in 0..dim {
                    acc[c] += w * v[c];
                }
            }
            acc
        });
        rows.concat()
    }
}

#[derive(Debug, Clone)]
pub struct RenderedMaps {
    pub width: usize,
    pub height: usize,
    pub descriptor_dim: usize,
    /// `H·W·3`.
    pub color: Vec<f64>,
    /// Camera-frame normal, renormalized where valid, zero elsewhere. `H·W·3`.
    pub normal: Vec<f64>,
    /// Blended camera-frame normal before renormalization. `H·W·3`.
    pub normal_raw: Vec<f64>,
    /// Renormalized where valid, zero elsewhere. `H·W·k`.
    pub descriptor: Vec<f64>,
    /// Blended descriptor before renormalization. `H·W·k`.
    pub descriptor_raw: Vec<f64>,
    /// Alpha-normalized camera z-depth where valid, 0 elsewhere.
    pub depth: Vec<f64>,
    pub acc_alpha: Vec<f64>,
    pub valid: Vec<bool>,
    /// Index of the primitive with the largest blend weight, or −1.
    pub argmax: Vec<i64>,
    /// Retained when requested.
    pub weights: Option<PixelWeights>,
}

impl RenderedMaps {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn normal_at(&self, p: usize) -> Vector3<f64> {
        Vector3::new(self.normal[3 * p], self.normal[3 * p + 1], self.normal[3 * p + 2])
    }

    pub fn descriptor_at(&self, p: usize) -> &[f64] {
        &self.descriptor[p * self.descriptor_dim..(p + 1) * self.descriptor_dim]
    }

    /// Writes every channel as PFM (and the contributor map as 16-bit PGM,
    /// `index + 1`, 0 = none, saturated at 65535) into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let (w, h) = (self.width, self.height);
        let mut written = Vec::new();
        let mut put = |name: &str, ch: usize, data: &[f64]| -> Result<()> {
            let p = dir.join(name);
            write_pfm(&p, w, h, ch, data)?;
            written.push(p);
            Ok(())
        };
        put("color.pfm", 3, &self.color)?;
        put("normal.pfm", 3, &self.normal)?;
        put("depth.pfm", 1, &self.depth)?;
        put("alpha.pfm", 1, &self.acc_alpha)?;
        let k = self.descriptor_dim;
        for c in 0..k {
            let chan: Vec<f64> = (0..w * h).map(|p| self.descriptor[p * k + c]).collect();
            put(&format!("descriptor_{c}.pfm"), 1, &chan)?;
        }
        let ids: Vec<u16> = self
            .argmax
            .iter()
            .map(|&i| if i < 0 { 0 } else { (i + 1).min(65535) as u16 })
            .collect();
        let p = dir.join("contributor.pgm");
        write_pgm16(&p, w, h, &ids)?;
        written.push(p);
        Ok(written)
    }
}

/// Renders `scene` from `view` with default settings.
pub fn render(scene: &Scene, view: &CameraView, keep_weights: bool) -> RenderedMaps {
    render_primitives(&scene.primitives, view, &RenderSettings::default(), keep_weights)
}

/// Projects and depth-sorts all visible splats (ties broken by source index).
pub fn project_all(prims: &[GaussianPrimitive], view: &CameraView, settings: &RenderSettings) -> Vec<ProjectedSplat> {
    let projected = par::map_range(prims.len(), |i| project_with(&prims[i], i, view, settings));
    let mut splats: Vec<ProjectedSplat> = projected.into_iter().flatten().collect();
    par::sort_by(&mut splats, |a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    splats
}

/// Computes per-pixel blend weights and accumulated alpha.
pub fn blend_weights(
    prims: &[GaussianPrimitive],
    view: &CameraView,
    settings: &RenderSettings,
) -> (PixelWeights, Vec<f64>) {
    let (w, h) = (view.width, view.height);
    let splats = project_all(prims, view, settings);

    // Bin splats by row, keeping depth order.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (s, sp) in splats.iter().enumerate() {
        for row in &mut rows[sp.bbox[2]..=sp.bbox[3]] {
            row.push(s as u32);
        }
    }

    struct RowOut {
        counts: Vec<u32>,
        entries: Vec<(u32, f64)>,
        acc: Vec<f64>,
    }

    let outs: Vec<RowOut> = par::map_range(h, |y| {
        let list = &rows[y];
        // Counting sort of the row list into per-column buckets.
        let mut start = vec![0u32; w + 1];
        for &s in list {
            let b = &splats[s as usize].bbox;
            for x in b[0]..=b[1] {
                start[x + 1] += 1;
            }
        }
        for x in 0..w {
            start[x + 1] += start[x];
        }
        let mut fill = start.clone();
        let mut buckets = vec![0u32; start[w] as usize];
        for &s in list {
            let b = &splats[s as usize].bbox;
            for x in b[0]..=b[1] {
                buckets[fill[x] as usize] = s;
                fill[x] += 1;
            }
        }

        let mut counts = vec![0u32; w];
        let mut entries = Vec::new();
        let mut acc = vec![0.0; w];
        let py = y as f64;
        for x in 0..w {
            let px = x as f64;
            let mut transmittance = 1.0;
            let before = entries.len();
            for &s in &buckets[start[x] as usize..start[x + 1] as usize] {
                let sp = &splats[s as usize];
                let dx = px - sp.mean.x;
                let dy = py - sp.mean.y;
                let power = -0.5 * (sp.conic[(0, 0)] * dx * dx + 2.0 * sp.conic[(0, 1)] * dx * dy + sp.conic[(1, 1)] * dy * dy);
                let alpha = (sp.opacity * power.exp()).min(settings.alpha_max);
                if alpha < settings.alpha_min {
                    continue;
                }
                let wgt = transmittance * alpha;
                entries.push((sp.source as u32, wgt));
                acc[x] += wgt;
                transmittance *= 1.0 - alpha;
                if transmittance < settings.transmittance_min {
                    break;
                }
            }
            counts[x] = (entries.len() - before) as u32;
        }
        RowOut { counts, entries, acc }
    });

    let total: usize = outs.iter().map(|o| o.entries.len()).sum();
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut entries = Vec::with_capacity(total);
    let mut acc = Vec::with_capacity(w * h);
    offsets.push(0);
    for o in outs {
        for c in &o.counts {
            let last = *offsets.last().expect("non-empty");
            offsets.push(last + *c as usize);
        }
        entries.extend_from_slice(&o.entries);
        acc.extend_from_slice(&o.acc);
    }
    (PixelWeights { offsets, entries }, acc)
}

/// Renders all channels of `prims` from `view`.
pub fn render_primitives(
    prims: &[GaussianPrimitive],
    view: &CameraView,
    settings: &RenderSettings,
    keep_weights: bool,
) -> RenderedMaps {
    let (weights, acc_alpha) = blend_weights(prims, view, settings);
    let k = prims.first().map_or(crate::field::DEFAULT_DESCRIPTOR_DIM, |p| p.descriptor.len());
    let rot = view.rotation();
    let trans = view.translation();
    let n = prims.len();

    let mut colors = Vec::with_capacity(3 * n);
    let mut normals_cam = Vec::with_capacity(3 * n);
    let mut depths = Vec::with_capacity(n);
    let mut descs = Vec::with_capacity(k * n);
    for p in prims {
        colors.extend_from_slice(p.color.as_slice());
        let nc = rot * p.normal;
        normals_cam.extend_from_slice(nc.as_slice());
        depths.push((rot * p.center + trans).z);
        descs.extend_from_slice(&p.descriptor);
    }

    let color = weights.blend(&colors, 3);
    let normal_raw = weights.blend(&normals_cam, 3);
    let descriptor_raw = weights.blend(&descs, k);
    let depth_sum = weights.blend(&depths, 1);

    let pixels = view.pixel_count();
    let valid: Vec<bool> = acc_alpha.iter().map(|&a| a > settings.tau_alpha).collect();
    let depth: Vec<f64> = (0..pixels)
        .map(|p| if valid[p] { depth_sum[p] / acc_alpha[p] } else { 0.0 })
        .collect();
    let renorm = |raw: &[f64], dim: usize| -> Vec<f64> {
        let mut out = vec![0.0; raw.len()];
        for p in 0..pixels {
            if !valid[p] {
                continue;
            }
            let v = &raw[p * dim..(p + 1) * dim];
            let nrm = crate::linalg::norm(v);
            if nrm > 0.0 {
                for c in 0..dim {
                    out[p * dim + c] = v[c] / nrm;
                }
            }
        }
        out
    };
    let normal = renorm(&normal_raw, 3);
    let descriptor = renorm(&descriptor_raw, k);
    let argmax: Vec<i64> = (0..pixels)
        .map(|p| {
            let mut best: Option<(u32, f64)> = None;
            for &(i, w) in weights.pixel(p) {
                if best.is_none_or(|(_, bw)| w > bw) {
                    best = Some((i, w));
                }
            }
            best.map_or(-1, |(i, _)| i as i64)
        })
        .collect();

    RenderedMaps {
        width: view.width,
        height: view.height,
        descriptor_dim: k,
        color,
        normal,
        normal_raw,
        descriptor,
        descriptor_raw,
        depth,
        acc_alpha,
        valid,
        argmax,
        weights: keep_weights.then_some(weights),
    }
}

/// Photometric L1 loss `Σ ‖ĉ − c‖₁` against a target color image.
pub fn color_l1(maps: &RenderedMaps, target: &[f64]) -> f64 {
    let mut sum = crate::linalg::KahanSum::default();
    for (a, b) in maps.color.iter().zip(target) {
        sum.add((a - b).abs());
    }
    sum.value()
}
