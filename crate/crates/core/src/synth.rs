//! Synthetic planar scenes with ground truth, camera orbits and SAM-like masks.
//!
//! A scene is an axis-aligned box room (floor, ceiling and four walls, normals
//! pointing inward) plus any number of extra rectangles. Every plane is sampled
//! uniformly with a Poisson-distributed number of flat Gaussians.
//!
//! Masks over-segment each visible plane into Voronoi cells, jitter segment
//! boundaries, invalidate a band around plane edges and relabel segments with a
//! per-view random permutation, so segment ids carry no cross-view meaning.

use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Rotation3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{random_unit, CameraView, GaussianPrimitive, GtPlane, Scene};
use crate::renderer::{render, RenderedMaps};
use crate::segfusion::SegmentLabelMap;

/// Rectangle `origin + a·edge_u + b·edge_v`, `a, b ∈ [0, 1]`, with normal
/// `normalize(edge_u × edge_v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    pub origin: [f64; 3],
    pub edge_u: [f64; 3],
    pub edge_v: [f64; 3],
}

impl RectSpec {
    fn vectors(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        (
            Vector3::from(self.origin),
            Vector3::from(self.edge_u),
            Vector3::from(self.edge_v),
        )
    }

    pub fn area(&self) -> f64 {
        let (_, u, v) = self.vectors();
        u.cross(&v).norm()
    }

    pub fn normal(&self) -> Option<Vector3<f64>> {
        let (_, u, v) = self.vectors();
        u.cross(&v).try_normalize(1e-12)
    }

    pub fn corners(&self) -> Vec<Vector3<f64>> {
        let (o, u, v) = self.vectors();
        vec![o, o + u, o + u + v, o + v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Mean of the Poisson number of extra Voronoi cells per plane region.
    pub split_lambda: f64,
    /// Randomly flip pixels along segment boundaries (1-2 passes).
    pub jitter: bool,
    /// Segments smaller than this become invalid.
    pub min_pixels: usize,
    /// Pixels within this Chebyshev radius of a plane boundary become invalid.
    pub edge_radius: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            split_lambda: 2.0,
            jitter: true,
            min_pixels: 30,
            edge_radius: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Box room extent `[x, y, z]` in meters, z up. `None`-like zero extent disables the room.
    pub room: [f64; 3],
    pub extra_planes: Vec<RectSpec>,
    pub gaussians_per_m2: f64,
    /// Isotropic center noise (meters).
    pub position_noise: f64,
    /// Std-dev of the normal perturbation angle (radians).
    pub normal_noise: f64,
    /// Std-dev of the angular noise on supervision normal maps (radians).
    pub supervision_noise: f64,
    /// Tangential scale as a fraction of the mean sample spacing.
    pub tangential_scale: f64,
    /// Scale along the plane normal (meters).
    pub normal_scale: f64,
    pub opacity: f64,
    pub views: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Horizontal field of view (degrees).
    pub fov_deg: f64,
    /// Camera ring radius as a fraction of the smaller horizontal room extent.
    pub orbit_radius: f64,
    /// Minimum views in which every plane must cover `masks.min_pixels`.
    pub min_views_per_plane: usize,
    pub descriptor_dim: usize,
    pub masks: MaskConfig,
    /// Set from the pipeline's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            room: [4.0, 3.0, 2.5],
            extra_planes: vec![
                // Panel leaning against the y = 3 wall.
                RectSpec {
                    origin: [0.8, 2.1, 0.05],
                    edge_u: [1.4, 0.0, 0.0],
                    edge_v: [0.0, 0.8, 1.3],
                },
                // Inclined desk top near the x = 0 wall.
                RectSpec {
                    origin: [0.3, 0.6, 1.0],
                    edge_u: [0.9, 0.0, -0.45],
                    edge_v: [0.0, 1.2, 0.0],
                },
            ],
            gaussians_per_m2: 800.0,
            position_noise: 0.0,
            normal_noise: 0.1,
            supervision_noise: 0.05,
            tangential_scale: 0.6,
            normal_scale: 0.002,
            opacity: 0.9,
            views: 40,
            image_width: 128,
            image_height: 128,
            fov_deg: 70.0,
            orbit_radius: 0.3,
            min_views_per_plane: 3,
            descriptor_dim: 3,
            masks: MaskConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if !(self.gaussians_per_m2 > 0.0) {
            return bad("gaussians_per_m2 must be positive");
        }
        if !(self.position_noise >= 0.0 && self.normal_noise >= 0.0 && self.supervision_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.tangential_scale > 0.0 && self.normal_scale > 0.0) {
            return bad("scales must be positive");
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return bad("opacity must be in (0, 1]");
        }
        if self.views == 0 || self.image_width == 0 || self.image_height == 0 {
            return bad("views and image size must be positive");
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return bad("fov_deg must be in (1, 170)");
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim must be positive");
        }
        if !(self.masks.split_lambda >= 0.0) {
            return bad("masks.split_lambda must be non-negative");
        }
        if self.room.iter().any(|&x| x < 0.0) {
            return bad("room extent must be non-negative");
        }
        for (i, r) in self.plane_specs().iter().enumerate() {
            if r.area() < 1e-9 {
                return Err(Error::Config(format!("synth: plane {i} is degenerate (zero area)")));
            }
        }
        Ok(())
    }

    /// Room planes (floor, ceiling, x=0, x=X, y=0, y=Y) followed by the extra planes.
    pub fn plane_specs(&self) -> Vec<RectSpec> {
        let [lx, ly, lz] = self.room;
        let mut specs = Vec::new();
        if lx > 0.0 || ly > 0.0 || lz > 0.0 {
            specs.extend([
                RectSpec { origin: [0.0, 0.0, 0.0], edge_u: [lx, 0.0, 0.0], edge_v: [0.0, ly, 0.0] },
                RectSpec { origin: [0.0, 0.0, lz], edge_u: [0.0, ly, 0.0], edge_v: [lx, 0.0, 0.0] },
                RectSpec { origin: [0.0, 0.0, 0.0], edge_u: [0.0, ly, 0.0], edge_v: [0.0, 0.0, lz] },
                RectSpec { origin: [lx, 0.0, 0.0], edge_u: [0.0, 0.0, lz], edge_v: [0.0, ly, 0.0] },
                RectSpec { origin: [0.0, 0.0, 0.0], edge_u: [0.0, 0.0, lz], edge_v: [lx, 0.0, 0.0] },
                RectSpec { origin: [0.0, ly, 0.0], edge_u: [lx, 0.0, 0.0], edge_v: [0.0, 0.0, lz] },
            ]);
        }
        specs.extend(self.extra_planes.iter().cloned());
        specs
    }

    fn focal(&self) -> f64 {
        (self.image_width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }
}

/// Rotates unit `n` by an angle drawn from `N(0, sigma)` about a random perpendicular axis.
pub fn perturb_direction(n: &Vector3<f64>, sigma: f64, rng: &mut impl Rng) -> Vector3<f64> {
    if sigma == 0.0 {
        return *n;
    }
    let angle = Normal::new(0.0, sigma).expect("sigma >= 0").sample(rng);
    let r = random_unit(rng, 3);
    let axis = Vector3::new(r[0], r[1], r[2]);
    let axis = match (axis - n * n.dot(&axis)).try_normalize(1e-9) {
        Some(a) => a,
        None => any_perpendicular(n),
    };
    (n * angle.cos() + axis.cross(n) * angle.sin()).normalize()
}

fn any_perpendicular(n: &Vector3<f64>) -> Vector3<f64> {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    n.cross(&helper).normalize()
}

/// Generates primitives, ground-truth planes and cameras.
pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = cfg.plane_specs();
    let spacing = 1.0 / cfg.gaussians_per_m2.sqrt();
    let tangential = cfg.tangential_scale * spacing;
    let pos_noise = Normal::new(0.0, cfg.position_noise).expect("validated");

    let mut primitives = Vec::new();
    let mut gt_planes = Vec::new();
    for (id, spec) in specs.iter().enumerate() {
        let (o, u, v) = spec.vectors();
        let n = spec.normal().ok_or_else(|| Error::Config(format!("synth: plane {id} is degenerate")))?;
        gt_planes.push(GtPlane {
            id: id as u32,
            normal: n,
            offset: -n.dot(&o),
            polygon: spec.corners(),
        });
        let expected = cfg.gaussians_per_m2 * spec.area();
        let count = Poisson::new(expected)
            .map_err(|e| Error::Config(format!("synth: plane {id}: {e}")))?
            .sample(&mut rng) as usize;
        let t0 = u.normalize();
        let t1 = n.cross(&t0);
        for _ in 0..count {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let mut center = o + u * a + v * b;
            if cfg.position_noise > 0.0 {
                center += Vector3::new(
                    pos_noise.sample(&mut rng),
                    pos_noise.sample(&mut rng),
                    pos_noise.sample(&mut rng),
                );
            }
            let phi = rng.random::<f64>() * 2.0 * PI;
            let e0 = t0 * phi.cos() + t1 * phi.sin();
            let e1 = n.cross(&e0);
            let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[e0, e1, n]));
            let stretch = 0.8 + 0.4 * rng.random::<f64>();
            let scale = Vector3::new(tangential * stretch, tangential / stretch, cfg.normal_scale);
            let normal = perturb_direction(&n, cfg.normal_noise, &mut rng);
            let descriptor = random_unit(&mut rng, cfg.descriptor_dim);
            primitives.push(GaussianPrimitive {
                center,
                scale,
                rotation: UnitQuaternion::from_rotation_matrix(&rot),
                opacity: cfg.opacity,
                color: plane_color(id),
                normal,
                descriptor,
                gt_plane_id: Some(id as u32),
            });
        }
    }

    let mut scene = Scene {
        primitives,
        views: Vec::new(),
        gt_planes: Some(gt_planes),
    };
    let plane_count = specs.len();
    for attempt in 0..8u64 {
        let views = camera_orbit(cfg, attempt, &mut rng)?;
        scene.views = views;
        let coverage = plane_coverage(&scene, plane_count, cfg.masks.min_pixels.max(1));
        if coverage.iter().all(|&c| c >= cfg.min_views_per_plane) {
            return Ok(scene);
        }
        log::debug!("camera orbit attempt {attempt} leaves planes under-covered: {coverage:?}");
    }
    Err(Error::Config(format!(
        "synth: could not place cameras so every plane is seen in {} views",
        cfg.min_views_per_plane
    )))
}

fn plane_color(id: usize) -> Vector3<f64> {
    let c = crate::field::label_color(Some(id as u32));
    Vector3::new(c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0)
}

/// Inward-facing ring of cameras; `attempt` adds extra jitter on resampling.
fn camera_orbit(cfg: &SynthConfig, attempt: u64, rng: &mut impl Rng) -> Result<Vec<CameraView>> {
    let [lx, ly, lz] = cfg.room;
    let (cx, cy, cz) = if lx > 0.0 {
        (lx / 2.0, ly / 2.0, lz / 2.0)
    } else {
        (0.0, 0.0, 1.0)
    };
    let horizontal = if lx > 0.0 { lx.min(ly) } else { 4.0 };
    let vertical = if lz > 0.0 { lz } else { 2.5 };
    let radius = cfg.orbit_radius * horizontal;
    let f = cfg.focal();
    let jitter = 0.05 * (1.0 + attempt as f64);
    let mut views = Vec::with_capacity(cfg.views);
    for i in 0..cfg.views {
        let theta = 2.0 * PI * i as f64 / cfg.views as f64 + jitter * (rng.random::<f64>() - 0.5);
        let height = cz + vertical * (0.12 * (3.0 * theta).sin() + jitter * (rng.random::<f64>() - 0.5));
        let eye = Vector3::new(cx + radius * theta.cos(), cy + radius * theta.sin(), height);
        let look_z = cz + vertical * (0.3 * (2.0 * theta + 0.7).sin() + jitter * (rng.random::<f64>() - 0.5));
        let target = Vector3::new(cx - 0.5 * radius * theta.cos(), cy - 0.5 * radius * theta.sin(), look_z);
        views.push(CameraView::look_at(
            eye,
            target,
            Vector3::z(),
            f,
            f,
            cfg.image_width,
            cfg.image_height,
        )?);
    }
    Ok(views)
}

/// Ground-truth plane id per pixel from the argmax-contributor map.
pub fn gt_label_image(scene: &Scene, maps: &RenderedMaps) -> Vec<Option<u32>> {
    maps.argmax
        .iter()
        .zip(&maps.valid)
        .map(|(&a, &v)| {
            if v && a >= 0 {
                scene.primitives[a as usize].gt_plane_id
            } else {
                None
            }
        })
        .collect()
}

/// Exact per-pixel geometry of a polygonal plane set, by ray casting pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RaycastMaps {
    /// Camera z-depth.
    pub depth: Vec<f64>,
    /// Camera-frame unit normal facing the camera, 3 per pixel.
    pub normal: Vec<f64>,
    pub valid: Vec<bool>,
    pub plane_id: Vec<Option<u32>>,
}

fn inside_convex(polygon: &[Vector3<f64>], normal: &Vector3<f64>, x: &Vector3<f64>) -> bool {
    let n = polygon.len();
    let mut sign = 0.0;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        let s = (b - a).cross(&(x - a)).dot(normal);
        if s.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = s.signum();
        } else if s.signum() != sign {
            return false;
        }
    }
    true
}

/// Nearest intersection of every pixel ray with the convex polygons of `planes`.
pub fn raycast_planes(planes: &[GtPlane], view: &CameraView) -> RaycastMaps {
    let n_px = view.pixel_count();
    let mut out = RaycastMaps {
        depth: vec![0.0; n_px],
        normal: vec![0.0; 3 * n_px],
        valid: vec![false; n_px],
        plane_id: vec![None; n_px],
    };
    let rot = view.rotation();
    let cam: Vec<(Vector3<f64>, f64)> = planes
        .iter()
        .map(|pl| {
            let n = rot * pl.normal;
            let q = view.to_camera(&pl.polygon[0]);
            (n, -n.dot(&q))
        })
        .collect();
    for p in 0..n_px {
        let (u, v) = ((p % view.width) as f64, (p / view.width) as f64);
        let ray = view.backproject(u, v, 1.0);
        let mut best: Option<(f64, usize)> = None;
        for (i, (pl, (n, d))) in planes.iter().zip(&cam).enumerate() {
            let denom = n.dot(&ray);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = -d / denom;
            if t <= 0.0 || best.is_some_and(|(b, _)| t >= b) {
                continue;
            }
            if inside_convex(&pl.polygon, &pl.normal, &view.to_world(&(ray * t))) {
                best = Some((t, i));
            }
        }
        if let Some((t, i)) = best {
            let n = cam[i].0;
            let n = if n.dot(&ray) > 0.0 { -n } else { n };
            out.depth[p] = t;
            out.normal[3 * p..3 * p + 3].copy_from_slice(n.as_slice());
            out.valid[p] = true;
            out.plane_id[p] = Some(planes[i].id);
        }
    }
    out
}

/// For each plane, the number of views in which it covers at least `min_pixels`.
pub fn plane_coverage(scene: &Scene, plane_count: usize, min_pixels: usize) -> Vec<usize> {
    let per_view = crate::par::map_slice(&scene.views, |view| {
        let maps = render(scene, view, false);
        let mut counts = vec![0usize; plane_count];
        for id in gt_label_image(scene, &maps).into_iter().flatten() {
            if (id as usize) < plane_count {
                counts[id as usize] += 1;
            }
        }
        counts
    });
    let mut coverage = vec![0usize; plane_count];
    for counts in per_view {
        for (c, n) in coverage.iter_mut().zip(counts) {
            if n >= min_pixels {
                *c += 1;
            }
        }
    }
    coverage
}

/// Per-view RNG substream derived from `(seed, view index)`.
pub fn view_rng(seed: u64, view_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view_index as u64 + 1);
    rng
}

/// Simulates an over-segmented, cross-view-uncorrelated mask for one view.
pub fn simulate_masks(
    scene: &Scene,
    view: &CameraView,
    view_index: usize,
    cfg: &MaskConfig,
    seed: u64,
) -> SegmentLabelMap {
    let maps = render(scene, view, false);
    simulate_masks_from_render(scene, &maps, view_index, cfg, seed)
}

/// As [`simulate_masks`], reusing an existing render of the view.
pub fn simulate_masks_from_render(
    scene: &Scene,
    maps: &RenderedMaps,
    view_index: usize,
    cfg: &MaskConfig,
    seed: u64,
) -> SegmentLabelMap {
    let (w, h) = (maps.width, maps.height);
    let mut rng = view_rng(seed, view_index);
    let gt = gt_label_image(scene, maps);

    // Voronoi over-segmentation of each plane region.
    let mut seg = vec![0u32; w * h];
    let mut planes: Vec<u32> = gt.iter().flatten().copied().collect();
    planes.sort_unstable();
    planes.dedup();
    let mut next = 0u32;
    for &plane in &planes {
        let pixels: Vec<usize> = (0..w * h).filter(|&p| gt[p] == Some(plane)).collect();
        let extra = if cfg.split_lambda > 0.0 {
            Poisson::new(cfg.split_lambda).expect("validated").sample(&mut rng) as usize
        } else {
            0
        };
        let cells = (1 + extra).min(pixels.len());
        let seeds: Vec<usize> = pixels.choose_multiple(&mut rng, cells).copied().collect();
        for &p in &pixels {
            let (px, py) = ((p % w) as i64, (p / w) as i64);
            let mut best = (i64::MAX, 0usize);
            for (k, &s) in seeds.iter().enumerate() {
                let (sx, sy) = ((s % w) as i64, (s / w) as i64);
                let d = (px - sx).pow(2) + (py - sy).pow(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            seg[p] = next + 1 + best.1 as u32;
        }
        next += cells as u32;
    }

    if cfg.jitter {
        let passes = rng.random_range(1..=2);
        for _ in 0..passes {
            let snapshot = seg.clone();
            for p in 0..w * h {
                if snapshot[p] == 0 {
                    continue;
                }
                let mut others = [0u32; 4];
                let mut n = 0;
                for q in neighbors4(p, w, h).into_iter().flatten() {
                    if snapshot[q] != 0 && snapshot[q] != snapshot[p] {
                        others[n] = snapshot[q];
                        n += 1;
                    }
                }
                if n > 0 && rng.random_bool(0.5) {
                    seg[p] = others[rng.random_range(0..n)];
                }
            }
        }
    }

    // Invalid band around plane boundaries.
    if cfg.edge_radius > 0 {
        let r = cfg.edge_radius as i64;
        let mut edge = vec![false; w * h];
        for p in 0..w * h {
            if neighbors4(p, w, h).into_iter().flatten().any(|q| gt[q] != gt[p]) {
                edge[p] = true;
            }
        }
        let snapshot = seg.clone();
        for p in 0..w * h {
            if snapshot[p] == 0 {
                continue;
            }
            let (px, py) = ((p % w) as i64, (p / w) as i64);
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (px + dx, py + dy);
                    if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                        continue;
                    }
                    if edge[(qy as usize) * w + qx as usize] {
                        seg[p] = 0;
                        break 'search;
                    }
                }
            }
        }
    }

    // Drop small segments, then relabel with a random permutation.
    let mut counts = vec![0usize; next as usize + 1];
    for &s in &seg {
        counts[s as usize] += 1;
    }
    let mut survivors: Vec<u32> = (1..=next).filter(|&s| counts[s as usize] >= cfg.min_pixels.max(1)).collect();
    survivors.shuffle(&mut rng);
    let mut remap = vec![0u32; next as usize + 1];
    for (new, &old) in survivors.iter().enumerate() {
        remap[old as usize] = new as u32 + 1;
    }
    let labels: Vec<u32> = seg.iter().map(|&s| remap[s as usize]).collect();
    SegmentLabelMap::new(w, h, labels).expect("labels are dense by construction")
}

/// Simulated supervision normals (camera frame): the ground-truth plane
/// normal of the argmax contributor, perturbed by angular noise. Zero where
/// no plane is visible.
pub fn simulate_normal_map(
    scene: &Scene,
    view: &CameraView,
    maps: &RenderedMaps,
    view_index: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let planes = scene
        .gt_planes
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("supervision normals need ground-truth planes".into()))?;
    let mut rng = view_rng(seed ^ 0x6e6f_726d_616c_73, view_index);
    let rot = view.rotation();
    let gt = gt_label_image(scene, maps);
    let mut out = vec![0.0; 3 * gt.len()];
    for (p, id) in gt.iter().enumerate() {
        let Some(id) = id else { continue };
        let plane = planes
            .get(*id as usize)
            .ok_or_else(|| Error::InvalidInput(format!("primitive references unknown plane {id}")))?;
        let n = perturb_direction(&(rot * plane.normal), noise, &mut rng);
        out[3 * p..3 * p + 3].copy_from_slice(n.as_slice());
    }
    Ok(out)
}

pub(crate) fn neighbors4(p: usize, w: usize, h: usize) -> [Option<usize>; 4] {
    let (x, y) = (p % w, p / w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
}
