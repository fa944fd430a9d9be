//! End-to-end orchestration: synthetic scene, descriptor and normal
//! optimization, plane parsing and evaluation, each stage writing its
//! artifacts under one output directory with a hashed manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{self, GtPlane, PlyFormat, Scene};
use crate::geometry::{build_knn, laplacian_smooth, planar_align, KnnIndex, SmoothField};
use crate::gmt::{self, GmtConfig, PlaneSet};
use crate::imageio::{read_pfm, write_pfm};
use crate::learn::{self, MeanShiftConfig};
use crate::metrics::{accuracy_completeness, MetricsReport, UnassignedMode};
use crate::par;
use crate::renderer::{color_l1, render_primitives, RenderSettings, RenderedMaps};
use crate::segfusion::{fuse_view, one_hot_targets, SegfusionConfig, SegmentLabelMap};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub lr_descriptor: f64,
    pub lr_normal: f64,
    pub lambda_reg: f64,
    /// Whether the ridge term also shrinks the bias row of the regression.
    pub penalize_bias: bool,
    /// Iterations between Laplacian smoothing passes.
    pub smooth_period: usize,
    pub mean_shift: MeanShiftConfig,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            lr_descriptor: 0.05,
            lr_normal: 0.05,
            lambda_reg: 1e-4,
            penalize_bias: false,
            smooth_period: 100,
            mean_shift: MeanShiftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub k: usize,
    pub align_period: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { k: 30, align_period: 500 }
    }
}

/// Switches for ablation runs. Everything is on by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub masks: bool,
    pub normals: bool,
    pub alignment: bool,
    pub mean_shift: bool,
    pub smoothing: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            masks: true,
            normals: true,
            alignment: true,
            mean_shift: true,
            smoothing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub unassigned: UnassignedMode,
    /// Spacing of the ground-truth surface samples (meters).
    pub surface_spacing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            unassigned: UnassignedMode::ExtraCluster,
            surface_spacing: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub iterations: usize,
    pub synth: SynthConfig,
    pub render: RenderSettings,
    pub segfusion: SegfusionConfig,
    pub learn: LearnConfig,
    pub geometry: GeometryConfig,
    pub gmt: GmtConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            iterations: 2000,
            synth: SynthConfig::default(),
            render: RenderSettings::default(),
            segfusion: SegfusionConfig::default(),
            learn: LearnConfig::default(),
            geometry: GeometryConfig::default(),
            gmt: GmtConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses strictly: unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.segfusion.validate()?;
        self.learn.mean_shift.validate()?;
        self.gmt.validate()?;
        if self.geometry.k == 0 {
            return Err(Error::Config("geometry.k must be positive".into()));
        }
        if !(self.learn.lr_descriptor >= 0.0 && self.learn.lr_normal >= 0.0 && self.learn.lambda_reg >= 0.0) {
            return Err(Error::Config("learning rates and ridge weight must be non-negative".into()));
        }
        if !(self.render.tau_alpha >= 0.0 && self.render.tau_alpha < 1.0) {
            return Err(Error::Config("render.tau_alpha must be in [0, 1)".into()));
        }
        if !(self.eval.surface_spacing > 0.0) {
            return Err(Error::Config("eval.surface_spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Fixed per-view training signals.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub masks: Vec<SegmentLabelMap>,
    /// Camera-frame supervision normals per view (`H·W·3`, zero = none).
    pub normals: Vec<Option<Vec<f64>>>,
    /// Reference color images for the photometric diagnostic.
    pub colors: Vec<Vec<f64>>,
}

pub fn render_view(scene: &Scene, view_index: usize, cfg: &PipelineConfig, keep_weights: bool) -> RenderedMaps {
    render_primitives(&scene.primitives, &scene.views[view_index], &cfg.render, keep_weights)
}

/// Simulates masks and supervision normals from ground-truth plane ids.
pub fn simulate_supervision(scene: &Scene, cfg: &PipelineConfig) -> Result<Supervision> {
    if scene.primitives.iter().any(|p| p.gt_plane_id.is_none()) {
        return Err(Error::InvalidInput("simulated supervision needs a ground-truth plane id on every primitive".into()));
    }
    let per_view: Vec<Result<(SegmentLabelMap, Vec<f64>, Vec<f64>)>> = (0..scene.views.len())
        .map(|v| {
            let maps = render_view(scene, v, cfg, false);
            let mask = synth::simulate_masks_from_render(scene, &maps, v, &cfg.synth.masks, cfg.seed);
            let normals =
                synth::simulate_normal_map(scene, &scene.views[v], &maps, v, cfg.synth.supervision_noise, cfg.seed)?;
            Ok((mask, normals, maps.color))
        })
        .collect();
    let mut sup = Supervision {
        masks: Vec::new(),
        normals: Vec::new(),
        colors: Vec::new(),
    };
    for r in per_view {
        let (m, n, c) = r?;
        sup.masks.push(m);
        sup.normals.push(Some(n));
        sup.colors.push(c);
    }
    Ok(sup)
}

pub fn mask_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view_{view}.pgm"))
}

pub fn normal_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view_{view}.pfm"))
}

pub fn save_masks(masks: &[SegmentLabelMap], dir: &Path) -> Result<Vec<PathBuf>> {
    masks
        .iter()
        .enumerate()
        .map(|(v, m)| {
            let p = mask_path(dir, v);
            m.save_pgm(&p)?;
            Ok(p)
        })
        .collect()
}

/// Loads `view_{i}.pgm` for every view and checks the image size.
pub fn load_masks(dir: &Path, scene: &Scene) -> Result<Vec<SegmentLabelMap>> {
    scene
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let m = SegmentLabelMap::load_pgm(mask_path(dir, v))?;
            if (m.width, m.height) != (view.width, view.height) {
                return Err(Error::InvalidInput(format!(
                    "mask for view {v} is {}x{}, camera is {}x{}",
                    m.width, m.height, view.width, view.height
                )));
            }
            Ok(m)
        })
        .collect()
}

pub fn save_normals(normals: &[Option<Vec<f64>>], scene: &Scene, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (v, n) in normals.iter().enumerate() {
        if let Some(n) = n {
            let p = normal_path(dir, v);
            write_pfm(&p, scene.views[v].width, scene.views[v].height, 3, n)?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Loads 3-channel PFM supervision normals; missing files leave a view unsupervised.
pub fn load_normals(dir: &Path, scene: &Scene) -> Result<Vec<Option<Vec<f64>>>> {
    scene
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let p = normal_path(dir, v);
            if !p.exists() {
                return Ok(None);
            }
            let (w, h, c, data) = read_pfm(&p)?;
            if (w, h, c) != (view.width, view.height, 3) {
                return Err(Error::InvalidInput(format!("normal map {} has wrong shape", p.display())));
            }
            Ok(Some(data))
        })
        .collect()
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub view: usize,
    pub l_seg: f64,
    pub l_n: f64,
    pub l_rgb: f64,
}

pub fn losses_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration,view,l_seg,l_n,l_rgb\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.view, r.l_seg, r.l_n, r.l_rgb);
    }
    s
}

fn due(iteration: usize, period: usize) -> bool {
    period > 0 && (iteration + 1) % period == 0
}

fn mean_shift_due(iteration: usize, cfg: &MeanShiftConfig) -> bool {
    let it = iteration + 1;
    it >= cfg.warmup && (it - cfg.warmup) % cfg.period == 0
}

fn knn_of(scene: &Scene, k: usize, iteration: usize) -> Result<KnnIndex> {
    build_knn(&scene.centers(), k, iteration)
}

/// Runs the descriptor / normal optimization in place and returns the loss log.
///
/// Views are visited in a fresh seeded permutation each epoch. Per iteration:
/// render with blend weights, merge the view's raw segments, take a
/// descriptor step on the segmentation loss and a normal step on the normal
/// loss, then run the periodic mean-shift, alignment and smoothing passes.
pub fn optimize(scene: &mut Scene, sup: &Supervision, cfg: &PipelineConfig) -> Result<Vec<LossRecord>> {
    let views = scene.views.len();
    if views == 0 || sup.masks.len() != views {
        return Err(Error::InvalidInput(format!(
            "{} views but {} mask images",
            views,
            sup.masks.len()
        )));
    }
    let k = scene.descriptor_dim();
    let needs_knn = cfg.ablation.alignment || cfg.ablation.mean_shift || cfg.ablation.smoothing;
    let mut knn = if needs_knn && scene.primitives.len() >= 2 {
        Some(knn_of(scene, cfg.geometry.k, 0)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f70_7469_6d69_7a65);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it % views == 0 {
            order = (0..views).collect();
            order.shuffle(&mut rng);
        }
        let v = order[it % views];
        let view = scene.views[v].clone();
        let maps = render_view(scene, v, cfg, true);
        let weights = maps.weights.as_ref().expect("weights requested");

        let mut l_seg = 0.0;
        if cfg.ablation.masks {
            let merged = fuse_view(&sup.masks[v], &maps, &view, &cfg.segfusion);
            let targets = one_hot_targets(&merged, Some(&maps.valid));
            if !targets.is_empty() {
                let z = learn::descriptor_matrix(&scene.primitives);
                let g = learn::seg_loss_and_grad(weights, &z, k, &targets, cfg.learn.lambda_reg, cfg.learn.penalize_bias)?;
                l_seg = g.loss;
                learn::descriptor_gradient_step(&mut scene.primitives, &g.grad, cfg.learn.lr_descriptor);
            }
        }

        let mut l_n = 0.0;
        if let (true, Some(sup_n)) = (cfg.ablation.normals, &sup.normals[v]) {
            let normals: Vec<Vector3<f64>> = scene.primitives.iter().map(|p| p.normal).collect();
            let g = learn::normal_loss_and_grad(weights, &normals, &view.rotation(), sup_n, &maps.valid);
            l_n = g.loss;
            learn::normal_loss_step(&mut scene.primitives, &g.grad, cfg.learn.lr_normal);
        }

        let l_rgb = sup.colors.get(v).map_or(0.0, |c| color_l1(&maps, c));
        log.push(LossRecord {
            iteration: it,
            view: v,
            l_seg,
            l_n,
            l_rgb,
        });

        if let Some(index) = knn.as_mut() {
            if cfg.ablation.mean_shift && mean_shift_due(it, &cfg.learn.mean_shift) {
                let z = learn::descriptor_matrix(&scene.primitives);
                let z = learn::mean_shift_sampled(&z, k, &index.neighbors, &cfg.learn.mean_shift, cfg.seed.wrapping_add(it as u64));
                learn::set_descriptors(&mut scene.primitives, &z);
            }
            if cfg.ablation.alignment && due(it, cfg.geometry.align_period) {
                planar_align(&mut scene.primitives, index);
                *index = knn_of(scene, cfg.geometry.k, it + 1)?;
            }
            if cfg.ablation.smoothing && due(it, cfg.learn.smooth_period) {
                laplacian_smooth(&mut scene.primitives, index, SmoothField::Normal);
                laplacian_smooth(&mut scene.primitives, index, SmoothField::Descriptor);
            }
        }
        if it % 100 == 0 {
            log::debug!("iteration {it}: view {v} l_seg {l_seg:.3} l_n {l_n:.3}");
        }
    }
    Ok(log)
}

/// Renders every view, merges its raw segments, lifts leaves, builds the tree,
/// assigns primitives and fits plane parameters.
pub fn parse_planes(scene: &Scene, masks: &[SegmentLabelMap], cfg: &PipelineConfig) -> Result<(PlaneSet, gmt::MixtureTree)> {
    if masks.len() != scene.views.len() {
        return Err(Error::InvalidInput(format!(
            "{} views but {} mask images",
            scene.views.len(),
            masks.len()
        )));
    }
    let leaves: Vec<Vec<gmt::GaussianNode>> = (0..scene.views.len())
        .map(|v| {
            let maps = render_view(scene, v, cfg, false);
            let merged = fuse_view(&masks[v], &maps, &scene.views[v], &cfg.segfusion);
            gmt::build_leaves_view(&scene.views[v], &merged, &maps, &cfg.gmt)
        })
        .collect();
    let leaves: Vec<gmt::GaussianNode> = leaves.concat();
    log::info!("{} leaves from {} views", leaves.len(), scene.views.len());
    let tree = gmt::build_tree(leaves, cfg.gmt.epsilon_b, cfg.gmt.epsilon_z, cfg.gmt.leaf_order, cfg.gmt.merge_density).map_err(|e| match e {
        Error::InvalidInput(m) => Error::Invariant {
            stage: "parse_planes",
            invariant: m,
        },
        other => other,
    })?;
    let planes = gmt::plane_nodes(&tree);
    let labels = gmt::assign_primitives(&scene.primitives, &planes, cfg.gmt.theta_assign, cfg.gmt.r_min, cfg.gmt.assign_density)?;
    let fits = gmt::fit_plane_params(&scene.primitives, &labels, planes.len());
    Ok((PlaneSet { planes, fits, labels }, tree))
}

/// Regular samples over every ground-truth polygon (fan-triangulated).
pub fn sample_gt_surfaces(planes: &[GtPlane], spacing: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for plane in planes {
        let poly = &plane.polygon;
        for t in 1..poly.len().saturating_sub(1) {
            let (a, b, c) = (poly[0], poly[t], poly[t + 1]);
            let longest = (b - a).norm().max((c - a).norm()).max((c - b).norm());
            let n = (longest / spacing).ceil().max(1.0) as usize;
            for i in 0..=n {
                for j in 0..=n - i {
                    out.push(a + (b - a) * (i as f64 / n as f64) + (c - a) * (j as f64 / n as f64));
                }
            }
        }
    }
    out
}

/// Partition metrics against ground-truth plane ids, plus accuracy and
/// completeness when ground-truth polygons are available.
pub fn evaluate(scene: &Scene, planes: &PlaneSet, cfg: &PipelineConfig) -> Result<MetricsReport> {
    let gt: Vec<Option<u32>> = scene.primitives.iter().map(|p| p.gt_plane_id).collect();
    let mut report = evaluate_labels(&scene.centers(), &planes.labels, &planes.fits, &gt, scene.gt_planes.as_deref(), cfg)?;
    report.n_planes_pred = planes.planes.len();
    Ok(report)
}

/// Metrics for labeled points. Accuracy uses each labeled point projected on
/// its plane fit; completeness uses samples of the ground-truth polygons.
pub fn evaluate_labels(
    points: &[Vector3<f64>],
    pred: &[Option<u32>],
    fits: &[Option<gmt::PlaneFit>],
    gt: &[Option<u32>],
    gt_planes: Option<&[GtPlane]>,
    cfg: &PipelineConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::partition(gt, pred, cfg.eval.unassigned)?;
    if let Some(gt_planes) = gt_planes {
        report.n_planes_gt = gt_planes.len();
        let projected: Vec<Vector3<f64>> = points
            .iter()
            .zip(pred)
            .filter_map(|(p, l)| {
                let fit = fits.get((*l)? as usize)?.as_ref()?;
                Some(p - fit.normal * (fit.normal.dot(p) + fit.offset))
            })
            .collect();
        let surface = sample_gt_surfaces(gt_planes, cfg.eval.surface_spacing);
        if !projected.is_empty() && !surface.is_empty() {
            let (acc, comp) = accuracy_completeness(&projected, &surface)?;
            report.accuracy = Some(acc);
            report.completeness = Some(comp);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    /// Records `path` (stored relative to `root` when possible) with its hash.
    pub fn add(&mut self, root: &Path, stage: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.artifacts.push(Artifact {
            stage: stage.to_string(),
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        field::write_bytes(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.artifacts.iter().any(|a| a.path == rel)
    }
}

/// Optional external inputs that replace simulated supervision.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub masks: Option<PathBuf>,
    pub normals: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub metrics: MetricsReport,
    pub planes: PlaneSet,
    pub manifest: Manifest,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

/// Stage `synth`: writes the initial field, cameras, ground-truth planes,
/// masks and supervision normals.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path, manifest: &mut Manifest) -> Result<(Scene, Supervision)> {
    let scene = synth::generate_scene(&cfg.synth)?;
    let sup = simulate_supervision(&scene, cfg)?;
    let field_path = out.join("field_init.ply");
    field::save_field(&scene, &field_path, PlyFormat::BinaryLittleEndian)?;
    manifest.add(out, "synth", &field_path)?;
    let cams = out.join("cameras.json");
    field::save_cameras(&scene.views, &cams)?;
    manifest.add(out, "synth", &cams)?;
    if let Some(gt) = &scene.gt_planes {
        let p = out.join("gt_planes.json");
        field::save_gt_planes(gt, &p)?;
        manifest.add(out, "synth", &p)?;
    }
    for p in save_masks(&sup.masks, &out.join("masks"))? {
        manifest.add(out, "synth", &p)?;
    }
    for p in save_normals(&sup.normals, &scene, &out.join("normals"))? {
        manifest.add(out, "synth", &p)?;
    }
    Ok((scene, sup))
}

/// Stage `render`: dumps every channel of every view.
pub fn cmd_render(scene: &Scene, cfg: &PipelineConfig, out: &Path, manifest: &mut Manifest) -> Result<()> {
    for v in 0..scene.views.len() {
        let maps = render_view(scene, v, cfg, false);
        for p in maps.dump(&out.join(format!("render/view_{v}")))? {
            manifest.add(out, "render", &p)?;
        }
    }
    Ok(())
}

/// Stage `optimize`: trains in place and writes `field.ply` and `losses.csv`.
pub fn cmd_optimize(scene: &mut Scene, sup: &Supervision, cfg: &PipelineConfig, out: &Path, manifest: &mut Manifest) -> Result<Vec<LossRecord>> {
    let log = optimize(scene, sup, cfg)?;
    scene.validate().map_err(|e| Error::Invariant {
        stage: "optimize",
        invariant: e.to_string(),
    })?;
    let field_path = out.join("field.ply");
    field::save_field(scene, &field_path, PlyFormat::BinaryLittleEndian)?;
    manifest.add(out, "optimize", &field_path)?;
    let csv = out.join("losses.csv");
    field::write_bytes(&csv, losses_csv(&log).as_bytes())?;
    manifest.add(out, "optimize", &csv)?;
    Ok(log)
}

/// Stage `parse_planes`: writes `planes.json` and `labels.ply`.
pub fn cmd_parse_planes(scene: &Scene, masks: &[SegmentLabelMap], cfg: &PipelineConfig, out: &Path, manifest: &mut Manifest) -> Result<PlaneSet> {
    let (planes, _) = parse_planes(scene, masks, cfg)?;
    let json = out.join("planes.json");
    let ply = out.join("labels.ply");
    planes.save(&json, &ply, &scene.centers())?;
    manifest.add(out, "parse_planes", &json)?;
    manifest.add(out, "parse_planes", &ply)?;
    Ok(planes)
}

/// Stage `eval`: writes `metrics.json`.
pub fn cmd_eval(scene: &Scene, planes: &PlaneSet, cfg: &PipelineConfig, out: &Path, manifest: &mut Manifest) -> Result<MetricsReport> {
    let report = evaluate(scene, planes, cfg)?;
    let p = out.join("metrics.json");
    report.save(&p)?;
    manifest.add(out, "eval", &p)?;
    Ok(report)
}

/// Runs every stage and writes the resolved config and the manifest.
pub fn cmd_pipeline(cfg: &PipelineConfig, out: &Path, overrides: &Overrides) -> Result<PipelineOutput> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::default();
    let mut timings = Vec::new();
    let cfg_path = out.join("config.json");
    field::write_bytes(&cfg_path, cfg.to_json()?.as_bytes())?;
    manifest.add(out, "config", &cfg_path)?;

    let t = Instant::now();
    let (mut scene, mut sup) = cmd_synth(cfg, out, &mut manifest)?;
    if let Some(dir) = &overrides.masks {
        sup.masks = load_masks(dir, &scene)?;
    }
    if let Some(dir) = &overrides.normals {
        sup.normals = load_normals(dir, &scene)?;
    }
    timings.push(("synth".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    cmd_optimize(&mut scene, &sup, cfg, out, &mut manifest)?;
    timings.push(("optimize".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let planes = cmd_parse_planes(&scene, &sup.masks, cfg, out, &mut manifest)?;
    timings.push(("parse_planes".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let metrics = cmd_eval(&scene, &planes, cfg, out, &mut manifest)?;
    timings.push(("eval".to_string(), t.elapsed().as_secs_f64()));

    manifest.save(&out.join("manifest.json"))?;
    for (stage, secs) in &timings {
        log::info!("stage {stage}: {secs:.1} s");
    }
    Ok(PipelineOutput {
        metrics,
        planes,
        manifest,
        timings,
    })
}

/// Runs `f` with `threads` workers (`None` = default).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    par::with_threads(threads, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"gmt": {"epsilon_q": 1}}"#).is_err());
        let cfg = PipelineConfig::from_json(r#"{"seed": 9, "gmt": {"epsilon_b": 2.0}}"#).unwrap();
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.gmt.epsilon_b, 2.0);
        assert_eq!(cfg.gmt.epsilon_z, 0.05);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = PipelineConfig::default().with_seed(3);
        let back = PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schedules() {
        let ms = MeanShiftConfig {
            warmup: 500,
            period: 100,
            ..Default::default()
        };
        assert!(!mean_shift_due(498, &ms));
        assert!(mean_shift_due(499, &ms));
        assert!(mean_shift_due(599, &ms));
        assert!(!mean_shift_due(600, &ms));
        assert!(due(499, 500) && !due(500, 500) && !due(3, 0));
    }

    #[test]
    fn surface_samples_cover_a_square() {
        let plane = GtPlane {
            id: 0,
            normal: Vector3::z(),
            offset: 0.0,
            polygon: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
        };
        let pts = sample_gt_surfaces(&[plane], 0.1);
        assert!(pts.iter().all(|p| p.z == 0.0 && p.x >= -1e-12 && p.x <= 1.0 + 1e-12));
        assert!(pts.iter().any(|p| (p - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12));
    }
}
