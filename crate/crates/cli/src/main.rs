use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pgs_core::field::{self, LoadOptions};
use pgs_core::gmt;
use pgs_core::pipeline::{self, Manifest, Overrides, PipelineConfig, Supervision};
use pgs_core::{Error, Result, Scene};

/// Plane instances from 3D Gaussian fields.
#[derive(Parser)]
#[command(name = "pgs", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SceneInput {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    gt_planes: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with masks and supervision normals.
    Synth(Common),
    /// Render every channel of every view.
    Render {
        #[command(flatten)]
        scene: SceneInput,
        #[command(flatten)]
        common: Common,
    },
    /// Train descriptors and normals against masks.
    Optimize {
        #[command(flatten)]
        scene: SceneInput,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        normals: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the mixture tree and label primitives.
    ParsePlanes {
        #[command(flatten)]
        scene: SceneInput,
        #[arg(long)]
        masks: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predicted labels with ground-truth labels.
    Eval {
        /// PLY with `plane_label` per vertex.
        #[arg(long)]
        pred: PathBuf,
        /// PLY with `plane_label` or `plane_id` per vertex, same vertex order.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        gt_planes: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Directory of `view_{i}.pgm` masks replacing the simulated ones.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Directory of `view_{i}.pfm` normal maps replacing the simulated ones.
        #[arg(long)]
        normals: Option<PathBuf>,
    },
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("config.json");
    fs::write(&p, cfg.to_json()?).map_err(|e| Error::io(&p, e))?;
    manifest.add(out, "config", &p)
}

fn load_scene(input: &SceneInput, cfg: &PipelineConfig) -> Result<Scene> {
    let opts = LoadOptions {
        seed: cfg.seed,
        descriptor_dim: cfg.synth.descriptor_dim,
    };
    let scene = field::load_scene(&input.field, &input.cameras, input.gt_planes.as_deref(), opts)?;
    scene.validate()?;
    Ok(scene)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = config(&common)?;
            let mut manifest = Manifest::default();
            prepare_out(&common.out, &cfg, &mut manifest)?;
            let (scene, _) = pipeline::cmd_synth(&cfg, &common.out, &mut manifest)?;
            manifest.save(&common.out.join("manifest.json"))?;
            print_json(&serde_json::json!({
                "primitives": scene.primitives.len(),
                "views": scene.views.len(),
                "planes": scene.gt_planes.as_ref().map_or(0, |p| p.len()),
            }));
        }
        Command::Render { scene, common } => {
            let cfg = config(&common)?;
            let scene = load_scene(&scene, &cfg)?;
            let mut manifest = Manifest::default();
            prepare_out(&common.out, &cfg, &mut manifest)?;
            pipeline::cmd_render(&scene, &cfg, &common.out, &mut manifest)?;
            manifest.save(&common.out.join("manifest.json"))?;
        }
        Command::Optimize {
            scene,
            masks,
            normals,
            common,
        } => {
            let mut cfg = config(&common)?;
            let mut scene = load_scene(&scene, &cfg)?;
            let masks = pipeline::load_masks(&masks, &scene)?;
            let normals = match &normals {
                Some(dir) => pipeline::load_normals(dir, &scene)?,
                None => {
                    cfg.ablation.normals = false;
                    vec![None; scene.views.len()]
                }
            };
            let colors = (0..scene.views.len())
                .map(|v| pipeline::render_view(&scene, v, &cfg, false).color)
                .collect();
            let sup = Supervision { masks, normals, colors };
            let mut manifest = Manifest::default();
            prepare_out(&common.out, &cfg, &mut manifest)?;
            let log = pipeline::cmd_optimize(&mut scene, &sup, &cfg, &common.out, &mut manifest)?;
            manifest.save(&common.out.join("manifest.json"))?;
            print_json(&serde_json::json!({
                "iterations": log.len(),
                "final_l_seg": log.last().map(|r| r.l_seg),
                "final_l_n": log.last().map(|r| r.l_n),
            }));
        }
        Command::ParsePlanes { scene, masks, common } => {
            let cfg = config(&common)?;
            let scene = load_scene(&scene, &cfg)?;
            let masks = pipeline::load_masks(&masks, &scene)?;
            let mut manifest = Manifest::default();
            prepare_out(&common.out, &cfg, &mut manifest)?;
            let planes = pipeline::cmd_parse_planes(&scene, &masks, &cfg, &common.out, &mut manifest)?;
            if scene.primitives.iter().all(|p| p.gt_plane_id.is_some()) {
                pipeline::cmd_eval(&scene, &planes, &cfg, &common.out, &mut manifest)?;
            }
            manifest.save(&common.out.join("manifest.json"))?;
            print_json(&serde_json::json!({
                "planes": planes.planes.len(),
                "unassigned": planes.unassigned(),
            }));
        }
        Command::Eval {
            pred,
            gt,
            gt_planes,
            common,
        } => {
            let cfg = config(&common)?;
            let labels = field::load_labels(&pred)?;
            let points = field::load_points(&pred)?;
            let truth = field::load_labels(&gt)?;
            if truth.len() != labels.len() {
                return Err(Error::InvalidInput(format!(
                    "{} predicted labels but {} ground-truth labels",
                    labels.len(),
                    truth.len()
                )));
            }
            let gt_planes = gt_planes.map(field::load_gt_planes).transpose()?;
            let count = labels.iter().flatten().map(|&l| l as usize + 1).max().unwrap_or(0);
            let fits = gmt::fit_planes_to_points(&points, None, &labels, count);
            let report = pipeline::evaluate_labels(&points, &labels, &fits, &truth, gt_planes.as_deref(), &cfg)?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            let path = common.out.join("metrics.json");
            report.save(&path)?;
            let mut manifest = Manifest::default();
            manifest.add(&common.out, "eval", &path)?;
            manifest.save(&common.out.join("manifest.json"))?;
            print!("{}", report.to_json()?);
        }
        Command::Pipeline { common, masks, normals } => {
            let cfg = config(&common)?;
            let out = pipeline::cmd_pipeline(&cfg, &common.out, &Overrides { masks, normals })?;
            print!("{}", out.metrics.to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.threads;
    match pipeline::with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
