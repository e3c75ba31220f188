use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gspose::database::{load_database, read_embeddings, save_database, RefsManifest};
use gspose::detect::DetectionBox;
use gspose::geometry::{CameraIntrinsics, SE3Pose};
use gspose::gradcheck::{gradcheck, MAX_REL_ERROR};
use gspose::image::{BinaryMask, RgbImage};
use gspose::initializer::estimate_initial_pose;
use gspose::io::{read_json, read_jsonl, write_json};
use gspose::metrics::{evaluate, Metric, PoseRecord};
use gspose::pipeline::{estimate_pose, refine_in_crop};
use gspose::ply::{load_gaussian_ply, load_ply_points};
use gspose::refine::{RefinementConfig, StopRule};
use gspose::render::{render, RenderOptions};
use gspose::synth::{default_camera, synth_scene};

#[derive(Parser)]
#[command(name = "gspose", version, about = "6D object pose estimation on 3D Gaussian objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RefineArgs {
    #[arg(long, default_value_t = 400)]
    max_steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    eta: f64,
    /// Stop when the loss itself drops below eta instead of its change.
    #[arg(long)]
    stop_on_absolute: bool,
    /// Per-step CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl RefineArgs {
    fn config(&self) -> RefinementConfig {
        RefinementConfig {
            max_steps: self.max_steps,
            lr0: self.lr,
            eta: self.eta,
            stop_rule: if self.stop_on_absolute {
                StopRule::AbsoluteLoss
            } else {
                StopRule::LossChange
            },
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a Gaussian object at a pose.
    Render {
        #[arg(long)]
        object: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the alpha channel as a 32-bit float PFM.
        #[arg(long)]
        alpha: Option<PathBuf>,
    },
    /// Initial pose from retrieval and the query mask.
    InitPose {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine an initial pose against a segmented query image.
    Refine {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Initial pose followed by refinement.
    Estimate {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Build a reference database from posed masks and embeddings.
    BuildDb {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        object: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted poses against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        diameter: f64,
        #[arg(long, default_value = "add")]
        metric: Metric,
        /// Camera for the projection metric.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
    },
    /// Write a synthetic scene with its reference database.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic pose gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        seed: u64,
    },
}

fn intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate().with_context(|| path.display().to_string())?;
    Ok(k)
}

fn query_embedding(path: &Path) -> Result<Vec<f64>> {
    let rows = read_embeddings(path)?;
    match rows.len() {
        1 => Ok(rows.into_iter().next().unwrap()),
        n => bail!("{}: expected one embedding row, found {n}", path.display()),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn pose_json(p: &SE3Pose) -> serde_json::Value {
    serde_json::to_value(p).expect("pose serializes")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render {
            object,
            pose,
            intrinsics: k,
            out,
            alpha,
        } => {
            let obj = load_gaussian_ply(&object)?;
            let pose: SE3Pose = read_json(&pose)?;
            let k = intrinsics(&k)?;
            let (img, _) = render(&obj, &pose, &k, &RenderOptions::default())?;
            img.rgb.save_png(&out)?;
            if let Some(path) = alpha {
                img.alpha.save_pfm(&path)?;
            }
        }
        Command::InitPose {
            db,
            mask,
            embedding,
            intrinsics: k,
            out,
        } => {
            let db = load_database(&db)?;
            let mask = BinaryMask::load_png(&mask)?;
            let v = query_embedding(&embedding)?;
            let k = intrinsics(&k)?;
            let (pose, bx, index) = estimate_initial_pose(&mask, &v, &db, &k)?;
            write_json(&pose, &out)?;
            print_json(&serde_json::json!({
                "reference": index,
                "box": bx,
                "pose": pose_json(&pose),
            }));
        }
        Command::Refine {
            db,
            image,
            mask,
            init,
            intrinsics: k,
            out,
            refine,
        } => {
            let db = load_database(&db)?;
            let image = RgbImage::load_png(&image)?;
            let mask = BinaryMask::load_png(&mask)?;
            let init: SE3Pose = read_json(&init)?;
            let k = intrinsics(&k)?;
            let bx = DetectionBox::from_mask(&mask)?;
            let (pose, trace) = refine_in_crop(&db.object, &image, &mask, &init, &k, &bx, db.crop_size, &refine.config())?;
            write_json(&pose, &out)?;
            if let Some(path) = &refine.trace {
                trace.save_csv(path)?;
            }
            print_json(&serde_json::json!({
                "steps": trace.len(),
                "early_stopped": trace.early_stopped,
                "final_loss": trace.rows.last().map(|r| r.loss),
                "pose": pose_json(&pose),
            }));
        }
        Command::Estimate {
            db,
            image,
            mask,
            embedding,
            intrinsics: k,
            out,
            refine,
        } => {
            let db = load_database(&db)?;
            let image = RgbImage::load_png(&image)?;
            let mask = BinaryMask::load_png(&mask)?;
            let v = query_embedding(&embedding)?;
            let k = intrinsics(&k)?;
            let est = estimate_pose(&db, &image, &mask, &v, &k, &refine.config())?;
            write_json(&est.refined, &out)?;
            if let Some(path) = &refine.trace {
                est.trace.save_csv(path)?;
            }
            print_json(&serde_json::json!({
                "reference": est.reference_index,
                "box": est.detection,
                "steps": est.trace.len(),
                "initial": pose_json(&est.initial),
                "pose": pose_json(&est.refined),
            }));
        }
        Command::BuildDb { refs, object, out } => {
            let manifest = RefsManifest::load(&refs)?;
            let obj = load_gaussian_ply(&object)?;
            let base = refs.parent().unwrap_or(Path::new("."));
            let db = manifest.build(base, obj)?;
            save_database(&db, &out)?;
            print_json(&serde_json::json!({
                "name": db.name,
                "entries": db.len(),
                "diameter": db.diameter,
                "out": out,
            }));
        }
        Command::Eval {
            pred,
            gt,
            points,
            diameter,
            metric,
            intrinsics: k,
        } => {
            let pred: Vec<PoseRecord> = read_jsonl(&pred)?;
            let gt: Vec<PoseRecord> = read_jsonl(&gt)?;
            let pts = load_ply_points(&points)?;
            let k = k.as_deref().map(intrinsics).transpose()?;
            let summary = evaluate(&pred, &gt, &pts, diameter, metric, k.as_ref())?;
            print_json(&serde_json::to_value(&summary)?);
        }
        Command::Synth { seed, out } => {
            let scene = synth_scene(seed, &default_camera(), gspose::database::DEFAULT_CROP_SIZE)?;
            let files = scene.save(&out)?;
            print_json(&serde_json::json!({
                "object": files.object,
                "query": files.query,
                "mask": files.mask,
                "embedding": files.embedding,
                "intrinsics": files.intrinsics,
                "gt_pose": files.gt_pose,
                "db": files.database,
                "refs": files.refs_manifest,
            }));
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck(seed)?;
            print_json(&serde_json::to_value(&report)?);
            if !(report.max_rel_error < MAX_REL_ERROR) {
                bail!(
                    "gradient check failed: relative error {:.3e} (limit {MAX_REL_ERROR:e})",
                    report.max_rel_error
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
