use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde_json::json;

use progsplat::geometry::{Pose, Quaternion};
use progsplat::io::{read_intrinsics, read_json, read_ply, read_png, read_tum, write_bundle, write_pfm, write_png};
use progsplat::metrics::{ate, psnr, rpe, ssim_metric, TrajectoryPair};
use progsplat::pipeline::{run, FrameSource, RunConfig};
use progsplat::providers::ProviderSpec;
use progsplat::raster::render;
use progsplat::synthetic::{generate, SynthPreset};
use progsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "progsplat", version, about = "Pose-free progressive Gaussian splatting reconstruction")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a scene and camera trajectory from an image sequence.
    Reconstruct(ReconstructArgs),
    /// Compare trajectories and/or image sets.
    Evaluate(EvaluateArgs),
    /// Render a saved scene from a camera-to-world pose.
    Render(RenderArgs),
    /// Write a synthetic bundle with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ReconstructArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory in the synthetic bundle layout; sets images, intrinsics, depth, and matches.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Directory of frames named 000000.png, 000001.png, ...
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Directory of depth maps named 000000.pfm, ...
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Directory of match files named 000000_000001.csv, ...
    #[arg(long)]
    matches: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    /// Comma-separated frame indices kept out of training and scored on the result.
    #[arg(long, value_delimiter = ',')]
    holdout: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    #[arg(long, requires = "gt_images")]
    pred_images: Option<PathBuf>,
    #[arg(long, requires = "pred_images")]
    gt_images: Option<PathBuf>,
    /// Similarity instead of rigid alignment for ATE.
    #[arg(long)]
    align_scale: bool,
    /// RPE frame step.
    #[arg(long, default_value_t = 1)]
    delta: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Camera-to-world pose "tx ty tz qx qy qz qw".
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// plane, cavity, corridor, or lowtex.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = std::env::var("SPLAT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("SPLAT_THREADS ignored: {e}");
        }
    }
    let result = match cli.command {
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Render(a) => render_cmd(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ERROR[{}]: {e}", e.code());
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::DivergedPose { .. } => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn resolve_config(a: &ReconstructArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &a.bundle {
        let b = RunConfig::for_bundle(dir, &cfg.out_dir);
        (cfg.images, cfg.intrinsics, cfg.depth, cfg.matches) = (b.images, b.intrinsics, b.depth, b.matches);
    }
    if let Some(dir) = &a.images {
        cfg.images = FrameSource {
            root: dir.clone(),
            template: "{index:06}.png".into(),
        };
    }
    if let Some(p) = &a.intrinsics {
        cfg.intrinsics = p.clone();
    }
    if let Some(dir) = &a.depth {
        cfg.depth = ProviderSpec::files(dir, "{index:06}.pfm");
    }
    if let Some(dir) = &a.matches {
        cfg.matches = ProviderSpec::files(dir, "{prev:06}_{cur:06}.csv");
    }
    if let Some(dir) = &a.out {
        cfg.out_dir = dir.clone();
    }
    if a.frames.is_some() {
        cfg.frames = a.frames;
    }
    if let Some(h) = &a.holdout {
        cfg.holdout = h.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn reconstruct(a: ReconstructArgs) -> Result<ExitCode> {
    let cfg = resolve_config(&a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(ExitCode::SUCCESS);
    }
    let r = run(&cfg)?;
    if let Some(e) = r.aborted {
        eprintln!("ERROR[{}]: {e} (partial outputs written to {})", e.code(), cfg.out_dir.display());
        return Ok(exit_code(&e));
    }
    println!("{}", serde_json::to_string_pretty(&r.report.summary).expect("summary serializes"));
    Ok(ExitCode::SUCCESS)
}

/// PNG files present in both directories, by name.
fn paired_images(pred: &Path, gt: &Path) -> Result<Vec<String>> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        Ok(names)
    };
    let gt_names = list(gt)?;
    let common: Vec<String> = list(pred)?.into_iter().filter(|n| gt_names.contains(n)).collect();
    if common.is_empty() {
        return Err(Error::MissingResource {
            path: pred.join("*.png"),
        });
    }
    Ok(common)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    if a.pred.is_none() && a.pred_images.is_none() {
        return Err(Error::Config("give --pred/--gt and/or --pred-images/--gt-images".into()));
    }
    let mut out = serde_json::Map::new();
    if let (Some(p), Some(g)) = (&a.pred, &a.gt) {
        let pair = TrajectoryPair::from_entries(&read_tum(p)?, &read_tum(g)?);
        if pair.is_empty() {
            return Err(Error::Config("trajectories share no timestamps".into()));
        }
        let ate = ate(&pair, a.align_scale)?;
        out.insert("pairs".into(), json!(pair.len()));
        out.insert("ate".into(), json!(ate.rmse));
        out.insert("ate_scale".into(), json!(ate.scale));
        if let Ok(r) = rpe(&pair, a.delta) {
            out.insert("rpe_trans".into(), json!(r.trans));
            out.insert("rpe_rot".into(), json!(r.rot_deg));
        }
        out.insert("units".into(), json!({"ate": "ground-truth units", "rpe_trans": "ground-truth units", "rpe_rot": "degrees"}));
    }
    if let (Some(p), Some(g)) = (&a.pred_images, &a.gt_images) {
        let names = paired_images(p, g)?;
        let (mut sp, mut ss) = (0.0, 0.0);
        for n in &names {
            let (x, y) = (read_png(&p.join(n))?, read_png(&g.join(n))?);
            sp += psnr(&x, &y)?;
            ss += ssim_metric(&x, &y)?;
        }
        out.insert("images".into(), json!(names.len()));
        out.insert("psnr".into(), json!(sp / names.len() as f64));
        out.insert("ssim".into(), json!(ss / names.len() as f64));
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(ExitCode::SUCCESS)
}

fn parse_pose(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("pose: {e}")))?;
    if v.len() != 7 || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("pose needs 7 finite numbers \"tx ty tz qx qy qz qw\", got {s:?}")));
    }
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    if q.norm() < 1e-12 {
        return Err(Error::Config("pose quaternion is zero".into()));
    }
    Ok(Pose::new(q.normalized(), Vector3::new(v[0], v[1], v[2])))
}

fn render_cmd(a: RenderArgs) -> Result<ExitCode> {
    let scene = read_ply(&a.scene)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let pose = parse_pose(&a.pose)?.inverse();
    let out = render(&scene, &pose, &k);
    write_png(&a.out, &out.color)?;
    if let Some(p) = &a.depth_out {
        write_pfm(p, &out.depth_map(0.5))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let preset = SynthPreset::named(&a.preset, a.frames, a.seed)?;
    let bundle = generate(&preset)?;
    write_bundle(&a.out, &bundle)?;
    Ok(ExitCode::SUCCESS)
}
