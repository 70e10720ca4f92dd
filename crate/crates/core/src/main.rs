//! Command-line entry point: dataset simulation, training, rendering, and
//! evaluation. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evgs::camera::read_trajectory;
use evgs::config::RunConfig;
use evgs::error::Error as EvgsError;
use evgs::imageio::{load_png, save_pfm, save_png};
use evgs::metrics::{evaluate_views, EvalReport};
use evgs::rasterizer::render;
use evgs::synthetic::{fabricate, fabricate_from_config, write_dataset};
use evgs::trainer::{load_checkpoint, train};

#[derive(Parser)]
#[command(name = "evgs", version, about = "Event-supervised Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fabricate a dataset: ground-truth frames, trajectory, event stream.
    Simulate(SimulateArgs),
    /// Train a Gaussian cloud against an event dataset.
    Train(TrainArgs),
    /// Render every trajectory pose from a checkpoint.
    Render(RenderArgs),
    /// Score rendered views against ground truth (PSNR / SSIM).
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of Gaussians in the built-in test scene.
    #[arg(long, default_value_t = 20)]
    gaussians: usize,
    /// Seed for the test scene.
    #[arg(long)]
    seed: Option<u64>,
    /// Sensor resolution as WxH (overrides config).
    #[arg(long)]
    resolution: Option<String>,
    /// Contrast threshold A (overrides config).
    #[arg(long = "threshold-A", alias = "threshold-a")]
    threshold_a: Option<f64>,
    /// Number of orbit poses (overrides config).
    #[arg(long)]
    poses: Option<usize>,
    /// Orbit duration in microseconds (overrides config).
    #[arg(long)]
    duration_us: Option<u64>,
    /// Directory of grayscale frames to simulate from instead of the test
    /// scene; requires --trajectory.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Trajectory file accompanying --frames.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (events.bin + trajectory.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override trainer.iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Override trainer.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from the newest checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render every k-th pose.
    #[arg(long, default_value_t = 1)]
    every: usize,
    /// Also write 32-bit float PFM images.
    #[arg(long)]
    pfm: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered frames.
    #[arg(long)]
    renders: PathBuf,
    /// Directory of ground-truth frames.
    #[arg(long)]
    gt: PathBuf,
    /// Where to write eval.csv and eval.txt (defaults to --renders).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("EVGS_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Validation and parse problems exit 2; runtime failures exit 1.
fn classify(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<EvgsError>() {
        Some(EvgsError::InvalidParameter(_))
        | Some(EvgsError::Parse { .. })
        | Some(EvgsError::OutOfRange(_)) => 2,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn parse_resolution(spec: &str) -> anyhow::Result<(usize, usize)> {
    let parts: Vec<&str> = spec.split('x').collect();
    let parsed = if parts.len() == 2 {
        match (parts[0].parse::<usize>(), parts[1].parse::<usize>()) {
            (Ok(w), Ok(h)) if w > 0 && h > 0 => Some((w, h)),
            _ => None,
        }
    } else {
        None
    };
    parsed.ok_or_else(|| {
        EvgsError::invalid(format!("resolution must look like 64x64, got '{spec}'")).into()
    })
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut run = load_config(&args.config)?;
    if let Some(res) = &args.resolution {
        let (w, h) = parse_resolution(res)?;
        run.camera.width = w;
        run.camera.height = h;
    }
    if let Some(a) = args.threshold_a {
        run.events.threshold = a;
    }
    if let Some(p) = args.poses {
        run.camera.n_poses = p;
    }
    if let Some(d) = args.duration_us {
        run.camera.duration_us = d;
    }
    if let Some(s) = args.seed {
        run.trainer.seed = s;
    }
    run.validate()?;

    let dataset = match (&args.frames, &args.trajectory) {
        (Some(frames_dir), Some(traj_path)) => {
            let (intr, traj) = read_trajectory(traj_path)?;
            let mut paths = png_files(frames_dir)?;
            paths.sort();
            if paths.len() != traj.poses.len() {
                return Err(EvgsError::invalid(format!(
                    "{} frames but {} trajectory poses",
                    paths.len(),
                    traj.poses.len()
                ))
                .into());
            }
            let frames = paths
                .iter()
                .map(|p| load_png(p))
                .collect::<Result<Vec<_>, _>>()?;
            let timestamps: Vec<u64> = traj.timestamps().collect();
            let stream = evgs::events::simulate_events(
                &frames,
                &timestamps,
                run.events.threshold,
                run.loss.gamma,
                run.loss.log_eps,
            )?;
            evgs::synthetic::FabricatedDataset {
                frames,
                stream,
                intrinsics: intr,
                trajectory: traj,
            }
        }
        (Some(_), None) => {
            return Err(EvgsError::invalid("--frames requires --trajectory").into())
        }
        (None, Some(traj_path)) => {
            // Trajectory from file, frames from the built-in test scene.
            let (intr, traj) = read_trajectory(traj_path)?;
            let cloud = evgs::synthetic::test_cloud(args.gaussians, run.trainer.seed);
            fabricate(
                &cloud,
                &intr,
                &traj,
                run.events.threshold,
                run.loss.gamma,
                run.loss.log_eps,
            )?
        }
        (None, None) => {
            let (_, dataset) = fabricate_from_config(&run, args.gaussians, run.trainer.seed)?;
            dataset
        }
    };

    std::fs::create_dir_all(&args.out)?;
    write_dataset(&dataset, &run, &args.out)?;
    println!(
        "wrote {} events over {} frames to {}",
        dataset.stream.len(),
        dataset.frames.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut run = load_config(&args.config)?;
    if let Some(iters) = args.iterations {
        run.trainer.iterations = iters;
    }
    if let Some(seed) = args.seed {
        run.trainer.seed = seed;
    }
    run.validate()?;
    let outcome = train(&args.data, &args.out, &run, args.resume)?;
    println!(
        "trained {} iterations; checkpoint at {}",
        outcome.iterations_run,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (intr, traj) = read_trajectory(&args.trajectory)?;

    // A config next to the checkpoint pins the camera it was trained for.
    if let Some(cfg_path) = args
        .checkpoint
        .parent()
        .map(|d| d.join("config.json"))
        .filter(|p| p.exists())
    {
        let cfg = RunConfig::load(&cfg_path)?;
        if cfg.camera.width != intr.width || cfg.camera.height != intr.height {
            return Err(EvgsError::invalid(format!(
                "checkpoint was trained at {}x{} but trajectory specifies {}x{}",
                cfg.camera.width, cfg.camera.height, intr.width, intr.height
            ))
            .into());
        }
    }

    if args.every == 0 {
        return Err(EvgsError::invalid("--every must be at least 1").into());
    }
    std::fs::create_dir_all(&args.out)?;
    let mut rendered = 0usize;
    for (k, pose) in traj.poses.iter().enumerate() {
        if k % args.every != 0 {
            continue;
        }
        let img = render(&ckpt.cloud, pose, &intr)?;
        save_png(&args.out.join(format!("frame_{k:06}.png")), &img.pixels)?;
        if args.pfm {
            save_pfm(&args.out.join(format!("frame_{k:06}.pfm")), &img.pixels)?;
        }
        rendered += 1;
    }
    println!("rendered {rendered} views to {}", args.out.display());
    Ok(())
}

fn png_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| EvgsError::io(dir.display().to_string(), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut renders = png_files(&args.renders)?;
    let mut gts = png_files(&args.gt)?;
    renders.sort();
    gts.sort();
    if renders.is_empty() {
        return Err(EvgsError::invalid(format!(
            "no rendered frames in {}",
            args.renders.display()
        ))
        .into());
    }
    if renders.len() != gts.len() {
        return Err(EvgsError::invalid(format!(
            "{} renders but {} ground-truth frames",
            renders.len(),
            gts.len()
        ))
        .into());
    }
    let pairs = renders
        .iter()
        .zip(gts.iter())
        .map(|(r, g)| Ok((load_png(r)?, load_png(g)?)))
        .collect::<Result<Vec<_>, EvgsError>>()?;
    let report: EvalReport = evaluate_views(&pairs)?;

    let out_dir = args.out.unwrap_or_else(|| args.renders.clone());
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("eval.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("eval.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}
