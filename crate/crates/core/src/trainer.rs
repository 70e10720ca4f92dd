//! The optimization loop: window sampling, dual-view rendering, backward
//! pass, Adam updates with per-group learning rates, checkpointing, and the
//! training log.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pose_at, read_trajectory, Intrinsics, Trajectory};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{accumulate, read_events, sample_window, EventStream};
use crate::grid::Grid;
use crate::loss::{
    log_image_grad_factor, predicted_diff, reconcile_operands, total_loss, LossConfig,
};
use crate::math::splitmix64;
use crate::rasterizer::{render, render_backward, CloudGradients};
use crate::scene::{init_random_cloud, read_cloud_params, write_cloud_params, GaussianCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    /// Learning rate for the grayscale intensity coefficient (the
    /// degree-0 feature).
    pub lr_intensity: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Maximum window length W, in frames.
    pub max_window: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Number of windows averaged per gradient step.
    pub windows_per_step: usize,
    pub prune_enabled: bool,
    pub prune_min_opacity: f64,
    pub prune_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_intensity: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            max_window: 50,
            seed: 0,
            checkpoint_every: 1000,
            windows_per_step: 1,
            prune_enabled: false,
            prune_min_opacity: 0.005,
            prune_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_position_init,
            self.lr_position_final,
            self.lr_intensity,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
        ];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("all learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0,1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        if self.max_window == 0 {
            return Err(Error::invalid("max window must be at least 1"));
        }
        if self.windows_per_step == 0 {
            return Err(Error::invalid("windows_per_step must be at least 1"));
        }
        Ok(())
    }
}

/// Position learning rate at an iteration: log-linear interpolation from
/// the initial to the final rate over the run, endpoint-exact.
pub fn position_lr(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter == 0 {
        cfg.lr_position_init
    } else if iter >= cfg.iterations {
        cfg.lr_position_final
    } else {
        let u = iter as f64 / cfg.iterations as f64;
        (cfg.lr_position_init.ln() * (1.0 - u) + cfg.lr_position_final.ln() * u).exp()
    }
}

/// Per-group learning rates for one step.
#[derive(Debug, Clone, Copy)]
pub struct GroupRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub intensity: f64,
}

impl GroupRates {
    pub fn at_iteration(iter: u64, cfg: &TrainConfig) -> Self {
        Self {
            position: position_lr(iter, cfg),
            rotation: cfg.lr_rotation,
            scale: cfg.lr_scale,
            opacity: cfg.lr_opacity,
            intensity: cfg.lr_intensity,
        }
    }
}

/// First/second moment buffers per parameter group plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: CloudGradients,
    pub v: CloudGradients,
}

impl OptimizerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            step: 0,
            m: CloudGradients::zeros(n),
            v: CloudGradients::zeros(n),
        }
    }

    /// Keeps only the given indices in the moment buffers, in order
    /// (mirrors cloud pruning).
    pub fn retain(&mut self, keep: &[usize]) {
        let filter3 = |v: &Vec<nalgebra::Vector3<f64>>| keep.iter().map(|&i| v[i]).collect();
        let filter1 = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect();
        let filterq =
            |v: &Vec<crate::math::Quat>| keep.iter().map(|&i| v[i]).collect();
        self.m = CloudGradients {
            positions: filter3(&self.m.positions),
            rotations: filterq(&self.m.rotations),
            log_scales: filter3(&self.m.log_scales),
            opacity_logits: filter1(&self.m.opacity_logits),
            intensity: filter1(&self.m.intensity),
        };
        self.v = CloudGradients {
            positions: filter3(&self.v.positions),
            rotations: filterq(&self.v.rotations),
            log_scales: filter3(&self.v.log_scales),
            opacity_logits: filter1(&self.v.opacity_logits),
            intensity: filter1(&self.v.intensity),
        };
    }
}

#[inline]
fn adam_update(
    theta: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// One bias-corrected Adam step over all parameter groups; quaternions are
/// re-normalized afterwards. Errors on non-finite gradients, naming the
/// offending group.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    grads: &CloudGradients,
    state: &mut OptimizerState,
    rates: &GroupRates,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = cloud.len();
    if grads.len() != n || state.m.len() != n {
        return Err(Error::invalid("gradient/state shapes do not match the cloud"));
    }
    let finite3 = |v: &[nalgebra::Vector3<f64>]| v.iter().all(|g| g.iter().all(|x| x.is_finite()));
    if !finite3(&grads.positions) {
        return Err(Error::NonFiniteGradient { group: "position" });
    }
    if !grads.rotations.iter().all(|q| q.is_finite()) {
        return Err(Error::NonFiniteGradient { group: "rotation" });
    }
    if !finite3(&grads.log_scales) {
        return Err(Error::NonFiniteGradient { group: "scale" });
    }
    if !grads.opacity_logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFiniteGradient { group: "opacity" });
    }
    if !grads.intensity.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFiniteGradient { group: "intensity" });
    }

    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);

    for i in 0..n {
        for k in 0..3 {
            adam_update(
                &mut cloud.positions[i][k],
                grads.positions[i][k],
                &mut state.m.positions[i][k],
                &mut state.v.positions[i][k],
                rates.position,
                cfg.beta1,
                cfg.beta2,
                bc1,
                bc2,
                cfg.adam_eps,
            );
            adam_update(
                &mut cloud.log_scales[i][k],
                grads.log_scales[i][k],
                &mut state.m.log_scales[i][k],
                &mut state.v.log_scales[i][k],
                rates.scale,
                cfg.beta1,
                cfg.beta2,
                bc1,
                bc2,
                cfg.adam_eps,
            );
        }
        let q = &mut cloud.rotations[i];
        let gq = &grads.rotations[i];
        let mq = &mut state.m.rotations[i];
        let vq = &mut state.v.rotations[i];
        adam_update(&mut q.w, gq.w, &mut mq.w, &mut vq.w, rates.rotation, cfg.beta1, cfg.beta2, bc1, bc2, cfg.adam_eps);
        adam_update(&mut q.x, gq.x, &mut mq.x, &mut vq.x, rates.rotation, cfg.beta1, cfg.beta2, bc1, bc2, cfg.adam_eps);
        adam_update(&mut q.y, gq.y, &mut mq.y, &mut vq.y, rates.rotation, cfg.beta1, cfg.beta2, bc1, bc2, cfg.adam_eps);
        adam_update(&mut q.z, gq.z, &mut mq.z, &mut vq.z, rates.rotation, cfg.beta1, cfg.beta2, bc1, bc2, cfg.adam_eps);
        *q = q.normalized();
        adam_update(
            &mut cloud.opacity_logits[i],
            grads.opacity_logits[i],
            &mut state.m.opacity_logits[i],
            &mut state.v.opacity_logits[i],
            rates.opacity,
            cfg.beta1,
            cfg.beta2,
            bc1,
            bc2,
            cfg.adam_eps,
        );
        adam_update(
            &mut cloud.intensity[i],
            grads.intensity[i],
            &mut state.m.intensity[i],
            &mut state.v.intensity[i],
            rates.intensity,
            cfg.beta1,
            cfg.beta2,
            bc1,
            bc2,
            cfg.adam_eps,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, config hash, iteration, cloud parameter
// arrays, then optional optimizer moments. Binary little-endian throughout;
// byte-stable for fixed contents.

const CKPT_MAGIC: &[u8; 4] = b"EVGC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub optimizer: Option<OptimizerState>,
    pub iteration: u64,
    pub config_hash: u64,
}

fn write_moment_arrays(w: &mut impl Write, g: &CloudGradients) -> std::io::Result<()> {
    let mut dump = |values: &mut dyn Iterator<Item = f64>| -> std::io::Result<()> {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    dump(&mut g.positions.iter().flat_map(|p| [p.x, p.y, p.z]))?;
    dump(&mut g.rotations.iter().flat_map(|q| [q.w, q.x, q.y, q.z]))?;
    dump(&mut g.log_scales.iter().flat_map(|s| [s.x, s.y, s.z]))?;
    dump(&mut g.opacity_logits.iter().copied())?;
    dump(&mut g.intensity.iter().copied())
}

fn read_moment_arrays(r: &mut impl Read, n: usize) -> Result<CloudGradients> {
    let mut take = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for i in 0..count {
            r.read_exact(&mut buf).map_err(|_| Error::Parse {
                record: i + 1,
                message: "truncated optimizer state".into(),
            })?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let pos = take(n * 3)?;
    let rot = take(n * 4)?;
    let ls = take(n * 3)?;
    let op = take(n)?;
    let it = take(n)?;
    Ok(CloudGradients {
        positions: pos
            .chunks_exact(3)
            .map(|c| nalgebra::Vector3::new(c[0], c[1], c[2]))
            .collect(),
        rotations: rot
            .chunks_exact(4)
            .map(|c| crate::math::Quat::new(c[0], c[1], c[2], c[3]))
            .collect(),
        log_scales: ls
            .chunks_exact(3)
            .map(|c| nalgebra::Vector3::new(c[0], c[1], c[2]))
            .collect(),
        opacity_logits: op,
        intensity: it,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&ckpt.config_hash.to_le_bytes()).map_err(io_err)?;
    w.write_all(&ckpt.iteration.to_le_bytes()).map_err(io_err)?;
    write_cloud_params(&mut w, &ckpt.cloud).map_err(io_err)?;
    match &ckpt.optimizer {
        None => w.write_all(&[0u8]).map_err(io_err)?,
        Some(state) => {
            w.write_all(&[1u8]).map_err(io_err)?;
            w.write_all(&state.step.to_le_bytes()).map_err(io_err)?;
            write_moment_arrays(&mut w, &state.m).map_err(io_err)?;
            write_moment_arrays(&mut w, &state.v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = std::io::BufReader::new(file);
    let mut header = [0u8; 4 + 4 + 8 + 8];
    r.read_exact(&mut header).map_err(|_| Error::Parse {
        record: 0,
        message: "truncated checkpoint header".into(),
    })?;
    if &header[0..4] != CKPT_MAGIC {
        return Err(Error::Parse {
            record: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Parse {
            record: 0,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let config_hash = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let iteration = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let cloud = read_cloud_params(&mut r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|_| Error::Parse {
        record: 0,
        message: "truncated optimizer flag".into(),
    })?;
    let optimizer = if flag[0] == 1 {
        let mut step_buf = [0u8; 8];
        r.read_exact(&mut step_buf).map_err(|_| Error::Parse {
            record: 0,
            message: "truncated optimizer step".into(),
        })?;
        let step = u64::from_le_bytes(step_buf);
        let m = read_moment_arrays(&mut r, cloud.len())?;
        let v = read_moment_arrays(&mut r, cloud.len())?;
        Some(OptimizerState { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        cloud,
        optimizer,
        iteration,
        config_hash,
    })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub iterations_run: u64,
    pub final_cloud: GaussianCloud,
}

/// Per-iteration RNG seed so runs are resumable: sampling at iteration k is
/// a pure function of (seed, k).
fn iteration_seed(seed: u64, iter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(iter.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn is_holdout(index: usize, holdout_every: usize) -> bool {
    holdout_every > 0 && index % holdout_every == 0
}

fn checkpoint_file(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{iter:06}.bin"))
}

/// Finds the newest checkpoint in `out_dir` (by recorded iteration).
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = std::fs::read_dir(out_dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        let stem = name
            .strip_prefix("checkpoint_")
            .and_then(|s| s.strip_suffix(".bin"));
        let Some(stem) = stem else { continue };
        let iter = if stem == "final" {
            match load_checkpoint(&entry.path()) {
                Ok(c) => c.iteration,
                Err(_) => continue,
            }
        } else {
            match stem.parse::<u64>() {
                Ok(i) => i,
                Err(_) => continue,
            }
        };
        if best.as_ref().map_or(true, |(b, _)| iter > *b) {
            best = Some((iter, entry.path()));
        }
    }
    best.map(|(_, p)| p)
}

struct StepContext<'a> {
    stream: &'a EventStream,
    trajectory: &'a Trajectory,
    intrinsics: &'a Intrinsics,
    timestamps: Vec<u64>,
    loss_cfg: &'a LossConfig,
    threshold: f64,
    holdout_every: usize,
}

/// One optimization window: renders both views, evaluates the loss, and
/// accumulates parameter gradients. Returns (total, event term, dssim term).
fn accumulate_window_gradients(
    cloud: &GaussianCloud,
    ctx: &StepContext,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    grads: &mut CloudGradients,
) -> Result<(f64, f64, f64)> {
    // Rejection keeps both window endpoints off the held-out poses.
    let n_poses = ctx.timestamps.len();
    let (t_idx, w) = loop {
        let t_idx = rng.gen_range(1..n_poses);
        let w = sample_window(t_idx, cfg.max_window, rng)?;
        if !is_holdout(t_idx, ctx.holdout_every) && !is_holdout(t_idx - w, ctx.holdout_every) {
            break (t_idx, w);
        }
    };
    let t = ctx.timestamps[t_idx];
    let t_prev = ctx.timestamps[t_idx - w];

    let pose_t = pose_at(ctx.trajectory, t)?;
    let pose_w = pose_at(ctx.trajectory, t_prev)?;
    let img_t = render(cloud, &pose_t, ctx.intrinsics)?;
    let img_w = render(cloud, &pose_w, ctx.intrinsics)?;

    let e_pred = predicted_diff(
        &img_t.pixels,
        &img_w.pixels,
        ctx.loss_cfg.gamma,
        ctx.loss_cfg.log_eps,
    )?;
    let e_gt = accumulate(
        ctx.stream,
        t_prev,
        t,
        ctx.intrinsics.width,
        ctx.intrinsics.height,
    )?
    .to_grid();

    let ops = reconcile_operands(&e_pred, &e_gt, ctx.threshold, ctx.loss_cfg.unit_mode)?;
    let report = total_loss(&ops.x, &ops.y, ctx.loss_cfg)?;
    let grad_pred = ops.backward(&report.grad_e_pred);

    // Chain through the log-gamma images of both renders.
    let factor_t = log_image_grad_factor(&img_t.pixels, ctx.loss_cfg.gamma, ctx.loss_cfg.log_eps);
    let factor_w = log_image_grad_factor(&img_w.pixels, ctx.loss_cfg.gamma, ctx.loss_cfg.log_eps);
    let mut up_t = Grid::zeros(e_pred.width(), e_pred.height());
    let mut up_w = Grid::zeros(e_pred.width(), e_pred.height());
    for i in 0..grad_pred.len() {
        up_t.values_mut()[i] = grad_pred.values()[i] * factor_t.values()[i];
        up_w.values_mut()[i] = -grad_pred.values()[i] * factor_w.values()[i];
    }
    render_backward(cloud, &pose_t, ctx.intrinsics, &up_t, grads)?;
    render_backward(cloud, &pose_w, ctx.intrinsics, &up_w, grads)?;
    Ok((report.total, report.event_term, report.dssim_term))
}

fn scale_gradients(grads: &mut CloudGradients, factor: f64) {
    for p in &mut grads.positions {
        *p *= factor;
    }
    for q in &mut grads.rotations {
        q.w *= factor;
        q.x *= factor;
        q.y *= factor;
        q.z *= factor;
    }
    for s in &mut grads.log_scales {
        *s *= factor;
    }
    for o in &mut grads.opacity_logits {
        *o *= factor;
    }
    for c in &mut grads.intensity {
        *c *= factor;
    }
}

/// Trains a cloud against an event dataset. Loads `events.bin` and
/// `trajectory.txt` from `dataset_dir`, writes checkpoints, the training
/// log, and the run config into `out_dir`. Deterministic for a fixed seed;
/// `resume` continues from the newest checkpoint in `out_dir`.
pub fn train(dataset_dir: &Path, out_dir: &Path, run: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.trainer;
    let stream = read_events(&dataset_dir.join("events.bin"))?;
    let (intrinsics, trajectory) = read_trajectory(&dataset_dir.join("trajectory.txt"))?;
    if stream.width != intrinsics.width || stream.height != intrinsics.height {
        return Err(Error::invalid(format!(
            "event sensor {}x{} does not match trajectory intrinsics {}x{}",
            stream.width, stream.height, intrinsics.width, intrinsics.height
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let config_hash = run.hash();
    run.save(&out_dir.join("config.json"))?;

    let (mut cloud, mut state, start_iter) = if resume {
        match latest_checkpoint(out_dir) {
            Some(path) => {
                let ckpt = load_checkpoint(&path)?;
                if ckpt.config_hash != config_hash {
                    return Err(Error::invalid(format!(
                        "checkpoint {} was produced by a different config",
                        path.display()
                    )));
                }
                let n = ckpt.cloud.len();
                (
                    ckpt.cloud,
                    ckpt.optimizer.unwrap_or_else(|| OptimizerState::zeros(n)),
                    ckpt.iteration,
                )
            }
            None => {
                let cloud = init_random_cloud(
                    run.scene.n_points,
                    &run.scene.bounds,
                    cfg.seed,
                    &run.scene.init,
                )?;
                let n = cloud.len();
                (cloud, OptimizerState::zeros(n), 0)
            }
        }
    } else {
        let cloud = init_random_cloud(
            run.scene.n_points,
            &run.scene.bounds,
            cfg.seed,
            &run.scene.init,
        )?;
        let n = cloud.len();
        (cloud, OptimizerState::zeros(n), 0)
    };

    let log_path = out_dir.join("train_log.csv");
    let mut log = if start_iter > 0 && log_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?
    } else {
        let mut f = std::fs::File::create(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        f.write_all(b"iter,total,L_e,dssim,lr_pos,n_gaussians\n")
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        f
    };

    let ctx = StepContext {
        stream: &stream,
        trajectory: &trajectory,
        intrinsics: &intrinsics,
        timestamps: trajectory.timestamps().collect(),
        loss_cfg: &run.loss,
        threshold: stream.threshold,
        holdout_every: run.eval.holdout_every,
    };

    for iter in start_iter + 1..=cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(cfg.seed, iter));
        let mut grads = CloudGradients::zeros(cloud.len());
        let mut totals = (0.0, 0.0, 0.0);
        for _ in 0..cfg.windows_per_step {
            let (t, e, d) = accumulate_window_gradients(&cloud, &ctx, &mut rng, cfg, &mut grads)?;
            totals.0 += t;
            totals.1 += e;
            totals.2 += d;
        }
        let m = cfg.windows_per_step as f64;
        let (total, event_term, dssim_term) = (totals.0 / m, totals.1 / m, totals.2 / m);
        if cfg.windows_per_step > 1 {
            scale_gradients(&mut grads, 1.0 / m);
        }

        if !total.is_finite() {
            // Dump state for post-mortem before surfacing the failure.
            let dump = out_dir.join("checkpoint_diverged.bin");
            let _ = save_checkpoint(
                &dump,
                &Checkpoint {
                    cloud: cloud.clone(),
                    optimizer: Some(state.clone()),
                    iteration: iter - 1,
                    config_hash,
                },
            );
            return Err(Error::Diverged {
                iteration: iter,
                message: format!("total loss {total}; state dumped to {}", dump.display()),
            });
        }

        let rates = GroupRates::at_iteration(iter, cfg);
        adam_step(&mut cloud, &grads, &mut state, &rates, cfg)?;

        if cfg.prune_enabled && cfg.prune_every > 0 && iter % cfg.prune_every == 0 {
            let kept = cloud.prune_low_opacity(cfg.prune_min_opacity);
            if kept.len() < state.m.len() {
                state.retain(&kept);
            }
        }

        writeln!(
            log,
            "{iter},{total},{event_term},{dssim_term},{},{}",
            rates.position,
            cloud.len()
        )
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 && iter != cfg.iterations {
            save_checkpoint(
                &checkpoint_file(out_dir, iter),
                &Checkpoint {
                    cloud: cloud.clone(),
                    optimizer: Some(state.clone()),
                    iteration: iter,
                    config_hash,
                },
            )?;
        }
    }

    let final_path = out_dir.join("checkpoint_final.bin");
    save_checkpoint(
        &final_path,
        &Checkpoint {
            cloud: cloud.clone(),
            optimizer: Some(state),
            iteration: cfg.iterations,
            config_hash,
        },
    )?;
    Ok(TrainOutcome {
        checkpoint_path: final_path,
        log_path,
        iterations_run: cfg.iterations - start_iter,
        final_cloud: cloud,
    })
}
