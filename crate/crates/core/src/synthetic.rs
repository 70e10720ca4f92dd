//! Deterministic test scenes and dataset fabrication: render a known cloud
//! along an orbit, run the event simulator over the rendered frames, and
//! lay the results out as a training dataset.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{orbit_trajectory, write_trajectory, Intrinsics, Trajectory};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{simulate_events, write_events, EventStream};
use crate::grid::Grid;
use crate::imageio::save_png;
use crate::math::{logit, Quat};
use crate::rasterizer::render;
use crate::scene::GaussianCloud;

/// A compact cluster of bright, mostly opaque Gaussians inside a radius-0.7
/// ball around the origin. Deterministic for a fixed seed.
pub fn test_cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    let mut log_scales = Vec::with_capacity(n);
    let mut opacity_logits = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for _ in 0..n {
        let p = loop {
            let candidate = Vector3::new(
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
            );
            if candidate.norm() <= 0.7 {
                break candidate;
            }
        };
        positions.push(p);
        rotations.push(
            Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized(),
        );
        log_scales.push(Vector3::new(
            rng.gen_range(0.09f64..0.22).ln(),
            rng.gen_range(0.09f64..0.22).ln(),
            rng.gen_range(0.09f64..0.22).ln(),
        ));
        opacity_logits.push(logit(rng.gen_range(0.6..0.95)));
        intensity.push(rng.gen_range(0.3..0.95));
    }
    GaussianCloud {
        positions,
        rotations,
        log_scales,
        opacity_logits,
        intensity,
    }
}

/// Everything a fabricated dataset consists of before it hits disk.
pub struct FabricatedDataset {
    pub frames: Vec<Grid>,
    pub stream: EventStream,
    pub intrinsics: Intrinsics,
    pub trajectory: Trajectory,
}

/// Renders ground-truth frames at every trajectory pose and simulates the
/// event stream over them.
pub fn fabricate(
    cloud: &GaussianCloud,
    intrinsics: &Intrinsics,
    trajectory: &Trajectory,
    threshold: f64,
    gamma: f64,
    log_eps: f64,
) -> Result<FabricatedDataset> {
    let mut frames = Vec::with_capacity(trajectory.poses.len());
    for pose in &trajectory.poses {
        frames.push(render(cloud, pose, intrinsics)?.pixels);
    }
    let timestamps: Vec<u64> = trajectory.timestamps().collect();
    let stream = simulate_events(&frames, &timestamps, threshold, gamma, log_eps)?;
    Ok(FabricatedDataset {
        frames,
        stream,
        intrinsics: *intrinsics,
        trajectory: trajectory.clone(),
    })
}

/// Fixed dataset directory layout:
/// `events.bin`, `trajectory.txt`, `gt/frame_%06d.png`, `meta`.
pub fn write_dataset(dataset: &FabricatedDataset, run: &RunConfig, out_dir: &Path) -> Result<()> {
    let gt_dir = out_dir.join("gt");
    std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(gt_dir.display().to_string(), e))?;
    write_events(&out_dir.join("events.bin"), &dataset.stream)?;
    write_trajectory(
        &out_dir.join("trajectory.txt"),
        &dataset.intrinsics,
        &dataset.trajectory,
    )?;
    for (k, frame) in dataset.frames.iter().enumerate() {
        save_png(&gt_dir.join(format!("frame_{k:06}.png")), frame)?;
    }
    let meta = out_dir.join("meta");
    std::fs::write(&meta, run.to_json()).map_err(|e| Error::io(meta.display().to_string(), e))?;
    Ok(())
}

/// Fabricates the dataset described by a run config using the built-in
/// test cloud.
pub fn fabricate_from_config(run: &RunConfig, n_gaussians: usize, seed: u64) -> Result<(GaussianCloud, FabricatedDataset)> {
    let intr = run.camera.intrinsics()?;
    let traj = orbit_trajectory(
        run.camera.orbit_radius,
        run.camera.orbit_elevation_degrees.to_radians(),
        run.camera.n_poses,
        run.camera.duration_us,
        run.camera.target_vector(),
    )?;
    let cloud = test_cloud(n_gaussians, seed);
    let dataset = fabricate(
        &cloud,
        &intr,
        &traj,
        run.events.threshold,
        run.loss.gamma,
        run.loss.log_eps,
    )?;
    Ok((cloud, dataset))
}
