//! Pinhole camera model, Gaussian projection to camera coordinates, orbit
//! trajectory generation, and pose interpolation.
//!
//! Conventions: right-handed camera frame with x right, y down, z forward;
//! pixel (i, j) samples the continuous image plane at coordinates (i, j).
//! World frame is z-up.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Quat;
use crate::scene::Covariance3;

/// Gaussians closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Added to the diagonal of every projected covariance (anti-aliasing
/// floor, pixels²).
pub const BLUR_FLOOR: f64 = 0.3;

/// Screen-space footprint radius in units of the largest 2D standard
/// deviation, used both for border culling and tile binning. At 3.5σ the
/// kernel is below exp(-6.125) ≈ 0.0022 < 1/255, so anything outside this
/// radius is rejected by the renderer's opacity skip anyway and the cutoff
/// never changes a pixel.
pub const FOOTPRINT_SIGMA: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel intrinsics from a horizontal field of view, principal
    /// point at the pixel-grid center.
    pub fn from_fov(width: usize, height: usize, fov_x_radians: f64) -> Result<Self> {
        if !(fov_x_radians > 0.0 && fov_x_radians < std::f64::consts::PI) {
            return Err(Error::invalid("field of view must be in (0, pi)"));
        }
        let f = width as f64 / 2.0 / (fov_x_radians / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(())
    }
}

/// World-to-camera transform at a timestamp: `p_cam = R p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
    pub timestamp_us: u64,
}

impl Pose {
    pub fn new(rotation: Quat, translation: Vector3<f64>, timestamp_us: u64) -> Self {
        Self {
            rotation: rotation.normalized(),
            translation,
            timestamp_us,
        }
    }

    /// Pose of a camera at `eye` looking at `target`, world z as up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, timestamp_us: u64) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("camera eye coincides with target"));
        }
        let z_cam = forward.normalize();
        let up = Vector3::z();
        let mut x_cam = z_cam.cross(&up);
        if x_cam.norm() < 1e-9 {
            // Looking straight up or down; pick an arbitrary horizontal right.
            x_cam = Vector3::x();
        }
        let x_cam = x_cam.normalize();
        let y_cam = z_cam.cross(&x_cam);
        let w = Matrix3::from_rows(&[x_cam.transpose(), y_cam.transpose(), z_cam.transpose()]);
        let translation = -(w * eye);
        Ok(Self {
            rotation: Quat::from_rotation_matrix(&w),
            translation,
            timestamp_us,
        })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }
}

/// Ordered camera path. `loop_period_us` is the time at which the path
/// returns to the first pose; `None` for open paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub loop_period_us: Option<u64>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, loop_period_us: Option<u64>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::invalid("trajectory needs at least two poses"));
        }
        for w in poses.windows(2) {
            if w[1].timestamp_us <= w[0].timestamp_us {
                return Err(Error::invalid("trajectory timestamps must strictly increase"));
            }
        }
        if let Some(period) = loop_period_us {
            if period <= poses.last().unwrap().timestamp_us {
                return Err(Error::invalid("loop period must exceed the last timestamp"));
            }
        }
        Ok(Self {
            poses,
            loop_period_us,
        })
    }

    pub fn is_loop(&self) -> bool {
        self.loop_period_us.is_some()
    }

    pub fn first_timestamp(&self) -> u64 {
        self.poses[0].timestamp_us
    }

    pub fn last_timestamp(&self) -> u64 {
        self.poses.last().unwrap().timestamp_us
    }

    pub fn timestamps(&self) -> impl Iterator<Item = u64> + '_ {
        self.poses.iter().map(|p| p.timestamp_us)
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Packed symmetric 2×2 covariance (pixels²): [Σ'₀₀, Σ'₀₁, Σ'₁₁],
    /// blur floor included.
    pub cov2d: [f64; 3],
    /// Camera-space z of the mean (world units).
    pub depth: f64,
    /// Camera-space position of the mean.
    pub view_pos: Vector3<f64>,
    /// Screen-space footprint radius (pixels), `FOOTPRINT_SIGMA` standard
    /// deviations of the widest axis.
    pub radius: f64,
}

/// Projects one Gaussian. Returns `None` when the Gaussian is culled
/// (behind the near plane, or its whole footprint lies outside the image).
pub fn project_gaussian(
    mean: Vector3<f64>,
    cov: &Covariance3,
    pose: &Pose,
    intr: &Intrinsics,
) -> Result<Option<ProjectedGaussian>> {
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite Gaussian mean"));
    }
    if !cov.matrix().iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite covariance"));
    }
    let w = pose.rotation_matrix();
    let view_pos = w * mean + pose.translation;
    if view_pos.z <= NEAR_PLANE {
        return Ok(None);
    }
    let (tx, ty, tz) = (view_pos.x, view_pos.y, view_pos.z);
    let mean2d = Vector2::new(
        intr.fx * tx / tz + intr.cx,
        intr.fy * ty / tz + intr.cy,
    );

    let m3 = w * cov.matrix() * w.transpose();
    // Rows of the projection Jacobian at the camera-space mean.
    let j1 = Vector3::new(intr.fx / tz, 0.0, -intr.fx * tx / (tz * tz));
    let j2 = Vector3::new(0.0, intr.fy / tz, -intr.fy * ty / (tz * tz));
    let a = j1.dot(&(m3 * j1)) + BLUR_FLOOR;
    let b = j1.dot(&(m3 * j2));
    let c = j2.dot(&(m3 * j2)) + BLUR_FLOOR;

    let mid = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let lambda_max = mid + disc;
    let radius = FOOTPRINT_SIGMA * lambda_max.max(0.0).sqrt();

    let visible = mean2d.x + radius >= 0.0
        && mean2d.x - radius <= (intr.width - 1) as f64
        && mean2d.y + radius >= 0.0
        && mean2d.y - radius <= (intr.height - 1) as f64;
    if !visible {
        return Ok(None);
    }

    Ok(Some(ProjectedGaussian {
        mean2d,
        cov2d: [a, b, c],
        depth: tz,
        view_pos,
        radius,
    }))
}

/// Equally spaced 360° orbit around `target` at fixed elevation, each pose
/// looking at the target. Timestamps are equally spaced over
/// `[0, duration_us)`, so pose k sits at `k * duration / n`. The trajectory
/// loops with period `duration_us`.
pub fn orbit_trajectory(
    radius: f64,
    elevation: f64,
    n_poses: usize,
    duration_us: u64,
    target: Vector3<f64>,
) -> Result<Trajectory> {
    if n_poses < 2 {
        return Err(Error::invalid("orbit needs at least two poses"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("orbit radius must be positive"));
    }
    if duration_us < n_poses as u64 {
        return Err(Error::invalid(
            "orbit duration must allow distinct microsecond timestamps",
        ));
    }
    let mut poses = Vec::with_capacity(n_poses);
    for k in 0..n_poses {
        let azimuth = 2.0 * std::f64::consts::PI * k as f64 / n_poses as f64;
        let eye = target
            + radius
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
        let t = (k as u128 * duration_us as u128 / n_poses as u128) as u64;
        poses.push(Pose::look_at(eye, target, t)?);
    }
    Trajectory::new(poses, Some(duration_us))
}

/// Pose at an arbitrary timestamp: slerp on rotation, lerp on translation
/// between the bracketing stored poses. Looping trajectories wrap modulo
/// their period; open trajectories error outside their span.
pub fn pose_at(traj: &Trajectory, t_us: u64) -> Result<Pose> {
    let t = match traj.loop_period_us {
        Some(period) => t_us % period,
        None => {
            if t_us < traj.first_timestamp() || t_us > traj.last_timestamp() {
                return Err(Error::OutOfRange(format!(
                    "timestamp {t_us} outside trajectory span [{}, {}]",
                    traj.first_timestamp(),
                    traj.last_timestamp()
                )));
            }
            t_us
        }
    };

    // Exact hits return the stored pose.
    if let Ok(i) = traj
        .poses
        .binary_search_by_key(&t, |p| p.timestamp_us)
    {
        let mut p = traj.poses[i];
        p.timestamp_us = t_us;
        return Ok(p);
    }

    let (pa, pb, span) = if traj.is_loop() && t > traj.last_timestamp() {
        let period = traj.loop_period_us.unwrap();
        let last = traj.poses.last().unwrap();
        (last, &traj.poses[0], (period - last.timestamp_us) as f64)
    } else {
        // t strictly between two stored timestamps.
        let i = traj.poses.partition_point(|p| p.timestamp_us < t);
        debug_assert!(i > 0 && i < traj.poses.len());
        let pa = &traj.poses[i - 1];
        let pb = &traj.poses[i];
        (pa, pb, (pb.timestamp_us - pa.timestamp_us) as f64)
    };
    let u = (t - pa.timestamp_us) as f64 / span;
    Ok(Pose {
        rotation: pa.rotation.slerp(&pb.rotation, u),
        translation: pa.translation + u * (pb.translation - pa.translation),
        timestamp_us: t_us,
    })
}

// ---------------------------------------------------------------------------
// Trajectory file: plain text, one record per line.
//
//   # evgs trajectory v1
//   intrinsics <fx> <fy> <cx> <cy> <width> <height>
//   loop <period_us|0>
//   pose <t_us> <qw> <qx> <qy> <qz> <tx> <ty> <tz>

pub fn trajectory_to_string(intr: &Intrinsics, traj: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str("# evgs trajectory v1\n");
    let _ = writeln!(
        out,
        "intrinsics {} {} {} {} {} {}",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
    );
    let _ = writeln!(out, "loop {}", traj.loop_period_us.unwrap_or(0));
    for p in &traj.poses {
        let _ = writeln!(
            out,
            "pose {} {} {} {} {} {} {} {}",
            p.timestamp_us,
            p.rotation.w,
            p.rotation.x,
            p.rotation.y,
            p.rotation.z,
            p.translation.x,
            p.translation.y,
            p.translation.z
        );
    }
    out
}

pub fn write_trajectory(path: &Path, intr: &Intrinsics, traj: &Trajectory) -> Result<()> {
    std::fs::write(path, trajectory_to_string(intr, traj))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn trajectory_from_str(text: &str) -> Result<(Intrinsics, Trajectory)> {
    let mut intr: Option<Intrinsics> = None;
    let mut loop_period: Option<Option<u64>> = None;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let record = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let fields: Vec<&str> = parts.collect();
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                record,
                message: format!("bad number '{s}'"),
            })
        };
        match tag {
            "intrinsics" => {
                if fields.len() != 6 {
                    return Err(Error::Parse {
                        record,
                        message: "intrinsics line needs 6 fields".into(),
                    });
                }
                let v: Vec<f64> = fields
                    .iter()
                    .map(|s| parse_f64(s))
                    .collect::<Result<_>>()?;
                intr = Some(Intrinsics::new(
                    v[0],
                    v[1],
                    v[2],
                    v[3],
                    v[4] as usize,
                    v[5] as usize,
                )?);
            }
            "loop" => {
                if fields.len() != 1 {
                    return Err(Error::Parse {
                        record,
                        message: "loop line needs 1 field".into(),
                    });
                }
                let p: u64 = fields[0].parse().map_err(|_| Error::Parse {
                    record,
                    message: format!("bad loop period '{}'", fields[0]),
                })?;
                loop_period = Some(if p == 0 { None } else { Some(p) });
            }
            "pose" => {
                if fields.len() != 8 {
                    return Err(Error::Parse {
                        record,
                        message: "pose line needs 8 fields".into(),
                    });
                }
                let t: u64 = fields[0].parse().map_err(|_| Error::Parse {
                    record,
                    message: format!("bad timestamp '{}'", fields[0]),
                })?;
                let v: Vec<f64> = fields[1..]
                    .iter()
                    .map(|s| parse_f64(s))
                    .collect::<Result<_>>()?;
                poses.push(Pose::new(
                    Quat::new(v[0], v[1], v[2], v[3]),
                    Vector3::new(v[4], v[5], v[6]),
                    t,
                ));
            }
            other => {
                return Err(Error::Parse {
                    record,
                    message: format!("unknown record tag '{other}'"),
                });
            }
        }
    }
    let intr = intr.ok_or(Error::Parse {
        record: 0,
        message: "missing intrinsics header".into(),
    })?;
    let traj = Trajectory::new(poses, loop_period.flatten())?;
    Ok((intr, traj))
}

pub fn read_trajectory(path: &Path) -> Result<(Intrinsics, Trajectory)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    trajectory_from_str(&text)
}
