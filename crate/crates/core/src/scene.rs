//! Learnable Gaussian cloud: storage, parameter activations, covariance
//! construction, random initialization, and parameter-array serialization.
//!
//! Parameters are stored pre-activation so the optimizer works on an
//! unconstrained domain: scales in log space, opacities as logits,
//! quaternions unnormalized. [`activate`] produces the constrained views the
//! rasterizer consumes.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logit, sigmoid, Quat};

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-1.0, -1.0, -1.0],
            max: [1.0, 1.0, 1.0],
        }
    }
}

/// The learnable scene. All vectors share length N.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Stored unnormalized; normalized on activation.
    pub rotations: Vec<Quat>,
    /// Log of the per-axis scale; activated scale is `exp(log_scale)`.
    pub log_scales: Vec<Vector3<f64>>,
    /// Pre-sigmoid opacity.
    pub opacity_logits: Vec<f64>,
    /// Degree-0 grayscale coefficient, unconstrained in storage and clamped
    /// to [0, 1] at render time.
    pub intensity: Vec<f64>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the structural invariants: matched lengths, N > 0, finite and
    /// non-degenerate parameters.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::invalid("cloud is empty"));
        }
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.intensity.len() != n
        {
            return Err(Error::invalid("cloud parameter arrays disagree on length"));
        }
        for i in 0..n {
            if !(self.positions[i].iter().all(|v| v.is_finite())
                && self.rotations[i].is_finite()
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.intensity[i].is_finite())
            {
                return Err(Error::invalid(format!("non-finite parameter at index {i}")));
            }
            if self.rotations[i].norm() == 0.0 {
                return Err(Error::invalid(format!("zero quaternion at index {i}")));
            }
        }
        Ok(())
    }

    /// Keeps only the Gaussians whose activated opacity is at least
    /// `min_alpha`; returns the retained indices so callers can filter
    /// parallel buffers (optimizer moments).
    pub fn prune_low_opacity(&mut self, min_alpha: f64) -> Vec<usize> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| sigmoid(self.opacity_logits[i]) >= min_alpha)
            .collect();
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
        self.rotations = keep.iter().map(|&i| self.rotations[i]).collect();
        self.log_scales = keep.iter().map(|&i| self.log_scales[i]).collect();
        self.opacity_logits = keep.iter().map(|&i| self.opacity_logits[i]).collect();
        self.intensity = keep.iter().map(|&i| self.intensity[i]).collect();
        keep
    }
}

/// Symmetric positive semi-definite 3×3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix3<f64> {
        self.0
    }
}

/// Σ = R·diag(s)·diag(s)ᵀ·Rᵀ with R the rotation matrix of the (normalized)
/// quaternion. PSD by construction.
pub fn build_covariance(q: &Quat, s: Vector3<f64>) -> Result<Covariance3> {
    if !q.is_finite() || !s.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite covariance inputs"));
    }
    if q.norm() == 0.0 {
        return Err(Error::invalid("zero quaternion"));
    }
    if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
        return Err(Error::invalid("scale components must be positive"));
    }
    let r = q.normalized().to_rotation_matrix();
    let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    Ok(Covariance3(r * d * r.transpose()))
}

/// Constrained parameter views: α ∈ (0,1), s > 0, unit quaternions,
/// intensity clamped to [0,1].
#[derive(Debug, Clone)]
pub struct Activated {
    pub opacities: Vec<f64>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub intensities: Vec<f64>,
}

pub fn activate(cloud: &GaussianCloud) -> Activated {
    Activated {
        opacities: cloud.opacity_logits.iter().map(|&l| sigmoid(l)).collect(),
        scales: cloud.log_scales.iter().map(|ls| ls.map(f64::exp)).collect(),
        rotations: cloud.rotations.iter().map(|q| q.normalized()).collect(),
        intensities: cloud.intensity.iter().map(|&c| c.clamp(0.0, 1.0)).collect(),
    }
}

/// Initialization knobs not covered by the operation arguments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub initial_opacity: f64,
    pub initial_intensity: f64,
    /// Initial per-axis scale as a fraction of the mean nearest-neighbor
    /// distance.
    pub scale_fraction: f64,
    /// Subsample size for the nearest-neighbor estimate.
    pub nn_subsample: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            initial_opacity: 0.1,
            initial_intensity: 0.5,
            scale_fraction: 0.5,
            nn_subsample: 1000,
        }
    }
}

/// Uniformly scatters `n` Gaussians inside `bounds`. Rotations start at
/// identity; scales start isotropic at `scale_fraction` of the mean
/// nearest-neighbor spacing (estimated on a subsample). Deterministic for a
/// fixed seed.
pub fn init_random_cloud(
    n: usize,
    bounds: &Aabb,
    seed: u64,
    cfg: &InitConfig,
) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::invalid("cannot initialize an empty cloud"));
    }
    if !(bounds.volume() > 0.0) {
        return Err(Error::invalid("bounds must have positive volume"));
    }
    if !(0.0 < cfg.initial_opacity && cfg.initial_opacity < 1.0) {
        return Err(Error::invalid("initial opacity must lie in (0,1)"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let p = Vector3::new(
            rng.gen_range(bounds.min[0]..bounds.max[0]),
            rng.gen_range(bounds.min[1]..bounds.max[1]),
            rng.gen_range(bounds.min[2]..bounds.max[2]),
        );
        positions.push(p);
    }

    let spacing = mean_nearest_neighbor(&positions, cfg.nn_subsample, &mut rng)
        .unwrap_or(bounds.diagonal() * 0.5);
    let scale = (cfg.scale_fraction * spacing).max(1e-12);
    let log_scale = Vector3::from_element(scale.ln());
    let opacity_logit = logit(cfg.initial_opacity);

    Ok(GaussianCloud {
        positions,
        rotations: vec![Quat::IDENTITY; n],
        log_scales: vec![log_scale; n],
        opacity_logits: vec![opacity_logit; n],
        intensity: vec![cfg.initial_intensity; n],
    })
}

/// Mean distance to the nearest neighbor over a random subsample of at most
/// `subsample` points. Returns None when fewer than two points exist.
fn mean_nearest_neighbor(
    positions: &[Vector3<f64>],
    subsample: usize,
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    if positions.len() < 2 {
        return None;
    }
    let k = subsample.max(2).min(positions.len());
    let sample: Vec<Vector3<f64>> = if positions.len() <= k {
        positions.to_vec()
    } else {
        (0..k)
            .map(|_| positions[rng.gen_range(0..positions.len())])
            .collect()
    };
    let mut total = 0.0;
    for (i, p) in sample.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in sample.iter().enumerate() {
            if i != j {
                best = best.min((p - q).norm());
            }
        }
        if best.is_finite() {
            total += best;
        }
    }
    Some(total / sample.len() as f64)
}

// ---------------------------------------------------------------------------
// Parameter-array serialization (shared by checkpoint files).

fn write_f64s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Writes N and the five parameter arrays, little-endian, in a fixed order.
/// Byte-stable: the same cloud always produces the same bytes.
pub fn write_cloud_params(w: &mut impl Write, cloud: &GaussianCloud) -> std::io::Result<()> {
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    write_f64s(w, cloud.positions.iter().flat_map(|p| [p.x, p.y, p.z]))?;
    write_f64s(
        w,
        cloud.rotations.iter().flat_map(|q| [q.w, q.x, q.y, q.z]),
    )?;
    write_f64s(w, cloud.log_scales.iter().flat_map(|s| [s.x, s.y, s.z]))?;
    write_f64s(w, cloud.opacity_logits.iter().copied())?;
    write_f64s(w, cloud.intensity.iter().copied())?;
    Ok(())
}

pub fn read_cloud_params(r: &mut impl Read) -> Result<GaussianCloud> {
    let mut nbuf = [0u8; 8];
    r.read_exact(&mut nbuf)
        .map_err(|e| Error::Parse {
            record: 0,
            message: format!("cloud length: {e}"),
        })?;
    let n = u64::from_le_bytes(nbuf) as usize;
    let mut take = |count: usize, what: &str| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            out.push(read_f64(r).map_err(|e| Error::Parse {
                record: i + 1,
                message: format!("{what}: {e}"),
            })?);
        }
        Ok(out)
    };
    let pos = take(n * 3, "positions")?;
    let rot = take(n * 4, "rotations")?;
    let ls = take(n * 3, "log_scales")?;
    let op = take(n, "opacity_logits")?;
    let it = take(n, "intensity")?;
    let cloud = GaussianCloud {
        positions: pos
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect(),
        rotations: rot
            .chunks_exact(4)
            .map(|c| Quat::new(c[0], c[1], c[2], c[3]))
            .collect(),
        log_scales: ls
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect(),
        opacity_logits: op,
        intensity: it,
    };
    cloud.validate()?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn covariance_identity_rotation_unit_scale() {
        let cov = build_covariance(&Quat::IDENTITY, Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(*cov.matrix(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_axis_aligned_squares_scales() {
        let cov = build_covariance(&Quat::IDENTITY, Vector3::new(2.0, 1.0, 1.0)).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert_relative_eq!(*cov.matrix(), expected, epsilon = 1e-15);
    }

    #[test]
    fn covariance_z_rotation_matches_matrix_product_oracle() {
        // Oracle: explicit R·diag(s²)·Rᵀ with R for a 90° rotation about z.
        let q = Quat::from_axis_angle(Vector3::z(), FRAC_PI_2);
        let s = Vector3::new(2.0, 1.0, 1.0);
        let cov = build_covariance(&q, s).unwrap();

        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let oracle = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert_relative_eq!(*cov.matrix(), oracle, epsilon = 1e-12);
        assert_relative_eq!(
            *cov.matrix(),
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_rejects_bad_inputs() {
        assert!(build_covariance(&Quat::new(0.0, 0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0))
            .is_err());
        assert!(build_covariance(&Quat::IDENTITY, Vector3::new(f64::NAN, 1.0, 1.0)).is_err());
        assert!(build_covariance(&Quat::IDENTITY, Vector3::new(-1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn covariance_invariant_to_quaternion_sign() {
        let q = Quat::new(0.4, -0.3, 0.7, 0.2);
        let s = Vector3::new(0.5, 1.5, 2.5);
        let a = build_covariance(&q, s).unwrap();
        let b = build_covariance(&q.neg(), s).unwrap();
        // Entries are products of component pairs, so the sign cancels
        // bit-exactly.
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn covariance_trace_equals_scale_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() < 1e-3 {
                continue;
            }
            let s = Vector3::new(
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
            );
            let cov = build_covariance(&q, s).unwrap();
            let trace = cov.matrix().trace();
            let expected = s.x * s.x + s.y * s.y + s.z * s.z;
            assert_relative_eq!(trace, expected, max_relative = 1e-9);
        }
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let q = Quat::new(0.8, 0.1, -0.5, 0.3);
        let s = Vector3::new(0.01, 2.0, 0.7);
        let m = build_covariance(&q, s).unwrap().into_matrix();
        assert_relative_eq!(m, m.transpose(), epsilon = 1e-12);
        let eig = m.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn init_is_deterministic() {
        let bounds = Aabb::default();
        let cfg = InitConfig::default();
        let a = init_random_cloud(1000, &bounds, 7, &cfg).unwrap();
        let b = init_random_cloud(1000, &bounds, 7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = init_random_cloud(1000, &bounds, 8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_paper_scale_count() {
        let cloud =
            init_random_cloud(1_000_000, &Aabb::default(), 3, &InitConfig::default()).unwrap();
        assert_eq!(cloud.len(), 1_000_000);
        cloud.validate().unwrap();
    }

    #[test]
    fn init_rejects_degenerate_inputs() {
        let cfg = InitConfig::default();
        assert!(init_random_cloud(0, &Aabb::default(), 1, &cfg).is_err());
        let flat = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]);
        assert!(init_random_cloud(4, &flat, 1, &cfg).is_err());
    }

    #[test]
    fn activation_examples() {
        let cloud = GaussianCloud {
            positions: vec![Vector3::zeros()],
            rotations: vec![Quat::new(2.0, 0.0, 0.0, 0.0)],
            log_scales: vec![Vector3::zeros()],
            opacity_logits: vec![0.0],
            intensity: vec![1.7],
        };
        let act = activate(&cloud);
        assert_relative_eq!(act.opacities[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(act.scales[0], Vector3::new(1.0, 1.0, 1.0), epsilon = 1e-15);
        assert_relative_eq!(act.rotations[0].w, 1.0, epsilon = 1e-15);
        assert_eq!(act.intensities[0], 1.0);
    }

    #[test]
    fn activation_roundtrip() {
        let cloud = init_random_cloud(64, &Aabb::default(), 5, &InitConfig::default()).unwrap();
        let act = activate(&cloud);
        for i in 0..cloud.len() {
            assert_relative_eq!(
                logit(act.opacities[i]),
                cloud.opacity_logits[i],
                max_relative = 1e-9
            );
            for k in 0..3 {
                assert_relative_eq!(
                    act.scales[i][k].ln(),
                    cloud.log_scales[i][k],
                    max_relative = 1e-9,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn prune_drops_transparent_gaussians() {
        let mut cloud = GaussianCloud {
            positions: vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            rotations: vec![Quat::IDENTITY; 3],
            log_scales: vec![Vector3::zeros(); 3],
            opacity_logits: vec![logit(0.5), logit(0.001), logit(0.2)],
            intensity: vec![0.1, 0.2, 0.3],
        };
        let kept = cloud.prune_low_opacity(0.005);
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.intensity, vec![0.1, 0.3]);
    }

    #[test]
    fn params_roundtrip_is_byte_stable() {
        let cloud = init_random_cloud(37, &Aabb::default(), 9, &InitConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_cloud_params(&mut buf, &cloud).unwrap();
        let back = read_cloud_params(&mut buf.as_slice()).unwrap();
        assert_eq!(cloud, back);
        let mut buf2 = Vec::new();
        write_cloud_params(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }
}
