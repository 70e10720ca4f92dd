//! Differentiable forward splatting and the analytic backward pass.
//!
//! The image is split into square tiles; visible Gaussians are depth-sorted
//! once (ties broken by storage index) and binned to the tiles their
//! footprint touches, so every tile walks its bin front-to-back. Tiles are
//! rendered in parallel and assembled in tile order, which makes results
//! independent of thread count. The backward pass recomputes the forward
//! walk per tile instead of storing per-pixel blend lists, accumulates
//! tile-local gradients, and reduces them in tile order.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{project_gaussian, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::Quat;
use crate::scene::{activate, build_covariance, GaussianCloud};

pub const TILE_SIZE: usize = 16;
/// Per-Gaussian opacity contribution ceiling.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Contributions with effective opacity below this are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Projected covariances with a larger condition number are skipped.
pub const MAX_CONDITION: f64 = 1e12;

/// Forward rendering output: grayscale intensities in [0,1] plus the final
/// per-pixel transmittance.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub pixels: Grid,
    pub transmittance: Grid,
    pub diagnostics: RenderDiagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    /// Behind the near plane or fully outside the image.
    pub culled: usize,
    /// Projected covariance too ill-conditioned to invert.
    pub skipped_singular: usize,
}

/// Gradient accumulation buffers, shape-matched to a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![Quat::new(0.0, 0.0, 0.0, 0.0); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            intensity: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|q| q.is_finite())
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
            && self.intensity.iter().all(|x| x.is_finite())
    }
}

/// One visible, depth-sorted splat.
struct Splat {
    index: usize,
    mean2d: Vector2<f64>,
    /// [Σ'₀₀, Σ'₀₁, Σ'₁₁] with blur floor.
    cov2d: [f64; 3],
    det: f64,
    depth: f64,
    view_pos: Vector3<f64>,
    radius: f64,
    alpha: f64,
    color: f64,
}

fn prepare_splats(
    cloud: &GaussianCloud,
    pose: &Pose,
    intr: &Intrinsics,
) -> Result<(Vec<Splat>, RenderDiagnostics)> {
    let act = activate(cloud);
    let mut splats = Vec::new();
    let mut diag = RenderDiagnostics::default();
    for i in 0..cloud.len() {
        let cov = build_covariance(&act.rotations[i], act.scales[i])?;
        let projected = project_gaussian(cloud.positions[i], &cov, pose, intr)?;
        let Some(p) = projected else {
            diag.culled += 1;
            continue;
        };
        let [a, b, c] = p.cov2d;
        let det = a * c - b * b;
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let lambda_min = mid - disc;
        let lambda_max = mid + disc;
        if !(det > 0.0) || lambda_min <= 0.0 || lambda_max / lambda_min > MAX_CONDITION {
            diag.skipped_singular += 1;
            continue;
        }
        splats.push(Splat {
            index: i,
            mean2d: p.mean2d,
            cov2d: p.cov2d,
            det,
            depth: p.depth,
            view_pos: p.view_pos,
            radius: p.radius,
            alpha: act.opacities[i],
            color: act.intensities[i],
        });
    }
    // Front-to-back; depth ties fall back to storage index (stable key).
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("depths are finite")
            .then(a.index.cmp(&b.index))
    });
    Ok((splats, diag))
}

/// Bins depth-sorted splats to tiles; each bin stays depth-sorted.
fn bin_splats(splats: &[Splat], intr: &Intrinsics) -> Vec<Vec<u32>> {
    let tiles_x = intr.width.div_ceil(TILE_SIZE);
    let tiles_y = intr.height.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x_lo = (s.mean2d.x - s.radius).floor().max(0.0) as usize;
        let x_hi = ((s.mean2d.x + s.radius).ceil() as isize).min(intr.width as isize - 1);
        let y_lo = (s.mean2d.y - s.radius).floor().max(0.0) as usize;
        let y_hi = ((s.mean2d.y + s.radius).ceil() as isize).min(intr.height as isize - 1);
        if x_hi < 0 || y_hi < 0 || x_lo >= intr.width || y_lo >= intr.height {
            continue;
        }
        let (x_hi, y_hi) = (x_hi as usize, y_hi as usize);
        for ty in y_lo / TILE_SIZE..=y_hi / TILE_SIZE {
            for tx in x_lo / TILE_SIZE..=x_hi / TILE_SIZE {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    bins
}

#[inline]
fn gaussian_weight(s: &Splat, px: f64, py: f64) -> f64 {
    let dx = px - s.mean2d.x;
    let dy = py - s.mean2d.y;
    let [a, b, c] = s.cov2d;
    let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / s.det;
    if q < 0.0 {
        return 0.0;
    }
    (-0.5 * q).exp()
}

/// Renders the cloud under Eq.-style front-to-back alpha compositing over a
/// black background.
pub fn render(cloud: &GaussianCloud, pose: &Pose, intr: &Intrinsics) -> Result<RenderedImage> {
    cloud.validate()?;
    intr.validate()?;
    let (splats, diagnostics) = prepare_splats(cloud, pose, intr)?;
    let bins = bin_splats(&splats, intr);
    let tiles_x = intr.width.div_ceil(TILE_SIZE);
    let tiles_y = intr.height.div_ceil(TILE_SIZE);

    struct TileOut {
        pixels: Vec<f64>,
        transmittance: Vec<f64>,
    }

    let tile_results: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let w = TILE_SIZE.min(intr.width - x0);
            let h = TILE_SIZE.min(intr.height - y0);
            let mut pixels = vec![0.0; w * h];
            let mut transmittance = vec![1.0; w * h];
            let bin = &bins[ti];
            for py in 0..h {
                for px in 0..w {
                    let fx = (x0 + px) as f64;
                    let fy = (y0 + py) as f64;
                    let mut t = 1.0f64;
                    let mut acc = 0.0f64;
                    for &si in bin {
                        let s = &splats[si as usize];
                        let alpha_eff = (s.alpha * gaussian_weight(s, fx, fy)).min(ALPHA_CLAMP);
                        if alpha_eff < ALPHA_SKIP {
                            continue;
                        }
                        acc += s.color * alpha_eff * t;
                        t *= 1.0 - alpha_eff;
                        if t < TRANSMITTANCE_STOP {
                            break;
                        }
                    }
                    pixels[py * w + px] = acc;
                    transmittance[py * w + px] = t;
                }
            }
            TileOut {
                pixels,
                transmittance,
            }
        })
        .collect();

    let mut pixels = Grid::zeros(intr.width, intr.height);
    let mut transmittance = Grid::filled(intr.width, intr.height, 1.0);
    for (ti, out) in tile_results.iter().enumerate() {
        let tx = ti % tiles_x;
        let ty = ti / tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let w = TILE_SIZE.min(intr.width - x0);
        for (row, chunk) in out.pixels.chunks_exact(w).enumerate() {
            for (col, &v) in chunk.iter().enumerate() {
                *pixels.at_mut(x0 + col, y0 + row) = v;
            }
        }
        for (row, chunk) in out.transmittance.chunks_exact(w).enumerate() {
            for (col, &v) in chunk.iter().enumerate() {
                *transmittance.at_mut(x0 + col, y0 + row) = v;
            }
        }
    }
    Ok(RenderedImage {
        pixels,
        transmittance,
        diagnostics,
    })
}

/// Per-splat gradients of screen-space quantities, accumulated per tile.
#[derive(Clone, Copy, Default)]
struct SplatGrad2d {
    mean2d: Vector2<f64>,
    cov: [f64; 3],
    alpha: f64,
    color: f64,
}

impl SplatGrad2d {
    fn new() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            cov: [0.0; 3],
            alpha: 0.0,
            color: 0.0,
        }
    }
}

/// Accumulates d(loss)/d(stored parameters) into `grads` for the given
/// upstream d(loss)/d(pixels). Must be called with the same cloud, pose,
/// and intrinsics as the matching forward render; Gaussians culled in the
/// forward pass receive zero gradient.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &Pose,
    intr: &Intrinsics,
    upstream: &Grid,
    grads: &mut CloudGradients,
) -> Result<()> {
    cloud.validate()?;
    intr.validate()?;
    if upstream.width() != intr.width || upstream.height() != intr.height {
        return Err(Error::invalid(format!(
            "upstream gradient {}x{} does not match image {}x{}",
            upstream.width(),
            upstream.height(),
            intr.width,
            intr.height
        )));
    }
    if grads.len() != cloud.len() {
        return Err(Error::invalid(
            "gradient buffers are not shape-matched to the cloud",
        ));
    }

    let (splats, _) = prepare_splats(cloud, pose, intr)?;
    let bins = bin_splats(&splats, intr);
    let tiles_x = intr.width.div_ceil(TILE_SIZE);
    let tiles_y = intr.height.div_ceil(TILE_SIZE);

    // Per-pixel contribution recorded on the forward walk.
    struct Contribution {
        local: usize,
        alpha_eff: f64,
        weight: f64,
        t_entry: f64,
        clamped: bool,
    }

    let tile_grads: Vec<Vec<SplatGrad2d>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let bin = &bins[ti];
            let mut local = vec![SplatGrad2d::new(); bin.len()];
            if bin.is_empty() {
                return local;
            }
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let w = TILE_SIZE.min(intr.width - x0);
            let h = TILE_SIZE.min(intr.height - y0);
            let mut contribs: Vec<Contribution> = Vec::with_capacity(bin.len());
            for py in 0..h {
                for px in 0..w {
                    let u = upstream.at(x0 + px, y0 + py);
                    let fx = (x0 + px) as f64;
                    let fy = (y0 + py) as f64;

                    // Forward walk, recording what compositing saw.
                    contribs.clear();
                    let mut t = 1.0f64;
                    for (li, &si) in bin.iter().enumerate() {
                        let s = &splats[si as usize];
                        let weight = gaussian_weight(s, fx, fy);
                        let raw = s.alpha * weight;
                        let clamped = raw > ALPHA_CLAMP;
                        let alpha_eff = raw.min(ALPHA_CLAMP);
                        if alpha_eff < ALPHA_SKIP {
                            continue;
                        }
                        contribs.push(Contribution {
                            local: li,
                            alpha_eff,
                            weight,
                            t_entry: t,
                            clamped,
                        });
                        t *= 1.0 - alpha_eff;
                        if t < TRANSMITTANCE_STOP {
                            break;
                        }
                    }
                    if u == 0.0 {
                        continue;
                    }

                    // Reverse walk: suffix holds the composited intensity
                    // behind the current contribution.
                    let mut suffix = 0.0f64;
                    for c in contribs.iter().rev() {
                        let s = &splats[bin[c.local] as usize];
                        let g2 = &mut local[c.local];
                        g2.color += u * c.alpha_eff * c.t_entry;
                        let d_alpha_eff =
                            u * (s.color * c.t_entry - suffix / (1.0 - c.alpha_eff));
                        suffix += s.color * c.alpha_eff * c.t_entry;
                        if c.clamped {
                            continue;
                        }
                        g2.alpha += d_alpha_eff * c.weight;
                        let d_weight = d_alpha_eff * s.alpha;
                        let d_q = -0.5 * c.weight * d_weight;

                        let dx = fx - s.mean2d.x;
                        let dy = fy - s.mean2d.y;
                        let [a, b, cc] = s.cov2d;
                        let det = s.det;
                        let n_quad = cc * dx * dx - 2.0 * b * dx * dy + a * dy * dy;
                        let det2 = det * det;
                        g2.cov[0] += d_q * (dy * dy * det - n_quad * cc) / det2;
                        g2.cov[1] += d_q * (-2.0 * dx * dy * det + 2.0 * b * n_quad) / det2;
                        g2.cov[2] += d_q * (dx * dx * det - n_quad * a) / det2;
                        let dq_ddx = (2.0 * cc * dx - 2.0 * b * dy) / det;
                        let dq_ddy = (-2.0 * b * dx + 2.0 * a * dy) / det;
                        g2.mean2d.x -= d_q * dq_ddx;
                        g2.mean2d.y -= d_q * dq_ddy;
                    }
                }
            }
            local
        })
        .collect();

    // Deterministic reduction in tile order.
    let mut per_splat = vec![SplatGrad2d::new(); splats.len()];
    for (ti, local) in tile_grads.iter().enumerate() {
        for (li, g) in local.iter().enumerate() {
            let si = bins[ti][li] as usize;
            let dst = &mut per_splat[si];
            dst.mean2d += g.mean2d;
            dst.cov[0] += g.cov[0];
            dst.cov[1] += g.cov[1];
            dst.cov[2] += g.cov[2];
            dst.alpha += g.alpha;
            dst.color += g.color;
        }
    }

    // Chain screen-space gradients back to the stored parameters.
    let act = activate(cloud);
    let w_mat = pose.rotation_matrix();
    for (s, g2) in splats.iter().zip(per_splat.iter()) {
        let i = s.index;

        // Intensity: clamp to [0,1] passes gradient only inside the
        // interval.
        let raw_c = cloud.intensity[i];
        if raw_c > 0.0 && raw_c < 1.0 {
            grads.intensity[i] += g2.color;
        }

        // Opacity through the sigmoid.
        grads.opacity_logits[i] += g2.alpha * s.alpha * (1.0 - s.alpha);

        let (tx, ty, tz) = (s.view_pos.x, s.view_pos.y, s.view_pos.z);
        let j1 = Vector3::new(intr.fx / tz, 0.0, -intr.fx * tx / (tz * tz));
        let j2 = Vector3::new(0.0, intr.fy / tz, -intr.fy * ty / (tz * tz));

        let cov3 = build_covariance(&act.rotations[i], act.scales[i])?;
        let m3 = w_mat * cov3.matrix() * w_mat.transpose();

        // dL/dM3 from the packed 2D covariance gradients.
        let d_m3 = g2.cov[0] * j1 * j1.transpose()
            + g2.cov[1] * j1 * j2.transpose()
            + g2.cov[2] * j2 * j2.transpose();

        // dL/dJ rows.
        let d_j1 = 2.0 * g2.cov[0] * (m3 * j1) + g2.cov[1] * (m3 * j2);
        let d_j2 = 2.0 * g2.cov[2] * (m3 * j2) + g2.cov[1] * (m3 * j1);

        // Camera-space mean gradient: projection of the 2D mean plus the
        // Jacobian's dependence on the mean.
        let mut d_view = Vector3::zeros();
        d_view.x += g2.mean2d.x * intr.fx / tz;
        d_view.y += g2.mean2d.y * intr.fy / tz;
        d_view.z +=
            -g2.mean2d.x * intr.fx * tx / (tz * tz) - g2.mean2d.y * intr.fy * ty / (tz * tz);
        d_view.x += d_j1.z * (-intr.fx / (tz * tz));
        d_view.y += d_j2.z * (-intr.fy / (tz * tz));
        d_view.z += d_j1.x * (-intr.fx / (tz * tz))
            + d_j1.z * (2.0 * intr.fx * tx / (tz * tz * tz))
            + d_j2.y * (-intr.fy / (tz * tz))
            + d_j2.z * (2.0 * intr.fy * ty / (tz * tz * tz));

        grads.positions[i] += w_mat.transpose() * d_view;

        // dL/dΣ (world) and on to rotation and log-scale.
        let d_sigma = w_mat.transpose() * d_m3 * w_mat;
        let q_unit = act.rotations[i];
        let r = q_unit.to_rotation_matrix();
        let scales = act.scales[i];
        let d_diag = Matrix3::from_diagonal(&Vector3::new(
            scales.x * scales.x,
            scales.y * scales.y,
            scales.z * scales.z,
        ));
        let d_r = (d_sigma + d_sigma.transpose()) * r * d_diag;
        let rt_g_r = r.transpose() * d_sigma * r;
        for k in 0..3 {
            grads.log_scales[i][k] += 2.0 * scales[k] * scales[k] * rt_g_r[(k, k)];
        }

        // Rotation matrix → unit quaternion → stored quaternion.
        let jac = q_unit.rotation_matrix_jacobian();
        let mut d_q_unit = [0.0f64; 4];
        for (k, dk) in jac.iter().enumerate() {
            d_q_unit[k] = d_r.component_mul(dk).sum();
        }
        let stored = cloud.rotations[i];
        let norm = stored.norm();
        let unit = [q_unit.w, q_unit.x, q_unit.y, q_unit.z];
        let dot: f64 = (0..4).map(|k| d_q_unit[k] * unit[k]).sum();
        let d_stored = [
            (d_q_unit[0] - unit[0] * dot) / norm,
            (d_q_unit[1] - unit[1] * dot) / norm,
            (d_q_unit[2] - unit[2] * dot) / norm,
            (d_q_unit[3] - unit[3] * dot) / norm,
        ];
        grads.rotations[i].w += d_stored[0];
        grads.rotations[i].x += d_stored[1];
        grads.rotations[i].y += d_stored[2];
        grads.rotations[i].z += d_stored[3];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics(size: usize) -> Intrinsics {
        let f = size as f64 * 1.2;
        Intrinsics::new(
            f,
            f,
            (size as f64 - 1.0) / 2.0,
            (size as f64 - 1.0) / 2.0,
            size,
            size,
        )
        .unwrap()
    }

    fn identity_pose() -> Pose {
        Pose::new(Quat::IDENTITY, Vector3::zeros(), 0)
    }

    /// One Gaussian placed on the optical axis so its projected mean lands
    /// exactly on a pixel center (odd-sized image).
    fn single_gaussian_cloud(size: usize, opacity_logit: f64, intensity: f64) -> GaussianCloud {
        GaussianCloud {
            positions: vec![Vector3::new(0.0, 0.0, 3.0)],
            rotations: vec![Quat::IDENTITY],
            log_scales: vec![Vector3::from_element(0.5f64.ln())],
            opacity_logits: vec![opacity_logit],
            intensity: vec![intensity],
        }
    }

    #[test]
    fn transparent_cloud_renders_black() {
        let cloud = single_gaussian_cloud(17, -30.0, 0.8);
        let img = render(&cloud, &identity_pose(), &test_intrinsics(17)).unwrap();
        assert!(img.pixels.values().iter().all(|&v| v == 0.0));
        assert!(img.transmittance.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_gaussian_center_pixel_is_intensity_times_alpha() {
        // Single-term compositing: pixel = c · α_eff. At the projected
        // center the kernel weight is exactly 1.
        let intr = test_intrinsics(17);
        let cx = intr.cx as usize;
        let cloud = single_gaussian_cloud(17, logit(0.6), 0.8);
        let img = render(&cloud, &identity_pose(), &intr).unwrap();
        assert_relative_eq!(img.pixels.at(cx, cx), 0.8 * 0.6, epsilon = 1e-12);
        assert_relative_eq!(img.transmittance.at(cx, cx), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn opaque_gaussian_hits_the_alpha_clamp() {
        // α → 1 is clamped to 0.99 before compositing.
        let intr = test_intrinsics(17);
        let cx = intr.cx as usize;
        let cloud = single_gaussian_cloud(17, 40.0, 0.8);
        let img = render(&cloud, &identity_pose(), &intr).unwrap();
        assert_relative_eq!(img.pixels.at(cx, cx), 0.8 * ALPHA_CLAMP, epsilon = 1e-12);
    }

    #[test]
    fn two_coincident_gaussians_composite_front_to_back() {
        // Front (c=1, α=0.5) over back (c=0, α=0.5): 1·0.5 + 0·0.5·0.5.
        let intr = test_intrinsics(17);
        let cx = intr.cx as usize;
        let cloud = GaussianCloud {
            positions: vec![Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 3.5)],
            rotations: vec![Quat::IDENTITY; 2],
            log_scales: vec![Vector3::from_element(0.5f64.ln()); 2],
            opacity_logits: vec![logit(0.5); 2],
            intensity: vec![1.0, 0.0],
        };
        let img = render(&cloud, &identity_pose(), &intr).unwrap();
        assert_relative_eq!(img.pixels.at(cx, cx), 0.5, epsilon = 1e-12);
        assert_relative_eq!(img.transmittance.at(cx, cx), 0.25, epsilon = 1e-12);
    }

    fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianCloud {
            positions: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.6..0.6),
                        rng.gen_range(-0.6..0.6),
                        rng.gen_range(2.0..4.0),
                    )
                })
                .collect(),
            rotations: (0..n)
                .map(|_| {
                    Quat::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalized()
                })
                .collect(),
            log_scales: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-2.5..-1.2),
                        rng.gen_range(-2.5..-1.2),
                        rng.gen_range(-2.5..-1.2),
                    )
                })
                .collect(),
            opacity_logits: (0..n).map(|_| rng.gen_range(-2.0..0.0)).collect(),
            intensity: (0..n).map(|_| rng.gen_range(0.15..0.85)).collect(),
        }
    }

    #[test]
    fn rendering_is_invariant_to_storage_order() {
        let cloud = random_cloud(30, 41);
        let intr = test_intrinsics(32);
        let pose = identity_pose();
        let base = render(&cloud, &pose, &intr).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted = GaussianCloud {
            positions: perm.iter().map(|&i| cloud.positions[i]).collect(),
            rotations: perm.iter().map(|&i| cloud.rotations[i]).collect(),
            log_scales: perm.iter().map(|&i| cloud.log_scales[i]).collect(),
            opacity_logits: perm.iter().map(|&i| cloud.opacity_logits[i]).collect(),
            intensity: perm.iter().map(|&i| cloud.intensity[i]).collect(),
        };
        let shuffled = render(&permuted, &pose, &intr).unwrap();
        assert_eq!(base.pixels, shuffled.pixels);
        assert_eq!(base.transmittance, shuffled.transmittance);
    }

    #[test]
    fn compositing_invariants_hold() {
        for seed in 0..5 {
            let cloud = random_cloud(25, 60 + seed);
            let intr = test_intrinsics(32);
            let img = render(&cloud, &identity_pose(), &intr).unwrap();
            for i in 0..img.pixels.len() {
                let p = img.pixels.values()[i];
                let t = img.transmittance.values()[i];
                assert!((0.0..=1.0).contains(&p), "pixel {p}");
                assert!((0.0..=1.0).contains(&t), "transmittance {t}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cloud = random_cloud(10, 5);
        let intr = test_intrinsics(16);
        let mut grads = CloudGradients::zeros(cloud.len());
        render_backward(
            &cloud,
            &identity_pose(),
            &intr,
            &Grid::zeros(16, 16),
            &mut grads,
        )
        .unwrap();
        assert_eq!(grads, CloudGradients::zeros(cloud.len()));
    }

    #[test]
    fn intensity_gradient_is_effective_opacity() {
        let intr = test_intrinsics(17);
        let cx = intr.cx as usize;
        let cloud = single_gaussian_cloud(17, logit(0.6), 0.5);
        let mut upstream = Grid::zeros(17, 17);
        *upstream.at_mut(cx, cx) = 1.0;
        let mut grads = CloudGradients::zeros(1);
        render_backward(&cloud, &identity_pose(), &intr, &upstream, &mut grads).unwrap();
        assert_relative_eq!(grads.intensity[0], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let cloud = random_cloud(4, 2);
        let intr = test_intrinsics(16);
        let mut grads = CloudGradients::zeros(4);
        assert!(render_backward(
            &cloud,
            &identity_pose(),
            &intr,
            &Grid::zeros(8, 8),
            &mut grads
        )
        .is_err());
    }

    /// Scalar functional of the image with fixed random weights, used by
    /// the finite-difference checks.
    fn functional(cloud: &GaussianCloud, pose: &Pose, intr: &Intrinsics, wts: &Grid) -> f64 {
        let img = render(cloud, pose, intr).unwrap();
        img.pixels
            .values()
            .iter()
            .zip(wts.values())
            .map(|(p, w)| p * w)
            .sum()
    }

    fn perturbed(cloud: &GaussianCloud, param: usize, gaussian: usize, h: f64) -> GaussianCloud {
        let mut c = cloud.clone();
        match param {
            0..=2 => c.positions[gaussian][param] += h,
            3 => c.rotations[gaussian].w += h,
            4 => c.rotations[gaussian].x += h,
            5 => c.rotations[gaussian].y += h,
            6 => c.rotations[gaussian].z += h,
            7..=9 => c.log_scales[gaussian][param - 7] += h,
            10 => c.opacity_logits[gaussian] += h,
            _ => c.intensity[gaussian] += h,
        }
        c
    }

    #[test]
    fn gradients_match_finite_differences() {
        let intr = test_intrinsics(16);
        let pose = Pose::look_at(Vector3::new(0.1, -0.2, -0.1), Vector3::new(0.0, 0.0, 3.0), 0)
            .unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for seed in [7u64, 19, 31] {
            let cloud = random_cloud(6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let wts = Grid::from_vec(
                16,
                16,
                (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();

            let mut grads = CloudGradients::zeros(cloud.len());
            render_backward(&cloud, &pose, &intr, &wts, &mut grads).unwrap();

            for gi in 0..cloud.len() {
                for param in 0..12 {
                    let fp = functional(&perturbed(&cloud, param, gi, h), &pose, &intr, &wts);
                    let fm = functional(&perturbed(&cloud, param, gi, -h), &pose, &intr, &wts);
                    let fd = (fp - fm) / (2.0 * h);
                    let analytic = match param {
                        0..=2 => grads.positions[gi][param],
                        3 => grads.rotations[gi].w,
                        4 => grads.rotations[gi].x,
                        5 => grads.rotations[gi].y,
                        6 => grads.rotations[gi].z,
                        7..=9 => grads.log_scales[gi][param - 7],
                        10 => grads.opacity_logits[gi],
                        _ => grads.intensity[gi],
                    };
                    let tol = 1e-4 * analytic.abs().max(fd.abs()).max(1e-2);
                    assert!(
                        (analytic - fd).abs() <= tol,
                        "seed {seed} gaussian {gi} param {param}: analytic {analytic} vs fd {fd}"
                    );
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 3 * 6 * 12);
    }
}
