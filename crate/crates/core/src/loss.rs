//! Event-supervision loss stack: log-gamma image, predicted accumulated
//! difference, linlog mapping, normalized event loss, D-SSIM, and the
//! combined objective, all with analytic gradients with respect to the
//! predicted difference frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// How integer event counts and predicted log-brightness differences are
/// brought into common units before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventUnitMode {
    /// Multiply event counts by the contrast threshold A (counts × A are
    /// log-brightness units).
    Threshold,
    /// Standardize both operands to zero mean and unit deviation; useful on
    /// real data with unknown A.
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Gamma applied before the log image.
    pub gamma: f64,
    /// Floor inside the log image.
    pub log_eps: f64,
    /// linlog threshold delineating the linear region.
    pub linlog_b: f64,
    /// Weight λ of the D-SSIM term.
    pub dssim_weight: f64,
    pub unit_mode: EventUnitMode,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Side length of the (odd) SSIM window.
    pub ssim_window: usize,
    /// Standard deviation of the SSIM window weights.
    pub ssim_sigma: f64,
    /// Dynamic range used for the SSIM stabilizers in the raw operation;
    /// the combined loss rescales its operands into [0,1] and uses 1.
    pub ssim_l_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 4.8,
            log_eps: 1e-5,
            linlog_b: 20.0,
            dssim_weight: 0.1,
            unit_mode: EventUnitMode::Threshold,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_l_range: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::invalid("log epsilon must be positive"));
        }
        if !(self.linlog_b > 1.0) {
            return Err(Error::invalid("linlog threshold must exceed 1"));
        }
        if !(self.dssim_weight >= 0.0) {
            return Err(Error::invalid("D-SSIM weight must be non-negative"));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::invalid("SSIM window must be odd and at least 3"));
        }
        if !(self.ssim_sigma > 0.0) || !(self.ssim_l_range > 0.0) {
            return Err(Error::invalid("SSIM sigma and range must be positive"));
        }
        Ok(())
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            k1: self.ssim_k1,
            k2: self.ssim_k2,
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            l_range: self.ssim_l_range,
        }
    }
}

/// Elementwise `ln(I^g + ε)`. Pixels must be non-negative.
pub fn log_image(image: &Grid, gamma: f64, eps: f64) -> Result<Grid> {
    if let Some(v) = image.values().iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "log image requires non-negative finite pixels, got {v}"
        )));
    }
    Ok(image.map(|v| (v.powf(gamma) + eps).ln()))
}

/// Elementwise d/dI of `ln(I^g + ε)`, i.e. `g·I^(g-1) / (I^g + ε)`.
pub fn log_image_grad_factor(image: &Grid, gamma: f64, eps: f64) -> Grid {
    image.map(|v| gamma * v.powf(gamma - 1.0) / (v.powf(gamma) + eps))
}

/// Predicted accumulated difference between two rendered frames:
/// `L(I_t) − L(I_{t−w})`.
pub fn predicted_diff(i_t: &Grid, i_tw: &Grid, gamma: f64, eps: f64) -> Result<Grid> {
    i_t.check_same_shape(i_tw, "predicted_diff")?;
    let a = log_image(i_t, gamma, eps)?;
    let b = log_image(i_tw, gamma, eps)?;
    let data = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x - y)
        .collect();
    Grid::from_vec(i_t.width(), i_t.height(), data)
}

/// Sensor response map: linear below the threshold, logarithmic above,
/// continuous at the joint. Defined for u ≥ 0.
pub fn linlog(u: f64, b: f64) -> f64 {
    if u < b {
        u * b.ln() / b
    } else {
        u.ln()
    }
}

/// Sign-symmetric extension of [`linlog`] for signed difference frames.
pub fn linlog_signed(u: f64, b: f64) -> f64 {
    if u < 0.0 {
        -linlog(-u, b)
    } else {
        linlog(u, b)
    }
}

/// Derivative of [`linlog_signed`].
pub fn linlog_signed_deriv(u: f64, b: f64) -> f64 {
    let a = u.abs();
    if a < b {
        b.ln() / b
    } else {
        1.0 / a
    }
}

/// Normalized L2 event loss: mean over pixels of the squared difference of
/// signed-linlog-mapped values; returns the loss and its gradient with
/// respect to `x`.
pub fn event_loss(x: &Grid, y: &Grid, b: f64) -> Result<(f64, Grid)> {
    x.check_same_shape(y, "event_loss")?;
    let n = x.len() as f64;
    let mut total = 0.0;
    let mut grad = Grid::zeros(x.width(), x.height());
    for i in 0..x.len() {
        let lx = linlog_signed(x.values()[i], b);
        let ly = linlog_signed(y.values()[i], b);
        let d = lx - ly;
        total += d * d;
        grad.values_mut()[i] = 2.0 * d * linlog_signed_deriv(x.values()[i], b) / n;
    }
    Ok((total / n, grad))
}

// ---------------------------------------------------------------------------
// SSIM

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    pub l_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
            l_range: 1.0,
        }
    }
}

fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut w = Vec::with_capacity(window * window);
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dx * dx + dy * dy) as f64;
            let v = (-r2 / (2.0 * sigma * sigma)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Gaussian-weighted windowed SSIM averaged over all positions where the
/// full window fits. Frames must be at least as large as the window.
pub fn ssim(x: &Grid, y: &Grid, params: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(x, y, params, None)?.0)
}

/// SSIM along with its gradients with respect to both inputs.
pub fn ssim_with_grad(x: &Grid, y: &Grid, params: &SsimParams) -> Result<(f64, Grid, Grid)> {
    let mut grads = (
        Grid::zeros(x.width(), x.height()),
        Grid::zeros(x.width(), x.height()),
    );
    let (value, _) = ssim_impl(x, y, params, Some(&mut grads))?;
    Ok((value, grads.0, grads.1))
}

fn ssim_impl(
    x: &Grid,
    y: &Grid,
    params: &SsimParams,
    mut grads: Option<&mut (Grid, Grid)>,
) -> Result<(f64, ())> {
    x.check_same_shape(y, "ssim")?;
    let win = params.window;
    if win < 3 || win % 2 == 0 {
        return Err(Error::invalid("SSIM window must be odd and at least 3"));
    }
    if x.width() < win || x.height() < win {
        return Err(Error::invalid(format!(
            "frame {}x{} smaller than SSIM window {win}",
            x.width(),
            x.height()
        )));
    }
    let weights = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * params.l_range).powi(2);
    let c2 = (params.k2 * params.l_range).powi(2);

    let nx = x.width() - win + 1;
    let ny = x.height() - win + 1;
    let k_count = (nx * ny) as f64;
    let mut total = 0.0;

    for wy in 0..ny {
        for wx in 0..nx {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut ex2 = 0.0;
            let mut ey2 = 0.0;
            let mut exy = 0.0;
            for dy in 0..win {
                for dx in 0..win {
                    let w = weights[dy * win + dx];
                    let xv = x.at(wx + dx, wy + dy);
                    let yv = y.at(wx + dx, wy + dy);
                    mu_x += w * xv;
                    mu_y += w * yv;
                    ex2 += w * (xv * xv);
                    ey2 += w * (yv * yv);
                    exy += w * (xv * yv);
                }
            }
            let var_x = ex2 - mu_x * mu_x;
            let var_y = ey2 - mu_y * mu_y;
            let cov_xy = exy - mu_x * mu_y;
            let a1 = 2.0 * (mu_x * mu_y) + c1;
            let a2 = 2.0 * cov_xy + c2;
            let b1 = mu_x * mu_x + mu_y * mu_y + c1;
            let b2 = var_x + var_y + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            if let Some(g) = grads.as_deref_mut() {
                // Partials of S with respect to the window statistics.
                let d_mu_x = 2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * s / b1;
                let d_mu_y = 2.0 * mu_x * a2 / (b1 * b2) - 2.0 * mu_y * s / b1;
                let d_var = -s / b2;
                let d_cov = 2.0 * a1 / (b1 * b2);
                for dy in 0..win {
                    for dx in 0..win {
                        let w = weights[dy * win + dx];
                        let xv = x.at(wx + dx, wy + dy);
                        let yv = y.at(wx + dx, wy + dy);
                        *g.0.at_mut(wx + dx, wy + dy) += (d_mu_x * w
                            + d_var * 2.0 * w * (xv - mu_x)
                            + d_cov * w * (yv - mu_y))
                            / k_count;
                        *g.1.at_mut(wx + dx, wy + dy) += (d_mu_y * w
                            + d_var * 2.0 * w * (yv - mu_y)
                            + d_cov * w * (xv - mu_x))
                            / k_count;
                    }
                }
            }
        }
    }
    Ok((total / k_count, ()))
}

/// Structural dissimilarity of two frames: returns the SSIM value and its
/// gradient with respect to `x`.
pub fn dssim(x: &Grid, y: &Grid, params: &SsimParams) -> Result<(f64, Grid)> {
    let (s, gx, _gy) = ssim_with_grad(x, y, params)?;
    Ok((s, gx))
}

// ---------------------------------------------------------------------------
// Combined objective

/// Loss terms and the gradient with respect to the predicted difference
/// frame. Invariant: `total = event_term + weight × dssim_term`.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub event_term: f64,
    /// `1 − SSIM` of the rescaled operands.
    pub dssim_term: f64,
    pub grad_e_pred: Grid,
}

/// `L_total = L_e + λ (1 − SSIM)` on unit-reconciled operands. The D-SSIM
/// term sees both frames affinely rescaled into [0,1] by a shared min/max;
/// its gradient chains through the rescaling, including the extremal
/// pixels.
pub fn total_loss(e_pred: &Grid, e_gt: &Grid, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    e_pred.check_same_shape(e_gt, "total_loss")?;
    let (event_term, grad_event) = event_loss(e_pred, e_gt, cfg.linlog_b)?;

    let lambda = cfg.dssim_weight;
    let (ssim_value, grad_ssim_x) = if lambda > 0.0 {
        rescaled_ssim(e_pred, e_gt, cfg)?
    } else {
        (1.0, Grid::zeros(e_pred.width(), e_pred.height()))
    };

    let dssim_term = 1.0 - ssim_value;
    let total = event_term + lambda * dssim_term;
    let mut grad = grad_event;
    for (g, gs) in grad.values_mut().iter_mut().zip(grad_ssim_x.values()) {
        *g -= lambda * gs;
    }
    Ok(LossReport {
        total,
        event_term,
        dssim_term,
        grad_e_pred: grad,
    })
}

/// SSIM of both operands rescaled into [0,1] by their joint min/max, and
/// its gradient with respect to `x`. Constant joint range yields SSIM 1
/// with zero gradient.
fn rescaled_ssim(x: &Grid, y: &Grid, cfg: &LossConfig) -> Result<(f64, Grid)> {
    let lo = x.min().min(y.min());
    let hi = x.max().max(y.max());
    let span = hi - lo;
    if !(span > 1e-12) {
        return Ok((1.0, Grid::zeros(x.width(), x.height())));
    }
    let u = x.map(|v| (v - lo) / span);
    let v = y.map(|w| (w - lo) / span);
    let mut params = cfg.ssim_params();
    params.l_range = 1.0;
    let (s, gu, gv) = ssim_with_grad(&u, &v, &params)?;

    // Direct term plus the lumped sensitivities through the shared min and
    // max, attributed to the first pixel attaining each extreme.
    let mut grad = Grid::zeros(x.width(), x.height());
    let mut g_lo = 0.0;
    let mut g_hi = 0.0;
    for i in 0..x.len() {
        grad.values_mut()[i] = gu.values()[i] / span;
        let xp = x.values()[i];
        let yp = y.values()[i];
        g_lo += (gu.values()[i] * (xp - hi) + gv.values()[i] * (yp - hi)) / (span * span);
        g_hi -= (gu.values()[i] * (xp - lo) + gv.values()[i] * (yp - lo)) / (span * span);
    }
    let x_has_lo = x.values().iter().position(|&v| v == lo);
    let y_has_lo = y.values().iter().position(|&v| v == lo);
    match (x_has_lo, y_has_lo) {
        (Some(i), _) => grad.values_mut()[i] += g_lo,
        (None, Some(_)) => {}
        (None, None) => {}
    }
    let x_has_hi = x.values().iter().position(|&v| v == hi);
    let y_has_hi = y.values().iter().position(|&v| v == hi);
    match (x_has_hi, y_has_hi) {
        (Some(i), _) => grad.values_mut()[i] += g_hi,
        (None, Some(_)) => {}
        (None, None) => {}
    }
    Ok((s, grad))
}

// ---------------------------------------------------------------------------
// Unit reconciliation

/// Reconciled operand pair plus what is needed to push gradients back to
/// the raw predicted frame.
#[derive(Debug, Clone)]
pub struct ReconciledOperands {
    pub x: Grid,
    pub y: Grid,
    mode: ReconcileBack,
}

#[derive(Debug, Clone)]
enum ReconcileBack {
    Identity,
    Standardize { std: f64 },
}

/// Brings the predicted difference and the accumulated event counts into
/// common units per the configured mode.
pub fn reconcile_operands(
    e_pred: &Grid,
    e_gt_counts: &Grid,
    threshold: f64,
    mode: EventUnitMode,
) -> Result<ReconciledOperands> {
    e_pred.check_same_shape(e_gt_counts, "reconcile_operands")?;
    match mode {
        EventUnitMode::Threshold => {
            if !(threshold > 0.0) {
                return Err(Error::invalid("contrast threshold must be positive"));
            }
            Ok(ReconciledOperands {
                x: e_pred.clone(),
                y: e_gt_counts.map(|c| c * threshold),
                mode: ReconcileBack::Identity,
            })
        }
        EventUnitMode::Standardize => {
            let (x, _, std) = standardize(e_pred);
            let (y, _, _) = standardize(e_gt_counts);
            Ok(ReconciledOperands {
                x,
                y,
                mode: ReconcileBack::Standardize { std },
            })
        }
    }
}

impl ReconciledOperands {
    /// Pushes a gradient with respect to the reconciled `x` back to the raw
    /// predicted frame.
    pub fn backward(&self, grad_x: &Grid) -> Grid {
        match self.mode {
            ReconcileBack::Identity => grad_x.clone(),
            ReconcileBack::Standardize { std } => {
                let n = grad_x.len() as f64;
                let g_mean = grad_x.mean();
                let gu: f64 = grad_x
                    .values()
                    .iter()
                    .zip(self.x.values())
                    .map(|(g, u)| g * u)
                    .sum::<f64>()
                    / n;
                let mut out = Grid::zeros(grad_x.width(), grad_x.height());
                for i in 0..grad_x.len() {
                    out.values_mut()[i] =
                        (grad_x.values()[i] - g_mean - self.x.values()[i] * gu) / std;
                }
                out
            }
        }
    }
}

fn standardize(g: &Grid) -> (Grid, f64, f64) {
    let mean = g.mean();
    let var = g.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g.len() as f64;
    let std = var.sqrt().max(1e-12);
    (g.map(|v| (v - mean) / std), mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, lo: f64, hi: f64, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(w, h, (0..w * h).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn log_image_scalar_values() {
        let ones = Grid::filled(2, 2, 1.0);
        let l = log_image(&ones, 4.8, 1e-5).unwrap();
        assert_relative_eq!(l.at(0, 0), (1.0f64 + 1e-5).ln(), epsilon = 1e-15);
        assert_relative_eq!(l.at(0, 0), 9.99995e-6, max_relative = 1e-5);

        let zeros = Grid::zeros(2, 2);
        let l = log_image(&zeros, 4.8, 1e-5).unwrap();
        assert_relative_eq!(l.at(1, 1), (1e-5f64).ln(), epsilon = 1e-15);
        assert_relative_eq!(l.at(1, 1), -11.5129, max_relative = 1e-5);
    }

    #[test]
    fn log_image_is_monotone() {
        let a = log_image(&Grid::filled(1, 1, 0.25), 4.8, 1e-5).unwrap();
        let b = log_image(&Grid::filled(1, 1, 0.75), 4.8, 1e-5).unwrap();
        assert!(a.at(0, 0) < b.at(0, 0));
    }

    #[test]
    fn log_image_rejects_negative_pixels() {
        let g = Grid::filled(1, 1, -0.1);
        assert!(log_image(&g, 4.8, 1e-5).is_err());
    }

    #[test]
    fn log_image_grad_matches_finite_differences() {
        let h = 1e-6;
        for &v in &[0.05, 0.3, 0.9] {
            let g = log_image_grad_factor(&Grid::filled(1, 1, v), 4.8, 1e-5).at(0, 0);
            let fp = log_image(&Grid::filled(1, 1, v + h), 4.8, 1e-5).unwrap().at(0, 0);
            let fm = log_image(&Grid::filled(1, 1, v - h), 4.8, 1e-5).unwrap().at(0, 0);
            assert_relative_eq!(g, (fp - fm) / (2.0 * h), max_relative = 1e-6);
        }
    }

    #[test]
    fn predicted_diff_basics() {
        let a = random_grid(4, 4, 0.0, 1.0, 1);
        let b = random_grid(4, 4, 0.0, 1.0, 2);
        let zero = predicted_diff(&a, &a, 4.8, 1e-5).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));

        let ab = predicted_diff(&a, &b, 4.8, 1e-5).unwrap();
        let ba = predicted_diff(&b, &a, 4.8, 1e-5).unwrap();
        for (u, v) in ab.values().iter().zip(ba.values()) {
            assert_relative_eq!(*u, -v, epsilon = 1e-15);
        }

        let one = Grid::filled(1, 1, 1.0);
        let zr = Grid::zeros(1, 1);
        let d = predicted_diff(&one, &zr, 4.8, 1e-5).unwrap();
        let expected = (1.0f64 + 1e-5).ln() - (1e-5f64).ln();
        assert_relative_eq!(d.at(0, 0), expected, epsilon = 1e-12);
        assert_relative_eq!(d.at(0, 0), 11.5129, max_relative = 1e-4);
    }

    #[test]
    fn linlog_scalar_values() {
        assert_eq!(linlog(0.0, 20.0), 0.0);
        let at_b = linlog(20.0, 20.0);
        assert_relative_eq!(at_b, 20.0f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(at_b, 2.9957, max_relative = 1e-4);
        let half = linlog(10.0, 20.0);
        assert_relative_eq!(half, 10.0 * 20.0f64.ln() / 20.0, epsilon = 1e-15);
        assert_relative_eq!(half, 1.4979, max_relative = 1e-4);
    }

    #[test]
    fn linlog_continuous_at_threshold() {
        let b = 20.0;
        let below = linlog(b - 1e-9, b);
        let at = linlog(b, b);
        assert!((below - at).abs() < 1e-9);
        // Branch values coincide at u = B to machine precision.
        assert!((b * b.ln() / b - b.ln()).abs() < 1e-12);
    }

    #[test]
    fn linlog_monotone_on_nonnegatives() {
        let b = 20.0;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..2000 {
            let u = i as f64 * 0.05;
            let v = linlog(u, b);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn event_loss_zero_iff_equal_and_symmetric() {
        let x = random_grid(6, 6, -30.0, 30.0, 3);
        let y = random_grid(6, 6, -30.0, 30.0, 4);
        let (zero, g) = event_loss(&x, &x, 20.0).unwrap();
        assert_eq!(zero, 0.0);
        assert!(g.values().iter().all(|&v| v == 0.0));

        let (xy, _) = event_loss(&x, &y, 20.0).unwrap();
        let (yx, _) = event_loss(&y, &x, 20.0).unwrap();
        assert_relative_eq!(xy, yx, epsilon = 1e-12);
        assert!(xy > 0.0);
    }

    #[test]
    fn event_loss_hand_evaluated_2x2() {
        // Frozen from the linlog scalar values: ℓ(0)=0, ℓ(10)=10·ln20/20,
        // ℓ(20)=ln20, ℓ(30)=ln30.
        let x = Grid::from_vec(2, 2, vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        let y = Grid::zeros(2, 2);
        let (val, _) = event_loss(&x, &y, 20.0).unwrap();
        let l10 = 1.4978661367769954f64;
        let l20 = 2.995732273553991f64;
        let l30 = 3.4011973816621555f64;
        let expected = (0.0 + l10 * l10 + l20 * l20 + l30 * l30) / 4.0;
        assert_relative_eq!(val, expected, epsilon = 1e-12);
    }

    #[test]
    fn event_loss_gradient_matches_finite_differences() {
        let x = random_grid(4, 4, -25.0, 25.0, 7);
        let y = random_grid(4, 4, -25.0, 25.0, 8);
        let (_, grad) = event_loss(&x, &y, 20.0).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            // Keep clear of the |u| = B kink where the derivative jumps.
            if (x.values()[i].abs() - 20.0).abs() < 1e-3 {
                continue;
            }
            let mut xp = x.clone();
            xp.values_mut()[i] += h;
            let mut xm = x.clone();
            xm.values_mut()[i] -= h;
            let (fp, _) = event_loss(&xp, &y, 20.0).unwrap();
            let (fm, _) = event_loss(&xm, &y, 20.0).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(grad.values()[i], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn ssim_of_identical_frames_is_exactly_one() {
        let x = random_grid(16, 16, 0.0, 1.0, 5);
        let s = ssim(&x, &x, &SsimParams::default()).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = random_grid(16, 16, 0.0, 1.0, 6);
        let y = random_grid(16, 16, 0.0, 1.0, 7);
        let p = SsimParams::default();
        assert_eq!(ssim(&x, &y, &p).unwrap(), ssim(&y, &x, &p).unwrap());
    }

    #[test]
    fn ssim_constant_frames_closed_form() {
        let (a, b) = (0.3, 0.7);
        let x = Grid::filled(16, 16, a);
        let y = Grid::filled(16, 16, b);
        let p = SsimParams::default();
        let s = ssim(&x, &y, &p).unwrap();
        let c1 = (p.k1 * p.l_range).powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert_relative_eq!(s, expected, epsilon = 1e-9);
    }

    #[test]
    fn ssim_stays_in_range() {
        for seed in 0..10 {
            let x = random_grid(16, 16, -5.0, 5.0, 100 + seed);
            let y = random_grid(16, 16, -5.0, 5.0, 200 + seed);
            let s = ssim(&x, &y, &SsimParams::default()).unwrap();
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s), "SSIM {s}");
        }
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let x = Grid::zeros(8, 8);
        assert!(ssim(&x, &x, &SsimParams::default()).is_err());
        let mut p = SsimParams::default();
        p.window = 7;
        assert!(ssim(&x, &x, &p).is_ok());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut p = SsimParams::default();
        p.window = 5;
        let x = random_grid(8, 8, 0.0, 1.0, 9);
        let y = random_grid(8, 8, 0.0, 1.0, 10);
        let (_, gx, gy) = ssim_with_grad(&x, &y, &p).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.values_mut()[i] += h;
            let mut xm = x.clone();
            xm.values_mut()[i] -= h;
            let fd = (ssim(&xp, &y, &p).unwrap() - ssim(&xm, &y, &p).unwrap()) / (2.0 * h);
            assert_relative_eq!(gx.values()[i], fd, max_relative = 1e-5, epsilon = 1e-9);

            let mut yp = y.clone();
            yp.values_mut()[i] += h;
            let mut ym = y.clone();
            ym.values_mut()[i] -= h;
            let fd = (ssim(&x, &yp, &p).unwrap() - ssim(&x, &ym, &p).unwrap()) / (2.0 * h);
            assert_relative_eq!(gy.values()[i], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn total_loss_vanishes_on_equal_inputs() {
        let mut cfg = LossConfig::default();
        cfg.ssim_window = 7;
        let x = random_grid(8, 8, -10.0, 10.0, 11);
        let report = total_loss(&x, &x, &cfg).unwrap();
        assert_eq!(report.event_term, 0.0);
        assert_eq!(report.dssim_term, 0.0);
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn total_loss_weight_zero_reduces_to_event_term() {
        let mut cfg = LossConfig::default();
        cfg.ssim_window = 7;
        cfg.dssim_weight = 0.0;
        let x = random_grid(8, 8, -10.0, 10.0, 12);
        let y = random_grid(8, 8, -10.0, 10.0, 13);
        let report = total_loss(&x, &y, &cfg).unwrap();
        let (le, _) = event_loss(&x, &y, cfg.linlog_b).unwrap();
        assert_eq!(report.total, le);
    }

    #[test]
    fn dssim_term_bounded() {
        let mut cfg = LossConfig::default();
        cfg.ssim_window = 7;
        for seed in 0..8 {
            let x = random_grid(8, 8, -10.0, 10.0, 300 + seed);
            let y = random_grid(8, 8, -10.0, 10.0, 400 + seed);
            let report = total_loss(&x, &y, &cfg).unwrap();
            assert!(report.dssim_term >= -1e-12 && report.dssim_term <= 2.0 + 1e-12);
            assert_relative_eq!(
                report.total,
                report.event_term + cfg.dssim_weight * report.dssim_term,
                epsilon = 1e-15
            );
        }
    }

    /// Draws a frame whose extremes are unique with a clear gap so central
    /// differences at the extremal pixels stay one-sided-kink free.
    fn fd_safe_grid(w: usize, h: usize, seed: u64) -> Grid {
        let mut attempt = 0;
        loop {
            let g = random_grid(w, h, -30.0, 30.0, seed + 1000 * attempt);
            let mut sorted: Vec<f64> = g.values().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let gap_low = sorted[1] - sorted[0];
            let gap_high = sorted[sorted.len() - 1] - sorted[sorted.len() - 2];
            let near_kink = g.values().iter().any(|v| (v.abs() - 20.0).abs() < 1e-3);
            if gap_low > 1e-3 && gap_high > 1e-3 && !near_kink {
                return g;
            }
            attempt += 1;
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut cfg = LossConfig::default();
        cfg.ssim_window = 7;
        for seed in 0..5 {
            let x = fd_safe_grid(8, 8, 500 + seed);
            let y = fd_safe_grid(8, 8, 600 + seed);
            let report = total_loss(&x, &y, &cfg).unwrap();
            let h = 1e-5;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.values_mut()[i] += h;
                let mut xm = x.clone();
                xm.values_mut()[i] -= h;
                let fp = total_loss(&xp, &y, &cfg).unwrap().total;
                let fm = total_loss(&xm, &y, &cfg).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let a = report.grad_e_pred.values()[i];
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-4),
                    "seed {seed} pixel {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn reconcile_threshold_scales_counts() {
        let e_pred = random_grid(4, 4, -1.0, 1.0, 14);
        let counts = Grid::from_vec(4, 4, (0..16).map(|i| i as f64 - 8.0).collect()).unwrap();
        let ops =
            reconcile_operands(&e_pred, &counts, 0.25, EventUnitMode::Threshold).unwrap();
        assert_eq!(ops.x, e_pred);
        for (c, y) in counts.values().iter().zip(ops.y.values()) {
            assert_eq!(*y, c * 0.25);
        }
        let g = random_grid(4, 4, -1.0, 1.0, 15);
        assert_eq!(ops.backward(&g), g);
    }

    #[test]
    fn reconcile_standardize_backward_matches_finite_differences() {
        let e_pred = random_grid(4, 4, -2.0, 3.0, 16);
        let counts = random_grid(4, 4, -5.0, 5.0, 17);
        // Scalar functional: sum of squares of the standardized frame times
        // arbitrary weights.
        let wts = random_grid(4, 4, -1.0, 1.0, 18);
        let f = |inp: &Grid| -> f64 {
            let ops =
                reconcile_operands(inp, &counts, 0.25, EventUnitMode::Standardize).unwrap();
            ops.x
                .values()
                .iter()
                .zip(wts.values())
                .map(|(v, w)| v * v * w)
                .sum()
        };
        let ops = reconcile_operands(&e_pred, &counts, 0.25, EventUnitMode::Standardize).unwrap();
        let mut grad_x = Grid::zeros(4, 4);
        for i in 0..16 {
            grad_x.values_mut()[i] = 2.0 * ops.x.values()[i] * wts.values()[i];
        }
        let grad = ops.backward(&grad_x);
        let h = 1e-6;
        for i in 0..16 {
            let mut p = e_pred.clone();
            p.values_mut()[i] += h;
            let mut m = e_pred.clone();
            m.values_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert_relative_eq!(grad.values()[i], fd, max_relative = 1e-4, epsilon = 1e-8);
        }
    }
}
