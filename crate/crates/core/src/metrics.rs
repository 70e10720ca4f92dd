//! Image-quality evaluation against held-out ground-truth frames.

use serde::Serialize;

use crate::error::Result;
use crate::grid::Grid;
use crate::loss::{ssim as ssim_impl, SsimParams};

/// PSNR in dB for images in [0,1] (peak 1). Identical images produce the
/// infinite sentinel, which evaluation excludes from means.
pub fn psnr(x: &Grid, y: &Grid) -> Result<f64> {
    x.check_same_shape(y, "psnr")?;
    let mse = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Windowed SSIM with the shared default parameters (11×11 Gaussian
/// window, dynamic range 1).
pub fn ssim(x: &Grid, y: &Grid) -> Result<f64> {
    ssim_impl(x, y, &SsimParams::default())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub views: Vec<ViewScore>,
    /// Mean PSNR over views with finite PSNR; infinite if none are finite.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores paired (rendered, ground-truth) views.
pub fn evaluate_views(pairs: &[(Grid, Grid)]) -> Result<EvalReport> {
    let mut views = Vec::with_capacity(pairs.len());
    for (i, (render, gt)) in pairs.iter().enumerate() {
        views.push(ViewScore {
            view: i,
            psnr: psnr(render, gt)?,
            ssim: ssim(render, gt)?,
        });
    }
    Ok(report_from_views(views))
}

pub fn report_from_views(views: Vec<ViewScore>) -> EvalReport {
    let finite: Vec<f64> = views
        .iter()
        .map(|v| v.psnr)
        .filter(|p| p.is_finite())
        .collect();
    let mean_psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mean_ssim = if views.is_empty() {
        1.0
    } else {
        views.iter().map(|v| v.ssim).sum::<f64>() / views.len() as f64
    };
    EvalReport {
        views,
        mean_psnr,
        mean_ssim,
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,psnr,ssim\n");
        for v in &self.views {
            out.push_str(&format!("{},{},{}\n", v.view, v.psnr, v.ssim));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_psnr, self.mean_ssim));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>6}  {:>10}  {:>8}\n", "view", "psnr(dB)", "ssim"));
        for v in &self.views {
            out.push_str(&format!(
                "{:>6}  {:>10.3}  {:>8.4}\n",
                v.view, v.psnr, v.ssim
            ));
        }
        out.push_str(&format!(
            "{:>6}  {:>10.3}  {:>8.4}\n",
            "mean", self.mean_psnr, self.mean_ssim
        ));
        out
    }
}
