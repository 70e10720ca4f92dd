//! Event-supervised 3D Gaussian splatting.
//!
//! The crate reconstructs a grayscale radiance field, represented as a cloud
//! of anisotropic 3D Gaussians, from nothing but a monocular event stream.
//! It ships the full pipeline:
//!
//! - [`scene`] — the learnable Gaussian cloud and covariance construction,
//! - [`camera`] — pinhole model, splat projection, and orbit trajectories,
//! - [`rasterizer`] — a differentiable CPU splatting renderer (forward and
//!   analytic backward),
//! - [`events`] — event data model, an idealized event-camera simulator, and
//!   window accumulation,
//! - [`loss`] — the event supervision stack (log-gamma images, linlog
//!   mapping, normalized event loss, D-SSIM),
//! - [`trainer`] — the Adam optimization loop with per-group learning rates,
//! - [`metrics`] — PSNR/SSIM evaluation against held-out ground truth.

pub mod camera;
pub mod config;
pub mod error;
pub mod events;
pub mod grid;
pub mod imageio;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod rasterizer;
pub mod scene;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::Grid;
