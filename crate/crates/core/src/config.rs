//! Aggregate run configuration: one JSON document covering scene
//! initialization, camera/dataset fabrication, event simulation, loss, the
//! trainer, and evaluation. Unknown keys are rejected on load; defaults
//! follow the published hyperparameters where they exist.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::math::fnv1a64;
use crate::scene::{Aabb, InitConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub events: EventSimConfig,
    pub loss: LossConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Number of Gaussians in the initial cloud.
    pub n_points: usize,
    pub bounds: Aabb,
    pub init: InitConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 1_000_000,
            bounds: Aabb::default(),
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fov_x_degrees: f64,
    pub orbit_radius: f64,
    pub orbit_elevation_degrees: f64,
    pub n_poses: usize,
    pub duration_us: u64,
    pub target: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            fov_x_degrees: 50.0,
            orbit_radius: 4.0,
            orbit_elevation_degrees: 20.0,
            n_poses: 1000,
            duration_us: 1_000_000,
            target: [0.0, 0.0, 0.0],
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.fov_x_degrees.to_radians())
    }

    pub fn target_vector(&self) -> Vector3<f64> {
        Vector3::new(self.target[0], self.target[1], self.target[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSimConfig {
    /// Contrast threshold A in log-brightness units.
    pub threshold: f64,
}

impl Default for EventSimConfig {
    fn default() -> Self {
        Self { threshold: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Every k-th trajectory pose is held out of training windows and used
    /// for evaluation.
    pub holdout_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { holdout_every: 10 }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scene.n_points == 0 {
            return Err(Error::invalid("scene.n_points must be at least 1"));
        }
        if !(self.scene.bounds.volume() > 0.0) {
            return Err(Error::invalid("scene.bounds must have positive volume"));
        }
        if self.camera.n_poses < 2 {
            return Err(Error::invalid("camera.n_poses must be at least 2"));
        }
        if !(self.events.threshold > 0.0) {
            return Err(Error::invalid("events.threshold must be positive"));
        }
        if self.eval.holdout_every == 1 {
            return Err(Error::invalid(
                "eval.holdout_every = 1 would hold out every pose",
            ));
        }
        self.camera.intrinsics()?;
        self.loss.validate()?;
        self.trainer.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            record: 0,
            message: format!("config: {e}"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Fingerprint of the canonical JSON form, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
