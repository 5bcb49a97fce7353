//! Run configuration: TOML sections with built-in defaults, file overrides,
//! then command-line overrides (applied by the CLI crate). Every run writes
//! its fully resolved configuration next to its outputs so results stay
//! attributable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub controller: ControllerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square image edge; power of two, at least 8 (the trunk halves it three times).
    pub image_size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Latent width shared by generator and discriminator.
    pub latent_dim: usize,
    /// Filter widths of the three conv stages, narrow to wide.
    pub widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 32, channels: 3, latent_dim: 64, widths: [32, 64, 128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Steps between checkpoint writes (also written at exit).
    pub checkpoint_interval: usize,
    /// Steps between metrics rows; 1 logs every step.
    pub metrics_interval: usize,
    /// Fraction of the dataset held out of training for evaluation.
    pub holdout_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 16,
            iterations: 2_000,
            learning_rate: 5e-5,
            seed: 1,
            checkpoint_interval: 1_000,
            metrics_interval: 1,
            holdout_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the generated-sample energy inside fake-side sums.
    pub alpha: f64,
    /// Weight on the latent-similarity term.
    pub beta: f64,
    /// Weight on the VAE reconstruction term inside composite losses.
    pub gamma: f64,
    /// Diversity factor: target ratio of fake-side losses to the real energy.
    pub eta: f64,
    /// Score the generated batch against the real batch instead of against
    /// its own reconstruction (the printed-formula reading; off by default).
    pub literal_fake_energy: bool,
    /// Use the printed error-signal sign (η·L_d − L_g + α·L_v) instead of
    /// the equilibrium-consistent η·L_d − (L_g + α·L_v); off by default.
    pub literal_error_sign: bool,
    /// Re-estimate the diversity factor each step from running loss means
    /// instead of keeping the configured constant; off by default.
    pub adaptive_eta: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.3,
            beta: 0.1,
            gamma: 0.1,
            eta: 0.5,
            literal_fake_energy: false,
            literal_error_sign: false,
            adaptive_eta: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Gain on the error itself (accumulates step over step).
    pub lambda_integral: f64,
    /// Gain on the error's first difference.
    pub lambda_proportional: f64,
    /// Gain on the error's second difference.
    pub lambda_derivative: f64,
    /// Starting value of the equilibrium gain k.
    pub initial_gain: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda_integral: 1e-3,
            lambda_proportional: 1e-5,
            lambda_derivative: 1e-5,
            initial_gain: 0.0,
        }
    }
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Config = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.image_size < 8 || !m.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two ≥ 8, got {}",
                m.image_size
            )));
        }
        if m.channels != 1 && m.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", m.channels)));
        }
        if m.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if m.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be positive, got {:?}", m.widths)));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if t.learning_rate <= 0.0 || t.learning_rate.is_nan() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", t.learning_rate)));
        }
        if t.checkpoint_interval == 0 || t.metrics_interval == 0 {
            return Err(Error::Config("checkpoint and metrics intervals must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&t.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                t.holdout_fraction
            )));
        }
        let l = &self.loss;
        for (name, v) in [("alpha", l.alpha), ("beta", l.beta), ("gamma", l.gamma)] {
            if v < 0.0 || v.is_nan() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(l.eta > 0.0 && l.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", l.eta)));
        }
        let c = &self.controller;
        for (name, v) in [
            ("lambda_integral", c.lambda_integral),
            ("lambda_proportional", c.lambda_proportional),
            ("lambda_derivative", c.lambda_derivative),
        ] {
            if v < 0.0 || v.is_nan() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&c.initial_gain) {
            return Err(Error::Config(format!("initial_gain must lie in [0, 1], got {}", c.initial_gain)));
        }
        Ok(())
    }

    /// Spatial edge of the trunk's innermost feature map.
    pub fn seed_extent(&self) -> usize {
        self.model.image_size / 8
    }
}
