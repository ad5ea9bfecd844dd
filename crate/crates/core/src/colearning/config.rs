use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{bail, Result};
use crate::objectives::LossWeights;

/// How branch masks are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Attention-ranked tube masks (high for H, low for L).
    Informed,
    /// An independent random patch set per frame.
    Random,
    /// One random patch set over a sampled tube.
    RandomTube,
}

/// Synthetic corpus used when no dataset directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub count: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { count: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub data: DataSpec,
    pub batch_size: usize,
    pub steps: u64,
    /// Cosine schedule length; defaults to `steps`.
    pub horizon: Option<u64>,
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub r_h: f64,
    pub r_l: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub strategy: MaskStrategy,
    pub h_branch: bool,
    pub l_branch: bool,
    /// Four updates per step (targets, H, L, adversarial) instead of one.
    pub sequential_branches: bool,
    pub grl_lambda: f64,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            data: DataSpec::default(),
            batch_size: 16,
            steps: 300,
            horizon: None,
            lr_backbone: 3e-4,
            lr_new: 3e-4,
            r_h: 0.7,
            r_l: 0.5,
            weights: LossWeights::default(),
            seed: 0,
            strategy: MaskStrategy::Informed,
            h_branch: true,
            l_branch: true,
            sequential_branches: false,
            grl_lambda: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        for (name, r) in [("r_h", self.r_h), ("r_l", self.r_l)] {
            if !(0.0..=1.0).contains(&r) {
                bail!(Config, "{name} = {r} outside [0, 1]");
            }
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_new", self.lr_new)] {
            if !(lr.is_finite() && lr >= 0.0) {
                bail!(Config, "{name} = {lr} must be finite and non-negative");
            }
        }
        if !(self.grl_lambda > 0.0 && self.grl_lambda.is_finite()) {
            bail!(Config, "grl_lambda must be positive");
        }
        if self.horizon == Some(0) {
            bail!(Config, "horizon must be positive");
        }
        Ok(())
    }

    pub fn horizon(&self) -> u64 {
        self.horizon.unwrap_or(self.steps).max(1)
    }

    /// Whether the H and L branches contribute anything this run.
    pub fn active_branches(&self) -> (bool, bool) {
        let w = &self.weights;
        (self.h_branch && w.alpha > 0.0, self.l_branch && (w.beta > 0.0 || w.gamma > 0.0))
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}
