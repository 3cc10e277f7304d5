//! Run configuration: one JSON object covering data synthesis, training,
//! calibration, and evaluation. Unknown keys are rejected so a typo in
//! `prot` or `lambda` cannot silently run with defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pipeline::VoteRule;
use crate::protector::ThresholdMode;
use crate::scorer::{ScoreMode, ScorerConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Protector.
    pub prot: f64,
    pub threshold_mode: ThresholdMode,

    // Scorer and voting.
    pub mode: ScoreMode,
    pub lambda: f64,
    pub t_eval: usize,
    pub voters: usize,
    pub k: usize,
    pub vote_rule: VoteRule,

    // Noise schedule.
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // Denoiser architecture.
    pub hidden_dim: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    /// 0 selects a linear base classifier.
    pub base_hidden_dim: usize,

    // Optimization.
    pub epochs: usize,
    pub base_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    // Synthetic data.
    pub data_dim: usize,
    pub num_classes: usize,
    pub sigma: f64,
    pub mean_scale: f64,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    /// Explicit class means override the evenly spaced default.
    pub class_means: Option<Vec<Vec<f32>>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            prot: 0.95,
            threshold_mode: ThresholdMode::Absolute,
            mode: ScoreMode::Combined,
            lambda: 1.1,
            t_eval: 30,
            voters: 5,
            k: 5,
            vote_rule: VoteRule::Plurality,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden_dim: 256,
            time_embed_dim: 32,
            class_embed_dim: 16,
            base_hidden_dim: 0,
            epochs: 30,
            base_epochs: 5,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            data_dim: 16,
            num_classes: 2,
            sigma: 1.2,
            mean_scale: 1.0,
            n_train_per_class: 1000,
            n_test_per_class: 1000,
            class_means: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if !(0.0..=1.0).contains(&self.prot) || !self.prot.is_finite() {
            return fail(format!("prot must lie in [0, 1], got {}", self.prot));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.mode == ScoreMode::Combined && self.lambda < 1.0 {
            return fail(format!("combined mode requires lambda >= 1, got {}", self.lambda));
        }
        if self.t_max < 1 {
            return fail("t_max must be at least 1".into());
        }
        if self.t_eval < 1 || self.t_eval > self.t_max {
            return fail(format!(
                "t_eval must lie in [1, t_max={}], got {}",
                self.t_max, self.t_eval
            ));
        }
        if self.voters < 1 {
            return fail("voters must be at least 1".into());
        }
        if self.k < 1 {
            return fail("K must be at least 1".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ));
        }
        if self.hidden_dim < 1 || self.class_embed_dim < 1 {
            return fail("hidden_dim and class_embed_dim must be at least 1".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return fail(format!(
                "time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            ));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return fail(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if self.data_dim < 1 {
            return fail("data_dim must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !self.mean_scale.is_finite() {
            return fail(format!("mean_scale must be finite, got {}", self.mean_scale));
        }
        if self.n_train_per_class < 1 || self.n_test_per_class < 1 {
            return fail("n_train_per_class and n_test_per_class must be at least 1".into());
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.num_classes {
                return fail(format!(
                    "class_means has {} rows but num_classes is {}",
                    means.len(),
                    self.num_classes
                ));
            }
            if means.iter().any(|m| m.len() != self.data_dim) {
                return fail(format!("class_means rows must all have data_dim={} entries", self.data_dim));
            }
            if means.iter().flatten().any(|v| !v.is_finite()) {
                return fail("class_means entries must be finite".into());
            }
        }
        Ok(())
    }

    /// Explicit means if given, else class c sits at mean_scale * (1 - 2c/(C-1))
    /// along every axis: +scale for the first class down to -scale for the last.
    pub fn resolved_class_means(&self) -> Vec<Vec<f32>> {
        if let Some(means) = &self.class_means {
            return means.clone();
        }
        let c_max = (self.num_classes - 1) as f64;
        (0..self.num_classes)
            .map(|c| {
                let scale = (self.mean_scale * (1.0 - 2.0 * c as f64 / c_max)) as f32;
                vec![scale; self.data_dim]
            })
            .collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            t_eval: self.t_eval,
            lambda: self.lambda,
            mode: self.mode,
            k: self.k,
        }
    }

    pub fn denoiser_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            seed: self.seed,
            t_max: self.t_max,
        }
    }

    pub fn base_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.base_epochs,
            ..self.denoiser_train_config()
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
