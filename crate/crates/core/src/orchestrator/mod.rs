//! Scenario runner, the method grid, metrics and the error-bound estimate.

mod bound;
mod metrics;
mod runner;

pub use bound::{
    compute_bound, estimate_c_star, estimate_kl_term, estimate_lambda, BoundEstimate, EnvBoundTerms,
    EnvFeatures, KlEstimate, ProbeConfig,
};
pub use metrics::{BoundLog, BoundRow, MetricsLog, MetricsRow, BOUND_HEADER, METRICS_HEADER};
pub use runner::{check_stream, run_scenario, RngState, Runner};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, SgdConfig};
use crate::error::{Error, Result};
use crate::inference::{GrlSchedule, InferenceConfig, Optimizers};
use crate::replay::LabelSource;

/// Rows of the component grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gfr,
    MemoryReplay,
    NoiseReplay,
    Baseline1Optimal,
    Baseline2,
    Baseline3,
    Baseline4Naive,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Gfr,
        Method::MemoryReplay,
        Method::NoiseReplay,
        Method::Baseline1Optimal,
        Method::Baseline2,
        Method::Baseline3,
        Method::Baseline4Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gfr => "gfr",
            Method::MemoryReplay => "memory_replay",
            Method::NoiseReplay => "noise_replay",
            Method::Baseline1Optimal => "baseline1_optimal",
            Method::Baseline2 => "baseline2",
            Method::Baseline3 => "baseline3",
            Method::Baseline4Naive => "baseline4_naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// `(replay, task_confusion, warmup, snapshot)` for this row.
    pub fn components(self) -> (ReplayKind, bool, bool, bool) {
        use ReplayKind::*;
        match self {
            Method::Gfr => (Generative, true, true, true),
            Method::MemoryReplay => (Memory, true, true, true),
            Method::NoiseReplay => (Noise, true, true, true),
            Method::Baseline1Optimal => (None, true, true, true),
            Method::Baseline2 => (None, true, false, true),
            Method::Baseline3 => (None, false, false, true),
            Method::Baseline4Naive => (None, false, false, false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayKind {
    None,
    Generative,
    Memory,
    Noise,
}

impl ReplayKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplayKind::None => "none",
            ReplayKind::Generative => "generative",
            ReplayKind::Memory => "memory",
            ReplayKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ReplayKind::None,
            ReplayKind::Generative,
            ReplayKind::Memory,
            ReplayKind::Noise,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

/// Architecture and objective settings that do not depend on the stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub solver_hidden: usize,
    pub beta: f64,
    pub kl_weight: f64,
    pub margin: f64,
    pub grl: GrlSchedule,
    pub class_prior: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            feature_dim: 32,
            hidden_dim: 64,
            solver_hidden: 64,
            beta: 1.0,
            kl_weight: 1.0,
            margin: 4.0,
            grl: GrlSchedule::default(),
            class_prior: true,
        }
    }
}

impl ModelConfig {
    pub fn inference(&self, input_dim: usize, conditions: usize, classes: usize) -> InferenceConfig {
        let mut c = InferenceConfig::new(input_dim, conditions, classes);
        c.latent_dim = self.latent_dim;
        c.feature_dim = self.feature_dim;
        c.hidden_dim = self.hidden_dim;
        c.beta = self.beta;
        c.kl_weight = self.kl_weight;
        c.margin = self.margin;
        c.grl = self.grl;
        c.class_prior = self.class_prior;
        c
    }
}

/// Settings for one run of one method on one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub replay: ReplayKind,
    pub task_confusion: bool,
    pub warmup: bool,
    pub snapshot: bool,
    pub with_encoder_snapshot: bool,
    pub train_solver_from_scratch_per_env: bool,
    pub warmup_steps: usize,
    pub steps_per_env: usize,
    pub batch_size: usize,
    /// Evaluation cadence in joint steps; boundaries are always evaluated.
    pub eval_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: Optimizers,
    pub label_source: LabelSource,
    pub memory_capacity: usize,
    /// Fraction of the current solver batch replaced by features generated
    /// from past snapshots.
    pub augment_ratio: f64,
    /// Estimate the error bound at every boundary.
    pub estimate_bound: bool,
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Component flags exactly as in the method grid, with defaults for the
    /// rest.
    pub fn new(method: Method) -> Self {
        let (replay, task_confusion, warmup, snapshot) = method.components();
        Self {
            method,
            replay,
            task_confusion,
            warmup,
            snapshot,
            with_encoder_snapshot: snapshot,
            train_solver_from_scratch_per_env: false,
            warmup_steps: 500,
            steps_per_env: 1000,
            batch_size: 32,
            eval_every: 50,
            seed: 0,
            model: ModelConfig::default(),
            optim: Optimizers {
                inference: AdamConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                heads: SgdConfig {
                    lr: 0.02,
                    ..Default::default()
                },
                solver: SgdConfig {
                    lr: 0.02,
                    ..Default::default()
                },
            },
            label_source: LabelSource::ClassPrior,
            memory_capacity: 64,
            augment_ratio: 0.0,
            estimate_bound: true,
            probe: ProbeConfig::default(),
        }
    }

    /// True when the flags differ from the method's grid row.
    pub fn is_ablation(&self) -> bool {
        (self.replay, self.task_confusion, self.warmup, self.snapshot) != self.method.components()
    }

    pub fn effective_warmup_steps(&self) -> usize {
        if self.warmup {
            self.warmup_steps
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.batch_size < 2 {
            return bad("run.batch_size", "must be at least 2 (batch normalization)");
        }
        if self.eval_every == 0 {
            return bad("run.eval_every", "must be positive");
        }
        if self.replay == ReplayKind::Generative && !self.snapshot {
            return bad("run.replay", "generative replay needs snapshots");
        }
        if self.with_encoder_snapshot && !self.snapshot {
            return bad("run.with_encoder_snapshot", "needs run.snapshot");
        }
        if self.augment_ratio != 0.0 && !self.snapshot {
            return bad("run.augment_ratio", "augmentation needs snapshots");
        }
        if !(0.0..=1.0).contains(&self.augment_ratio) {
            return bad("run.augment_ratio", "must lie in [0, 1]");
        }
        if self.label_source == LabelSource::ClassPrior
            && !self.model.class_prior
            && (self.replay == ReplayKind::Generative || self.augment_ratio > 0.0)
        {
            return bad(
                "run.label_source",
                "class_prior labels need run.model.class_prior = true",
            );
        }
        let m = &self.model;
        if m.latent_dim == 0 || m.feature_dim == 0 || m.hidden_dim == 0 || m.solver_hidden == 0 {
            return bad("run.model", "dimensions must be positive");
        }
        if m.beta < 0.0 || !m.beta.is_finite() {
            return bad("run.model.beta", "must be a nonnegative real");
        }
        if m.kl_weight < 0.0 || !m.kl_weight.is_finite() {
            return bad("run.model.kl_weight", "must be a nonnegative real");
        }
        if m.grl.horizon <= 0.0 || m.grl.amplitude < 0.0 {
            return bad("run.model.grl", "horizon must be positive and amplitude nonnegative");
        }
        for (key, lr) in [
            ("run.optim.inference.lr", self.optim.inference.lr),
            ("run.optim.heads.lr", self.optim.heads.lr),
            ("run.optim.solver.lr", self.optim.solver.lr),
        ] {
            if lr <= 0.0 || !lr.is_finite() {
                return bad(key, "learning rate must be positive");
            }
        }
        if self.probe.holdout_fraction <= 0.0 || self.probe.holdout_fraction >= 1.0 {
            return bad("run.probe.holdout_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_match_flags() {
        let c = RunConfig::new(Method::Baseline3);
        assert_eq!(
            (c.replay, c.task_confusion, c.warmup, c.snapshot),
            (ReplayKind::None, false, false, true)
        );
        assert!(!c.is_ablation());
        let c = RunConfig::new(Method::Baseline4Naive);
        assert!(!c.snapshot && !c.warmup && !c.task_confusion);
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()), Some(m));
            RunConfig::new(m).validate().unwrap();
        }
    }

    #[test]
    fn generative_replay_needs_snapshots() {
        let mut c = RunConfig::new(Method::Gfr);
        c.snapshot = false;
        c.with_encoder_snapshot = false;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "run.replay"));
    }
}
