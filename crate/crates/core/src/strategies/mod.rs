//! Continual-learning regimes over a stream of encoded tasks.
//!
//! Every strategy trains on one task at a time, is evaluated on the test sets
//! of all tasks seen so far after each stage, and finally on held-out OOD
//! tasks.

mod casam;
mod emr;
mod eval;
mod l2p;
mod sequential;
mod store;

use std::fmt;
use std::str::FromStr;

use casam_tensor::derive_seed;
use serde::{Deserialize, Serialize};

use crate::alignment::TrainConfig;
use crate::bench::FrozenBackbone;
use crate::data::EncodedTask;
use crate::error::{CoreError, Result};
use crate::metrics::StageMetrics;
use crate::router::{RouterConfig, RouterPool};

pub use casam::{run_casam, run_moda, AdapterCache, CasamOutcome, TaskClassifier};
pub use emr::{elect, merged_for_task, TaskVector};
pub use eval::{evaluate_ood, evaluate_stage, evaluate_task, Aligner, OodScore};
pub use l2p::{key_match_loss, run_l2p, PromptPool};
pub use sequential::{empirical_fisher, ewc_penalty, run_der, run_er, run_ewc, run_joint, run_lwf, run_naive};
pub use store::{InsertionPolicy, MemoryBank, MemoryItem, TaskStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Naive,
    Lwf,
    Ewc,
    Er,
    Der,
    L2p,
    Moda,
    Emr,
    Casam,
    Joint,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::Naive,
        StrategyKind::Lwf,
        StrategyKind::Ewc,
        StrategyKind::Er,
        StrategyKind::Der,
        StrategyKind::L2p,
        StrategyKind::Moda,
        StrategyKind::Emr,
        StrategyKind::Casam,
        StrategyKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Er => "er",
            StrategyKind::Der => "der",
            StrategyKind::L2p => "l2p",
            StrategyKind::Moda => "moda",
            StrategyKind::Emr => "emr",
            StrategyKind::Casam => "casam",
            StrategyKind::Joint => "joint",
        }
    }

    /// Whether the regime works without revisiting past training samples.
    pub fn exemplar_free(self) -> bool {
        !matches!(
            self,
            StrategyKind::Er | StrategyKind::Der | StrategyKind::Moda | StrategyKind::Joint
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown strategy {:?}", s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    /// LwF weight on the logit-distillation term.
    pub lambda_distill: f64,
    /// EWC penalty weight.
    pub lambda_ewc: f64,
    /// ER, DER and MoDA memory size in samples.
    pub memory_capacity: usize,
    /// DER weight on the logit-replay term.
    pub der_alpha: f64,
    pub prompt_pool_size: usize,
    pub prompt_top_k: usize,
    /// MoDA classifier training.
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            lambda_distill: 1.0,
            lambda_ewc: 100.0,
            memory_capacity: 32,
            der_alpha: 0.5,
            prompt_pool_size: 12,
            prompt_top_k: 2,
            classifier_epochs: 100,
            classifier_lr: 1e-2,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_distill", self.lambda_distill),
            ("lambda_ewc", self.lambda_ewc),
            ("der_alpha", self.der_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Config(format!("strategy.{} must be >= 0, got {}", name, v)));
            }
        }
        if self.prompt_pool_size == 0 || self.prompt_top_k == 0 || self.prompt_top_k > self.prompt_pool_size {
            return Err(CoreError::Config(format!(
                "strategy prompt pool needs 0 < top_k <= pool size, got top_k {} of {}",
                self.prompt_top_k, self.prompt_pool_size
            )));
        }
        if !(self.classifier_lr.is_finite() && self.classifier_lr > 0.0) {
            return Err(CoreError::Config("strategy.classifier_lr must be positive".into()));
        }
        Ok(())
    }

    /// Seed for a strategy-specific purpose.
    pub fn seed_for(&self, kind: StrategyKind, purpose: &str) -> u64 {
        derive_seed(self.seed, &format!("{}/{}", kind.name(), purpose))
    }
}

/// Everything a strategy run needs besides the data.
#[derive(Debug, Clone)]
pub struct StrategyEnv<'a> {
    pub backbone: &'a FrozenBackbone,
    pub train: TrainConfig,
    pub n_blocks: usize,
    pub router: RouterConfig,
    pub strategy: StrategyConfig,
}

impl StrategyEnv<'_> {
    pub fn channels(&self) -> usize {
        self.backbone.feature_shape().0
    }
}

/// Outcome of one strategy over one stream.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub kind: StrategyKind,
    pub metrics: StageMetrics,
    /// CA-SAM evaluated with ground-truth task ids instead of the router.
    pub oracle_metrics: Option<StageMetrics>,
    pub ood: Vec<OodScore>,
    /// Reads of earlier tasks' training samples.
    pub past_reads: usize,
    pub trainable_parameters: usize,
    pub pool: Option<RouterPool>,
}

/// Collects per-stage scores; the routing log keeps only the final stage
/// plus the OOD pass.
pub(crate) struct Recorder<'a> {
    backbone: &'a FrozenBackbone,
    tasks: &'a [EncodedTask],
    pub metrics: StageMetrics,
}

impl<'a> Recorder<'a> {
    pub fn new(backbone: &'a FrozenBackbone, tasks: &'a [EncodedTask]) -> Self {
        Self {
            backbone,
            tasks,
            metrics: StageMetrics::default(),
        }
    }

    pub fn stage(&mut self, aligner: &dyn Aligner, seen: usize) -> Result<()> {
        let (scores, log) = evaluate_stage(self.backbone, aligner, self.tasks, seen)?;
        self.metrics.push_stage(scores);
        self.metrics.routing_log = log;
        Ok(())
    }

    pub fn finish(mut self, aligner: &dyn Aligner, ood: &[EncodedTask]) -> Result<(StageMetrics, Vec<OodScore>)> {
        let (scores, log) = evaluate_ood(self.backbone, aligner, ood)?;
        self.metrics.routing_log.extend(log);
        Ok((self.metrics, scores))
    }
}

/// Runs one strategy. `cache` shares per-task adapters between CA-SAM and
/// MoDA, which train them identically.
pub fn run_strategy(
    kind: StrategyKind,
    env: &StrategyEnv,
    tasks: &[EncodedTask],
    ood: &[EncodedTask],
    cache: &mut AdapterCache,
) -> Result<StrategyRun> {
    env.train.validate()?;
    env.strategy.validate()?;
    env.router.validate()?;
    if tasks.is_empty() {
        return Err(CoreError::invalid("a strategy needs at least one task"));
    }
    match kind {
        StrategyKind::Naive => run_naive(env, tasks, ood),
        StrategyKind::Lwf => run_lwf(env, tasks, ood),
        StrategyKind::Ewc => run_ewc(env, tasks, ood),
        StrategyKind::Er => run_er(env, tasks, ood),
        StrategyKind::Der => run_der(env, tasks, ood),
        StrategyKind::L2p => run_l2p(env, tasks, ood),
        StrategyKind::Moda => run_moda(env, tasks, ood, cache),
        StrategyKind::Emr => emr::run_emr(env, tasks, ood),
        StrategyKind::Casam => run_casam(env, tasks, ood, cache).map(|o| o.run),
        StrategyKind::Joint => run_joint(env, tasks, ood),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("bogus".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn exemplar_free_column() {
        let ef: Vec<&str> = StrategyKind::ALL
            .iter()
            .filter(|k| k.exemplar_free())
            .map(|k| k.name())
            .collect();
        assert_eq!(ef, ["naive", "lwf", "ewc", "l2p", "emr", "casam"]);
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::default().validate().is_ok());
        assert!(StrategyConfig { lambda_ewc: -1.0, ..StrategyConfig::default() }.validate().is_err());
        assert!(StrategyConfig { prompt_top_k: 13, ..StrategyConfig::default() }.validate().is_err());
    }
}
