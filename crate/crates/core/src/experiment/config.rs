use std::fs;
use std::path::{Path, PathBuf};

use casam_tensor::derive_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::TrainConfig;
use crate::bench::{validate_stream, BroadSpec, PretrainConfig, TaskSpec, FULL_SHIFT};
use crate::error::{CoreError, Result};
use crate::router::RouterConfig;
use crate::strategies::{StrategyConfig, StrategyKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides the output directory.
pub const ENV_OUTPUT_DIR: &str = "CASAM_OUTPUT_DIR";
/// Overrides the number of parallel strategy workers.
pub const ENV_THREADS: &str = "CASAM_THREADS";

/// Which catalogue domains form the stream and the held-out OOD set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Catalogue indices in training order.
    pub tasks: Vec<usize>,
    /// Catalogue indices never trained on.
    pub ood: Vec<usize>,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Blend from the reference texture toward each domain (1.0 = full).
    pub shift: f64,
    pub master_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: vec![0, 1, 2],
            ood: vec![3, 6],
            train_per_task: 96,
            test_per_task: 40,
            shift: FULL_SHIFT,
            master_seed: 7,
        }
    }
}

impl StreamConfig {
    /// Specs of the stream tasks followed by the OOD tasks. A domain's seed
    /// depends only on its catalogue index, so reordering `tasks` leaves
    /// every task's data unchanged.
    pub fn specs(&self) -> (Vec<TaskSpec>, Vec<TaskSpec>) {
        let spec = |&i: &usize| TaskSpec::preset(i, self.shift, derive_seed(self.master_seed, &format!("preset/{}", i)));
        (self.tasks.iter().map(spec).collect(), self.ood.iter().map(spec).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(CoreError::Config("stream.tasks must name at least one domain".into()));
        }
        if self.train_per_task < 2 || self.test_per_task == 0 {
            return Err(CoreError::Config(
                "stream needs at least 2 training and 1 test sample per task".into(),
            ));
        }
        if !(self.shift.is_finite() && (0.0..=1.0).contains(&self.shift)) {
            return Err(CoreError::Config(format!("stream.shift must lie in [0, 1], got {}", self.shift)));
        }
        let mut all: Vec<usize> = self.tasks.iter().chain(&self.ood).copied().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Config("stream tasks and OOD domains must be distinct".into()));
        }
        let (tasks, ood) = self.specs();
        validate_stream(&tasks.into_iter().chain(ood).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub seed: u64,
    pub broad: BroadSpec,
    pub pretrain: PretrainConfig,
    /// Where pretrained backbones are cached by content hash.
    pub cache_dir: PathBuf,
    /// When false, a missing cache entry is an error instead of a
    /// pretraining run.
    pub allow_pretrain: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            broad: BroadSpec::default(),
            pretrain: PretrainConfig::default(),
            cache_dir: PathBuf::from("cache"),
            allow_pretrain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub output_dir: PathBuf,
    /// Parallel strategy workers; each is single-threaded.
    pub jobs: usize,
    pub stream: StreamConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    /// Channel-attention residual blocks per alignment layer.
    pub n_blocks: usize,
    pub router: RouterConfig,
    pub strategies: Vec<StrategyKind>,
    pub strategy: StrategyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            output_dir: PathBuf::from("runs/default"),
            jobs: 1,
            stream: StreamConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            n_blocks: 4,
            router: RouterConfig::default(),
            strategies: StrategyKind::ALL.to_vec(),
            strategy: StrategyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CoreError::Config(format!(
                "config schema version {} is not supported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.jobs == 0 {
            return Err(CoreError::Config("jobs must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(CoreError::Config("n_blocks must be positive".into()));
        }
        let mut kinds = self.strategies.clone();
        kinds.sort_unstable();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Config("strategies must not repeat".into()));
        }
        self.stream.validate()?;
        self.backbone.broad.validate()?;
        self.backbone.pretrain.validate()?;
        self.train.validate()?;
        self.router.validate()?;
        self.strategy.validate()
    }

    /// Applies the output-directory and thread-count environment overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(std::env::var(ENV_OUTPUT_DIR).ok(), std::env::var(ENV_THREADS).ok())
    }

    pub fn apply_overrides(&mut self, output_dir: Option<String>, threads: Option<String>) -> Result<()> {
        if let Some(dir) = output_dir.filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(t) = threads.filter(|t| !t.is_empty()) {
            self.jobs = t
                .parse::<usize>()
                .ok()
                .filter(|&j| j > 0)
                .ok_or_else(|| CoreError::Config(format!("{} must be a positive integer, got {:?}", ENV_THREADS, t)))?;
        }
        Ok(())
    }

    /// Replaces the stream and strategy seeds; the backbone seed is kept so
    /// the cached backbone stays valid.
    pub fn override_seed(&mut self, seed: u64) {
        self.stream.master_seed = seed;
        self.strategy.seed = seed;
    }

    /// Hash of everything that determines the results; the output directory
    /// and worker count are excluded.
    pub fn content_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.jobs = 1;
        c.backbone.cache_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(c.to_toml()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nn_blocks = 2\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.n_blocks, 2);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ExperimentConfig::from_toml("schema_version = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\nbogus = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\nstrategies = [\"naive\", \"naive\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\n[stream]\ntasks = [0]\nood = [0]\n").is_err());
    }

    #[test]
    fn overrides_touch_only_output_and_jobs() {
        let mut cfg = ExperimentConfig::default();
        let hash = cfg.content_hash().unwrap();
        cfg.apply_overrides(Some("elsewhere".into()), Some("3".into())).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.jobs, 3);
        assert_eq!(cfg.content_hash().unwrap(), hash);
        assert!(cfg.apply_overrides(None, Some("zero".into())).is_err());
    }

    #[test]
    fn task_data_seed_ignores_position() {
        let a = StreamConfig::default();
        let b = StreamConfig { tasks: vec![2, 0, 1], ..StreamConfig::default() };
        let (sa, _) = a.specs();
        let (sb, _) = b.specs();
        assert_eq!(sa[0], sb[1]);
        assert_eq!(sa[2], sb[0]);
    }
}
