use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use casam_tensor::{derive_seed, Tensor};
use serde::{Deserialize, Serialize};

use crate::alignment::{load_layer, save_layer, AlignmentLayer};
use crate::error::{CoreError, Result};

use super::calibrate::{calibrate_threshold, Calibration, ThresholdRule};
use super::pooling::PoolingConfig;
use super::vae::{train_vae, TaskVae, VaeConfig, VaeLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub vae: VaeConfig,
    pub pooling: PoolingConfig,
    /// Cross-validation folds for threshold calibration.
    pub folds: usize,
    pub rule: ThresholdRule,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            pooling: PoolingConfig::default(),
            folds: 5,
            rule: ThresholdRule::P97,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.pooling.validate()?;
        if self.folds < 2 {
            return Err(CoreError::Config(format!("router.folds must be at least 2, got {}", self.folds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RouterEntry {
    pub layer: AlignmentLayer,
    pub vae: TaskVae,
    pub threshold: f64,
}

/// A task's VAE, threshold and calibration scores, before it joins a pool.
#[derive(Debug, Clone)]
pub struct TaskRouter {
    pub vae: TaskVae,
    pub log: VaeLog,
    pub calibration: Calibration,
}

/// Trains the routing VAE on a task's feature maps and calibrates its
/// threshold.
pub fn fit_task_router(maps: &[&Tensor], cfg: &RouterConfig, seed: u64) -> Result<TaskRouter> {
    cfg.validate()?;
    let (vae, log) = train_vae(maps, &cfg.pooling, &cfg.vae, derive_seed(seed, "router/vae"))?;
    let calibration = calibrate_threshold(
        maps,
        &cfg.pooling,
        &cfg.vae,
        cfg.folds,
        cfg.rule,
        derive_seed(seed, "router/calibrate"),
    )?;
    Ok(TaskRouter { vae, log, calibration })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    /// `None` means the identity layer.
    pub chosen: Option<u32>,
    pub scores: BTreeMap<u32, f64>,
    /// Lowest-scoring task, whether or not it passed its threshold.
    pub best: u32,
    pub threshold_used: f64,
}

/// Per-task alignment layers with their VAEs and thresholds, plus the
/// identity fallback.
#[derive(Debug, Clone)]
pub struct RouterPool {
    entries: BTreeMap<u32, RouterEntry>,
    identity: AlignmentLayer,
    rule: ThresholdRule,
}

impl RouterPool {
    pub fn new(rule: ThresholdRule) -> Self {
        Self {
            entries: BTreeMap::new(),
            identity: AlignmentLayer::identity(),
            rule,
        }
    }

    pub fn rule(&self) -> ThresholdRule {
        self.rule
    }

    pub fn insert(&mut self, task_id: u32, entry: RouterEntry) -> Result<()> {
        if !(entry.threshold.is_finite() && entry.threshold > 0.0) {
            return Err(CoreError::invalid(format!(
                "task {} threshold must be finite and positive, got {}",
                task_id, entry.threshold
            )));
        }
        if entry.layer.task_id() != Some(task_id) {
            return Err(CoreError::invalid(format!(
                "layer for slot {:?} inserted under task {}",
                entry.layer.slot(),
                task_id
            )));
        }
        self.entries.insert(task_id, entry);
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<u32, RouterEntry> {
        &self.entries
    }

    pub fn get(&self, task_id: u32) -> Option<&RouterEntry> {
        self.entries.get(&task_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn identity(&self) -> &AlignmentLayer {
        &self.identity
    }

    /// Scores a `[C,h,w]` map under every task VAE and picks the lowest;
    /// ties go to the smaller task id. Scores above the winner's threshold
    /// fall back to the identity layer.
    pub fn route(&self, z: &Tensor) -> Result<RouteDecision> {
        if self.entries.is_empty() {
            return Err(CoreError::invalid("cannot route with an empty pool"));
        }
        let mut scores = BTreeMap::new();
        let mut best: Option<(u32, f64)> = None;
        for (&id, e) in &self.entries {
            let s = e.vae.score(z)?;
            scores.insert(id, s);
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((id, s));
            }
        }
        let (best, s) = best.expect("pool is non-empty");
        let threshold_used = self.entries[&best].threshold;
        Ok(RouteDecision {
            chosen: (s <= threshold_used).then_some(best),
            scores,
            best,
            threshold_used,
        })
    }

    pub fn layer_for(&self, chosen: Option<u32>) -> &AlignmentLayer {
        chosen
            .and_then(|t| self.entries.get(&t))
            .map(|e| &e.layer)
            .unwrap_or(&self.identity)
    }

    /// Routes every map of a `[B,C,h,w]` batch and aligns it with the chosen
    /// layer.
    pub fn route_and_align(&self, batch: &Tensor) -> Result<(Tensor, Vec<RouteDecision>)> {
        let n = batch.dim(0);
        let mut rows = Vec::with_capacity(n);
        let mut decisions = Vec::with_capacity(n);
        for i in 0..n {
            let z = batch.index_outer(i);
            let d = self.route(&z)?;
            let mut shape = vec![1];
            shape.extend_from_slice(z.shape());
            let aligned = self.layer_for(d.chosen).align(&z.reshape(shape)?)?;
            rows.push(aligned.index_outer(0));
            decisions.push(d);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok((Tensor::stack(&refs)?, decisions))
    }
}

const POOL_FORMAT_VERSION: u32 = 1;
const POOL_MANIFEST: &str = "pool.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolManifest {
    format_version: u32,
    rule: ThresholdRule,
    tasks: Vec<PoolManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolManifestEntry {
    task_id: u32,
    threshold: f64,
    beta: f64,
    latent_dim: usize,
    pooling: String,
    temperature: f64,
    layer_file: String,
    vae_file: String,
}

/// Writes `pool.json` plus one layer and one VAE checkpoint per task.
pub fn save_pool(pool: &RouterPool, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut tasks = Vec::with_capacity(pool.len());
    for (&id, e) in pool.entries() {
        let layer_file = format!("layer_{}.bin", id);
        let vae_file = format!("vae_{}.bin", id);
        save_layer(&e.layer, &dir.join(&layer_file))?;
        let path = dir.join(&vae_file);
        let mut w = BufWriter::new(File::create(&path).map_err(|err| CoreError::io(&path, err))?);
        e.vae.write(&mut w)?;
        w.flush().map_err(|err| CoreError::io(&path, err))?;
        tasks.push(PoolManifestEntry {
            task_id: id,
            threshold: e.threshold,
            beta: e.vae.beta(),
            latent_dim: e.vae.latent_dim(),
            pooling: e.vae.pooler().method().name().to_string(),
            temperature: e.vae.pooler().temperature(),
            layer_file,
            vae_file,
        });
    }
    let manifest = PoolManifest {
        format_version: POOL_FORMAT_VERSION,
        rule: pool.rule(),
        tasks,
    };
    let path = dir.join(POOL_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))
}

pub fn load_pool(dir: &Path) -> Result<RouterPool> {
    let path = dir.join(POOL_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: PoolManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {}", path.display(), e)))?;
    if manifest.format_version != POOL_FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported pool format version {}",
            manifest.format_version
        )));
    }
    let mut pool = RouterPool::new(manifest.rule);
    for t in manifest.tasks {
        let layer = load_layer(&dir.join(&t.layer_file))?;
        let vpath = dir.join(&t.vae_file);
        let file = File::open(&vpath).map_err(|e| CoreError::io(&vpath, e))?;
        let vae = TaskVae::read(&mut BufReader::new(file))?;
        if vae.beta() != t.beta || vae.latent_dim() != t.latent_dim {
            return Err(CoreError::Format(format!("task {} VAE disagrees with the manifest", t.task_id)));
        }
        pool.insert(
            t.task_id,
            RouterEntry {
                layer,
                vae,
                threshold: t.threshold,
            },
        )
        .map_err(|e| CoreError::Format(e.to_string()))?;
    }
    Ok(pool)
}
