use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::alignment::{evaluate_layer, mean_score, AlignmentLayer};
use crate::bench::{generate_from_specs, FrozenBackbone};
use crate::data::{encode_stream, EncodedTask};
use crate::error::{CoreError, Result};
use crate::router::{ThresholdRule, TaskRouter};
use crate::strategies::{run_casam, run_strategy, AdapterCache, StrategyEnv, StrategyKind, StrategyRun};

use super::cache::{obtain_backbone, BackboneSource};
use super::config::{ExperimentConfig, StreamConfig};

/// Encoded stream tasks and held-out OOD tasks.
#[derive(Debug, Clone)]
pub struct PreparedStream {
    pub tasks: Vec<EncodedTask>,
    pub ood: Vec<EncodedTask>,
}

pub fn prepare_stream(cfg: &StreamConfig, backbone: &FrozenBackbone) -> Result<PreparedStream> {
    cfg.validate()?;
    let (tasks, ood) = cfg.specs();
    let n = tasks.len();
    let all: Vec<_> = tasks.into_iter().chain(ood).collect();
    let data = generate_from_specs(&all, cfg.train_per_task, cfg.test_per_task, cfg.master_seed)?;
    let mut encoded = encode_stream(backbone, &data)?;
    let ood = encoded.split_off(n);
    Ok(PreparedStream { tasks: encoded, ood })
}

/// Backbone plus encoded data, shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub backbone: FrozenBackbone,
    pub source: BackboneSource,
    pub stream: PreparedStream,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let (backbone, source) = obtain_backbone(&cfg.backbone)?;
    let stream = prepare_stream(&cfg.stream, &backbone)?;
    Ok(Experiment { backbone, source, stream })
}

/// Frozen-backbone score on one domain's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub task_id: u32,
    pub name: String,
    pub ood: bool,
    pub iou: f64,
    pub biou: f64,
}

/// Thresholds every rule would give on one task's held-out scores, and
/// the share of its training maps the final VAE scores at or below the
/// configured rule's threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub task_id: u32,
    pub thresholds: BTreeMap<String, f64>,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub kind: StrategyKind,
    pub outcome: std::result::Result<StrategyRun, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub config_hash: String,
    pub backbone_fingerprint: String,
    pub zero_shot: Vec<ZeroShot>,
    pub results: Vec<StrategyResult>,
    pub thresholds: Vec<ThresholdRow>,
}

impl ExperimentResult {
    pub fn run(&self, kind: StrategyKind) -> Option<&StrategyRun> {
        self.results.iter().find(|r| r.kind == kind).and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn all_succeeded(&self) -> bool {
        self.results.iter().all(|r| r.outcome.is_ok())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let exp = prepare(cfg)?;
    run_prepared(cfg, &exp, &mut AdapterCache::new())
}

/// Runs every configured strategy on prepared data. A strategy that errors
/// or panics is recorded as failed; the others still run.
pub fn run_prepared(cfg: &ExperimentConfig, exp: &Experiment, cache: &mut AdapterCache) -> Result<ExperimentResult> {
    cfg.validate()?;
    let env = StrategyEnv {
        backbone: &exp.backbone,
        train: cfg.train.clone(),
        n_blocks: cfg.n_blocks,
        router: cfg.router.clone(),
        strategy: cfg.strategy.clone(),
    };
    let fingerprint = exp.backbone.fingerprint();
    let kinds = &cfg.strategies;
    let mut slots: Vec<Option<(StrategyResult, Option<BTreeMap<u32, TaskRouter>>)>> = vec![None; kinds.len()];
    if cfg.jobs <= 1 || kinds.len() <= 1 {
        for (slot, &kind) in slots.iter_mut().zip(kinds) {
            *slot = Some(isolated(kind, &env, &exp.stream, cache, &fingerprint));
        }
    } else {
        let next = AtomicUsize::new(0);
        let shared = Mutex::new(slots);
        std::thread::scope(|s| {
            for _ in 0..cfg.jobs.min(kinds.len()) {
                s.spawn(|| {
                    let mut local = AdapterCache::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(&kind) = kinds.get(i) else { break };
                        let r = isolated(kind, &env, &exp.stream, &mut local, &fingerprint);
                        shared.lock().expect("result slots")[i] = Some(r);
                    }
                });
            }
        });
        slots = shared.into_inner().expect("result slots");
    }

    let mut results = Vec::with_capacity(kinds.len());
    let mut thresholds = Vec::new();
    for (result, routers) in slots.into_iter().map(|s| s.expect("every strategy ran")) {
        if let Some(routers) = routers {
            thresholds = threshold_rows(&routers, &exp.stream.tasks, cfg.router.rule)?;
        }
        results.push(result);
    }
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        config_hash: cfg.content_hash()?,
        backbone_fingerprint: fingerprint,
        zero_shot: zero_shot(&exp.backbone, &exp.stream)?,
        results,
        thresholds,
    })
}

fn isolated(
    kind: StrategyKind,
    env: &StrategyEnv,
    stream: &PreparedStream,
    cache: &mut AdapterCache,
    fingerprint: &str,
) -> (StrategyResult, Option<BTreeMap<u32, TaskRouter>>) {
    log::info!("running {}", kind);
    let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<(StrategyRun, Option<BTreeMap<u32, TaskRouter>>)> {
        if kind == StrategyKind::Casam {
            env.train.validate()?;
            env.strategy.validate()?;
            let o = run_casam(env, &stream.tasks, &stream.ood, cache)?;
            Ok((o.run, Some(o.routers)))
        } else {
            Ok((run_strategy(kind, env, &stream.tasks, &stream.ood, cache)?, None))
        }
    }));
    let (outcome, routers) = match attempt {
        Ok(Ok((run, routers))) => {
            if env.backbone.fingerprint() != fingerprint {
                (Err("backbone parameters changed during the run".to_string()), None)
            } else {
                (Ok(run), routers)
            }
        }
        Ok(Err(e)) => (Err(e.to_string()), None),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".to_string());
            (Err(format!("panicked: {}", msg)), None)
        }
    };
    if let Err(e) = &outcome {
        log::error!("{} failed: {}", kind, e);
    }
    (StrategyResult { kind, outcome }, routers)
}

fn zero_shot(backbone: &FrozenBackbone, stream: &PreparedStream) -> Result<Vec<ZeroShot>> {
    let identity = AlignmentLayer::identity();
    let tagged = stream.tasks.iter().map(|t| (t, false)).chain(stream.ood.iter().map(|t| (t, true)));
    tagged
        .map(|(t, ood)| {
            let s = mean_score(&evaluate_layer(backbone, &identity, &t.test)?);
            Ok(ZeroShot {
                task_id: t.task_id(),
                name: t.spec.name.clone(),
                ood,
                iou: s.iou,
                biou: s.biou,
            })
        })
        .collect()
}

fn threshold_rows(
    routers: &BTreeMap<u32, TaskRouter>,
    tasks: &[EncodedTask],
    rule: ThresholdRule,
) -> Result<Vec<ThresholdRow>> {
    let mut rows = Vec::with_capacity(routers.len());
    for t in tasks {
        let Some(r) = routers.get(&t.task_id()) else {
            return Err(CoreError::invalid(format!("no router for task {}", t.task_id())));
        };
        let mut thresholds = BTreeMap::new();
        for rl in ThresholdRule::ALL {
            thresholds.insert(rl.name().to_string(), rl.apply(&r.calibration.heldout_scores)?);
        }
        let tau = thresholds[rule.name()];
        let mut covered = 0usize;
        for s in &t.train {
            if r.vae.score(&s.features)? <= tau {
                covered += 1;
            }
        }
        rows.push(ThresholdRow {
            task_id: t.task_id(),
            thresholds,
            coverage: covered as f64 / t.train.len().max(1) as f64,
        });
    }
    Ok(rows)
}
