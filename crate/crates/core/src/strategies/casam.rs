//! Per-task adapters selected at test time: CA-SAM routes with per-task
//! VAEs and an identity fallback, MoDA with a task classifier trained on a
//! replay memory.

use std::collections::{BTreeMap, HashMap};

use casam_tensor::{derive_seed, Adam, Module, Parameter, Rng, Tape, Tensor};

use crate::alignment::{train_alignment, AlignmentLayer, TrainConfig};
use crate::data::EncodedTask;
use crate::error::{CoreError, Result};
use crate::nn::Linear;
use crate::router::{attention_pool, fit_task_router, RouterEntry, RouterPool, TaskRouter};

use super::eval::Aligner;
use super::store::{InsertionPolicy, MemoryBank, TaskStore};
use super::{Recorder, StrategyEnv, StrategyKind, StrategyRun};

const CLASSIFIER_BATCH: usize = 16;

/// Trained per-task adapters keyed by everything that determines their
/// weights, so strategies that train them identically share the work.
#[derive(Debug, Clone, Default)]
pub struct AdapterCache {
    layers: HashMap<String, AlignmentLayer>,
}

impl AdapterCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Adapter for `task`, trained on its own training set only. The seed
    /// depends on the task, not on its position in the stream.
    pub fn adapter(&mut self, env: &StrategyEnv, store: &TaskStore, position: usize) -> Result<AlignmentLayer> {
        let task = store.task(position);
        let seed = derive_seed(env.strategy.seed, &format!("adapter/{}", task.spec.seed));
        let key = cache_key(task, seed, env.n_blocks, &env.train, env.backbone.fingerprint());
        if let Some(l) = self.layers.get(&key) {
            return Ok(l.clone());
        }
        let mut layer = AlignmentLayer::new(task.task_id(), env.n_blocks, env.channels(), seed);
        train_alignment(&mut layer, env.backbone, &store.current_train(), &env.train, seed)?;
        self.layers.insert(key, layer.clone());
        Ok(layer)
    }
}

fn cache_key(task: &EncodedTask, seed: u64, n_blocks: usize, train: &TrainConfig, backbone: String) -> String {
    format!(
        "{}|{}|{}|{}|{}|{:?}|{}",
        task.task_id(),
        task.spec.seed,
        task.train.len(),
        seed,
        n_blocks,
        train,
        backbone
    )
}

impl Aligner for RouterPool {
    fn align(&self, z: &Tensor, _: Option<u32>) -> Result<(Tensor, Option<Vec<Option<u32>>>)> {
        let (aligned, decisions) = self.route_and_align(z)?;
        Ok((aligned, Some(decisions.into_iter().map(|d| d.chosen).collect())))
    }
}

/// A pool's adapters picked by the true task id; OOD inputs get identity.
struct OracleRouting<'a>(&'a RouterPool);

impl Aligner for OracleRouting<'_> {
    fn align(&self, z: &Tensor, truth: Option<u32>) -> Result<(Tensor, Option<Vec<Option<u32>>>)> {
        Ok((self.0.layer_for(truth).align(z)?, None))
    }
}

#[derive(Debug, Clone)]
pub struct CasamOutcome {
    pub run: StrategyRun,
    /// Per-task VAE training logs and calibration scores.
    pub routers: BTreeMap<u32, TaskRouter>,
}

pub fn run_casam(
    env: &StrategyEnv,
    tasks: &[EncodedTask],
    ood: &[EncodedTask],
    cache: &mut AdapterCache,
) -> Result<CasamOutcome> {
    let store = TaskStore::new(tasks);
    let mut routed = Recorder::new(env.backbone, tasks);
    let mut oracle = Recorder::new(env.backbone, tasks);
    let mut pool = RouterPool::new(env.router.rule);
    let mut routers = BTreeMap::new();
    for (pos, task) in tasks.iter().enumerate() {
        store.begin(pos);
        let layer = cache.adapter(env, &store, pos)?;
        let maps: Vec<&Tensor> = store.current_train().iter().map(|s| &s.features).collect();
        let seed = derive_seed(env.strategy.seed, &format!("router/{}", task.spec.seed));
        let router = fit_task_router(&maps, &env.router, seed)?;
        pool.insert(
            task.task_id(),
            RouterEntry {
                layer,
                vae: router.vae.clone(),
                threshold: router.calibration.threshold,
            },
        )?;
        routers.insert(task.task_id(), router);
        routed.stage(&pool, pos + 1)?;
        oracle.stage(&OracleRouting(&pool), pos + 1)?;
    }
    let (metrics, ood_scores) = routed.finish(&pool, ood)?;
    let (oracle_metrics, _) = oracle.finish(&OracleRouting(&pool), &[])?;
    let trainable_parameters = pool
        .entries()
        .values()
        .map(|e| e.layer.num_parameters() + e.vae.num_parameters())
        .sum();
    Ok(CasamOutcome {
        run: StrategyRun {
            kind: StrategyKind::Casam,
            metrics,
            oracle_metrics: Some(oracle_metrics),
            ood: ood_scores,
            past_reads: store.past_reads(),
            trainable_parameters,
            pool: Some(pool),
        },
        routers,
    })
}

/// Linear softmax classifier over attention-pooled encoder features.
#[derive(Debug, Clone)]
pub struct TaskClassifier {
    linear: Linear,
    task_ids: Vec<u32>,
    temperature: f64,
}

impl TaskClassifier {
    pub fn new(input_dim: usize, task_ids: Vec<u32>, temperature: f64, seed: u64) -> Result<Self> {
        if task_ids.is_empty() {
            return Err(CoreError::invalid("a task classifier needs at least one class"));
        }
        let mut rng = Rng::new(seed);
        Ok(Self {
            linear: Linear::new("classifier", input_dim, task_ids.len(), 1.0, &mut rng),
            task_ids,
            temperature,
        })
    }

    pub fn task_ids(&self) -> &[u32] {
        &self.task_ids
    }

    pub fn features(&self, z: &Tensor) -> Vec<f32> {
        attention_pool(z, self.temperature)
    }

    /// Class scores for a batch of pooled features.
    fn logits(&self, feats: &[Vec<f32>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(stack_rows(feats)?);
        let y = self.linear.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Most probable task for each `[C,h,w]` map; ties go to the earlier
    /// class.
    pub fn predict(&self, maps: &[Tensor]) -> Result<Vec<u32>> {
        let feats: Vec<Vec<f32>> = maps.iter().map(|z| self.features(z)).collect();
        let logits = self.logits(&feats)?;
        let k = self.task_ids.len();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                self.task_ids[best]
            })
            .collect())
    }

    /// Minibatch Adam on cross-entropy; labels index into `task_ids`.
    pub fn train(&mut self, maps: &[&Tensor], labels: &[usize], epochs: usize, lr: f64, seed: u64) -> Result<()> {
        if maps.len() != labels.len() || maps.is_empty() {
            return Err(CoreError::invalid("classifier needs one label per map"));
        }
        let feats: Vec<Vec<f32>> = maps.iter().map(|z| self.features(z)).collect();
        let adam = Adam::new(lr);
        let mut rng = Rng::new(seed);
        self.reset_optimizer_state();
        for _ in 0..epochs {
            for idx in rng.permutation(feats.len()).chunks(CLASSIFIER_BATCH) {
                let rows: Vec<Vec<f32>> = idx.iter().map(|&i| feats[i].clone()).collect();
                let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let x = tape.constant(stack_rows(&rows)?);
                let logits = self.linear.forward(&mut tape, x)?;
                let loss = tape.cross_entropy(logits, &ys)?;
                let grads = tape.backward(loss).map_err(|e| CoreError::diverged("task classifier", e))?;
                adam.step(&mut self.parameters_mut(), &grads);
            }
        }
        Ok(())
    }
}

fn stack_rows(rows: &[Vec<f32>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    Ok(Tensor::new(vec![rows.len(), d], rows.concat())?)
}

impl Module for TaskClassifier {
    fn parameters(&self) -> Vec<&Parameter> {
        self.linear.params().to_vec()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let [w, b] = self.linear.params_mut();
        vec![w, b]
    }
}

struct ClassifierRouting<'a> {
    classifier: &'a TaskClassifier,
    layers: &'a BTreeMap<u32, AlignmentLayer>,
}

impl Aligner for ClassifierRouting<'_> {
    fn align(&self, z: &Tensor, _: Option<u32>) -> Result<(Tensor, Option<Vec<Option<u32>>>)> {
        let n = z.dim(0);
        let maps: Vec<Tensor> = (0..n).map(|i| z.index_outer(i)).collect();
        let picks = self.classifier.predict(&maps)?;
        let mut rows = Vec::with_capacity(n);
        for (m, t) in maps.iter().zip(&picks) {
            let mut shape = vec![1];
            shape.extend_from_slice(m.shape());
            rows.push(self.layers[t].align(&m.clone().reshape(shape)?)?.index_outer(0));
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok((Tensor::stack(&refs)?, Some(picks.into_iter().map(Some).collect())))
    }
}

/// Adapters as in CA-SAM, but a classifier retrained each stage on the
/// current task plus a per-task memory picks the adapter, with no fallback.
pub fn run_moda(
    env: &StrategyEnv,
    tasks: &[EncodedTask],
    ood: &[EncodedTask],
    cache: &mut AdapterCache,
) -> Result<StrategyRun> {
    let kind = StrategyKind::Moda;
    let cfg = &env.strategy;
    let store = TaskStore::new(tasks);
    let mut rec = Recorder::new(env.backbone, tasks);
    let mut layers = BTreeMap::new();
    let mut memory = MemoryBank::new(cfg.memory_capacity, InsertionPolicy::PerTaskQuota);
    let mut mem_rng = Rng::new(cfg.seed_for(kind, "memory"));
    let mut classifier = None;
    for (pos, task) in tasks.iter().enumerate() {
        store.begin(pos);
        layers.insert(task.task_id(), cache.adapter(env, &store, pos)?);
        let mut maps: Vec<&Tensor> = store.current_train().iter().map(|s| &s.features).collect();
        let mut labels = vec![pos; maps.len()];
        for m in memory.items() {
            maps.push(&store.read(m.position, m.index).features);
            labels.push(m.position);
        }
        let ids: Vec<u32> = tasks[..=pos].iter().map(|t| t.task_id()).collect();
        let stage_seed = cfg.seed_for(kind, &format!("stage/{}", task.spec.seed));
        let mut c = TaskClassifier::new(
            env.channels(),
            ids,
            env.router.pooling.temperature,
            derive_seed(stage_seed, "init"),
        )?;
        c.train(&maps, &labels, cfg.classifier_epochs, cfg.classifier_lr, derive_seed(stage_seed, "train"))?;
        memory.add_task(pos, task.train.len(), &mut mem_rng);
        rec.stage(&ClassifierRouting { classifier: &c, layers: &layers }, pos + 1)?;
        classifier = Some(c);
    }
    let classifier = classifier.expect("at least one task");
    let routing = ClassifierRouting {
        classifier: &classifier,
        layers: &layers,
    };
    let (metrics, ood_scores) = rec.finish(&routing, ood)?;
    let trainable_parameters =
        layers.values().map(|l| l.num_parameters()).sum::<usize>() + classifier.num_parameters();
    Ok(StrategyRun {
        kind,
        metrics,
        oracle_metrics: None,
        ood: ood_scores,
        past_reads: store.past_reads(),
        trainable_parameters,
        pool: None,
    })
}
