//! Regimes that carry a single alignment layer through the stream.

use casam_tensor::{derive_seed, Module, Rng, Tape, Tensor, Var};

use crate::alignment::{aligned_logits, fit, train_alignment, AlignmentLayer};
use crate::bench::FrozenBackbone;
use crate::data::{Batch, EncodedSample, EncodedTask};
use crate::error::{CoreError, Result};
use crate::nn::segmentation_loss;

use super::store::{InsertionPolicy, MemoryBank, MemoryItem, TaskStore};
use super::{Recorder, StrategyEnv, StrategyKind, StrategyRun};

/// Initial weights shared by every single-layer regime, so degenerate
/// settings (λ = 0, empty memory) reproduce one another exactly.
pub(crate) fn fresh_layer(env: &StrategyEnv, tasks: &[EncodedTask]) -> AlignmentLayer {
    AlignmentLayer::new(
        tasks[0].task_id(),
        env.n_blocks,
        env.channels(),
        derive_seed(env.strategy.seed, "layer/init"),
    )
}

pub(crate) fn stage_seed(env: &StrategyEnv, task: &EncodedTask) -> u64 {
    derive_seed(env.strategy.seed, &format!("layer/stage/{}", task.spec.seed))
}

fn single_layer_run(
    kind: StrategyKind,
    env: &StrategyEnv,
    tasks: &[EncodedTask],
    ood: &[EncodedTask],
    mut train_stage: impl FnMut(&mut AlignmentLayer, &TaskStore, usize, u64) -> Result<()>,
) -> Result<StrategyRun> {
    let store = TaskStore::new(tasks);
    let mut rec = Recorder::new(env.backbone, tasks);
    let mut layer = fresh_layer(env, tasks);
    for pos in 0..tasks.len() {
        store.begin(pos);
        train_stage(&mut layer, &store, pos, stage_seed(env, &tasks[pos]))?;
        rec.stage(&layer, pos + 1)?;
    }
    let (metrics, ood_scores) = rec.finish(&layer, ood)?;
    Ok(StrategyRun {
        kind,
        metrics,
        oracle_metrics: None,
        ood: ood_scores,
        past_reads: store.past_reads(),
        trainable_parameters: layer.num_parameters(),
        pool: None,
    })
}

/// One layer fine-tuned task after task with nothing to resist forgetting.
pub fn run_naive(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    single_layer_run(StrategyKind::Naive, env, tasks, ood, |layer, store, _, seed| {
        train_alignment(layer, env.backbone, &store.current_train(), &env.train, seed).map(|_| ())
    })
}

/// Logits of a frozen copy of the layer for a training batch.
fn teacher_logits(backbone: &FrozenBackbone, teacher: &AlignmentLayer, batch: &Batch) -> Result<Tensor> {
    let aligned = teacher.align(&batch.features)?;
    backbone.predict(&aligned, &batch.prompts)
}

/// Sequential fine-tuning plus MSE between the student's mask logits and
/// those of the previous stage's layer.
pub fn run_lwf(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let lambda = env.strategy.lambda_distill;
    single_layer_run(StrategyKind::Lwf, env, tasks, ood, |layer, store, pos, seed| {
        let teacher = (pos > 0).then(|| layer.clone());
        fit(layer, &store.current_train(), &env.train, seed, "LwF layer", |l, tape, batch, _| {
            let logits = aligned_logits(env.backbone, l, tape, batch)?;
            let loss = segmentation_loss(tape, logits, &batch.masks)?;
            match &teacher {
                Some(t) if lambda > 0.0 => {
                    let target = tape.constant(teacher_logits(env.backbone, t, batch)?);
                    let distill = tape.mse(logits, target)?;
                    let distill = tape.scale(distill, lambda);
                    Ok(tape.add(loss, distill)?)
                }
                _ => Ok(loss),
            }
        })
        .map(|_| ())
    })
}

/// Mean over samples of the squared per-sample gradient of the
/// segmentation loss, one tensor per layer parameter.
pub fn empirical_fisher(
    layer: &AlignmentLayer,
    backbone: &FrozenBackbone,
    samples: &[&EncodedSample],
) -> Result<Vec<Tensor>> {
    let params = layer.parameters();
    let mut fisher: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    if samples.is_empty() {
        return Ok(fisher);
    }
    for s in samples {
        let batch = Batch::assemble(&[*s], 0.0, None)?;
        let mut tape = Tape::new();
        let logits = aligned_logits(backbone, layer, &mut tape, &batch)?;
        let loss = segmentation_loss(&mut tape, logits, &batch.masks)?;
        let grads = tape.backward(loss).map_err(|e| CoreError::diverged("Fisher estimate", e))?;
        for (f, p) in fisher.iter_mut().zip(&params) {
            if let Some(g) = grads.param(p) {
                for (a, &b) in f.data_mut().iter_mut().zip(g.data()) {
                    *a += b * b;
                }
            }
        }
    }
    let n = samples.len() as f32;
    Ok(fisher.into_iter().map(|f| f.map(|v| v / n)).collect())
}

/// `λ · Σ_i F_i (θ_i − θ*_i)²` over every parameter element.
pub fn ewc_penalty(params: &[&Tensor], anchor: &[Tensor], fisher: &[Tensor], lambda: f64) -> f64 {
    let mut total = 0.0;
    for ((p, a), f) in params.iter().zip(anchor).zip(fisher) {
        for ((&x, &y), &w) in p.data().iter().zip(a.data()).zip(f.data()) {
            total += w as f64 * (x as f64 - y as f64).powi(2);
        }
    }
    lambda * total
}

fn ewc_penalty_on_tape(
    tape: &mut Tape,
    layer: &AlignmentLayer,
    anchor: &[Tensor],
    fisher: &[Tensor],
    lambda: f64,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for ((p, a), f) in layer.parameters().into_iter().zip(anchor).zip(fisher) {
        let v = tape.param(p);
        let a = tape.constant(a.clone());
        let diff = tape.sub(v, a)?;
        let sq = tape.square(diff);
        let f = tape.constant(f.clone());
        let weighted = tape.mul(sq, f)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| tape.scale(t, lambda)))
}

/// Sequential fine-tuning with a quadratic pull toward the previous stage's
/// weights, weighted by the Fisher information summed over earlier tasks.
pub fn run_ewc(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let lambda = env.strategy.lambda_ewc;
    let mut fisher: Option<Vec<Tensor>> = None;
    let mut anchor: Option<Vec<Tensor>> = None;
    single_layer_run(StrategyKind::Ewc, env, tasks, ood, |layer, store, _, seed| {
        let samples = store.current_train();
        fit(layer, &samples, &env.train, seed, "EWC layer", |l, tape, batch, _| {
            let logits = aligned_logits(env.backbone, l, tape, batch)?;
            let loss = segmentation_loss(tape, logits, &batch.masks)?;
            if let (Some(f), Some(a)) = (&fisher, &anchor) {
                if let Some(pen) = ewc_penalty_on_tape(tape, l, a, f, lambda)? {
                    return Ok(tape.add(loss, pen)?);
                }
            }
            Ok(loss)
        })?;
        let task_fisher = empirical_fisher(layer, env.backbone, &samples)?;
        fisher = Some(match fisher.take() {
            Some(prev) => prev
                .iter()
                .zip(&task_fisher)
                .map(|(a, b)| {
                    Tensor::new(
                        a.shape().to_vec(),
                        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                    )
                })
                .collect::<std::result::Result<_, _>>()?,
            None => task_fisher,
        });
        anchor = Some(layer.parameters().iter().map(|p| p.value.clone()).collect());
        Ok(())
    })
}

fn replay_memory(env: &StrategyEnv) -> (MemoryBank, Rng) {
    (
        MemoryBank::new(env.strategy.memory_capacity, InsertionPolicy::Reservoir),
        Rng::new(derive_seed(env.strategy.seed, "replay/memory")),
    )
}

/// Offers every training sample of the task at `pos` to the reservoir,
/// with the trained layer's logits under tight boxes when `keep_logits`.
fn offer_task(
    env: &StrategyEnv,
    layer: &AlignmentLayer,
    store: &TaskStore,
    pos: usize,
    keep_logits: bool,
    memory: &mut MemoryBank,
    rng: &mut Rng,
) -> Result<()> {
    let train = &store.task(pos).train;
    for (index, s) in train.iter().enumerate() {
        let logits = if keep_logits {
            let batch = Batch::assemble(&[s], 0.0, None)?;
            Some(teacher_logits(env.backbone, layer, &batch)?.index_outer(0))
        } else {
            None
        };
        memory.offer(
            MemoryItem {
                position: pos,
                index,
                logits,
                prompt: keep_logits.then_some(s.bbox),
            },
            rng,
        );
    }
    Ok(())
}

fn with_memory<'a>(store: &TaskStore<'a>, memory: &MemoryBank) -> Vec<&'a EncodedSample> {
    let mut samples = store.current_train();
    samples.extend(memory.items().iter().map(|m| store.read(m.position, m.index)));
    samples
}

/// Sequential fine-tuning on the current task plus a reservoir of earlier
/// samples, refreshed at the end of each task.
pub fn run_er(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let (mut memory, mut mem_rng) = replay_memory(env);
    single_layer_run(StrategyKind::Er, env, tasks, ood, |layer, store, pos, seed| {
        train_alignment(layer, env.backbone, &with_memory(store, &memory), &env.train, seed)?;
        offer_task(env, layer, store, pos, false, &mut memory, &mut mem_rng)
    })
}

/// ER plus α-weighted MSE between the current logits on a replayed batch
/// and the logits stored when those samples entered the reservoir.
pub fn run_der(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let alpha = env.strategy.der_alpha;
    let replay = env.train.batch_size;
    let (mut memory, mut mem_rng) = replay_memory(env);
    single_layer_run(StrategyKind::Der, env, tasks, ood, |layer, store, pos, seed| {
        let samples = with_memory(store, &memory);
        fit(layer, &samples, &env.train, seed, "DER layer", |l, tape, batch, rng| {
            let logits = aligned_logits(env.backbone, l, tape, batch)?;
            let loss = segmentation_loss(tape, logits, &batch.masks)?;
            if alpha == 0.0 || memory.is_empty() {
                return Ok(loss);
            }
            let drawn = memory.sample(replay, rng);
            let picked: Vec<&EncodedSample> = drawn.iter().map(|m| store.read(m.position, m.index)).collect();
            let prompts = drawn.iter().map(|m| m.prompt.expect("replay items carry prompts")).collect();
            let mem_batch = Batch::with_prompts(&picked, prompts)?;
            let stored: Vec<&Tensor> = drawn.iter().map(|m| m.logits.as_ref().expect("replay items carry logits")).collect();
            let target = tape.constant(Tensor::stack(&stored)?);
            let mem_logits = aligned_logits(env.backbone, l, tape, &mem_batch)?;
            let replay_loss = tape.mse(mem_logits, target)?;
            let replay_loss = tape.scale(replay_loss, alpha);
            Ok(tape.add(loss, replay_loss)?)
        })?;
        offer_task(env, layer, store, pos, true, &mut memory, &mut mem_rng)
    })
}

/// At each stage a fresh layer trained on the union of every task so far.
pub fn run_joint(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let init = fresh_layer(env, tasks);
    single_layer_run(StrategyKind::Joint, env, tasks, ood, |layer, store, pos, seed| {
        let mut samples = Vec::new();
        for k in 0..pos {
            samples.extend(store.read_past(k));
        }
        samples.extend(store.current_train());
        *layer = init.clone();
        train_alignment(layer, env.backbone, &samples, &env.train, seed).map(|_| ())
    })
}
