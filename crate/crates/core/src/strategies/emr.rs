//! Elect, mask and rescale merging of per-task weight deltas into one
//! shared vector plus cheap per-task modulators.

use casam_tensor::Module;

use crate::alignment::{train_alignment, AlignmentLayer};
use crate::data::EncodedTask;
use crate::error::{CoreError, Result};

use super::eval::Aligner;
use super::sequential::{fresh_layer, stage_seed};
use super::store::TaskStore;
use super::{Recorder, StrategyEnv, StrategyKind, StrategyRun};

/// Difference between a task's fine-tuned weights and the shared start.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task_id: u32,
    pub delta: Vec<f32>,
}

/// Unified vector: where every task's delta has the same strict sign, the
/// delta of largest magnitude; zero elsewhere.
pub fn elect(vectors: &[TaskVector]) -> Result<Vec<f32>> {
    let Some(first) = vectors.first() else {
        return Err(CoreError::invalid("nothing to merge"));
    };
    let n = first.delta.len();
    if vectors.iter().any(|v| v.delta.len() != n) {
        return Err(CoreError::invalid("task vectors differ in length"));
    }
    Ok((0..n)
        .map(|i| {
            let all_pos = vectors.iter().all(|v| v.delta[i] > 0.0);
            let all_neg = vectors.iter().all(|v| v.delta[i] < 0.0);
            if !(all_pos || all_neg) {
                return 0.0;
            }
            vectors
                .iter()
                .map(|v| v.delta[i])
                .fold(0.0f32, |m, d| if d.abs() > m.abs() { d } else { m })
        })
        .collect())
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Task-specific delta recovered from the unified vector: elements whose
/// sign disagrees with the task are masked out, and the rest is rescaled
/// to the task's own L2 norm (zero when nothing survives the mask).
pub fn merged_for_task(unified: &[f32], task: &TaskVector) -> Vec<f32> {
    let masked: Vec<f32> = unified
        .iter()
        .zip(&task.delta)
        .map(|(&u, &d)| if u * d > 0.0 { u } else { 0.0 })
        .collect();
    let kept = l2(&masked);
    let scale = if kept > 0.0 { l2(&task.delta) / kept } else { 0.0 };
    masked.into_iter().map(|m| (m as f64 * scale) as f32).collect()
}

/// Merged layers for each seen task, the unified layer for anything else.
struct MergedLayers {
    per_task: Vec<(u32, AlignmentLayer)>,
    unified: AlignmentLayer,
}

impl MergedLayers {
    fn build(init: &AlignmentLayer, vectors: &[TaskVector]) -> Result<Self> {
        let base = init.flatten();
        let apply = |delta: &[f32]| {
            let mut layer = init.clone();
            let w: Vec<f32> = base.iter().zip(delta).map(|(b, d)| b + d).collect();
            layer.load_flat(&w);
            layer
        };
        let unified = elect(vectors)?;
        Ok(Self {
            per_task: vectors
                .iter()
                .map(|v| (v.task_id, apply(&merged_for_task(&unified, v)).with_task(v.task_id)))
                .collect(),
            unified: apply(&unified),
        })
    }
}

impl Aligner for MergedLayers {
    fn align(&self, z: &casam_tensor::Tensor, truth: Option<u32>) -> Result<(casam_tensor::Tensor, Option<Vec<Option<u32>>>)> {
        let layer = truth
            .and_then(|t| self.per_task.iter().find(|(id, _)| *id == t))
            .map(|(_, l)| l)
            .unwrap_or(&self.unified);
        Ok((layer.align(z)?, None))
    }
}

pub(crate) fn run_emr(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let kind = StrategyKind::Emr;
    let init = fresh_layer(env, tasks);
    let base = init.flatten();
    let store = TaskStore::new(tasks);
    let mut rec = Recorder::new(env.backbone, tasks);
    let mut vectors = Vec::with_capacity(tasks.len());
    let mut merged = None;
    for (pos, task) in tasks.iter().enumerate() {
        store.begin(pos);
        let mut layer = init.clone().with_task(task.task_id());
        train_alignment(&mut layer, env.backbone, &store.current_train(), &env.train, stage_seed(env, task))?;
        vectors.push(TaskVector {
            task_id: task.task_id(),
            delta: layer.flatten().iter().zip(&base).map(|(w, b)| w - b).collect(),
        });
        let m = MergedLayers::build(&init, &vectors)?;
        rec.stage(&m, pos + 1)?;
        merged = Some(m);
    }
    let merged = merged.expect("at least one task");
    let (metrics, ood_scores) = rec.finish(&merged, ood)?;
    Ok(StrategyRun {
        kind,
        metrics,
        oracle_metrics: None,
        ood: ood_scores,
        past_reads: store.past_reads(),
        trainable_parameters: init.num_parameters(),
        pool: None,
    })
}
