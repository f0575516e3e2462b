use casam_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::alignment::{evaluate_with, mean_score, AlignmentLayer};
use crate::bench::FrozenBackbone;
use crate::data::{EncodedSample, EncodedTask};
use crate::error::Result;
use crate::metrics::{RouteRecord, TaskScore};

/// Whatever a strategy puts between encoder and decoder at test time.
pub trait Aligner {
    /// Aligns a `[B,C,h,w]` chunk. `truth` is the sample's task when it is
    /// in distribution; only oracle strategies may look at it. Routed
    /// strategies also return one decision per sample (`None` = identity).
    fn align(&self, z: &Tensor, truth: Option<u32>) -> Result<(Tensor, Option<Vec<Option<u32>>>)>;
}

impl Aligner for AlignmentLayer {
    fn align(&self, z: &Tensor, _: Option<u32>) -> Result<(Tensor, Option<Vec<Option<u32>>>)> {
        Ok((AlignmentLayer::align(self, z)?, None))
    }
}

/// Scores one test set and collects routing decisions, if any.
pub fn evaluate_task(
    backbone: &FrozenBackbone,
    aligner: &dyn Aligner,
    samples: &[EncodedSample],
    task_id: u32,
    truth: Option<u32>,
) -> Result<(TaskScore, Vec<RouteRecord>)> {
    let mut log = Vec::new();
    let scores = evaluate_with(backbone, samples, |_, z| {
        let (aligned, decisions) = aligner.align(z, truth)?;
        if let Some(d) = decisions {
            log.extend(d.into_iter().map(|chosen| RouteRecord { truth, chosen }));
        }
        Ok(aligned)
    })?;
    let m = mean_score(&scores);
    Ok((
        TaskScore {
            task_id,
            n: samples.len(),
            iou: m.iou,
            biou: m.biou,
        },
        log,
    ))
}

/// Scores on the test sets of the first `seen` tasks.
pub fn evaluate_stage(
    backbone: &FrozenBackbone,
    aligner: &dyn Aligner,
    tasks: &[EncodedTask],
    seen: usize,
) -> Result<(Vec<TaskScore>, Vec<RouteRecord>)> {
    let mut scores = Vec::with_capacity(seen);
    let mut log = Vec::new();
    for t in &tasks[..seen] {
        let (s, l) = evaluate_task(backbone, aligner, &t.test, t.task_id(), Some(t.task_id()))?;
        scores.push(s);
        log.extend(l);
    }
    Ok((scores, log))
}

/// Final-stage performance on a task never trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub task_id: u32,
    pub name: String,
    pub n: usize,
    pub iou: f64,
    pub biou: f64,
}

pub fn evaluate_ood(
    backbone: &FrozenBackbone,
    aligner: &dyn Aligner,
    ood: &[EncodedTask],
) -> Result<(Vec<OodScore>, Vec<RouteRecord>)> {
    let mut out = Vec::with_capacity(ood.len());
    let mut log = Vec::new();
    for t in ood {
        let (s, l) = evaluate_task(backbone, aligner, &t.test, t.task_id(), None)?;
        out.push(OodScore {
            task_id: t.task_id(),
            name: t.spec.name.clone(),
            n: s.n,
            iou: s.iou,
            biou: s.biou,
        });
        log.extend(l);
    }
    Ok((out, log))
}
