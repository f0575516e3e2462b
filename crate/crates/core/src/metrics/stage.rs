use serde::{Deserialize, Serialize};

use super::routing::RouteRecord;
use crate::error::{CoreError, Result};

/// Mean IoU and BIoU of one task's test set at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: u32,
    pub n: usize,
    pub iou: f64,
    pub biou: f64,
}

/// Lower-triangular record of per-task scores: `stages[t]` holds the scores
/// of tasks `0..=t` (in stream order) after training stage `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stages: Vec<Vec<TaskScore>>,
    pub routing_log: Vec<RouteRecord>,
}

/// Last / Avg / FF for one measure, as fractions in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub last: f64,
    pub avg: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinualSummary {
    pub iou: Aggregate,
    pub biou: Aggregate,
}

impl StageMetrics {
    pub fn push_stage(&mut self, scores: Vec<TaskScore>) {
        self.stages.push(scores);
    }

    /// Checks the triangular shape, task order and constant sample counts.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CoreError::invalid("stage metrics are empty"));
        }
        let last = self.stages.last().expect("non-empty");
        for (t, stage) in self.stages.iter().enumerate() {
            if stage.len() != t + 1 {
                return Err(CoreError::invalid(format!(
                    "stage {} has {} task scores, expected {}",
                    t,
                    stage.len(),
                    t + 1
                )));
            }
            for (k, s) in stage.iter().enumerate() {
                let reference = &last[k];
                if s.task_id != reference.task_id || s.n != reference.n {
                    return Err(CoreError::invalid(format!(
                        "stage {} slot {} is task {} (n={}), later stages say task {} (n={})",
                        t, k, s.task_id, s.n, reference.task_id, reference.n
                    )));
                }
                if !(0.0..=1.0).contains(&s.iou) || !(0.0..=1.0).contains(&s.biou) {
                    return Err(CoreError::invalid(format!("scores out of range at stage {}", t)));
                }
            }
        }
        Ok(())
    }

    /// Sample-weighted mean over the tasks seen at stage `t`.
    pub fn stage_mean(&self, t: usize, pick: impl Fn(&TaskScore) -> f64) -> f64 {
        weighted_mean(&self.stages[t], pick)
    }
}

fn weighted_mean(scores: &[TaskScore], pick: impl Fn(&TaskScore) -> f64) -> f64 {
    let total: usize = scores.iter().map(|s| s.n).sum();
    if total == 0 {
        return scores.iter().map(&pick).sum::<f64>() / scores.len().max(1) as f64;
    }
    scores.iter().map(|s| pick(s) * s.n as f64).sum::<f64>() / total as f64
}

fn aggregate(sm: &StageMetrics, pick: impl Fn(&TaskScore) -> f64 + Copy) -> Aggregate {
    let n = sm.stages.len();
    let stage_values: Vec<f64> = (0..n).map(|t| sm.stage_mean(t, pick)).collect();
    let last = stage_values[n - 1];
    let avg = stage_values.iter().sum::<f64>() / n as f64;
    let forgetting = if n < 2 {
        0.0
    } else {
        let total: f64 = (0..n - 1)
            .map(|k| {
                let best_before = (k..n - 1)
                    .map(|j| pick(&sm.stages[j][k]))
                    .fold(f64::NEG_INFINITY, f64::max);
                (best_before - pick(&sm.stages[n - 1][k])).max(0.0)
            })
            .sum();
        total / (n - 1) as f64
    };
    Aggregate { last, avg, forgetting }
}

/// Last, Avg and FF for IoU and BIoU.
///
/// Forgetting of task `k` is the drop from its best earlier score to its
/// final score, floored at zero; FF averages it over all tasks but the last.
/// A single-stage record has FF 0.
pub fn stage_aggregate(sm: &StageMetrics) -> Result<ContinualSummary> {
    sm.validate()?;
    Ok(ContinualSummary {
        iou: aggregate(sm, |s| s.iou),
        biou: aggregate(sm, |s| s.biou),
    })
}
