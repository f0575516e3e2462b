use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One routed sample. `None` for `truth` marks an out-of-distribution
/// sample; `None` for `chosen` marks the identity fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub truth: Option<u32>,
    pub chosen: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, ok: bool) {
        self.correct += ok as usize;
        self.total += 1;
    }
}

/// Routing accuracy. Rates are absent when the corresponding set is empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingAccuracy {
    pub per_task: BTreeMap<u32, Tally>,
    pub in_distribution: Tally,
    pub ood: Tally,
}

impl RoutingAccuracy {
    pub fn in_distribution_rate(&self) -> Option<f64> {
        self.in_distribution.rate()
    }

    pub fn ood_rate(&self) -> Option<f64> {
        self.ood.rate()
    }

    /// Pooled accuracy over every logged sample.
    pub fn overall_rate(&self) -> Option<f64> {
        Tally {
            correct: self.in_distribution.correct + self.ood.correct,
            total: self.in_distribution.total + self.ood.total,
        }
        .rate()
    }
}

/// In-distribution samples count as correct when routed to their own task;
/// OOD samples when they fall back to the identity layer.
pub fn routing_accuracy(log: &[RouteRecord]) -> RoutingAccuracy {
    let mut acc = RoutingAccuracy::default();
    for r in log {
        let ok = r.truth == r.chosen;
        match r.truth {
            Some(t) => {
                acc.per_task.entry(t).or_default().add(ok);
                acc.in_distribution.add(ok);
            }
            None => acc.ood.add(ok),
        }
    }
    acc
}
