use std::fmt::Write as _;

use crate::data::EncodedTask;
use crate::error::Result;
use crate::metrics::{routing_accuracy, RouteRecord, RoutingAccuracy};
use crate::router::RouterPool;

use super::run::PreparedStream;

/// One test sample's routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteRow {
    pub domain: String,
    pub task_id: u32,
    pub ood: bool,
    pub sample: usize,
    pub chosen: Option<u32>,
    pub best: u32,
    pub best_score: f64,
    pub threshold: f64,
}

/// Routes every test sample of the stream and OOD tasks through `pool`.
/// A stream task the pool has no entry for counts as OOD.
pub fn route_stream(pool: &RouterPool, stream: &PreparedStream) -> Result<(Vec<RouteRow>, RoutingAccuracy)> {
    let mut rows = Vec::new();
    let mut log = Vec::new();
    let tagged = stream.tasks.iter().map(|t| (t, false)).chain(stream.ood.iter().map(|t| (t, true)));
    for (task, ood) in tagged {
        let ood = ood || pool.get(task.task_id()).is_none();
        route_task(pool, task, ood, &mut rows, &mut log)?;
    }
    Ok((rows, routing_accuracy(&log)))
}

fn route_task(
    pool: &RouterPool,
    task: &EncodedTask,
    ood: bool,
    rows: &mut Vec<RouteRow>,
    log: &mut Vec<RouteRecord>,
) -> Result<()> {
    for (i, s) in task.test.iter().enumerate() {
        let d = pool.route(&s.features)?;
        log.push(RouteRecord {
            truth: (!ood).then_some(task.task_id()),
            chosen: d.chosen,
        });
        rows.push(RouteRow {
            domain: task.spec.name.clone(),
            task_id: task.task_id(),
            ood,
            sample: i,
            chosen: d.chosen,
            best: d.best,
            best_score: d.scores[&d.best],
            threshold: d.threshold_used,
        });
    }
    Ok(())
}

pub fn route_table(rows: &[RouteRow]) -> String {
    let mut out = String::from("domain,task,ood,sample,chosen,best,best_score,threshold\n");
    for r in rows {
        let chosen = r.chosen.map(|c| c.to_string()).unwrap_or_else(|| "identity".into());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.domain, r.task_id, r.ood, r.sample, chosen, r.best, r.best_score, r.threshold
        );
    }
    out
}
