use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::{routing_accuracy, stage_aggregate};
use crate::router::{PoolingMethod, ThresholdRule};
use crate::strategies::{run_casam, AdapterCache, StrategyEnv};

use super::config::ExperimentConfig;
use super::run::Experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Temperature,
    Beta,
    TauRule,
    Pooling,
    NBlocks,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Temperature,
        SweepAxis::Beta,
        SweepAxis::TauRule,
        SweepAxis::Pooling,
        SweepAxis::NBlocks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Temperature => "temperature",
            SweepAxis::Beta => "beta",
            SweepAxis::TauRule => "tau_rule",
            SweepAxis::Pooling => "pooling",
            SweepAxis::NBlocks => "n_blocks",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Temperature => &["0.5", "1", "2", "4"],
            SweepAxis::Beta => &["0", "1", "4", "7", "12", "16.5", "18"],
            SweepAxis::TauRule => &["mu_plus_2sigma", "p95", "p97", "p99"],
            SweepAxis::Pooling => &["attention", "gap", "mean", "flatten", "learned", "cls"],
            SweepAxis::NBlocks => &["1", "2", "4"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = || CoreError::Config(format!("invalid {} value {:?}", self.name(), value));
        let mut c = cfg.clone();
        match self {
            SweepAxis::Temperature => c.router.pooling.temperature = value.parse().map_err(|_| bad())?,
            SweepAxis::Beta => c.router.vae.beta = value.parse().map_err(|_| bad())?,
            SweepAxis::TauRule => {
                c.router.rule = ThresholdRule::ALL.into_iter().find(|r| r.name() == value).ok_or_else(bad)?
            }
            SweepAxis::Pooling => {
                c.router.pooling.method = PoolingMethod::ALL.into_iter().find(|m| m.name() == value).ok_or_else(bad)?
            }
            SweepAxis::NBlocks => c.n_blocks = value.parse().map_err(|_| bad())?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown sweep axis {:?}", s)))
    }
}

/// CA-SAM outcome at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub routing_in_distribution: Option<f64>,
    pub routing_ood: Option<f64>,
    /// Pooled over in-distribution and OOD samples.
    pub routing_overall: Option<f64>,
    pub last_iou: f64,
    pub ff_iou: f64,
    /// Mean over the OOD domains.
    pub ood_iou: f64,
    /// Mean calibrated threshold over tasks.
    pub mean_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},routing_in_distribution,routing_ood,routing_overall,Last-IoU,FF-IoU,OOD-IoU,mean_threshold\n",
            self.axis.name()
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{:.6}", x)).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.4},{:.6}",
                r.value,
                opt(r.routing_in_distribution),
                opt(r.routing_ood),
                opt(r.routing_overall),
                100.0 * r.last_iou,
                100.0 * r.ff_iou,
                100.0 * r.ood_iou,
                r.mean_threshold
            );
        }
        out
    }
}

/// Runs CA-SAM once per grid value of `axis`. Adapters come from `cache`,
/// so router-only axes train each adapter once.
pub fn ablation_sweep(
    cfg: &ExperimentConfig,
    exp: &Experiment,
    axis: SweepAxis,
    grid: &[String],
    cache: &mut AdapterCache,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(grid.len());
    for value in grid {
        let c = axis.apply(cfg, value)?;
        let env = StrategyEnv {
            backbone: &exp.backbone,
            train: c.train.clone(),
            n_blocks: c.n_blocks,
            router: c.router.clone(),
            strategy: c.strategy.clone(),
        };
        log::info!("sweep {} = {}", axis, value);
        let out = run_casam(&env, &exp.stream.tasks, &exp.stream.ood, cache)?;
        let acc = routing_accuracy(&out.run.metrics.routing_log);
        let summary = stage_aggregate(&out.run.metrics)?;
        let ood = &out.run.ood;
        let pool = out.run.pool.as_ref().expect("CA-SAM returns its pool");
        rows.push(SweepRow {
            value: value.clone(),
            routing_in_distribution: acc.in_distribution_rate(),
            routing_ood: acc.ood_rate(),
            routing_overall: acc.overall_rate(),
            last_iou: summary.iou.last,
            ff_iou: summary.iou.forgetting,
            ood_iou: ood.iter().map(|o| o.iou).sum::<f64>() / ood.len().max(1) as f64,
            mean_threshold: pool.entries().values().map(|e| e.threshold).sum::<f64>() / pool.len().max(1) as f64,
        });
    }
    Ok(SweepTable { axis, rows })
}
