use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::metrics::{routing_accuracy, stage_aggregate, ContinualSummary, StageMetrics, TaskScore};
use crate::router::{save_pool, ThresholdRule};
use crate::strategies::{OodScore, StrategyKind};

use super::config::ExperimentConfig;
use super::run::ExperimentResult;

pub const COMPARISON_HEADER: &str = "method,EF,Last-IoU,Avg-IoU,FF-IoU,Last-BIoU,Avg-BIoU,FF-BIoU";
const STAGE_HEADER: &str = "stage,task,n,IoU,BIoU";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const STAGES_DIR: &str = "stages";
pub const POOL_DIR: &str = "pool";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub backbone_fingerprint: String,
    /// `ok` or the failure message, per method.
    pub runs: BTreeMap<String, String>,
    /// SHA-256 of every other file in the report, by relative path.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.runs.values().all(|s| s == "ok")
    }
}

#[derive(Debug, Clone, Serialize)]
struct MethodSummary<'a> {
    exemplar_free: bool,
    summary: ContinualSummary,
    oracle: Option<ContinualSummary>,
    ood: &'a [OodScore],
    past_reads: usize,
    trainable_parameters: usize,
}

/// IoU points with fixed precision.
fn points(v: f64) -> String {
    format!("{:.4}", 100.0 * v)
}

/// One comparison-table row from a strategy's stage record.
pub fn comparison_row(method: &str, exemplar_free: bool, sm: &StageMetrics) -> Result<String> {
    let s = stage_aggregate(sm)?;
    Ok(format!(
        "{},{},{},{},{},{},{},{}",
        method,
        exemplar_free,
        points(s.iou.last),
        points(s.iou.avg),
        points(s.iou.forgetting),
        points(s.biou.last),
        points(s.biou.avg),
        points(s.biou.forgetting)
    ))
}

/// Stage table with scores at full round-trip precision, so every
/// aggregate can be recomputed exactly from it.
pub fn stage_table(sm: &StageMetrics) -> String {
    let mut out = String::from(STAGE_HEADER);
    out.push('\n');
    for (t, stage) in sm.stages.iter().enumerate() {
        for s in stage {
            let _ = writeln!(out, "{},{},{},{},{}", t, s.task_id, s.n, s.iou, s.biou);
        }
    }
    out
}

pub fn parse_stage_table(text: &str) -> Result<StageMetrics> {
    let mut lines = text.lines();
    if lines.next() != Some(STAGE_HEADER) {
        return Err(CoreError::Format("stage table header mismatch".into()));
    }
    let mut sm = StageMetrics::default();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || CoreError::Format(format!("stage table line {}: {:?}", i + 2, line));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let stage: usize = f[0].parse().map_err(|_| bad())?;
        let score = TaskScore {
            task_id: f[1].parse().map_err(|_| bad())?,
            n: f[2].parse().map_err(|_| bad())?,
            iou: f[3].parse().map_err(|_| bad())?,
            biou: f[4].parse().map_err(|_| bad())?,
        };
        if stage == sm.stages.len() {
            sm.stages.push(Vec::new());
        } else if stage + 1 != sm.stages.len() {
            return Err(bad());
        }
        sm.stages[stage].push(score);
    }
    sm.validate()?;
    Ok(sm)
}

struct Writer<'a> {
    root: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CoreError::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256(bytes));
        Ok(())
    }

    fn record_existing(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256(&bytes));
        Ok(())
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CoreError::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes the full report bundle into `dir`: comparison, stage, OOD,
/// routing and threshold tables, a summary document, the resolved config,
/// the CA-SAM router pool, and a manifest with per-file hashes. Identical
/// results give identical bytes.
pub fn emit_report(result: &ExperimentResult, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut w = Writer {
        root: dir,
        files: BTreeMap::new(),
    };
    w.put("config.toml", cfg.to_toml()?.as_bytes())?;

    let mut comparison = String::from(COMPARISON_HEADER);
    comparison.push('\n');
    let mut ood = String::from("method,task,name,IoU,BIoU\n");
    for z in result.zero_shot.iter().filter(|z| z.ood) {
        let _ = writeln!(ood, "identity,{},{},{},{}", z.task_id, z.name, points(z.iou), points(z.biou));
    }
    let mut routing = String::from("method,scope,correct,total,accuracy\n");
    let mut runs = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    let mut ordered: Vec<_> = result.results.iter().collect();
    ordered.sort_by_key(|r| r.kind);
    for r in ordered {
        let name = r.kind.name();
        let run = match &r.outcome {
            Ok(run) => run,
            Err(e) => {
                runs.insert(name.to_string(), format!("failed: {}", e));
                continue;
            }
        };
        runs.insert(name.to_string(), "ok".to_string());
        let _ = writeln!(comparison, "{}", comparison_row(name, r.kind.exemplar_free(), &run.metrics)?);
        w.put(&format!("{}/{}.csv", STAGES_DIR, name), stage_table(&run.metrics).as_bytes())?;
        if let Some(o) = &run.oracle_metrics {
            w.put(&format!("{}/{}-oracle.csv", STAGES_DIR, name), stage_table(o).as_bytes())?;
        }
        for o in &run.ood {
            let _ = writeln!(ood, "{},{},{},{},{}", name, o.task_id, o.name, points(o.iou), points(o.biou));
        }
        if !run.metrics.routing_log.is_empty() {
            let acc = routing_accuracy(&run.metrics.routing_log);
            let mut scopes: Vec<(String, _)> = acc.per_task.iter().map(|(t, v)| (format!("task:{}", t), *v)).collect();
            scopes.push(("in_distribution".into(), acc.in_distribution));
            scopes.push(("ood".into(), acc.ood));
            for (scope, tally) in scopes {
                let rate = tally.rate().map(|v| format!("{:.6}", v)).unwrap_or_default();
                let _ = writeln!(routing, "{},{},{},{},{}", name, scope, tally.correct, tally.total, rate);
            }
        }
        if let Some(pool) = &run.pool {
            let pool_dir = dir.join(POOL_DIR);
            save_pool(pool, &pool_dir)?;
            let mut entries: Vec<String> = fs::read_dir(&pool_dir)
                .map_err(|e| CoreError::io(&pool_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect();
            entries.sort();
            for f in entries {
                w.record_existing(&format!("{}/{}", POOL_DIR, f))?;
            }
        }
        summaries.insert(
            name.to_string(),
            MethodSummary {
                exemplar_free: r.kind.exemplar_free(),
                summary: stage_aggregate(&run.metrics)?,
                oracle: run.oracle_metrics.as_ref().map(stage_aggregate).transpose()?,
                ood: &run.ood,
                past_reads: run.past_reads,
                trainable_parameters: run.trainable_parameters,
            },
        );
    }
    w.put(COMPARISON_FILE, comparison.as_bytes())?;
    w.put("ood.csv", ood.as_bytes())?;
    w.put("routing.csv", routing.as_bytes())?;

    let mut thresholds = String::from("task");
    for rule in ThresholdRule::ALL {
        let _ = write!(thresholds, ",{}", rule.name());
    }
    thresholds.push_str(",coverage\n");
    for row in &result.thresholds {
        let _ = write!(thresholds, "{}", row.task_id);
        for rule in ThresholdRule::ALL {
            let _ = write!(thresholds, ",{:.6}", row.thresholds[rule.name()]);
        }
        let _ = writeln!(thresholds, ",{:.6}", row.coverage);
    }
    w.put("thresholds.csv", thresholds.as_bytes())?;

    let mut zero = String::from("task,name,ood,IoU,BIoU\n");
    for z in &result.zero_shot {
        let _ = writeln!(zero, "{},{},{},{},{}", z.task_id, z.name, z.ood, points(z.iou), points(z.biou));
    }
    w.put("zero_shot.csv", zero.as_bytes())?;
    w.put("summary.json", &json(&summaries)?)?;

    let manifest = Manifest {
        schema_version: cfg.schema_version,
        name: result.name.clone(),
        config_hash: result.config_hash.clone(),
        backbone_fingerprint: result.backbone_fingerprint.clone(),
        runs,
        files: w.files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json(&manifest)?).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {}", path.display(), e)))
}

/// Rebuilds the comparison table of a report directory from its stage
/// tables, in manifest order.
pub fn rebuild_comparison(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    let mut methods: Vec<StrategyKind> = Vec::new();
    for (name, status) in &manifest.runs {
        if status == "ok" {
            methods.push(name.parse()?);
        }
    }
    methods.sort();
    for kind in methods {
        let path = dir.join(STAGES_DIR).join(format!("{}.csv", kind.name()));
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let _ = writeln!(out, "{}", comparison_row(kind.name(), kind.exemplar_free(), &parse_stage_table(&text)?)?);
    }
    Ok(out)
}
