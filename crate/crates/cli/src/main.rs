use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use casam_core::experiment::{
    ablation_sweep, emit_report, obtain_backbone, prepare, prepare_stream, read_manifest, rebuild_comparison,
    route_stream, route_table, run_prepared, BackboneSource, ExperimentConfig, SweepAxis, COMPARISON_FILE,
};
use casam_core::router::load_pool;
use casam_core::strategies::{AdapterCache, StrategyKind};

#[derive(Parser)]
#[command(name = "casam", version, about = "Continual alignment experiments on a synthetic segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and CASAM_OUTPUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the stream and strategy seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Parallel strategy workers; overrides the config and CASAM_THREADS.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen backbone, or confirm the cached one.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured strategies and write the report bundle.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of the configured strategies.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Sweep one router or layer hyperparameter for CA-SAM.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// temperature, beta, tau_rule, pooling, n_blocks or all.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid; the axis default when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Route the configured stream's test samples through a saved pool.
    Route {
        #[command(flatten)]
        common: Common,
        /// Directory written by save_pool (a report's pool/ directory).
        #[arg(long)]
        pool: PathBuf,
    },
    /// Rebuild a report's comparison table from its stage tables and check
    /// it against the stored one.
    Report {
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = common.seed_override {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pretrain(common: &Common) -> Result<bool> {
    let cfg = load_config(common)?;
    let (backbone, source) = obtain_backbone(&cfg.backbone)?;
    match source {
        BackboneSource::Cached(p) => println!("cached backbone {}", p.display()),
        BackboneSource::Pretrained { path, report } => println!(
            "pretrained backbone {} (held-out IoU {:.4}, final loss {:.4})",
            path.display(),
            report.heldout_iou,
            report.final_loss
        ),
    }
    println!("fingerprint {}", backbone.fingerprint());
    Ok(true)
}

fn run(common: &Common, only: &[String]) -> Result<bool> {
    let mut cfg = load_config(common)?;
    if !only.is_empty() {
        let picked: Vec<StrategyKind> = only.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
        cfg.strategies.retain(|k| picked.contains(k));
        if cfg.strategies.len() != picked.len() {
            bail!("--strategies names a strategy the config does not list");
        }
    }
    let exp = prepare(&cfg)?;
    let result = run_prepared(&cfg, &exp, &mut AdapterCache::new())?;
    let manifest = emit_report(&result, &cfg, &cfg.output_dir)?;
    print!("{}", fs::read_to_string(cfg.output_dir.join(COMPARISON_FILE))?);
    for (method, status) in manifest.runs.iter().filter(|(_, s)| *s != "ok") {
        eprintln!("{}: {}", method, status);
    }
    println!("report written to {}", cfg.output_dir.display());
    Ok(manifest.all_ok())
}

fn sweep(common: &Common, axis: &str, values: &[String]) -> Result<bool> {
    let cfg = load_config(common)?;
    let axes: Vec<SweepAxis> = if axis == "all" {
        if !values.is_empty() {
            bail!("--values needs a single axis");
        }
        SweepAxis::ALL.to_vec()
    } else {
        vec![axis.parse()?]
    };
    let exp = prepare(&cfg)?;
    let mut cache = AdapterCache::new();
    for a in axes {
        let grid = if values.is_empty() { a.default_grid() } else { values.to_vec() };
        let table = ablation_sweep(&cfg, &exp, a, &grid, &mut cache)?;
        let csv = table.to_csv();
        write(&cfg.output_dir.join(format!("sweep_{}.csv", a.name())), &csv)?;
        print!("{}", csv);
    }
    Ok(true)
}

fn route(common: &Common, pool_dir: &Path) -> Result<bool> {
    let cfg = load_config(common)?;
    let pool = load_pool(pool_dir).with_context(|| format!("loading pool from {}", pool_dir.display()))?;
    let (backbone, _) = obtain_backbone(&cfg.backbone)?;
    let stream = prepare_stream(&cfg.stream, &backbone)?;
    let (rows, acc) = route_stream(&pool, &stream)?;
    let path = cfg.output_dir.join("routes.csv");
    write(&path, &route_table(&rows))?;
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "n/a".into());
    println!(
        "in-distribution accuracy {} ({}/{}), OOD fallback {} ({}/{})",
        pct(acc.in_distribution.rate()),
        acc.in_distribution.correct,
        acc.in_distribution.total,
        pct(acc.ood.rate()),
        acc.ood.correct,
        acc.ood.total
    );
    println!("decisions written to {}", path.display());
    Ok(true)
}

fn report(dir: &Path) -> Result<bool> {
    let manifest = read_manifest(dir)?;
    let rebuilt = rebuild_comparison(dir)?;
    let stored = fs::read_to_string(dir.join(COMPARISON_FILE)).context("reading the stored comparison table")?;
    print!("{}", rebuilt);
    if rebuilt != stored {
        eprintln!("comparison table does not match the stage tables");
        return Ok(false);
    }
    println!("comparison table consistent with {} stage tables", manifest.runs.values().filter(|s| *s == "ok").count());
    Ok(manifest.all_ok())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Pretrain { common } => pretrain(common),
        Command::Run { common, strategies } => run(common, strategies),
        Command::Sweep { common, axis, values } => sweep(common, axis, values),
        Command::Route { common, pool } => route(common, pool),
        Command::Report { out } => report(out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
