//! Declarative experiments: configuration, backbone caching, strategy
//! runs with crash isolation, ablation sweeps and byte-stable reports.

mod cache;
mod config;
mod report;
mod route;
mod run;
mod sweep;

pub use cache::{backbone_key, backbone_path, obtain_backbone, BackboneSource};
pub use config::{BackboneConfig, ExperimentConfig, StreamConfig, ENV_OUTPUT_DIR, ENV_THREADS, SCHEMA_VERSION};
pub use report::{
    comparison_row, emit_report, parse_stage_table, read_manifest, rebuild_comparison, stage_table, Manifest,
    COMPARISON_FILE, COMPARISON_HEADER, MANIFEST_FILE, POOL_DIR, STAGES_DIR,
};
pub use route::{route_stream, route_table, RouteRow};
pub use run::{
    prepare, prepare_stream, run_experiment, run_prepared, Experiment, ExperimentResult, PreparedStream,
    StrategyResult, ThresholdRow, ZeroShot,
};
pub use sweep::{ablation_sweep, SweepAxis, SweepRow, SweepTable};
