//! Exemplar-free task routing: pooled encoder features, one VAE per task
//! scored by its ELBO, calibrated thresholds and identity fallback.

mod calibrate;
mod pool;
mod pooling;
mod vae;

pub use calibrate::{calibrate_threshold, nearest_rank, Calibration, ThresholdRule};
pub use pool::{fit_task_router, load_pool, save_pool, RouteDecision, RouterConfig, RouterEntry, RouterPool, TaskRouter};
pub use pooling::{attention_pool, attention_weights, mean_pool, Pooler, PoolingConfig, PoolingMethod};
pub use vae::{elbo_graph, train_vae, ElboMode, TaskVae, VaeConfig, VaeLog, VaeVars};
