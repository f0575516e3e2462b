//! Segmentation, continual-learning, routing and distribution metrics.

mod distribution;
mod routing;
mod seg;
mod stage;

pub use distribution::{feature_histograms, js_divergence, tv_distance, FeatureHistogram, DEFAULT_BINS};
pub use routing::{routing_accuracy, RouteRecord, RoutingAccuracy, Tally};
pub use seg::{binarize_logits, binarize_mask, biou, boundary_band, boundary_region, iou};
pub use stage::{stage_aggregate, Aggregate, ContinualSummary, StageMetrics, TaskScore};
