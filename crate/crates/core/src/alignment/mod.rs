//! Residual channel-attention alignment layers and their training loop.

mod checkpoint;
mod layer;
mod train;

pub use checkpoint::{load_layer, read_layer, save_layer, write_layer};
pub use layer::{AlignmentLayer, CaResBlock, LayerSlot, CHANNEL_KERNEL};
pub use train::{
    aligned_logits, evaluate_layer, evaluate_with, fit, mean_score, score_logits, train_alignment, SegScore, TrainConfig, TrainLog,
};
