//! Synthetic segmentation domains and the frozen toy backbone.

mod backbone;
mod io;
mod render;
mod spec;
mod stream;

pub use backbone::{
    box_channel, pretrain_backbone, stack_images, untrained_backbone, zero_shot_iou, Decoder, Encoder, FrozenBackbone,
    PretrainConfig, PretrainReport, FEATURE_CHANNELS, FEATURE_SHAPE, FEATURE_SIZE,
};
pub use io::{export_stream, import_stream, read_samples, write_samples};
pub use render::{render, render_broad, render_task, BoxPrompt, Sample};
pub use spec::{validate_stream, BroadSpec, GeometryParams, ShapeFamily, Span, TaskSpec, TextureParams, IMAGE_SIZE};
pub use stream::{generate_from_specs, generate_stream, sample_split, TaskData, FULL_SHIFT};
