use casam_tensor::{derive_seed, Adam, Module, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bench::{FrozenBackbone, IMAGE_SIZE};
use crate::data::{Batch, EncodedSample};
use crate::error::{CoreError, Result};
use crate::metrics::{binarize_logits, binarize_mask, biou, boundary_band, iou};
use crate::nn::segmentation_loss;

use super::layer::AlignmentLayer;

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Train-time box jitter as a fraction of box size.
    pub box_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            lr: 1e-3,
            batch_size: 6,
            box_jitter: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=0.5).contains(&self.box_jitter) {
            return Err(CoreError::Config(format!("train.box_jitter must lie in [0, 0.5], got {}", self.box_jitter)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean loss over each epoch's steps.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Runs `cfg.epochs` passes of Adam over `samples` in seeded shuffled order.
///
/// `loss` records one batch's objective on the tape; it also receives a
/// generator for any extra sampling it needs. Divergence is reported with
/// `context` attached.
pub fn fit<M, L>(
    model: &mut M,
    samples: &[&EncodedSample],
    cfg: &TrainConfig,
    seed: u64,
    context: &str,
    mut loss: L,
) -> Result<TrainLog>
where
    M: Module,
    L: FnMut(&M, &mut Tape, &Batch, &mut Rng) -> Result<Var>,
{
    cfg.validate()?;
    let mut log = TrainLog::default();
    if samples.is_empty() {
        return Ok(log);
    }
    model.reset_optimizer_state();
    let adam = Adam::new(cfg.lr);
    let mut order_rng = Rng::new(derive_seed(seed, "fit/order"));
    let mut jitter_rng = Rng::new(derive_seed(seed, "fit/jitter"));
    let mut aux_rng = Rng::new(derive_seed(seed, "fit/aux"));
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(samples.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let picked: Vec<&EncodedSample> = idx.iter().map(|&i| samples[i]).collect();
            let mut batch = Batch::assemble(&picked, cfg.box_jitter, Some(&mut jitter_rng))?;
            batch.indices = idx.to_vec();
            let mut tape = Tape::new();
            let l = loss(model, &mut tape, &batch, &mut aux_rng)?;
            let grads = tape.backward(l).map_err(|e| CoreError::diverged(context, e))?;
            total += tape.value(l).item() as f64;
            count += 1;
            adam.step(&mut model.parameters_mut(), &grads);
            log.steps += 1;
        }
        log.epoch_losses.push(total / count as f64);
    }
    Ok(log)
}

/// Records `layer` then the frozen decoder on the tape and returns mask
/// logits for the batch.
pub fn aligned_logits(
    backbone: &FrozenBackbone,
    layer: &AlignmentLayer,
    tape: &mut Tape,
    batch: &Batch,
) -> Result<Var> {
    let z = tape.constant(batch.features.clone());
    let aligned = layer.forward(tape, z)?;
    let boxes = tape.constant(batch.boxes.clone());
    backbone.decode(tape, aligned, boxes)
}

/// Fits one alignment layer on a task's samples with the segmentation loss.
pub fn train_alignment(
    layer: &mut AlignmentLayer,
    backbone: &FrozenBackbone,
    samples: &[&EncodedSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let context = match layer.task_id() {
        Some(t) => format!("alignment layer for task {}", t),
        None => "identity layer".to_string(),
    };
    fit(layer, samples, cfg, seed, &context, |layer, tape, batch, _| {
        let logits = aligned_logits(backbone, layer, tape, batch)?;
        Ok(segmentation_loss(tape, logits, &batch.masks)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub iou: f64,
    pub biou: f64,
}

/// Per-image IoU and boundary IoU of `[B,1,H,W]` logits against masks.
pub fn score_logits(logits: &Tensor, masks: &[&Tensor]) -> Vec<SegScore> {
    let per = IMAGE_SIZE * IMAGE_SIZE;
    let band = boundary_band(IMAGE_SIZE, IMAGE_SIZE);
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let pred = binarize_logits(&logits.data()[i * per..(i + 1) * per]);
            let truth = binarize_mask(m.data());
            SegScore {
                iou: iou(&pred, &truth),
                biou: biou(&pred, &truth, IMAGE_SIZE, IMAGE_SIZE, band),
            }
        })
        .collect()
}

/// Scores samples with tight boxes; `align` maps each chunk of encoder
/// features to the features handed to the decoder.
pub fn evaluate_with<F>(backbone: &FrozenBackbone, samples: &[EncodedSample], mut align: F) -> Result<Vec<SegScore>>
where
    F: FnMut(&[EncodedSample], &Tensor) -> Result<Tensor>,
{
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = Batch::assemble(&refs, 0.0, None)?;
        let aligned = align(chunk, &batch.features)?;
        let logits = backbone.predict(&aligned, &batch.prompts)?;
        let masks: Vec<&Tensor> = chunk.iter().map(|s| &s.mask).collect();
        out.extend(score_logits(&logits, &masks));
    }
    Ok(out)
}

pub fn evaluate_layer(
    backbone: &FrozenBackbone,
    layer: &AlignmentLayer,
    samples: &[EncodedSample],
) -> Result<Vec<SegScore>> {
    evaluate_with(backbone, samples, |_, z| layer.align(z))
}

/// Mean of per-image scores; an empty slice scores zero.
pub fn mean_score(scores: &[SegScore]) -> SegScore {
    if scores.is_empty() {
        return SegScore { iou: 0.0, biou: 0.0 };
    }
    let n = scores.len() as f64;
    SegScore {
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
        biou: scores.iter().map(|s| s.biou).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_stream, untrained_backbone, FEATURE_CHANNELS};
    use crate::data::encode_task;

    fn tiny_task() -> (FrozenBackbone, Vec<EncodedSample>) {
        let bb = untrained_backbone(3);
        let stream = generate_stream(1, 8, 0, 5).unwrap();
        (bb.clone(), encode_task(&bb, &stream[0]).unwrap().train)
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let (bb, samples) = tiny_task();
        let refs: Vec<&EncodedSample> = samples.iter().collect();
        let mut layer = AlignmentLayer::new(0, 1, FEATURE_CHANNELS, 4);
        let before = layer.flatten();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let log = train_alignment(&mut layer, &bb, &refs, &cfg, 1).unwrap();
        assert_eq!(log.steps, 0);
        assert_eq!(layer.flatten(), before);
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let (bb, samples) = tiny_task();
        let refs: Vec<&EncodedSample> = samples.iter().collect();
        let cfg = TrainConfig { epochs: 6, batch_size: 4, lr: 3e-3, ..TrainConfig::default() };
        let run = || {
            let mut layer = AlignmentLayer::new(0, 1, FEATURE_CHANNELS, 4);
            let log = train_alignment(&mut layer, &bb, &refs, &cfg, 2).unwrap();
            (layer.flatten(), log)
        };
        let (w1, log1) = run();
        let (w2, log2) = run();
        assert_eq!(w1, w2);
        assert_eq!(log1, log2);
        assert_eq!(log1.steps, 12);
        assert!(log1.final_loss().unwrap() < log1.epoch_losses[0]);
    }

    #[test]
    fn identity_layer_trains_nothing() {
        let (bb, samples) = tiny_task();
        let refs: Vec<&EncodedSample> = samples.iter().collect();
        let mut layer = AlignmentLayer::identity();
        let log = train_alignment(&mut layer, &bb, &refs, &TrainConfig { epochs: 1, ..TrainConfig::default() }, 0);
        assert!(log.is_ok());
        assert_eq!(layer.num_parameters(), 0);
    }

    #[test]
    fn perfect_logits_score_one() {
        let (_, samples) = tiny_task();
        let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
        let logits = Tensor::stack(
            &samples
                .iter()
                .map(|s| s.mask.map(|v| if v > 0.5 { 5.0 } else { -5.0 }))
                .collect::<Vec<_>>()
                .iter()
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for s in score_logits(&logits, &masks) {
            assert_eq!(s.iou, 1.0);
            assert_eq!(s.biou, 1.0);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn mean_of_nothing_is_zero() {
        assert_eq!(mean_score(&[]).iou, 0.0);
    }
}
