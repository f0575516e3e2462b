use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use casam_tensor::{derive_seed, Adam, Module, Parameter, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render_broad, BoxPrompt, Sample};
use super::spec::{BroadSpec, IMAGE_SIZE};
use crate::binio;
use crate::error::{CoreError, Result};
use crate::metrics::{binarize_logits, binarize_mask, iou};
use crate::nn::{segmentation_loss, Conv, ConvTranspose, Norm2d};

pub const FEATURE_CHANNELS: usize = 32;
pub const FEATURE_SIZE: usize = 16;

/// `(C, h, w)` of the encoder output.
pub const FEATURE_SHAPE: (usize, usize, usize) = (FEATURE_CHANNELS, FEATURE_SIZE, FEATURE_SIZE);

#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Conv,
    conv: Conv,
    norm: Norm2d,
}

impl EncoderBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            down: Conv::new(&format!("{}.down", name), cin, cout, 3, stride, rng),
            conv: Conv::new(&format!("{}.conv", name), cout, cout, 3, 1, rng),
            norm: Norm2d::new(&format!("{}.norm", name), cout),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> casam_tensor::Result<Var> {
        let h = self.down.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv.forward(tape, h)?;
        let h = tape.relu(h);
        self.norm.forward(tape, h)
    }
}

/// Three conv blocks, 3→16 (stride 2), 16→32 (stride 2), 32→32.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    fn new(rng: &mut Rng) -> Self {
        Self {
            blocks: vec![
                EncoderBlock::new("enc.0", 3, 16, 2, rng),
                EncoderBlock::new("enc.1", 16, FEATURE_CHANNELS, 2, rng),
                EncoderBlock::new("enc.2", FEATURE_CHANNELS, FEATURE_CHANNELS, 1, rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, images: Var) -> casam_tensor::Result<Var> {
        let mut h = images;
        for b in &self.blocks {
            h = b.forward(tape, h)?;
        }
        Ok(h)
    }
}

impl Module for Encoder {
    fn parameters(&self) -> Vec<&Parameter> {
        self.blocks
            .iter()
            .flat_map(|b| b.down.params().into_iter().chain(b.conv.params()).chain(b.norm.params()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                b.down
                    .params_mut()
                    .into_iter()
                    .chain(b.conv.params_mut())
                    .chain(b.norm.params_mut())
            })
            .collect()
    }
}

/// Box channel concatenated to the features, then two ×2 transposed-conv
/// stages back to image resolution and a one-channel head.
#[derive(Debug, Clone)]
pub struct Decoder {
    up1: ConvTranspose,
    mid: Conv,
    up2: ConvTranspose,
    head: Conv,
}

impl Decoder {
    fn new(rng: &mut Rng) -> Self {
        Self {
            up1: ConvTranspose::new("dec.up1", FEATURE_CHANNELS + 1, 32, 4, 2, 1, rng),
            mid: Conv::new("dec.mid", 32, 32, 3, 1, rng),
            up2: ConvTranspose::new("dec.up2", 32, 16, 4, 2, 1, rng),
            head: Conv::new("dec.head", 16, 1, 3, 1, rng),
        }
    }

    /// `features: [B,C,h,w]`, `boxes: [B,1,h,w]` → logits `[B,1,H,W]`.
    pub fn forward(&self, tape: &mut Tape, features: Var, boxes: Var) -> casam_tensor::Result<Var> {
        let x = tape.concat_channels(features, boxes)?;
        let h = self.up1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.mid.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.up2.forward(tape, h)?;
        let h = tape.relu(h);
        self.head.forward(tape, h)
    }
}

impl Module for Decoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = Vec::new();
        v.extend(self.up1.params());
        v.extend(self.mid.params());
        v.extend(self.up2.params());
        v.extend(self.head.params());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = Vec::new();
        v.extend(self.up1.params_mut());
        v.extend(self.mid.params_mut());
        v.extend(self.up2.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Box prompts as a `[B,1,h,w]` binary map at feature resolution.
pub fn box_channel(boxes: &[BoxPrompt]) -> Tensor {
    let cells = FEATURE_SIZE * FEATURE_SIZE;
    let mut data = Vec::with_capacity(boxes.len() * cells);
    for b in boxes {
        data.extend(b.to_grid(IMAGE_SIZE, FEATURE_SIZE));
    }
    Tensor::new(vec![boxes.len(), 1, FEATURE_SIZE, FEATURE_SIZE], data).expect("box grid shape")
}

/// Stacks `[3,H,W]` images into `[B,3,H,W]`.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = samples.into_iter().map(|s| &s.image).collect();
    Ok(Tensor::stack(&imgs)?)
}

/// Encoder and decoder with every parameter frozen. There is no mutable
/// access; the only way to get one is [`FrozenBackbone::freeze`] or loading.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    encoder: Encoder,
    decoder: Decoder,
}

const ENCODE_CHUNK: usize = 32;

impl FrozenBackbone {
    pub fn freeze(mut encoder: Encoder, mut decoder: Decoder) -> Self {
        encoder.freeze_all();
        decoder.freeze_all();
        Self { encoder, decoder }
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        FEATURE_SHAPE
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Every parameter, encoder first.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.parameters();
        v.extend(self.decoder.parameters());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// `[B,3,H,W]` → `[B,C,h,w]`. The encoder sees only the image; the box
    /// prompt reaches the model through the decoder.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let z = self.encoder.forward(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// `[3,H,W]` → `[C,h,w]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let batch = image.clone().reshape(vec![1, 3, IMAGE_SIZE, IMAGE_SIZE])?;
        let z = self.encode_batch(&batch)?;
        Ok(z.reshape(vec![FEATURE_CHANNELS, FEATURE_SIZE, FEATURE_SIZE])?)
    }

    /// Encodes many samples in fixed-size chunks, one `[C,h,w]` per sample.
    pub fn encode_all(&self, samples: &[Sample]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let z = self.encode_batch(&stack_images(chunk)?)?;
            for i in 0..chunk.len() {
                out.push(z.index_outer(i));
            }
        }
        Ok(out)
    }

    /// Decoder on the tape; gradients can flow into `features` but never into
    /// the decoder's own parameters.
    pub fn decode(&self, tape: &mut Tape, features: Var, boxes: Var) -> Result<Var> {
        Ok(self.decoder.forward(tape, features, boxes)?)
    }

    /// Mask logits `[B,1,H,W]` for already-aligned features.
    pub fn predict(&self, features: &Tensor, boxes: &[BoxPrompt]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(features.clone());
        let b = tape.constant(box_channel(boxes));
        let y = self.decode(&mut tape, z, b)?;
        Ok(tape.value(y).clone())
    }

    /// SHA-256 over every parameter's name, shape and value bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.parameters() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = BufWriter::new(file);
        binio::write_header(&mut w, BACKBONE_MAGIC, BACKBONE_VERSION)?;
        let params = self.parameters();
        binio::write_arrays(&mut w, params.iter().map(|p| (p.name.as_str(), &p.value)))?;
        w.flush().map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut r = BufReader::new(file);
        binio::read_header(&mut r, BACKBONE_MAGIC, BACKBONE_VERSION)?;
        let arrays = binio::read_arrays(&mut r)?;
        let mut rng = Rng::new(0);
        let mut encoder = Encoder::new(&mut rng);
        let mut decoder = Decoder::new(&mut rng);
        let mut params = encoder.parameters_mut();
        params.extend(decoder.parameters_mut());
        binio::load_into(arrays, params)?;
        Ok(Self::freeze(encoder, decoder))
    }
}

const BACKBONE_MAGIC: &binio::Magic = b"CASAMBB\0";
const BACKBONE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub iou_floor: f64,
    /// Train-time box jitter as a fraction of box size.
    pub box_jitter: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 12,
            lr: 2e-3,
            eval_samples: 200,
            iou_floor: 0.7,
            box_jitter: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_samples == 0 {
            return Err(CoreError::Config("pretraining batch size and eval samples must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::Config("pretraining lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub heldout_iou: f64,
    pub final_loss: f64,
}

/// Cosine decay from `lr` to a tenth of it.
fn schedule(lr: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Trains encoder and decoder jointly on fresh draws from the broad mixture,
/// freezes them, and checks held-out IoU against the configured floor.
pub fn pretrain_backbone(broad: &BroadSpec, cfg: &PretrainConfig, seed: u64) -> Result<(FrozenBackbone, PretrainReport)> {
    broad.validate()?;
    cfg.validate()?;
    let mut init_rng = Rng::new(derive_seed(seed, "backbone/init"));
    let mut encoder = Encoder::new(&mut init_rng);
    let mut decoder = Decoder::new(&mut init_rng);
    let mut data_rng = Rng::new(derive_seed(seed, "backbone/data"));
    let mut jitter_rng = Rng::new(derive_seed(seed, "backbone/jitter"));

    let mut recent = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch_size).map(|_| render_broad(broad, &mut data_rng)).collect();
        let boxes: Vec<BoxPrompt> = batch
            .iter()
            .map(|s| s.bbox.jittered(cfg.box_jitter, IMAGE_SIZE, &mut jitter_rng))
            .collect();
        let masks = Tensor::stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let x = tape.constant(stack_images(&batch)?);
        let z = encoder.forward(&mut tape, x)?;
        let b = tape.constant(box_channel(&boxes));
        let logits = decoder.forward(&mut tape, z, b)?;
        let loss = segmentation_loss(&mut tape, logits, &masks)?;
        let grads = tape
            .backward(loss)
            .map_err(|e| CoreError::diverged(format!("backbone pretraining step {}", step), e))?;
        let adam = Adam::new(schedule(cfg.lr, step, cfg.steps));
        let mut params = encoder.parameters_mut();
        params.extend(decoder.parameters_mut());
        adam.step(&mut params, &grads);

        recent.push(tape.value(loss).item() as f64);
        if recent.len() > 50 {
            recent.remove(0);
        }
        if step % 200 == 0 {
            log::debug!("pretrain step {} loss {:.4}", step, recent.last().copied().unwrap_or(0.0));
        }
    }

    let backbone = FrozenBackbone::freeze(encoder, decoder);
    let mut eval_rng = Rng::new(derive_seed(seed, "backbone/eval"));
    let heldout: Vec<Sample> = (0..cfg.eval_samples).map(|_| render_broad(broad, &mut eval_rng)).collect();
    let heldout_iou = zero_shot_iou(&backbone, &heldout)?;
    let report = PretrainReport {
        heldout_iou,
        final_loss: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
    };
    if heldout_iou < cfg.iou_floor {
        return Err(CoreError::BackboneQuality {
            iou: heldout_iou,
            floor: cfg.iou_floor,
        });
    }
    Ok((backbone, report))
}

/// Mean IoU of the frozen backbone with no alignment, using tight boxes.
pub fn zero_shot_iou(backbone: &FrozenBackbone, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(ENCODE_CHUNK) {
        let z = backbone.encode_batch(&stack_images(chunk)?)?;
        let boxes: Vec<BoxPrompt> = chunk.iter().map(|s| s.bbox).collect();
        let logits = backbone.predict(&z, &boxes)?;
        let per = IMAGE_SIZE * IMAGE_SIZE;
        for (i, s) in chunk.iter().enumerate() {
            let pred = binarize_logits(&logits.data()[i * per..(i + 1) * per]);
            total += iou(&pred, &binarize_mask(s.mask.data()));
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// A freshly initialised (untrained) frozen backbone, for tests that only
/// need shapes and freeze behaviour.
pub fn untrained_backbone(seed: u64) -> FrozenBackbone {
    let mut rng = Rng::new(derive_seed(seed, "backbone/init"));
    let encoder = Encoder::new(&mut rng);
    let decoder = Decoder::new(&mut rng);
    FrozenBackbone::freeze(encoder, decoder)
}
