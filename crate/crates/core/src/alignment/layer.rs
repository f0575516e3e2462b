use casam_tensor::{derive_seed, Module, Parameter, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Conv, Norm2d};

/// Kernel width of the channel-mixing 1-D convolution.
pub const CHANNEL_KERNEL: usize = 3;

/// Conv branch gated per channel, added back to the input, then normalised:
/// `y = norm(x + gate ⊙ u)` with `u = conv2(relu(conv1(x)))` and
/// `gate = sigmoid(conv1d(spatial_mean(u)))`.
#[derive(Debug, Clone)]
pub struct CaResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub channel_mix: Parameter,
    pub norm: Norm2d,
}

impl CaResBlock {
    pub fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv::new(&format!("{}.conv1", name), channels, channels, 3, 1, rng),
            conv2: Conv::new(&format!("{}.conv2", name), channels, channels, 3, 1, rng),
            channel_mix: Parameter::he_normal(
                format!("{}.channel_mix", name),
                &[1, 1, CHANNEL_KERNEL],
                CHANNEL_KERNEL,
                1.0,
                rng,
            ),
            norm: Norm2d::new(&format!("{}.norm", name), channels),
        }
    }

    /// Returns the output and the gate node.
    pub fn forward_with_gate(&self, tape: &mut Tape, x: Var) -> casam_tensor::Result<(Var, Var)> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let u = self.conv2.forward(tape, h)?;
        let descriptor = tape.global_avg_pool(u)?;
        let w = tape.param(&self.channel_mix);
        let mixed = tape.conv1d_channel(descriptor, w)?;
        let gate = tape.sigmoid(mixed);
        let gated = tape.channel_gate(u, gate)?;
        let sum = tape.add(x, gated)?;
        Ok((self.norm.forward(tape, sum)?, gate))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> casam_tensor::Result<Var> {
        Ok(self.forward_with_gate(tape, x)?.0)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = Vec::with_capacity(7);
        v.extend(self.conv1.params());
        v.extend(self.conv2.params());
        v.push(&self.channel_mix);
        v.extend(self.norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = Vec::with_capacity(7);
        v.extend(self.conv1.params_mut());
        v.extend(self.conv2.params_mut());
        v.push(&mut self.channel_mix);
        v.extend(self.norm.params_mut());
        v
    }
}

/// Which task a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerSlot {
    Task(u32),
    Identity,
}

/// A stack of [`CaResBlock`]s, or the parameter-free identity layer.
#[derive(Debug, Clone)]
pub struct AlignmentLayer {
    slot: LayerSlot,
    channels: usize,
    blocks: Vec<CaResBlock>,
}

impl AlignmentLayer {
    pub fn identity() -> Self {
        Self {
            slot: LayerSlot::Identity,
            channels: 0,
            blocks: Vec::new(),
        }
    }

    /// Fresh layer whose initial weights depend only on `seed`.
    pub fn new(task_id: u32, n_blocks: usize, channels: usize, seed: u64) -> Self {
        let mut rng = Rng::new(derive_seed(seed, "alignment/init"));
        let blocks = (0..n_blocks)
            .map(|i| CaResBlock::new(&format!("block.{}", i), channels, &mut rng))
            .collect();
        Self {
            slot: LayerSlot::Task(task_id),
            channels,
            blocks,
        }
    }

    pub(crate) fn from_blocks(slot: LayerSlot, channels: usize, blocks: Vec<CaResBlock>) -> Self {
        Self { slot, channels, blocks }
    }

    pub fn slot(&self) -> LayerSlot {
        self.slot
    }

    pub fn task_id(&self) -> Option<u32> {
        match self.slot {
            LayerSlot::Task(t) => Some(t),
            LayerSlot::Identity => None,
        }
    }

    /// Relabels a trained layer, e.g. when a sequential strategy hands its
    /// single layer from one task to the next.
    pub fn with_task(mut self, task_id: u32) -> Self {
        if !self.is_identity() {
            self.slot = LayerSlot::Task(task_id);
        }
        self
    }

    pub fn is_identity(&self) -> bool {
        self.slot == LayerSlot::Identity
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn blocks(&self) -> &[CaResBlock] {
        &self.blocks
    }

    /// Applies the blocks in order. The identity layer returns `z` itself.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> casam_tensor::Result<Var> {
        let mut h = z;
        for b in &self.blocks {
            h = b.forward(tape, h)?;
        }
        Ok(h)
    }

    /// Aligns a `[B,C,h,w]` batch without recording gradients for later use.
    pub fn align(&self, z: &Tensor) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(z.clone());
        }
        let mut tape = Tape::new();
        let x = tape.constant(z.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for AlignmentLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}
