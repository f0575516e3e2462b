//! Thin layer wrappers over tape primitives.

use casam_tensor::{Parameter, Result, Rng, Tape, Var};

/// Square convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::he_normal(format!("{}.weight", name), &[cout, cin, k, k], cin * k * k, 2f64.sqrt(), rng),
            bias: Parameter::zeros(format!("{}.bias", name), &[cout]),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution with bias; weight layout `[Cin,Cout,k,k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * k * k / (stride * stride);
        Self {
            weight: Parameter::he_normal(format!("{}.weight", name), &[cin, cout, k, k], fan_in, 2f64.sqrt(), rng),
            bias: Parameter::zeros(format!("{}.bias", name), &[cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Dense layer, weight `[out,in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::he_normal(format!("{}.weight", name), &[fan_out, fan_in], fan_in, gain, rng),
            bias: Parameter::zeros(format!("{}.bias", name), &[fan_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub const NORM_EPS: f64 = 1e-6;

/// Channel-wise 2-D layer norm with affine gain and bias.
#[derive(Debug, Clone)]
pub struct Norm2d {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl Norm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gain: Parameter::filled(format!("{}.gain", name), &[channels], 1.0),
            bias: Parameter::zeros(format!("{}.bias", name), &[channels]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm_2d(x, g, b, NORM_EPS)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

/// Mean of binary cross-entropy and soft-Dice on mask logits.
pub fn segmentation_loss(tape: &mut Tape, logits: Var, masks: &casam_tensor::Tensor) -> Result<Var> {
    let bce = tape.bce_with_logits(logits, masks)?;
    let dice = tape.soft_dice(logits, masks)?;
    let both = tape.add(bce, dice)?;
    Ok(tape.scale(both, 0.5))
}
