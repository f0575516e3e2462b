use std::io::{Read, Write};

use casam_tensor::{derive_seed, Adam, Module, Parameter, Rng, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{CoreError, Result};
use crate::nn::Linear;

use super::pooling::{Pooler, PoolingConfig, PoolingMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// KL weight.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden_dim: 64,
            beta: 16.5,
            epochs: 10,
            lr: 5e-4,
            batch_size: 4,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(CoreError::Config("router.vae dimensions must be positive".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(CoreError::Config(format!("router.vae.beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::Config(format!("router.vae.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("router.vae.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Whether the decoder sees a reparameterised sample or the posterior mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElboMode {
    Train,
    Score,
}

/// Tape handles for the ten VAE weight arrays, in declaration order.
#[derive(Debug, Clone, Copy)]
pub struct VaeVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub mu_w: Var,
    pub mu_b: Var,
    pub logvar_w: Var,
    pub logvar_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl VaeVars {
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), 10, "VaeVars needs ten handles");
        Self {
            enc_w: v[0],
            enc_b: v[1],
            mu_w: v[2],
            mu_b: v[3],
            logvar_w: v[4],
            logvar_b: v[5],
            dec_w: v[6],
            dec_b: v[7],
            out_w: v[8],
            out_b: v[9],
        }
    }
}

/// Batch-mean ELBO of `f: [B,D]`:
/// `mse(f, f̂) + β/2 · Σ_i (μ_i² + σ_i² − 1 − log σ_i²)`, the KL summed over
/// latent dimensions. With `eps` the decoder input is `μ + σ·ε`, otherwise `μ`.
pub fn elbo_graph<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    eps: Option<Var>,
    w: &VaeVars,
    beta: f64,
) -> casam_tensor::Result<Var> {
    let batch = tape.shape(f)[0];
    let h = tape.linear(f, w.enc_w, Some(w.enc_b))?;
    let h = tape.relu(h);
    let mu = tape.linear(h, w.mu_w, Some(w.mu_b))?;
    let logvar = tape.linear(h, w.logvar_w, Some(w.logvar_b))?;
    let z = match eps {
        Some(e) => {
            let half = tape.scale(logvar, 0.5);
            let sigma = tape.exp(half);
            let noise = tape.mul(sigma, e)?;
            tape.add(mu, noise)?
        }
        None => mu,
    };
    let hd = tape.linear(z, w.dec_w, Some(w.dec_b))?;
    let hd = tape.relu(hd);
    let recon = tape.linear(hd, w.out_w, Some(w.out_b))?;
    let rec_loss = tape.mse(recon, f)?;
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let kl = tape.add(mu2, var)?;
    let kl = tape.sub(kl, logvar)?;
    let kl = tape.add_scalar(kl, -1.0);
    let kl = tape.sum(kl);
    let kl = tape.scale(kl, beta / (2.0 * batch as f64));
    tape.add(rec_loss, kl)
}

/// Per-task density model over pooled encoder features.
#[derive(Debug, Clone)]
pub struct TaskVae {
    pooler: Pooler,
    enc: Linear,
    mu: Linear,
    logvar: Linear,
    dec: Linear,
    out: Linear,
    beta: f64,
}

impl TaskVae {
    pub fn new(pooler: Pooler, cfg: &VaeConfig, seed: u64) -> Self {
        let d = pooler.output_dim();
        let (hd, l) = (cfg.hidden_dim, cfg.latent_dim);
        let mut rng = Rng::new(derive_seed(seed, "vae/init"));
        let relu_gain = 2f64.sqrt();
        Self {
            pooler,
            enc: Linear::new("vae.enc", d, hd, relu_gain, &mut rng),
            mu: Linear::new("vae.mu", hd, l, 1.0, &mut rng),
            logvar: Linear::new("vae.logvar", hd, l, 0.1, &mut rng),
            dec: Linear::new("vae.dec", l, hd, relu_gain, &mut rng),
            out: Linear::new("vae.out", hd, d, 1.0, &mut rng),
            beta: cfg.beta,
        }
    }

    pub fn pooler(&self) -> &Pooler {
        &self.pooler
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn input_dim(&self) -> usize {
        self.pooler.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.bias.numel()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc.bias.numel()
    }

    fn layers(&self) -> [&Linear; 5] {
        [&self.enc, &self.mu, &self.logvar, &self.dec, &self.out]
    }

    /// The ten weight arrays without the pooling query.
    pub fn weights(&self) -> Vec<&Parameter> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn vars(&self, tape: &mut Tape) -> VaeVars {
        let v: Vec<Var> = self.weights().into_iter().map(|p| tape.param(p)).collect();
        VaeVars::from_slice(&v)
    }

    /// Batch-mean ELBO over feature maps on the tape, including the pooling
    /// front end.
    pub fn loss_on_tape(&self, tape: &mut Tape, maps: &[&Tensor], eps: Option<&Tensor>) -> Result<Var> {
        let f = self.pooler.pool_on_tape(tape, maps)?;
        let e = eps.map(|e| tape.constant(e.clone()));
        let w = self.vars(tape);
        Ok(elbo_graph(tape, f, e, &w, self.beta)?)
    }

    /// ELBO of one pooled feature, evaluated directly in `f64`. In train mode
    /// `rng` draws the reparameterisation noise.
    pub fn elbo(&self, f: &[f32], mode: ElboMode, rng: Option<&mut Rng>) -> Result<f64> {
        if f.len() != self.input_dim() {
            return Err(CoreError::invalid(format!(
                "VAE expects {}-dim features, got {}",
                self.input_dim(),
                f.len()
            )));
        }
        let x: Vec<f64> = f.iter().map(|&v| v as f64).collect();
        let h = relu(dense(&self.enc, &x));
        let mu = dense(&self.mu, &h);
        let logvar = dense(&self.logvar, &h);
        let z: Vec<f64> = match (mode, rng) {
            (ElboMode::Score, _) => mu.clone(),
            (ElboMode::Train, Some(rng)) => mu
                .iter()
                .zip(&logvar)
                .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.normal())
                .collect(),
            (ElboMode::Train, None) => {
                return Err(CoreError::invalid("train-mode ELBO needs a noise generator"));
            }
        };
        let recon = dense(&self.out, &relu(dense(&self.dec, &z)));
        let rec: f64 = recon.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        let kl: f64 = mu
            .iter()
            .zip(&logvar)
            .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
            .sum();
        let s = rec + 0.5 * self.beta * kl;
        if !s.is_finite() {
            return Err(CoreError::Diverged {
                context: "VAE scoring".into(),
                detail: format!("score became {}", s),
            });
        }
        Ok(s)
    }

    /// Deterministic routing score of a `[C,h,w]` feature map.
    pub fn score(&self, z: &Tensor) -> Result<f64> {
        let f = self.pooler.pool(z)?;
        self.elbo(&f, ElboMode::Score, None)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        binio::write_header(w, VAE_MAGIC, VAE_VERSION)?;
        let method_idx = PoolingMethod::ALL.iter().position(|&m| m == self.pooler.method()).unwrap_or(0);
        let (c, h, wd) = self.pooler.shape();
        for v in [
            method_idx,
            c,
            h,
            wd,
            self.pooler.output_dim(),
            self.hidden_dim(),
            self.latent_dim(),
        ] {
            binio::write_u32(w, v as u32)?;
        }
        binio::write_f64(w, self.pooler.temperature())?;
        binio::write_f64(w, self.beta)?;
        let mut arrays: Vec<(&str, &Tensor)> = self.parameters().into_iter().map(|p| (p.name.as_str(), &p.value)).collect();
        if let Some(p) = self.pooler.projection() {
            arrays.push(("pool.projection", p));
        }
        binio::write_arrays(w, arrays)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        binio::read_header(r, VAE_MAGIC, VAE_VERSION)?;
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = binio::read_u32(r)? as usize;
            if *d > MAX_DIM {
                return Err(CoreError::Format(format!("implausible VAE dimension {}", d)));
            }
        }
        let [method_idx, c, h, wd, input_dim, hidden_dim, latent_dim] = dims;
        let method = *PoolingMethod::ALL
            .get(method_idx)
            .ok_or_else(|| CoreError::Format(format!("unknown pooling method index {}", method_idx)))?;
        let temperature = binio::read_f64(r)?;
        let beta = binio::read_f64(r)?;
        let pool_cfg = PoolingConfig {
            method,
            temperature,
            flatten_dim: input_dim,
        };
        pool_cfg.validate().map_err(|e| CoreError::Format(e.to_string()))?;
        let mut pooler = Pooler::new(&pool_cfg, (c, h, wd), 0)?;
        let cfg = VaeConfig {
            latent_dim,
            hidden_dim,
            beta,
            ..VaeConfig::default()
        };
        cfg.validate().map_err(|e| CoreError::Format(e.to_string()))?;
        let mut arrays = binio::read_arrays(r)?;
        if method == PoolingMethod::Flatten {
            match arrays.pop() {
                Some((name, t)) if name == "pool.projection" && t.shape() == [input_dim, c * h * wd] => {
                    pooler.set_projection(t)
                }
                _ => return Err(CoreError::Format("flatten VAE is missing its projection".into())),
            }
        }
        let mut vae = TaskVae::new(pooler, &cfg, 0);
        binio::load_into(arrays, vae.parameters_mut())?;
        Ok(vae)
    }
}

const VAE_MAGIC: &binio::Magic = b"CASAMVA\0";
const VAE_VERSION: u32 = 1;
const MAX_DIM: usize = 1 << 20;

fn dense(l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = l.weight.value.data();
    let b = l.bias.value.data();
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo as f64 + w[o * n..(o + 1) * n].iter().zip(x).map(|(&a, &v)| a as f64 * v).sum::<f64>())
        .collect()
}

fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

impl Module for TaskVae {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.weights();
        v.extend(self.pooler.query());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = Vec::with_capacity(11);
        v.extend(self.enc.params_mut());
        v.extend(self.mu.params_mut());
        v.extend(self.logvar.params_mut());
        v.extend(self.dec.params_mut());
        v.extend(self.out.params_mut());
        v.extend(self.pooler.query_mut());
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VaeLog {
    pub epoch_losses: Vec<f64>,
}

/// Fits a fresh VAE (and its pooling front end, if learned) to feature maps.
pub fn train_vae(
    maps: &[&Tensor],
    pooling: &PoolingConfig,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(TaskVae, VaeLog)> {
    cfg.validate()?;
    if maps.len() < 2 {
        return Err(CoreError::invalid(format!(
            "a task VAE needs at least 2 feature maps, got {}",
            maps.len()
        )));
    }
    let shape = maps[0].shape();
    if shape.len() != 3 {
        return Err(CoreError::invalid(format!("expected [C,h,w] maps, got {:?}", shape)));
    }
    let pooler = Pooler::new(pooling, (shape[0], shape[1], shape[2]), seed)?;
    let mut vae = TaskVae::new(pooler, cfg, seed);
    let adam = Adam::new(cfg.lr);
    let mut order_rng = Rng::new(derive_seed(seed, "vae/order"));
    let mut noise_rng = Rng::new(derive_seed(seed, "vae/noise"));
    let mut log = VaeLog::default();
    let latent = cfg.latent_dim;
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(maps.len());
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = idx.iter().map(|&i| maps[i]).collect();
            let eps = Tensor::from_fn(vec![batch.len(), latent], |_| noise_rng.normal() as f32);
            let mut tape = Tape::new();
            let loss = vae.loss_on_tape(&mut tape, &batch, Some(&eps))?;
            let grads = tape.backward(loss).map_err(|e| CoreError::diverged("task VAE", e))?;
            total += tape.value(loss).item() as f64;
            count += 1;
            adam.step(&mut vae.parameters_mut(), &grads);
        }
        log.epoch_losses.push(total / count as f64);
    }
    Ok((vae, log))
}
