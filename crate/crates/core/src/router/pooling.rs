use casam_tensor::{derive_seed, Parameter, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// How a `[C,h,w]` feature map becomes the vector a task VAE sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    /// Parameter-free saliency attention: softmax of column norms.
    Attention,
    /// Global average pooling.
    Gap,
    /// Spatial mean; the same computation as `Gap`, kept as its own grid
    /// point for the pooling sweep.
    Mean,
    /// Flattened map through a fixed random projection.
    Flatten,
    /// Learned scoring vector over positions, trained with each VAE.
    Learned,
    /// Stand-in for a class token: a learned query matched against every
    /// position by scaled dot product.
    Cls,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 6] = [
        PoolingMethod::Attention,
        PoolingMethod::Gap,
        PoolingMethod::Mean,
        PoolingMethod::Flatten,
        PoolingMethod::Learned,
        PoolingMethod::Cls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingMethod::Attention => "attention",
            PoolingMethod::Gap => "gap",
            PoolingMethod::Mean => "mean",
            PoolingMethod::Flatten => "flatten",
            PoolingMethod::Learned => "learned",
            PoolingMethod::Cls => "cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingConfig {
    pub method: PoolingMethod,
    pub temperature: f64,
    /// Output size of the flatten projection.
    pub flatten_dim: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            method: PoolingMethod::Attention,
            temperature: 1.0,
            flatten_dim: 32,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CoreError::Config(format!(
                "router.pooling.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.method == PoolingMethod::Flatten && self.flatten_dim == 0 {
            return Err(CoreError::Config("router.pooling.flatten_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Attention weights over the `h·w` positions of a `[C,h,w]` map:
/// softmax of `‖Z[:,p]‖ / (C·T)`.
pub fn attention_weights(z: &Tensor, temperature: f64) -> Vec<f64> {
    let (c, hw) = map_dims(z);
    let d = z.data();
    let logits: Vec<f64> = (0..hw)
        .map(|p| {
            let sq: f64 = (0..c).map(|ch| (d[ch * hw + p] as f64).powi(2)).sum();
            sq.sqrt() / (c as f64 * temperature)
        })
        .collect();
    softmax(&logits)
}

/// Saliency-weighted sum of the columns of a `[C,h,w]` map.
pub fn attention_pool(z: &Tensor, temperature: f64) -> Vec<f32> {
    weighted_columns(z, &attention_weights(z, temperature))
}

/// Per-channel spatial mean.
pub fn mean_pool(z: &Tensor) -> Vec<f32> {
    let (_, hw) = map_dims(z);
    weighted_columns(z, &vec![1.0 / hw as f64; hw])
}

fn map_dims(z: &Tensor) -> (usize, usize) {
    assert_eq!(z.rank(), 3, "pooling expects a [C,h,w] map, got {:?}", z.shape());
    (z.dim(0), z.dim(1) * z.dim(2))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn weighted_columns(z: &Tensor, alpha: &[f64]) -> Vec<f32> {
    let (c, hw) = map_dims(z);
    let d = z.data();
    (0..c)
        .map(|ch| {
            let row = &d[ch * hw..(ch + 1) * hw];
            row.iter().zip(alpha).map(|(&v, &a)| v as f64 * a).sum::<f64>() as f32
        })
        .collect()
}

/// A pooling front end bound to one feature-map shape.
#[derive(Debug, Clone)]
pub struct Pooler {
    method: PoolingMethod,
    temperature: f64,
    shape: (usize, usize, usize),
    /// `[D, C·h·w]` for the flatten variant.
    projection: Option<Tensor>,
    /// `[1, C]` for the learned variants.
    query: Option<Parameter>,
}

impl Pooler {
    pub fn new(cfg: &PoolingConfig, shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c, h, w) = shape;
        let mut projection = None;
        let mut query = None;
        match cfg.method {
            PoolingMethod::Flatten => {
                let n = c * h * w;
                let mut rng = Rng::new(derive_seed(seed, "pooling/projection"));
                let scale = 1.0 / (n as f64).sqrt();
                projection = Some(Tensor::from_fn(vec![cfg.flatten_dim, n], |_| (rng.normal() * scale) as f32));
            }
            PoolingMethod::Learned => query = Some(Parameter::zeros("pool.query", &[1, c])),
            PoolingMethod::Cls => {
                let mut rng = Rng::new(derive_seed(seed, "pooling/query"));
                query = Some(Parameter::new(
                    "pool.query",
                    Tensor::from_fn(vec![1, c], |_| rng.normal() as f32),
                ));
            }
            _ => {}
        }
        Ok(Self {
            method: cfg.method,
            temperature: cfg.temperature,
            shape,
            projection,
            query,
        })
    }

    pub fn method(&self) -> PoolingMethod {
        self.method
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn output_dim(&self) -> usize {
        match &self.projection {
            Some(p) => p.dim(0),
            None => self.shape.0,
        }
    }

    pub fn is_learned(&self) -> bool {
        self.query.is_some()
    }

    pub fn projection(&self) -> Option<&Tensor> {
        self.projection.as_ref()
    }

    pub(crate) fn set_projection(&mut self, p: Tensor) {
        self.projection = Some(p);
    }

    pub fn query(&self) -> Option<&Parameter> {
        self.query.as_ref()
    }

    pub fn query_mut(&mut self) -> Option<&mut Parameter> {
        self.query.as_mut()
    }

    fn query_scale(&self) -> f64 {
        match self.method {
            PoolingMethod::Cls => 1.0 / (self.shape.0 as f64).sqrt(),
            _ => 1.0,
        }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        let (c, h, w) = self.shape;
        if z.shape() != [c, h, w] {
            return Err(CoreError::invalid(format!(
                "pooler expects [{}, {}, {}] maps, got {:?}",
                c,
                h,
                w,
                z.shape()
            )));
        }
        Ok(())
    }

    pub fn pool(&self, z: &Tensor) -> Result<Vec<f32>> {
        self.check(z)?;
        Ok(match self.method {
            PoolingMethod::Attention => attention_pool(z, self.temperature),
            PoolingMethod::Gap | PoolingMethod::Mean => mean_pool(z),
            PoolingMethod::Flatten => {
                let p = self.projection.as_ref().expect("flatten pooler has a projection");
                let n = p.dim(1);
                p.data()
                    .chunks(n)
                    .map(|row| row.iter().zip(z.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32)
                    .collect()
            }
            PoolingMethod::Learned | PoolingMethod::Cls => {
                let q = self.query.as_ref().expect("learned pooler has a query").value.data();
                let (c, hw) = map_dims(z);
                let d = z.data();
                let scale = self.query_scale();
                let logits: Vec<f64> = (0..hw)
                    .map(|p| (0..c).map(|ch| q[ch] as f64 * d[ch * hw + p] as f64).sum::<f64>() * scale)
                    .collect();
                weighted_columns(z, &softmax(&logits))
            }
        })
    }

    /// `[B,D]` pooled batch on the tape. Only the learned variants record
    /// a differentiable graph; the others enter as constants.
    pub fn pool_on_tape(&self, tape: &mut Tape, maps: &[&Tensor]) -> Result<Var> {
        let d = self.output_dim();
        let Some(query) = &self.query else {
            let mut data = Vec::with_capacity(maps.len() * d);
            for z in maps {
                data.extend(self.pool(z)?);
            }
            return Ok(tape.constant(Tensor::new(vec![maps.len(), d], data)?));
        };
        let q = tape.param(query);
        let q = tape.scale(q, self.query_scale());
        let mut rows = Vec::with_capacity(maps.len());
        for z in maps {
            self.check(z)?;
            let (c, hw) = map_dims(z);
            let cols = tape.constant((*z).clone().reshape(vec![c, hw])?);
            let logits = tape.matmul(q, cols)?;
            let alpha = tape.softmax_rows(logits)?;
            let cols_t = tape.transpose(cols)?;
            rows.push(tape.matmul(alpha, cols_t)?);
        }
        let stacked = tape.stack(&rows)?;
        Ok(tape.reshape(stacked, &[maps.len(), d])?)
    }
}
