use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(CoreError::invalid(format!("distributions have {} and {} bins", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CoreError::invalid("distributions must be finite and non-negative"));
    }
    Ok(())
}

/// `½ Σ |P(x) − Q(x)|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn kl_to(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen–Shannon divergence in nats, with `0·log 0 = 0`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * (kl_to(p, &m) + kl_to(q, &m)))
}

/// A feature-set histogram ready for [`tv_distance`] / [`js_divergence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistogram {
    pub bins: usize,
    pub probabilities: Vec<f64>,
}

pub const DEFAULT_BINS: usize = 32;

/// Histograms of two feature sets over shared per-dimension ranges (the
/// min/max of both sets together). Each dimension is histogrammed and
/// normalised, then the dimensions are averaged into one distribution.
pub fn feature_histograms(a: &[Vec<f32>], b: &[Vec<f32>], bins: usize) -> Result<(FeatureHistogram, FeatureHistogram)> {
    if bins == 0 {
        return Err(CoreError::invalid("histograms need at least one bin"));
    }
    let dim = a.first().or(b.first()).map(|f| f.len()).unwrap_or(0);
    if a.is_empty() || b.is_empty() || dim == 0 || a.iter().chain(b).any(|f| f.len() != dim) {
        return Err(CoreError::invalid("feature sets must be non-empty with a common dimension"));
    }
    let ranges: Vec<(f64, f64)> = (0..dim)
        .map(|d| {
            a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                let v = f[d] as f64;
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    Ok((histogram(a, &ranges, bins), histogram(b, &ranges, bins)))
}

fn histogram(set: &[Vec<f32>], ranges: &[(f64, f64)], bins: usize) -> FeatureHistogram {
    let mut probabilities = vec![0.0; bins];
    let per_dim = 1.0 / (ranges.len() as f64 * set.len() as f64);
    for f in set {
        for (&v, &(lo, hi)) in f.iter().zip(ranges) {
            let width = hi - lo;
            let bin = if width > 0.0 {
                (((v as f64 - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            probabilities[bin] += per_dim;
        }
    }
    FeatureHistogram { bins, probabilities }
}
