use casam_tensor::{derive_seed, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::pooling::PoolingConfig;
use super::vae::{train_vae, VaeConfig};

/// How a task threshold is read off its held-out score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    MuPlus2Sigma,
    P95,
    P97,
    P99,
}

impl ThresholdRule {
    pub const ALL: [ThresholdRule; 4] = [
        ThresholdRule::MuPlus2Sigma,
        ThresholdRule::P95,
        ThresholdRule::P97,
        ThresholdRule::P99,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdRule::MuPlus2Sigma => "mu_plus_2sigma",
            ThresholdRule::P95 => "p95",
            ThresholdRule::P97 => "p97",
            ThresholdRule::P99 => "p99",
        }
    }

    pub fn apply(self, scores: &[f64]) -> Result<f64> {
        if scores.is_empty() {
            return Err(CoreError::invalid("threshold rule applied to no scores"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::invalid("threshold rule applied to non-finite scores"));
        }
        Ok(match self {
            ThresholdRule::MuPlus2Sigma => {
                let n = scores.len() as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
                mean + 2.0 * var.sqrt()
            }
            ThresholdRule::P95 => nearest_rank(scores, 95.0),
            ThresholdRule::P97 => nearest_rank(scores, 97.0),
            ThresholdRule::P99 => nearest_rank(scores, 99.0),
        })
    }
}

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "nearest_rank of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    /// Every sample's score under the fold model that did not see it.
    pub heldout_scores: Vec<f64>,
}

/// K-fold threshold calibration: each fold's maps are scored by a VAE
/// trained on the other folds, and `rule` is applied to the pooled scores.
pub fn calibrate_threshold(
    maps: &[&Tensor],
    pooling: &PoolingConfig,
    cfg: &VaeConfig,
    folds: usize,
    rule: ThresholdRule,
    seed: u64,
) -> Result<Calibration> {
    if folds < 2 {
        return Err(CoreError::invalid(format!("calibration needs K >= 2 folds, got {}", folds)));
    }
    if maps.len() < folds {
        return Err(CoreError::invalid(format!(
            "calibration with K = {} needs at least {} samples, got {}",
            folds,
            folds,
            maps.len()
        )));
    }
    let order = Rng::new(derive_seed(seed, "calibrate/folds")).permutation(maps.len());
    let mut heldout_scores = Vec::with_capacity(maps.len());
    for k in 0..folds {
        let (mut fit, mut held) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % folds == k {
                held.push(maps[i]);
            } else {
                fit.push(maps[i]);
            }
        }
        let (vae, _) = train_vae(&fit, pooling, cfg, derive_seed(seed, &format!("calibrate/fold/{}", k)))?;
        for z in held {
            heldout_scores.push(vae.score(z)?);
        }
    }
    let threshold = rule.apply(&heldout_scores)?;
    Ok(Calibration {
        threshold,
        heldout_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 97.0), 97.0);
        assert_eq!(nearest_rank(&v, 95.0), 95.0);
        assert_eq!(nearest_rank(&v, 100.0), 100.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        let mut rev = v.clone();
        rev.reverse();
        assert_eq!(ThresholdRule::P99.apply(&rev).unwrap(), 99.0);
    }

    #[test]
    fn degenerate_distribution_gives_its_value() {
        let v = vec![0.25; 17];
        for rule in ThresholdRule::ALL {
            assert!((rule.apply(&v).unwrap() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_plus_two_sigma() {
        let v = [1.0, 3.0];
        assert!((ThresholdRule::MuPlus2Sigma.apply(&v).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let t = Tensor::zeros(vec![2, 1, 1]);
        let maps = vec![&t; 3];
        let r = calibrate_threshold(&maps, &PoolingConfig::default(), &VaeConfig::default(), 5, ThresholdRule::P97, 0);
        assert!(r.is_err());
        assert!(calibrate_threshold(&maps, &PoolingConfig::default(), &VaeConfig::default(), 1, ThresholdRule::P97, 0)
            .is_err());
    }

    #[test]
    fn every_sample_scored_once() {
        let mut rng = Rng::new(4);
        let owned: Vec<Tensor> = (0..12).map(|_| Tensor::from_fn(vec![4, 2, 2], |_| rng.normal() as f32)).collect();
        let maps: Vec<&Tensor> = owned.iter().collect();
        let cfg = VaeConfig { epochs: 2, ..VaeConfig::default() };
        let c = calibrate_threshold(&maps, &PoolingConfig::default(), &cfg, 5, ThresholdRule::P97, 1).unwrap();
        assert_eq!(c.heldout_scores.len(), 12);
        assert_eq!(c.threshold, nearest_rank(&c.heldout_scores, 97.0));
    }
}
