//! Prompt-pool regime on the identity layer: each sample picks the prompts
//! whose keys lie nearest its pooled features and adds their mean to the
//! encoder map.

use casam_tensor::{Module, Parameter, Rng, Tape, Tensor, Var};

use crate::alignment::fit;
use crate::data::EncodedTask;
use crate::error::{CoreError, Result};
use crate::nn::segmentation_loss;
use crate::router::attention_pool;

use super::eval::Aligner;
use super::store::TaskStore;
use super::{Recorder, StrategyEnv, StrategyKind, StrategyRun};

/// Weight on the pull of selected keys toward their queries.
const KEY_MATCH_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct PromptPool {
    keys: Vec<Parameter>,
    prompts: Vec<Parameter>,
    top_k: usize,
    temperature: f64,
    /// Entries exposed to the optimizer; all entries when `None`.
    active: Option<(usize, usize)>,
}

impl PromptPool {
    /// `size` entries with keys uniform in `[-1,1]` and zero prompts of
    /// shape `[C,h,w]`.
    pub fn new(size: usize, top_k: usize, shape: (usize, usize, usize), temperature: f64, seed: u64) -> Result<Self> {
        if size == 0 || top_k == 0 || top_k > size {
            return Err(CoreError::invalid(format!("prompt pool needs 0 < top_k <= size, got {} of {}", top_k, size)));
        }
        let (c, h, w) = shape;
        let mut rng = Rng::new(seed);
        let keys = (0..size)
            .map(|i| {
                Parameter::new(
                    format!("prompt.{}.key", i),
                    Tensor::from_fn(vec![c], |_| rng.uniform_range(-1.0, 1.0) as f32),
                )
            })
            .collect();
        let prompts = (0..size)
            .map(|i| Parameter::zeros(format!("prompt.{}.value", i), &[c, h, w]))
            .collect();
        Ok(Self {
            keys,
            prompts,
            top_k,
            temperature,
            active: None,
        })
    }

    pub fn size(&self) -> usize {
        self.keys.len()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Restricts training and selection to entries `start..start+len`.
    pub fn set_active(&mut self, start: usize, len: usize) {
        assert!(len > 0 && start + len <= self.size(), "active range out of bounds");
        self.active = Some((start, len));
    }

    pub fn clear_active(&mut self) {
        self.active = None;
    }

    fn candidates(&self) -> std::ops::Range<usize> {
        match self.active {
            Some((s, l)) => s..s + l,
            None => 0..self.size(),
        }
    }

    /// Pooled query of a `[C,h,w]` map.
    pub fn query(&self, z: &Tensor) -> Vec<f32> {
        attention_pool(z, self.temperature)
    }

    /// Indices of the `top_k` candidate keys closest to `query` in squared
    /// distance; ties go to the lower index.
    pub fn select(&self, query: &[f32]) -> Vec<usize> {
        let mut dist: Vec<(f64, usize)> = self
            .candidates()
            .map(|i| (squared_distance(self.keys[i].value.data(), query), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist.into_iter().take(self.top_k).map(|(_, i)| i).collect()
    }

    /// Adds the mean of the selected prompts to each map of `[B,C,h,w]`
    /// features on the tape; returns the prompted features and selections.
    fn prompt_on_tape(&self, tape: &mut Tape, features: &Tensor) -> Result<(Var, Vec<Vec<usize>>)> {
        let n = features.dim(0);
        let mut rows = Vec::with_capacity(n);
        let mut picks = Vec::with_capacity(n);
        for i in 0..n {
            let z = features.index_outer(i);
            let sel = self.select(&self.query(&z));
            let mut sum: Option<Var> = None;
            for &j in &sel {
                let p = tape.param(&self.prompts[j]);
                sum = Some(match sum {
                    Some(s) => tape.add(s, p)?,
                    None => p,
                });
            }
            let mean = tape.scale(sum.expect("top_k is positive"), 1.0 / sel.len() as f64);
            let zv = tape.constant(z);
            rows.push(tape.add(zv, mean)?);
            picks.push(sel);
        }
        Ok((tape.stack(&rows)?, picks))
    }

    fn prompt(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (v, _) = self.prompt_on_tape(&mut tape, features)?;
        Ok(tape.value(v).clone())
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

impl Module for PromptPool {
    fn parameters(&self) -> Vec<&Parameter> {
        self.candidates()
            .flat_map(|i| [&self.keys[i], &self.prompts[i]])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let range = self.candidates();
        self.keys
            .iter_mut()
            .zip(self.prompts.iter_mut())
            .enumerate()
            .filter(|(i, _)| range.contains(i))
            .flat_map(|(_, (k, p))| [k, p])
            .collect()
    }
}

impl Aligner for PromptPool {
    fn align(&self, z: &Tensor, _: Option<u32>) -> Result<(Tensor, Option<Vec<Option<u32>>>)> {
        Ok((self.prompt(z)?, None))
    }
}

/// Mean over the batch of the average squared distance between each query
/// and its selected keys.
pub fn key_match_loss(tape: &mut Tape, pool: &PromptPool, queries: &[Vec<f32>], picks: &[Vec<usize>]) -> Result<Var> {
    if queries.is_empty() || queries.len() != picks.len() {
        return Err(CoreError::invalid("key match needs one selection per query"));
    }
    let mut total: Option<Var> = None;
    for (q, sel) in queries.iter().zip(picks) {
        let qv = tape.constant(Tensor::new(vec![q.len()], q.clone())?);
        for &j in sel {
            let k = tape.param(&pool.keys[j]);
            let d = tape.sub(k, qv)?;
            let sq = tape.square(d);
            let s = tape.sum(sq);
            let s = tape.scale(s, 1.0 / sel.len() as f64);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / queries.len() as f64))
}

pub fn run_l2p(env: &StrategyEnv, tasks: &[EncodedTask], ood: &[EncodedTask]) -> Result<StrategyRun> {
    let kind = StrategyKind::L2p;
    let cfg = &env.strategy;
    let mut pool = PromptPool::new(
        cfg.prompt_pool_size,
        cfg.prompt_top_k,
        env.backbone.feature_shape(),
        env.router.pooling.temperature,
        cfg.seed_for(kind, "init"),
    )?;
    let slot = (cfg.prompt_pool_size / tasks.len()).max(cfg.prompt_top_k);
    let store = TaskStore::new(tasks);
    let mut rec = Recorder::new(env.backbone, tasks);
    for pos in 0..tasks.len() {
        store.begin(pos);
        let start = (pos * slot) % cfg.prompt_pool_size;
        let len = slot.min(cfg.prompt_pool_size - start);
        let saved_k = pool.top_k;
        pool.top_k = saved_k.min(len);
        pool.set_active(start, len);
        let seed = cfg.seed_for(kind, &format!("stage/{}", tasks[pos].spec.seed));
        fit(&mut pool, &store.current_train(), &env.train, seed, "prompt pool", |p, tape, batch, _| {
            let (prompted, picks) = p.prompt_on_tape(tape, &batch.features)?;
            let boxes = tape.constant(batch.boxes.clone());
            let logits = env.backbone.decode(tape, prompted, boxes)?;
            let seg = segmentation_loss(tape, logits, &batch.masks)?;
            let queries: Vec<Vec<f32>> = (0..batch.len())
                .map(|i| p.query(&batch.features.index_outer(i)))
                .collect();
            let km = key_match_loss(tape, p, &queries, &picks)?;
            let km = tape.scale(km, KEY_MATCH_WEIGHT);
            Ok(tape.add(seg, km)?)
        })?;
        pool.top_k = saved_k;
        pool.clear_active();
        rec.stage(&pool, pos + 1)?;
    }
    let (metrics, ood_scores) = rec.finish(&pool, ood)?;
    Ok(StrategyRun {
        kind,
        metrics,
        oracle_metrics: None,
        ood: ood_scores,
        past_reads: store.past_reads(),
        trainable_parameters: pool.num_parameters(),
        pool: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> PromptPool {
        PromptPool::new(6, 2, (4, 2, 2), 1.0, 7).unwrap()
    }

    #[test]
    fn zero_prompts_leave_features_unchanged() {
        let p = pool();
        let z = Tensor::from_fn(vec![3, 4, 2, 2], |i| (i as f32 * 0.37).sin());
        assert_eq!(p.prompt(&z).unwrap(), z);
    }

    #[test]
    fn selection_picks_nearest_keys_in_active_range() {
        let mut p = pool();
        let q: Vec<f32> = p.keys[4].value.data().to_vec();
        assert_eq!(p.select(&q)[0], 4);
        p.set_active(0, 3);
        assert!(p.select(&q).iter().all(|&i| i < 3));
        assert_eq!(p.parameters().len(), 6);
        p.clear_active();
        assert_eq!(p.parameters().len(), 12);
    }

    #[test]
    fn key_match_is_zero_on_matching_keys() {
        let p = pool();
        let q = p.keys[1].value.data().to_vec();
        let mut tape = Tape::new();
        let l = key_match_loss(&mut tape, &p, &[q], &[vec![1]]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(PromptPool::new(2, 3, (1, 1, 1), 1.0, 0).is_err());
        assert!(PromptPool::new(0, 0, (1, 1, 1), 1.0, 0).is_err());
    }
}
