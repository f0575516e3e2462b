use casam_core::alignment::AlignmentLayer;
use casam_core::experiment::ExperimentConfig;
use casam_core::metrics::{biou, boundary_band, iou, js_divergence, stage_aggregate, tv_distance, StageMetrics, TaskScore};
use casam_core::router::{
    attention_pool, attention_weights, elbo_graph, Pooler, PoolingConfig, RouterEntry, RouterPool, TaskVae,
    ThresholdRule, VaeConfig, VaeVars,
};
use casam_core::strategies::{elect, merged_for_task, InsertionPolicy, MemoryBank, MemoryItem, TaskVector};
use casam_tensor::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn feature_map(c: usize, h: usize, w: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(vec![c, h, w], |_| (rng.normal() * scale) as f32)
}

fn distribution(weights: &[f64]) -> Vec<f64> {
    let s: f64 = weights.iter().sum();
    weights.iter().map(|w| w / s).collect()
}

fn masks(len: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (prop::collection::vec(any::<bool>(), len), prop::collection::vec(any::<bool>(), len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_are_normalized(c in 1usize..6, h in 1usize..6, w in 1usize..6, scale in 0.01f64..100.0,
                                        t in 0.1f64..8.0, seed in any::<u64>()) {
        let z = feature_map(c, h, w, scale, seed);
        let a = attention_weights(&z, t);
        prop_assert_eq!(a.len(), h * w);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pooled_vector_stays_in_the_column_hull(c in 1usize..6, h in 1usize..6, w in 1usize..6, scale in 0.01f64..50.0,
                                              factor in 0.1f64..10.0, seed in any::<u64>()) {
        let z = feature_map(c, h, w, scale, seed);
        let scaled = z.map(|v| v * factor as f32);
        for map in [&z, &scaled] {
            let f = attention_pool(map, 1.0);
            let hw = h * w;
            for ch in 0..c {
                let row = &map.data()[ch * hw..(ch + 1) * hw];
                let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let tol = 1e-5 * (1.0 + hi.abs().max(lo.abs()));
                prop_assert!(f[ch] >= lo - tol && f[ch] <= hi + tol);
            }
        }
    }

    #[test]
    fn kl_term_is_nonnegative_and_vanishes_only_at_the_prior(mu in prop::collection::vec(-3.0f64..3.0, 1..5),
                                                             seed in any::<u64>(), beta in 0.1f64..20.0) {
        let latent = mu.len();
        let mut rng = Rng::new(seed);
        let logvar: Vec<f64> = (0..latent).map(|_| rng.uniform_range(-4.0, 4.0)).collect();
        let (d, hidden) = (3, 2);
        let f = Tensor::<f64>::from_fn(vec![1, d], |_| rng.normal());
        let eval = |mu: &[f64], logvar: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let fv = tape.constant(f.clone());
            let vars: Vec<_> = [
                Tensor::zeros(vec![hidden, d]),
                Tensor::zeros(vec![hidden]),
                Tensor::zeros(vec![latent, hidden]),
                Tensor::new(vec![latent], mu.to_vec()).unwrap(),
                Tensor::zeros(vec![latent, hidden]),
                Tensor::new(vec![latent], logvar.to_vec()).unwrap(),
                Tensor::zeros(vec![hidden, latent]),
                Tensor::zeros(vec![hidden]),
                Tensor::zeros(vec![d, hidden]),
                Tensor::new(vec![d], f.data().to_vec()).unwrap(),
            ]
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
            let loss = elbo_graph(&mut tape, fv, None, &VaeVars::from_slice(&vars), beta).unwrap();
            tape.value(loss).item()
        };
        let kl = eval(&mu, &logvar);
        let closed: f64 = mu.iter().zip(&logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>() * beta / 2.0;
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - closed).abs() <= 1e-9 * (1.0 + closed));
        prop_assert_eq!(eval(&vec![0.0; latent], &vec![0.0; latent]), 0.0);
        if mu.iter().chain(&logvar).any(|v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn routing_picks_argmin_and_falls_back_above_threshold(n_tasks in 1usize..4, seed in any::<u64>(),
                                                           thresholds in prop::collection::vec(0.01f64..4.0, 3)) {
        let shape = (4, 3, 3);
        let vae_cfg = VaeConfig { latent_dim: 2, hidden_dim: 6, ..VaeConfig::default() };
        let mut pool = RouterPool::new(ThresholdRule::P97);
        for t in 0..n_tasks {
            let s = seed.wrapping_add(t as u64);
            let pooler = Pooler::new(&PoolingConfig::default(), shape, s).unwrap();
            let entry = RouterEntry {
                layer: AlignmentLayer::new(t as u32 * 3, 1, shape.0, s),
                vae: TaskVae::new(pooler, &vae_cfg, s),
                threshold: thresholds[t],
            };
            pool.insert(t as u32 * 3, entry).unwrap();
        }
        let z = feature_map(shape.0, shape.1, shape.2, 1.0, seed ^ 0xabc);
        let d = pool.route(&z).unwrap();
        let again = pool.route(&z).unwrap();
        prop_assert_eq!(&d, &again);
        let min = d.scores.values().cloned().fold(f64::INFINITY, f64::min);
        let argmin = *d.scores.iter().find(|(_, &s)| s == min).unwrap().0;
        prop_assert_eq!(d.best, argmin);
        let tau = pool.get(argmin).unwrap().threshold;
        prop_assert_eq!(d.chosen.is_none(), min > tau);
        if let Some(c) = d.chosen {
            prop_assert_eq!(c, argmin);
        }
    }

    #[test]
    fn distances_are_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 2..12), seed in any::<u64>()) {
        prop_assume!(p.iter().sum::<f64>() > 1e-6);
        let mut rng = Rng::new(seed);
        let q_raw: Vec<f64> = (0..p.len()).map(|_| rng.uniform()).collect();
        let (p, q) = (distribution(&p), distribution(&q_raw));
        let (tv, js) = (tv_distance(&p, &q).unwrap(), js_divergence(&p, &q).unwrap());
        prop_assert_eq!(tv, tv_distance(&q, &p).unwrap());
        prop_assert!((js - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&tv));
        prop_assert!(js >= -1e-15 && js <= std::f64::consts::LN_2 + 1e-12);
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn overlap_scores_are_bounded_and_symmetric((a, b) in masks(64)) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        let d = boundary_band(8, 8);
        let bv = biou(&a, &b, 8, 8, d);
        prop_assert!((0.0..=1.0).contains(&bv));
        prop_assert_eq!(biou(&a, &a, 8, 8, d), 1.0);
    }

    #[test]
    fn forgetting_is_nonnegative_and_equal_counts_average_plainly(tasks in 1usize..5, n in 1usize..20, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut sm = StageMetrics::default();
        for t in 0..tasks {
            sm.push_stage((0..=t).map(|k| {
                let iou = rng.uniform();
                TaskScore { task_id: k as u32, n, iou, biou: iou * rng.uniform() }
            }).collect());
        }
        let s = stage_aggregate(&sm).unwrap();
        prop_assert!(s.iou.forgetting >= 0.0 && s.biou.forgetting >= 0.0);
        let last = sm.stages.last().unwrap();
        let plain = last.iter().map(|x| x.iou).sum::<f64>() / last.len() as f64;
        prop_assert!((s.iou.last - plain).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.iou.avg));
    }

    #[test]
    fn percentile_rules_are_ordered(scores in prop::collection::vec(-50.0f64..50.0, 1..200)) {
        let t = |r: ThresholdRule| r.apply(&scores).unwrap();
        prop_assert!(t(ThresholdRule::P95) <= t(ThresholdRule::P97));
        prop_assert!(t(ThresholdRule::P97) <= t(ThresholdRule::P99));
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t(ThresholdRule::P99) <= max);
    }

    #[test]
    fn reservoir_respects_capacity(capacity in 0usize..20, offered in 0usize..200, seed in any::<u64>()) {
        let mut bank = MemoryBank::new(capacity, InsertionPolicy::Reservoir);
        let mut rng = Rng::new(seed);
        for i in 0..offered {
            bank.offer(MemoryItem { position: 0, index: i, logits: None, prompt: None }, &mut rng);
            prop_assert!(bank.len() <= capacity);
        }
        prop_assert_eq!(bank.len(), capacity.min(offered));
        let mut seen: Vec<usize> = bank.items().iter().map(|m| m.index).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), bank.len());
    }

    #[test]
    fn election_keeps_sign_and_bounds_magnitude(n in 1usize..5, len in 1usize..30, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let vectors: Vec<TaskVector> = (0..n)
            .map(|t| TaskVector { task_id: t as u32, delta: (0..len).map(|_| rng.normal() as f32).collect() })
            .collect();
        let u = elect(&vectors).unwrap();
        for i in 0..len {
            let biggest = vectors.iter().map(|v| v.delta[i].abs()).fold(0.0f32, f32::max);
            prop_assert!(u[i].abs() <= biggest);
            for v in &vectors {
                prop_assert!(u[i] * v.delta[i] >= 0.0);
            }
        }
        for v in &vectors {
            let m = merged_for_task(&u, v);
            let norm = |x: &[f32]| x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let got = norm(&m);
            prop_assert!(got == 0.0 || (got - norm(&v.delta)).abs() < 1e-4 * (1.0 + norm(&v.delta)));
        }
    }

    #[test]
    fn config_round_trips_through_text(master in any::<u64>(), strategy_seed in any::<u64>(), epochs in 0usize..50,
                                       n_blocks in 1usize..6, beta in 0.0f64..20.0, jobs in 1usize..8) {
        let mut cfg = ExperimentConfig::default();
        cfg.stream.master_seed = master;
        cfg.strategy.seed = strategy_seed;
        cfg.train.epochs = epochs;
        cfg.n_blocks = n_blocks;
        cfg.router.vae.beta = beta;
        cfg.jobs = jobs;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
