#![allow(dead_code)]

use anchorft::harness::{ExperimentConfig, GridSpec};
use anchorft::{Activation, EncoderConfig, UniverseConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A universe and encoder small enough for a full pipeline in well under a second.
pub fn small_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        universe: UniverseConfig {
            num_domains: 4,
            classes_per_domain: 24,
            samples_per_class: 8,
            input_dim: 16,
            domain_block_dim: 3,
            shared_block_dim: 4,
            class_subspace_dim: 3,
            generic_domain_ids: vec![0, 1],
            ..UniverseConfig::default()
        },
        encoder: EncoderConfig {
            input_dim: 16,
            hidden_dims: vec![24],
            embed_dim: 8,
            activation: Activation::Gelu,
            init_seed: 0,
            init_scale: 1.0,
        },
        target_domain: 2,
        grid: GridSpec { lambda_emb_values: vec![1.0, 10.0], lambda_theta_values: vec![10.0, 100.0] },
        ..ExperimentConfig::default()
    };
    cfg.pretrain.epochs = 3;
    cfg.pretrain.optimizer.batch_size = 32;
    cfg.optimizer.batch_size = 16;
    cfg.finetune.max_steps = 40;
    cfg.finetune.eval_every = 8;
    cfg.reseed(seed);
    cfg
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, dim), |_| rng.sample::<f64, _>(StandardNormal));
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reference mAP@k: ranks by counting strictly better items (higher cosine,
/// or equal cosine and smaller id) instead of sorting.
pub fn brute_force_map(
    queries: &Array2<f64>,
    query_labels: &[u64],
    index: &Array2<f64>,
    index_labels: &[u64],
    index_ids: &[u64],
    k: usize,
) -> Option<f64> {
    let mut total = 0.0;
    let mut valid = 0usize;
    for (qi, q) in queries.rows().into_iter().enumerate() {
        let relevant: Vec<bool> = index_labels.iter().map(|&l| l == query_labels[qi]).collect();
        let r = relevant.iter().filter(|&&b| b).count();
        if r == 0 {
            continue;
        }
        let sims: Vec<f64> = index.rows().into_iter().map(|row| row.dot(&q)).collect();
        let position = |j: usize| {
            (0..sims.len())
                .filter(|&i| sims[i] > sims[j] || (sims[i] == sims[j] && index_ids[i] < index_ids[j]))
                .count()
        };
        let mut at_rank = vec![false; sims.len()];
        for j in 0..sims.len() {
            at_rank[position(j)] = relevant[j];
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &rel) in at_rank.iter().take(k).enumerate() {
            if rel {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / r.min(k) as f64;
        valid += 1;
    }
    (valid > 0).then(|| total / valid as f64)
}
