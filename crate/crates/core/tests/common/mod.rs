#![allow(dead_code)]

pub mod grad;

use msr_core::features::{OrderFeatures, Sample, ViewCounts};
use msr_core::model::{Ablation, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        hidden: 4,
        layers: 1,
        mem_rows: 4,
        mem_cols: 3,
        read_heads: 2,
        ctx_len: 3,
        vocab: Default::default(),
        ablation,
    }
}

pub fn random_samples(n: usize, ctx_len: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut counts = || {
                let mut c = ViewCounts::default();
                for k in 0..3 {
                    let day = rng.random_range(0..3u32);
                    let week = day + rng.random_range(0..5u32);
                    let month = week + rng.random_range(0..9u32);
                    c.counts[k] = [day, week, month];
                }
                c
            };
            let passenger = counts();
            let driver = counts();
            Sample {
                pair_id: format!("s{i}"),
                city: "T".into(),
                ts: 1_700_000_000 + i as i64,
                label: rng.random_range(0..2u8),
                latent: None,
                passenger,
                driver,
                order: OrderFeatures {
                    start_poi: rng.random_range(0..12),
                    end_poi: rng.random_range(0..12),
                    product: rng.random_range(0..4),
                },
                context: (0..ctx_len)
                    .map(|_| {
                        [
                            rng.random_range(0.0..4.0),
                            rng.random_range(0.0..10.0),
                            rng.random_range(0..2) as f64,
                            rng.random_range(0..2) as f64,
                            rng.random_range(0..2) as f64,
                            rng.random_range(0.2..2.0),
                            rng.random_range(0.0..1.0),
                        ]
                    })
                    .collect(),
            }
        })
        .collect()
}
