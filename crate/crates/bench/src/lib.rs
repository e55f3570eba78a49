//! Benchmark fixtures.

use gpm_core::model::Batch;
use gpm_core::synthetic::{generate_cohort, GeneratorSpec};
use gpm_core::trainer::{init_params, TrainConfig};
use gpm_core::{Cohort, DiagonalGaussian, Fusion, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn experts(count: usize, d: usize, seed: u64) -> Vec<DiagonalGaussian> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mu = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let var = (0..d).map(|_| r.random_range(0.1..3.0)).collect();
            DiagonalGaussian::new(mu, var).expect("positive variances")
        })
        .collect()
}

pub fn cohort(n: usize) -> Cohort {
    generate_cohort(&GeneratorSpec {
        n,
        seed: 11,
        ..GeneratorSpec::default()
    })
    .expect("valid spec")
}

/// Default-width model with the given fusion rule, freshly initialized.
pub fn model(fusion: Fusion) -> (TrainConfig, ModelParams) {
    let mut cfg = TrainConfig::default();
    cfg.model.fusion = fusion;
    let params = init_params(&cfg);
    (cfg, params)
}

pub fn batch(c: &Cohort, size: usize) -> Batch {
    let idx: Vec<usize> = (0..size.min(c.len())).collect();
    Batch::from_indices(c, &idx)
}
