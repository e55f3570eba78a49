use std::collections::HashSet;

use gpm_core::data::{cohort_from_str, cohort_to_string, LoadMode};
use gpm_core::distributions::{kl_divergence, poe_combine};
use gpm_core::model::{predict_batch, PROB_CLAMP};
use gpm_core::synthetic::{generate_cohort, split_biased, split_random, GeneratorSpec};
use gpm_core::trainer::epoch_batches;
use gpm_core::{DiagonalGaussian, Fusion, Matrix, ModelConfig, ModelParams};
use proptest::prelude::*;
use rand::SeedableRng;

fn gaussian(d: usize) -> impl Strategy<Value = DiagonalGaussian> {
    (
        prop::collection::vec(-5.0..5.0f64, d),
        prop::collection::vec(0.05..5.0f64, d),
    )
        .prop_map(|(m, v)| DiagonalGaussian::new(m, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cohort_text_round_trip(seed in 0u64..1000, n in 10usize..60) {
        let c = generate_cohort(&GeneratorSpec { n, seed, ..GeneratorSpec::default() }).unwrap();
        let text = cohort_to_string(&c).unwrap();
        let back = cohort_from_str(&text, LoadMode::Full).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(cohort_to_string(&back).unwrap(), text);
    }

    #[test]
    fn biased_split_partitions_the_cohort(seed in 0u64..500, degree in 1u8..=4) {
        let c = generate_cohort(&GeneratorSpec { n: 150, seed, ..GeneratorSpec::default() }).unwrap();
        let (tr, te) = split_biased(&c, degree, seed).unwrap();
        let a: HashSet<_> = tr.samples.iter().map(|s| s.id.clone()).collect();
        let b: HashSet<_> = te.samples.iter().map(|s| s.id.clone()).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), c.len());
    }

    #[test]
    fn random_split_partitions_the_cohort(seed in 0u64..500, frac in 0.05..0.95f64) {
        let c = generate_cohort(&GeneratorSpec { n: 80, seed, bias_strength: 0.0, ..GeneratorSpec::default() }).unwrap();
        let (tr, te) = split_random(&c, frac, seed).unwrap();
        prop_assert_eq!(tr.len() + te.len(), 80);
        let ids: HashSet<_> = tr.samples.iter().chain(&te.samples).map(|s| s.id.clone()).collect();
        prop_assert_eq!(ids.len(), 80);
    }

    #[test]
    fn epoch_batches_cover_every_index_once(n in 2usize..400, batch in 2usize..200, seed in 0u64..50, epoch in 0usize..5) {
        let batches = epoch_batches(n, batch, seed, epoch);
        let mut seen = vec![false; n];
        for b in &batches {
            prop_assert!(b.len() >= 2);
            for &i in b {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(q in gaussian(4), p in gaussian(4)) {
        prop_assert!(kl_divergence(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn poe_with_unit_prior_is_sharper_than_every_expert(es in prop::collection::vec(gaussian(3), 1..5)) {
        let fused = poe_combine(&es, true).unwrap();
        for e in &es {
            for j in 0..3 {
                prop_assert!(fused.sigma2()[j] <= e.sigma2()[j].min(1.0));
            }
        }
    }

    #[test]
    fn predictions_are_clamped_probabilities(seed in 0u64..200, fusion in prop::sample::select(Fusion::ALL.to_vec())) {
        let cfg = ModelConfig {
            d_tab: 3,
            d_img: 4,
            d: 2,
            fusion,
            tab_widths: vec![5],
            img_widths: vec![5],
            condition_width: 3,
            decoder_width: 4,
            ..ModelConfig::default()
        };
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::uniform(&cfg, &mut r);
        let xt = Matrix::from_vec(5, 3, (0..15).map(|i| (i as f64 - 7.0) * 3.0).collect());
        let xi = Matrix::from_vec(5, 4, (0..20).map(|i| (i as f64).sin() * 10.0).collect());
        for p in predict_batch(&xt, &xi, &params, &cfg).unwrap() {
            for v in [p.y0_hat, p.y1_hat] {
                prop_assert!((PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v));
            }
        }
    }
}
