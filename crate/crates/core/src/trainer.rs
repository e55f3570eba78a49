//! Seeded mini-batch training with AdamW.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Cohort;
use crate::metrics::MetricsError;
use crate::model::{elbo_loss, Batch, ModelConfig, ModelError, ModelParams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled from the adaptive step.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            weight_decay: 5e-3,
            epochs: 1000,
            batch_size: 128,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a TOML document; the `[model]` table holds the model settings.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config is representable in TOML")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam moments must lie in [0, 1) and adam_eps must be positive");
        }
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cohort {what} is {found} but the model expects {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("cohort has {0} samples; training needs at least 2")]
    TooSmall(usize),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub kl: f64,
}

/// Seed streams: 0 initializes, then two per epoch (shuffle, noise).
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn init_params(config: &TrainConfig) -> ModelParams {
    ModelParams::uniform(&config.model, &mut stream(config.seed, 0))
}

/// Mini-batches of one epoch, a pure function of `(n, batch_size, seed, epoch)`.
/// Cohorts smaller than a batch train full-batch; a trailing batch of one
/// sample joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 1 + 2 * epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

struct AdamW {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

impl AdamW {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .trainable()
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[Matrix], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = cfg.learning_rate;
        let shrink = 1.0 - lr * cfg.weight_decay;
        for (((p, g), m), v) in params
            .trainable_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w = *w * shrink - lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn check_cohort(cohort: &Cohort, model: &ModelConfig) -> Result<(), TrainError> {
    if cohort.d_tab != model.d_tab {
        return Err(TrainError::Dimension {
            what: "tabular dimension",
            expected: model.d_tab,
            found: cohort.d_tab,
        });
    }
    if cohort.d_img != model.d_img {
        return Err(TrainError::Dimension {
            what: "image feature dimension",
            expected: model.d_img,
            found: cohort.d_img,
        });
    }
    if cohort.len() < 2 {
        return Err(TrainError::TooSmall(cohort.len()));
    }
    Ok(())
}

/// Trained parameters with their configuration and per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub history: Vec<EpochStats>,
    pub params: ModelParams,
}

pub fn train(cohort: &Cohort, config: &TrainConfig) -> Result<Checkpoint, TrainError> {
    train_with_progress(cohort, config, &mut |_| {})
}

/// Trains on the factual data of `cohort`; oracle fields are never read.
pub fn train_with_progress(
    cohort: &Cohort,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    check_cohort(cohort, &config.model)?;
    let samples = &cohort.samples;
    let mut params = init_params(config);
    let mut opt = AdamW::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let n = samples.len();
    for epoch in 0..config.epochs {
        let mut noise = stream(config.seed, 2 + 2 * epoch as u64);
        let mut sums = [0.0; 3];
        for (b, idx) in epoch_batches(n, config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let batch = Batch::from_samples(idx.iter().map(|&i| &samples[i]), cohort.d_tab, cohort.d_img);
            let out = elbo_loss(&batch, &params, &config.model, &mut noise).map_err(|e| match e {
                ModelError::NonFinite { sample_id } => TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("non-finite loss for sample {sample_id}"),
                },
                other => TrainError::Model(other),
            })?;
            if out.grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            let w = idx.len() as f64;
            sums[0] += out.loss * w;
            sums[1] += out.cross_entropy * w;
            sums[2] += out.kl * w;
            opt.update(&mut params, &out.grads, config);
            params.update_running(&out.stats);
        }
        let stats = EpochStats {
            epoch,
            loss: sums[0] / n as f64,
            cross_entropy: sums[1] / n as f64,
            kl: sums[2] / n as f64,
        };
        progress(&stats);
        history.push(stats);
    }
    Ok(Checkpoint {
        train_config: config.clone(),
        history,
        params,
    })
}

/// Mean KL over the last (up to) ten epochs.
pub fn converged_kl(history: &[EpochStats]) -> f64 {
    let tail = &history[history.len().saturating_sub(10)..];
    tail.iter().map(|h| h.kl).sum::<f64>() / tail.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_cohort, GeneratorSpec};

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed: 3,
            model: ModelConfig {
                d: 4,
                tab_widths: vec![8, 8, 8],
                img_widths: vec![8, 8, 8],
                condition_width: 8,
                decoder_width: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn cohort(n: usize) -> Cohort {
        generate_cohort(&GeneratorSpec {
            n,
            bias_strength: 0.0,
            seed: 1,
            ..GeneratorSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn batches_partition_and_merge_singletons() {
        let b = epoch_batches(129, 128, 1, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 129);
        let b = epoch_batches(300, 128, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 128, 44]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!(epoch_batches(50, 128, 1, 0).len(), 1);
        assert_eq!(epoch_batches(300, 128, 1, 4), epoch_batches(300, 128, 1, 4));
        assert_ne!(epoch_batches(300, 128, 1, 4), epoch_batches(300, 128, 1, 5));
    }

    #[test]
    fn training_is_deterministic() {
        let c = cohort(120);
        let a = train(&c, &small_config(3)).unwrap();
        let b = train(&c, &small_config(3)).unwrap();
        assert_eq!(a, b);
        let mut other = small_config(3);
        other.seed = 4;
        assert_ne!(train(&c, &other).unwrap().params, a.params);
    }

    #[test]
    fn loss_decreases_on_learnable_cohort() {
        let c = cohort(500);
        let ck = train(&c, &small_config(50)).unwrap();
        let (first, last) = (ck.history[0].loss, ck.history[49].loss);
        assert!(last < first, "{first} -> {last}");
        assert_eq!(ck.history.len(), 50);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let c = cohort(200);
        let norm = |wd: f64| {
            let mut cfg = small_config(100);
            cfg.weight_decay = wd;
            let p = train(&c, &cfg).unwrap().params;
            p.trainable().iter().map(|(_, m)| m.norm_sq()).sum::<f64>()
        };
        let (free, decayed) = (norm(0.0), norm(5e-3));
        assert_ne!(free, decayed);
        assert!(decayed < free, "{decayed} >= {free}");
    }

    #[test]
    fn small_cohort_trains_full_batch() {
        let c = cohort(20);
        let ck = train(&c, &small_config(2)).unwrap();
        assert!(ck.history.iter().all(|h| h.loss.is_finite()));
        assert!(matches!(
            train(&c.subset(&[0]), &small_config(1)),
            Err(TrainError::TooSmall(1))
        ));
    }

    #[test]
    fn divergence_reports_coordinates() {
        let mut c = cohort(30);
        c.samples[7].x_img[3] = f64::INFINITY;
        match train(&c, &small_config(2)) {
            Err(TrainError::Divergence { epoch: 0, batch: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut cfg = small_config(1);
        cfg.model.d_tab = 16;
        assert!(matches!(
            train(&cohort(20), &cfg),
            Err(TrainError::Dimension {
                expected: 16,
                found: 17,
                ..
            })
        ));
    }

    #[test]
    fn oracle_is_not_used() {
        let c = cohort(60);
        let cfg = small_config(2);
        assert_eq!(train(&c, &cfg).unwrap(), train(&c.blind(), &cfg).unwrap());
    }

    #[test]
    fn config_toml_round_trip_and_diagnostics() {
        let cfg = small_config(7);
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let parsed = TrainConfig::from_toml_str("epochs = 5\n[model]\nfusion = \"moe\"\nd = 3\n").unwrap();
        assert_eq!(parsed.epochs, 5);
        assert_eq!(parsed.model.d, 3);
        let err = TrainConfig::from_toml_str("epochs = 5\nlearning_rat = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rat") && err.contains("line 2"), "{err}");
        assert!(TrainConfig::from_toml_str("batch_size = 1\n").is_err());
    }

    #[test]
    fn converged_kl_averages_tail() {
        let h: Vec<EpochStats> = (0..15)
            .map(|e| EpochStats {
                epoch: e,
                loss: 0.0,
                cross_entropy: 0.0,
                kl: e as f64,
            })
            .collect();
        assert_eq!(converged_kl(&h), 9.5);
        assert_eq!(converged_kl(&h[..2]), 0.5);
    }
}
