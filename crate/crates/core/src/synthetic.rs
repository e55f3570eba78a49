//! Synthetic observational cohorts with known potential outcomes.
//!
//! Every sample has a latent health state `s ~ N(0, I_k)`. Tabular covariates
//! are a noisy linear view of `s` (part of them thresholded into binary flags),
//! image features a noisy `tanh` view. The two views emphasize different
//! halves of `s`, so neither modality alone carries all of it. Treatment follows a propensity
//! `sigmoid(lambda * g(s))` with `g` a fixed linear severity score, and each arm
//! has its own logistic outcome model, so effects are heterogeneous.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, OracleInfo, Sample, DEFAULT_D_IMG, DEFAULT_D_TAB};
use crate::tensor::sigmoid;

/// Tabular coordinates thresholded into 0/1 flags (the trailing ones).
pub const BINARY_FLAGS: usize = 9;
pub const DEFAULT_BIAS_STRENGTH: f64 = 2.0;
/// Treated fraction targeted at the default bias strength.
pub const TARGET_TREATED_FRACTION: f64 = 140.0 / 504.0;
/// Confounded subgroup size relative to the cohort.
pub const SUBGROUP_FRACTION: f64 = 68.0 / 504.0;
/// Subgroup members kept in the training split, out of 68, for degrees 1 to 4.
pub const SUBGROUP_TRAIN_OF_68: [usize; 4] = [68, 48, 18, 0];
const OUTCOME_WEIGHT_NORM: f64 = 3.0;
/// Loading of a latent coordinate on the view that does not emphasize it.
pub const CROSS_VIEW_WEIGHT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    /// Latent health dimension.
    pub k: usize,
    pub bias_strength: f64,
    pub degree: u8,
    pub tab_noise: f64,
    pub img_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n: 504,
            k: 4,
            bias_strength: DEFAULT_BIAS_STRENGTH,
            degree: 3,
            tab_noise: 0.5,
            img_noise: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Spec(m));
        if self.n < 10 {
            return bad(format!("n must be at least 10, got {}", self.n));
        }
        if self.k == 0 {
            return bad("latent dimension k must be positive".into());
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return bad(format!(
                "bias strength must be finite and >= 0, got {}",
                self.bias_strength
            ));
        }
        if !(1..=4).contains(&self.degree) {
            return bad(format!("degree must be in 1..=4, got {}", self.degree));
        }
        for (name, v) in [("tab_noise", self.tab_noise), ("img_noise", self.img_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("cohort has no oracle information; biased splits need the generator's propensities")]
    NoOracle,
    #[error("confounded subgroup is undefined: {0}; use a larger bias strength or cohort size")]
    Subgroup(String),
    #[error("degree must be in 1..=4, got {0}")]
    Degree(u8),
    #[error("test fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
}

/// Seed-determined structure shared by every sample of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    /// `d_tab x k`, rows scaled so each covariate has unit variance before thresholding.
    pub a: Vec<Vec<f64>>,
    pub tab_scale: Vec<f64>,
    /// `d_img x k`.
    pub b: Vec<Vec<f64>>,
    /// Severity direction (unit norm) and offset.
    pub v: Vec<f64>,
    pub c: f64,
    pub w: [Vec<f64>; 2],
    pub bias: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

fn with_norm(mut v: Vec<f64>, norm: f64) -> Vec<f64> {
    let len = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x *= norm / len);
    v
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Offset `c` with `E[sigmoid(lambda (u + c))] = target` for `u ~ N(0, 1)`.
pub fn calibrate_offset(lambda: f64, target: f64) -> f64 {
    let treated = |c: f64| {
        // Simpson's rule over [-10, 10]
        let m = 2000;
        let h = 20.0 / m as f64;
        let f = |u: f64| (-0.5 * u * u).exp() * sigmoid(lambda * (u + c));
        let mut acc = f(-10.0) + f(10.0);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(-10.0 + i as f64 * h);
        }
        acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if treated(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl Structure {
    pub fn from_spec(spec: &GeneratorSpec) -> Self {
        let k = spec.k;
        let mut r = stream(spec.seed, 0);
        let scale = 1.0 / (k as f64).sqrt();
        // complementary views: tabular leans on the first half of the latent
        // state, images on the second
        let emphasis = |j: usize, first: bool| if (2 * j < k) == first { 1.0 } else { CROSS_VIEW_WEIGHT };
        let a: Vec<Vec<f64>> = (0..DEFAULT_D_TAB)
            .map(|_| {
                normal_vec(&mut r, k)
                    .into_iter()
                    .enumerate()
                    .map(|(j, x)| x * scale * emphasis(j, true))
                    .collect()
            })
            .collect();
        let tab_scale = a
            .iter()
            .map(|row| 1.0 / (dot(row, row) + spec.tab_noise * spec.tab_noise).sqrt())
            .collect();
        let b = (0..DEFAULT_D_IMG)
            .map(|_| {
                normal_vec(&mut r, k)
                    .into_iter()
                    .enumerate()
                    .map(|(j, x)| x * scale * emphasis(j, false))
                    .collect()
            })
            .collect();
        let v = with_norm(normal_vec(&mut r, k), 1.0);
        let w0 = with_norm(normal_vec(&mut r, k), OUTCOME_WEIGHT_NORM);
        let w1 = with_norm(normal_vec(&mut r, k), OUTCOME_WEIGHT_NORM);
        Self {
            a,
            tab_scale,
            b,
            v,
            c: calibrate_offset(DEFAULT_BIAS_STRENGTH, TARGET_TREATED_FRACTION),
            w: [w0, w1],
            bias: [0.0, 0.0],
        }
    }

    /// Severity score `g(s)`.
    pub fn severity(&self, s: &[f64]) -> f64 {
        dot(&self.v, s) + self.c
    }
}

/// A generated cohort together with its latent states.
#[derive(Debug, Clone)]
pub struct Generated {
    pub cohort: Cohort,
    pub latents: Vec<Vec<f64>>,
    pub severity: Vec<f64>,
    pub structure: Structure,
}

pub fn generate_cohort(spec: &GeneratorSpec) -> Result<Cohort, SyntheticError> {
    Ok(generate_detailed(spec)?.cohort)
}

pub fn generate_detailed(spec: &GeneratorSpec) -> Result<Generated, SyntheticError> {
    spec.validate()?;
    let st = Structure::from_spec(spec);
    let flag_start = DEFAULT_D_TAB - BINARY_FLAGS;
    let rows: Vec<(Sample, OracleInfo, Vec<f64>, f64)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut r = stream(spec.seed, i as u64 + 1);
            let s = normal_vec(&mut r, spec.k);
            let x_tab =
                st.a.iter()
                    .zip(&st.tab_scale)
                    .enumerate()
                    .map(|(j, (row, scale))| {
                        let e: f64 = r.sample(StandardNormal);
                        let x = (dot(row, &s) + spec.tab_noise * e) * scale;
                        if j >= flag_start {
                            f64::from(u8::from(x > 0.0))
                        } else {
                            x
                        }
                    })
                    .collect();
            let x_img =
                st.b.iter()
                    .map(|row| {
                        let e: f64 = r.sample(StandardNormal);
                        dot(row, &s).tanh() + spec.img_noise * e
                    })
                    .collect();
            let g = st.severity(&s);
            let propensity = sigmoid(spec.bias_strength * g);
            let t = u8::from(r.random::<f64>() < propensity);
            let p0 = sigmoid(dot(&st.w[0], &s) + st.bias[0]);
            let p1 = sigmoid(dot(&st.w[1], &s) + st.bias[1]);
            let y0 = u8::from(r.random::<f64>() < p0);
            let y1 = u8::from(r.random::<f64>() < p1);
            let oracle = OracleInfo {
                y0_prob: p0,
                y1_prob: p1,
                y0,
                y1,
                propensity,
            };
            let sample = Sample {
                id: format!("syn-{i:05}"),
                x_tab,
                x_img,
                t,
                y: oracle.outcome(t),
            };
            (sample, oracle, s, g)
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.n);
    let mut oracle = Vec::with_capacity(spec.n);
    let mut latents = Vec::with_capacity(spec.n);
    let mut severity = Vec::with_capacity(spec.n);
    for (s, o, z, g) in rows {
        samples.push(s);
        oracle.push(o);
        latents.push(z);
        severity.push(g);
    }
    let mut cohort = Cohort::new(samples, DEFAULT_D_TAB, DEFAULT_D_IMG);
    cohort.oracle = Some(oracle);
    cohort.provenance = Some(serde_json::json!({ "generator": spec }));
    Ok(Generated {
        cohort,
        latents,
        severity,
        structure: st,
    })
}

/// Size of the confounded subgroup for a cohort of `n` samples.
pub fn subgroup_size(n: usize) -> usize {
    (n as f64 * SUBGROUP_FRACTION).round() as usize
}

/// Subgroup members kept in training for `degree`, given `m` members.
pub fn subgroup_train_count(m: usize, degree: u8) -> Result<usize, SyntheticError> {
    if !(1..=4).contains(&degree) {
        return Err(SyntheticError::Degree(degree));
    }
    let share = SUBGROUP_TRAIN_OF_68[usize::from(degree - 1)] as f64 / 68.0;
    Ok((m as f64 * share).round() as usize)
}

/// Indices of the confounded subgroup: the most severe conservatively treated
/// samples, ranked by propensity (monotone in severity when bias is present).
pub fn confounded_subgroup(cohort: &Cohort) -> Result<Vec<usize>, SyntheticError> {
    let oracle = cohort.oracle.as_ref().ok_or(SyntheticError::NoOracle)?;
    let m = subgroup_size(cohort.len());
    if m == 0 {
        return Err(SyntheticError::Subgroup(format!(
            "cohort of {} is too small",
            cohort.len()
        )));
    }
    let mut controls: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.samples[i].t == 0).collect();
    if controls.len() < m {
        return Err(SyntheticError::Subgroup(format!(
            "{} conservatively treated samples, subgroup needs {m}",
            controls.len()
        )));
    }
    let p = |i: usize| oracle[i].propensity;
    let (lo, hi) = controls
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(p(i)), hi.max(p(i)))
        });
    if hi <= lo {
        return Err(SyntheticError::Subgroup(
            "propensity does not vary with severity".into(),
        ));
    }
    controls.sort_by(|&a, &b| p(b).total_cmp(&p(a)).then(a.cmp(&b)));
    controls.truncate(m);
    controls.sort_unstable();
    Ok(controls)
}

fn split_rest(mut rest: Vec<usize>, test_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    rest.shuffle(rng);
    let n_train = (rest.len() as f64 * (1.0 - test_fraction)).round() as usize;
    let test = rest.split_off(n_train);
    (rest, test)
}

fn finish(cohort: &Cohort, mut train: Vec<usize>, mut test: Vec<usize>) -> (Cohort, Cohort) {
    train.sort_unstable();
    test.sort_unstable();
    (cohort.subset(&train), cohort.subset(&test))
}

/// Train/test split with the degree-controlled placement of the confounded
/// subgroup; everything else is split 80/20 at random.
pub fn split_biased(cohort: &Cohort, degree: u8, seed: u64) -> Result<(Cohort, Cohort), SyntheticError> {
    let group = confounded_subgroup(cohort)?;
    let keep = subgroup_train_count(group.len(), degree)?;
    let mut shuffled = group.clone();
    shuffled.shuffle(&mut stream(seed, 0));
    let group_test = shuffled.split_off(keep);
    let mut in_group = vec![false; cohort.len()];
    group.iter().for_each(|&i| in_group[i] = true);
    let rest: Vec<usize> = (0..cohort.len()).filter(|&i| !in_group[i]).collect();
    let (mut train, mut test) = split_rest(rest, 0.2, &mut stream(seed, 1));
    train.extend(shuffled);
    test.extend(group_test);
    Ok(finish(cohort, train, test))
}

/// Uniform random split holding out `test_fraction` of the samples.
pub fn split_random(cohort: &Cohort, test_fraction: f64, seed: u64) -> Result<(Cohort, Cohort), SyntheticError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(SyntheticError::Fraction(test_fraction));
    }
    let (train, test) = split_rest((0..cohort.len()).collect(), test_fraction, &mut stream(seed, 1));
    Ok(finish(cohort, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_cohort;
    use std::collections::HashSet;

    fn spec(n: usize, lambda: f64, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n,
            bias_strength: lambda,
            seed,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn zero_bias_gives_fair_coin_propensity() {
        let c = generate_cohort(&spec(2000, 0.0, 11)).unwrap();
        let oracle = c.oracle.as_ref().unwrap();
        assert!(oracle.iter().all(|o| o.propensity == 0.5));
        let treated = c.samples.iter().filter(|s| s.t == 1).count() as f64;
        // 99% normal interval for Binomial(2000, 0.5)
        let half_width = 2.5758 * (2000.0f64 * 0.25).sqrt();
        assert!((treated - 1000.0).abs() <= half_width, "treated {treated}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_cohort(&spec(300, 2.0, 5)).unwrap();
        let b = generate_cohort(&spec(300, 2.0, 5)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&spec(300, 2.0, 6)).unwrap();
        assert_ne!(a, c);
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn bias_strength_raises_severity_treatment_correlation() {
        for seed in [1, 2, 3] {
            let corr = |lambda| {
                let g = generate_detailed(&spec(1000, lambda, seed)).unwrap();
                let t: Vec<f64> = g.cohort.samples.iter().map(|s| f64::from(s.t)).collect();
                spearman(&g.severity, &t)
            };
            let (weak, strong) = (corr(0.5), corr(5.0));
            assert!(strong > weak, "seed {seed}: {strong} <= {weak}");
        }
    }

    #[test]
    fn default_bias_treats_about_140_of_504() {
        let mut total = 0usize;
        for seed in 0..10 {
            let c = generate_cohort(&spec(504, DEFAULT_BIAS_STRENGTH, seed)).unwrap();
            total += c.samples.iter().filter(|s| s.t == 1).count();
        }
        let frac = total as f64 / 5040.0;
        assert!((frac - TARGET_TREATED_FRACTION).abs() < 0.05, "treated fraction {frac}");
    }

    #[test]
    fn calibration_hits_target_by_quadrature() {
        let c = calibrate_offset(2.0, 0.3);
        // independent check by Monte Carlo with a fixed grid of normal quantiles
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let m = 200_000;
        let frac = (0..m)
            .map(|_| sigmoid(2.0 * (r.sample::<f64, _>(StandardNormal) + c)))
            .sum::<f64>()
            / m as f64;
        assert!((frac - 0.3).abs() < 0.005, "{frac}");
    }

    #[test]
    fn oracle_is_consistent_and_flags_are_binary() {
        let c = generate_cohort(&spec(500, 2.0, 3)).unwrap();
        assert!(validate_cohort(&c).is_valid());
        let oracle = c.oracle.as_ref().unwrap();
        for (s, o) in c.samples.iter().zip(oracle) {
            assert_eq!(s.y, o.outcome(s.t));
            assert_eq!(s.x_tab.len(), 17);
            assert_eq!(s.x_img.len(), 64);
            for &f in &s.x_tab[DEFAULT_D_TAB - BINARY_FLAGS..] {
                assert!(f == 0.0 || f == 1.0);
            }
        }
    }

    #[test]
    fn favorable_rate_is_near_one_half() {
        let c = generate_cohort(&spec(2000, DEFAULT_BIAS_STRENGTH, 4)).unwrap();
        let rate = c.samples.iter().filter(|s| s.y == 1).count() as f64 / 2000.0;
        assert!((0.4..=0.6).contains(&rate), "favorable rate {rate}");
    }

    #[test]
    fn arms_have_different_outcome_models() {
        let st = Structure::from_spec(&GeneratorSpec::default());
        assert_ne!(st.w[0], st.w[1]);
    }

    #[test]
    fn spec_validation() {
        assert!(generate_cohort(&spec(9, 1.0, 0)).is_err());
        assert!(generate_cohort(&spec(100, -1.0, 0)).is_err());
        let bad_degree = GeneratorSpec {
            degree: 5,
            ..GeneratorSpec::default()
        };
        assert!(bad_degree.validate().is_err());
    }

    fn ids(c: &Cohort) -> HashSet<String> {
        c.samples.iter().map(|s| s.id.clone()).collect()
    }

    #[test]
    fn degree_splits_place_the_subgroup() {
        let c = generate_cohort(&spec(504, DEFAULT_BIAS_STRENGTH, 8)).unwrap();
        let group: HashSet<String> = confounded_subgroup(&c)
            .unwrap()
            .into_iter()
            .map(|i| c.samples[i].id.clone())
            .collect();
        assert_eq!(group.len(), 68);
        let mut previous = usize::MAX;
        for (degree, (want_train, want_test)) in [(1, (68, 0)), (2, (48, 20)), (3, (18, 50)), (4, (0, 68))] {
            let (train, test) = split_biased(&c, degree, 1).unwrap();
            let (tr, te) = (ids(&train), ids(&test));
            assert_eq!(tr.len() + te.len(), 504);
            assert!(tr.is_disjoint(&te));
            let in_train = tr.intersection(&group).count();
            assert_eq!((in_train, te.intersection(&group).count()), (want_train, want_test));
            assert!(in_train < previous);
            previous = in_train;
        }
    }

    #[test]
    fn split_without_bias_signal_is_an_error() {
        let c = generate_cohort(&spec(200, 0.0, 1)).unwrap();
        assert!(matches!(split_biased(&c, 2, 0), Err(SyntheticError::Subgroup(_))));
        assert_eq!(split_biased(&c.blind(), 2, 0).unwrap_err(), SyntheticError::NoOracle);
    }

    #[test]
    fn random_split_partitions() {
        let c = generate_cohort(&spec(101, 0.0, 1)).unwrap();
        let (train, test) = split_random(&c, 0.2, 4).unwrap();
        assert_eq!(train.len() + test.len(), 101);
        assert!(ids(&train).is_disjoint(&ids(&test)));
        assert_eq!(test.len(), 20);
        assert!(split_random(&c, 1.0, 4).is_err());
    }
}
