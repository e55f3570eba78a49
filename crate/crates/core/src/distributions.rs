//! Diagonal-Gaussian algebra: product and mixture of experts, KL divergence
//! and reparameterized sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Lower bound applied to a fused variance.
pub const FUSED_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("variance entry {index} must be strictly positive and finite, got {value}")]
    Variance { index: usize, value: f64 },
    #[error("mean entry {index} is not finite")]
    Mean { index: usize },
    #[error("expert list is empty")]
    NoExperts,
    #[error("mixture weights must be nonnegative and sum to 1: {0}")]
    Simplex(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self, DistributionError> {
        if mu.len() != sigma2.len() {
            return Err(DistributionError::Dimension {
                expected: mu.len(),
                found: sigma2.len(),
            });
        }
        if let Some(index) = mu.iter().position(|m| !m.is_finite()) {
            return Err(DistributionError::Mean { index });
        }
        if let Some(index) = sigma2.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(DistributionError::Variance {
                index,
                value: sigma2[index],
            });
        }
        Ok(Self { mu, sigma2 })
    }

    /// N(0, I) in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            sigma2: vec![1.0; d],
        }
    }

    pub fn isotropic(d: usize, mean: f64, var: f64) -> Result<Self, DistributionError> {
        Self::new(vec![mean; d], vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        sample_reparam(self, &eps).expect("noise drawn at the right length")
    }
}

/// Neumaier-compensated summation.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

fn check_dims(experts: &[DiagonalGaussian]) -> Result<usize, DistributionError> {
    let d = experts.first().map_or(0, DiagonalGaussian::dim);
    for e in experts {
        if e.dim() != d {
            return Err(DistributionError::Dimension {
                expected: d,
                found: e.dim(),
            });
        }
    }
    Ok(d)
}

fn check_variances(e: &DiagonalGaussian) -> Result<(), DistributionError> {
    match e.sigma2.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(index) => Err(DistributionError::Variance {
            index,
            value: e.sigma2[index],
        }),
        None => Ok(()),
    }
}

/// Product of Gaussian experts in precision space.
///
/// The fused precision is the sum of expert precisions and the fused mean is
/// the precision-weighted mean. With `include_unit_prior` an N(0, 1) expert
/// joins the product, which makes an empty expert list legal.
pub fn poe_combine(
    experts: &[DiagonalGaussian],
    include_unit_prior: bool,
) -> Result<DiagonalGaussian, DistributionError> {
    if experts.is_empty() && !include_unit_prior {
        return Err(DistributionError::NoExperts);
    }
    let d = check_dims(experts)?;
    experts.iter().try_for_each(check_variances)?;
    let mut mu = Vec::with_capacity(d);
    let mut sigma2 = Vec::with_capacity(d);
    for j in 0..d {
        let mut precision = CompensatedSum::default();
        let mut weighted = CompensatedSum::default();
        if include_unit_prior {
            precision.add(1.0);
        }
        for e in experts {
            let p = 1.0 / e.sigma2[j];
            precision.add(p);
            weighted.add(e.mu[j] * p);
        }
        let var = (1.0 / precision.value()).max(FUSED_VARIANCE_FLOOR);
        sigma2.push(var);
        mu.push(weighted.value() * var);
    }
    Ok(DiagonalGaussian { mu, sigma2 })
}

/// Same as [`poe_combine`] but yields the unit prior in `d` dimensions for an empty list.
pub fn poe_combine_dim(
    experts: &[DiagonalGaussian],
    include_unit_prior: bool,
    d: usize,
) -> Result<DiagonalGaussian, DistributionError> {
    if experts.is_empty() && include_unit_prior {
        return Ok(DiagonalGaussian::standard(d));
    }
    let out = poe_combine(experts, include_unit_prior)?;
    if out.dim() != d {
        return Err(DistributionError::Dimension {
            expected: d,
            found: out.dim(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGaussian {
    components: Vec<DiagonalGaussian>,
    weights: Vec<f64>,
}

pub fn moe_combine(experts: &[DiagonalGaussian], weights: &[f64]) -> Result<MixtureGaussian, DistributionError> {
    if experts.is_empty() {
        return Err(DistributionError::NoExperts);
    }
    if weights.len() != experts.len() {
        return Err(DistributionError::Simplex(format!(
            "{} weights for {} experts",
            weights.len(),
            experts.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(DistributionError::Simplex(format!(
            "negative or non-finite weight in {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DistributionError::Simplex(format!("weights sum to {total}")));
    }
    check_dims(experts)?;
    experts.iter().try_for_each(check_variances)?;
    Ok(MixtureGaussian {
        components: experts.to_vec(),
        weights: weights.to_vec(),
    })
}

impl MixtureGaussian {
    pub fn components(&self) -> &[DiagonalGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                self.components
                    .iter()
                    .zip(&self.weights)
                    .map(|(c, w)| w * c.mu[j])
                    .sum()
            })
            .collect()
    }

    /// Per-dimension variance by the law of total variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.dim())
            .map(|j| {
                self.components
                    .iter()
                    .zip(&self.weights)
                    .map(|(c, w)| {
                        let dev = c.mu[j] - mean[j];
                        w * (c.sigma2[j] + dev * dev)
                    })
                    .sum::<f64>()
            })
            .collect()
    }

    /// Diagonal Gaussian with the mixture's first two moments.
    pub fn moment_match(&self) -> DiagonalGaussian {
        let sigma2 = self
            .variance()
            .into_iter()
            .map(|v| v.max(FUSED_VARIANCE_FLOOR))
            .collect();
        DiagonalGaussian {
            mu: self.mean(),
            sigma2,
        }
    }

    /// Draws a component by weight, then reparameterizes within it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let k = pick_component(&self.weights, u);
        self.components[k].sample(rng)
    }

    /// Draws `n` samples with component counts stratified by weight.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        stratified_assignment(&self.weights, n, rng)
            .into_iter()
            .map(|k| self.components[k].sample(rng))
            .collect()
    }
}

fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Component index for each of `n` draws: systematic allocation of counts by
/// weight, then a random permutation of the slots.
pub fn stratified_assignment<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let offset: f64 = rng.random();
    let mut slots = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut k = 0;
    for i in 0..n {
        let point = (i as f64 + offset) / n as f64;
        while k + 1 < weights.len() && point >= cum + weights[k] {
            cum += weights[k];
            k += 1;
        }
        slots.push(k);
    }
    // Fisher-Yates so strata are not tied to row order.
    for i in (1..slots.len()).rev() {
        let j = rng.random_range(0..=i);
        slots.swap(i, j);
    }
    slots
}

/// Closed-form KL(q ‖ p) for diagonal Gaussians, summed over dimensions.
pub fn kl_divergence(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64, DistributionError> {
    if q.dim() != p.dim() {
        return Err(DistributionError::Dimension {
            expected: q.dim(),
            found: p.dim(),
        });
    }
    let mut total = 0.0;
    for j in 0..q.dim() {
        let ratio = q.sigma2[j] / p.sigma2[j];
        let diff = q.mu[j] - p.mu[j];
        total += 0.5 * (ratio + diff * diff / p.sigma2[j] - 1.0 - ratio.ln());
    }
    // Rounding can leave a tiny negative residue when q ≈ p.
    Ok(total.max(0.0))
}

/// `mu + sqrt(sigma2) * eps`.
pub fn sample_reparam(g: &DiagonalGaussian, eps: &[f64]) -> Result<Vec<f64>, DistributionError> {
    if eps.len() != g.dim() {
        return Err(DistributionError::Dimension {
            expected: g.dim(),
            found: eps.len(),
        });
    }
    Ok(g.mu
        .iter()
        .zip(&g.sigma2)
        .zip(eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(mu: &[f64], var: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mu.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn poe_of_nothing_is_the_unit_prior() {
        let out = poe_combine_dim(&[], true, 3).unwrap();
        assert_eq!(out, DiagonalGaussian::standard(3));
        assert_eq!(poe_combine(&[], false), Err(DistributionError::NoExperts));
    }

    #[test]
    fn poe_with_standard_expert_halves_variance() {
        let out = poe_combine(&[g(&[0.0], &[1.0])], true).unwrap();
        assert_eq!(out.mu(), &[0.0]);
        assert_eq!(out.sigma2(), &[0.5]);
    }

    #[test]
    fn poe_two_experts_and_prior() {
        let out = poe_combine(&[g(&[2.0], &[0.5]), g(&[-1.0], &[1.0])], true).unwrap();
        assert!((out.mu()[0] - 0.75).abs() < 1e-12);
        assert!((out.sigma2()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn poe_rejects_bad_input() {
        let err = poe_combine(&[g(&[0.0], &[1.0]), g(&[0.0, 1.0], &[1.0, 1.0])], true);
        assert!(matches!(err, Err(DistributionError::Dimension { .. })));
        assert!(DiagonalGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![-1.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mixture_of_one_is_that_expert() {
        let e = g(&[1.5, -0.5], &[0.3, 2.0]);
        let m = moe_combine(std::slice::from_ref(&e), &[1.0]).unwrap();
        assert_eq!(m.moment_match(), e);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // the mixture spends one uniform on the component choice
            let _: f64 = r2.random();
            assert_eq!(m.sample(&mut r1), e.sample(&mut r2));
        }
    }

    #[test]
    fn mixture_of_identical_experts_keeps_moments() {
        let e = g(&[1.5], &[0.3]);
        let m = moe_combine(&[e.clone(), e.clone()], &[0.5, 0.5]).unwrap();
        assert!((m.mean()[0] - 1.5).abs() < 1e-15);
        assert!((m.variance()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mixture_total_variance_matches_monte_carlo() {
        let m = moe_combine(&[g(&[0.0], &[1.0]), g(&[4.0], &[1.0])], &[0.5, 0.5]).unwrap();
        assert!((m.mean()[0] - 2.0).abs() < 1e-15);
        assert!((m.variance()[0] - 5.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let draws = m.sample_batch(n, &mut rng);
        let mean = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[0] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
        assert!((var - 5.0).abs() / 5.0 < 0.01, "var {var}");
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let e = g(&[0.0], &[1.0]);
        assert!(matches!(
            moe_combine(&[e.clone(), e.clone()], &[0.7, 0.7]),
            Err(DistributionError::Simplex(_))
        ));
        assert!(matches!(
            moe_combine(&[e.clone(), e.clone()], &[1.5, -0.5]),
            Err(DistributionError::Simplex(_))
        ));
        assert_eq!(moe_combine(&[], &[]), Err(DistributionError::NoExperts));
    }

    #[test]
    fn stratified_counts_follow_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = stratified_assignment(&[0.25, 0.75], 100, &mut rng);
        assert_eq!(a.iter().filter(|&&k| k == 0).count(), 25);
        let b = stratified_assignment(&[0.5, 0.5], 7, &mut rng);
        let zeros = b.iter().filter(|&&k| k == 0).count();
        assert!(zeros == 3 || zeros == 4);
    }

    #[test]
    fn kl_closed_form_values() {
        let std = g(&[0.0], &[1.0]);
        assert_eq!(kl_divergence(&std, &std).unwrap(), 0.0);
        assert!((kl_divergence(&g(&[1.0], &[1.0]), &std).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_divergence(&g(&[0.0], &[4.0]), &std).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.806853).abs() < 1e-6);
        assert!(kl_divergence(&std, &g(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn reparam_examples() {
        let n = g(&[3.0], &[4.0]);
        assert_eq!(sample_reparam(&n, &[0.0]).unwrap(), vec![3.0]);
        assert_eq!(sample_reparam(&n, &[1.0]).unwrap(), vec![5.0]);
        assert_eq!(sample_reparam(&n, &[-0.5]).unwrap(), vec![2.0]);
        assert!(sample_reparam(&n, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn reparam_moments_converge() {
        let n = g(&[-1.0, 2.5], &[0.25, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..draws {
            let z = n.sample(&mut rng);
            for j in 0..2 {
                sum[j] += z[j];
                sq[j] += z[j] * z[j];
            }
        }
        for j in 0..2 {
            let mean = sum[j] / draws as f64;
            let var = sq[j] / draws as f64 - mean * mean;
            assert!((mean - n.mu()[j]).abs() <= 0.02 * n.mu()[j].abs(), "mean {mean}");
            assert!((var - n.sigma2()[j]).abs() <= 0.02 * n.sigma2()[j], "var {var}");
        }
    }

    fn experts_strategy() -> impl Strategy<Value = Vec<DiagonalGaussian>> {
        (1usize..5).prop_flat_map(|d| {
            prop::collection::vec(
                (
                    prop::collection::vec(-5.0f64..5.0, d),
                    prop::collection::vec(1e-3f64..10.0, d),
                ),
                1..6,
            )
            .prop_map(|v| v.into_iter().map(|(m, s)| g(&m, &s)).collect())
        })
    }

    fn plain_poe(experts: &[DiagonalGaussian]) -> DiagonalGaussian {
        let d = experts[0].dim();
        let mut mu = vec![0.0; d];
        let mut var = vec![0.0; d];
        for j in 0..d {
            let prec: f64 = 1.0 + experts.iter().map(|e| 1.0 / e.sigma2()[j]).sum::<f64>();
            var[j] = 1.0 / prec;
            mu[j] = experts.iter().map(|e| e.mu()[j] / e.sigma2()[j]).sum::<f64>() * var[j];
        }
        g(&mu, &var)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    proptest! {
        #[test]
        fn poe_precisions_add(experts in experts_strategy()) {
            let out = poe_combine(&experts, true).unwrap();
            for j in 0..out.dim() {
                let prec = 1.0 + experts.iter().map(|e| 1.0 / e.sigma2()[j]).sum::<f64>();
                prop_assert!(rel_close(1.0 / out.sigma2()[j], prec, 1e-12));
            }
        }

        #[test]
        fn poe_is_sharper_than_every_expert(experts in experts_strategy()) {
            let out = poe_combine(&experts, false).unwrap();
            for j in 0..out.dim() {
                let min = experts.iter().map(|e| e.sigma2()[j]).fold(f64::INFINITY, f64::min);
                // a lone expert comes back up to rounding of 1/(1/v)
                prop_assert!(out.sigma2()[j] <= min * (1.0 + 4.0 * f64::EPSILON));
            }
        }

        #[test]
        fn poe_is_order_invariant(experts in experts_strategy(), seed in any::<u64>()) {
            let mut shuffled = experts.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            let a = poe_combine(&experts, true).unwrap();
            let b = poe_combine(&shuffled, true).unwrap();
            let plain = plain_poe(&shuffled);
            for j in 0..a.dim() {
                prop_assert!(rel_close(a.sigma2()[j], b.sigma2()[j], 1e-15));
                prop_assert!((a.mu()[j] - b.mu()[j]).abs() <= 1e-15 * a.mu()[j].abs().max(1.0));
                prop_assert!(rel_close(a.sigma2()[j], plain.sigma2()[j], 1e-12));
                prop_assert!((a.mu()[j] - plain.mu()[j]).abs() <= 1e-12 * a.mu()[j].abs().max(1.0));
            }
        }

        #[test]
        fn kl_is_nonnegative(
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_g = || {
                let mu = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>();
                let var = (0..d).map(|_| rng.random_range(0.01..5.0)).collect::<Vec<_>>();
                g(&mu, &var)
            };
            let q = rand_g();
            let p = rand_g();
            prop_assert!(kl_divergence(&q, &p).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        }
    }
}
