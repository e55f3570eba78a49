//! The generative prognostic model.
//!
//! A prior network p(z | x, t) and a posterior network q(z | x, y, t) each
//! produce one prognostic-score distribution per treatment arm by fusing a
//! tabular and an image expert. A decoder shared by both arms maps `[z, t]` to
//! the probability of a favorable outcome. Training maximizes the ELBO on the
//! factual arm; inference decodes the prior mean of each arm.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, Sample};
use crate::distributions::{stratified_assignment, DiagonalGaussian, FUSED_VARIANCE_FLOOR};
use crate::encoders::{
    condition_node, rows_to_gaussians, treatment_column, ArrayKind, EncoderError, EncoderParams, EncoderStats,
    GaussianHead, Heads, Linear, Mode, Parameters,
};
use crate::tensor::{Matrix, NodeId, Tape};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Poe,
    Moe,
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Poe, Fusion::Moe, Fusion::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Poe => "poe",
            Fusion::Moe => "moe",
            Fusion::Concat => "concat",
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Fusion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "poe" => Ok(Fusion::Poe),
            "moe" => Ok(Fusion::Moe),
            "concat" => Ok(Fusion::Concat),
            other => Err(format!("unknown fusion `{other}` (expected poe, moe or concat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_tab: usize,
    pub d_img: usize,
    /// Prognostic-score dimension.
    pub d: usize,
    /// Weight of the KL term.
    pub beta: f64,
    pub fusion: Fusion,
    pub tab_widths: Vec<usize>,
    pub img_widths: Vec<usize>,
    pub condition_width: usize,
    pub decoder_width: usize,
    pub mc_samples_train: usize,
    /// Posterior reuses the prior's trunks and conditioning layers.
    pub tie_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_tab: crate::data::DEFAULT_D_TAB,
            d_img: crate::data::DEFAULT_D_IMG,
            d: 10,
            beta: 1.0,
            fusion: Fusion::Poe,
            tab_widths: vec![32, 32, 32],
            img_widths: vec![32, 32, 32],
            condition_width: 32,
            decoder_width: 16,
            mc_samples_train: 1,
            tie_encoders: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_owned()));
        if self.d == 0 {
            return bad("score dimension d must be at least 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if self.mc_samples_train == 0 {
            return bad("mc_samples_train must be at least 1");
        }
        if self.tab_widths.is_empty() || self.img_widths.is_empty() {
            return bad("trunk widths must list at least one block");
        }
        if self.tab_widths.iter().chain(&self.img_widths).any(|&w| w == 0)
            || self.condition_width == 0
            || self.decoder_width == 0
            || self.d_tab == 0
            || self.d_img == 0
        {
            return bad("all widths and input dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("training batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite loss for sample {sample_id}")]
    NonFinite { sample_id: String },
    #[error("{what}: expected dimension {expected}, got {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Linear,
    pub output: Linear,
}

impl Decoder {
    fn forward(&self, tape: &mut Tape, z: NodeId, t: NodeId) -> Result<NodeId, EncoderError> {
        let zt = tape.hconcat(z, t);
        let h = self.hidden.forward(tape, zt, "decoder.hidden")?;
        let h = tape.relu(h);
        let logit = self.output.forward(tape, h, "decoder.output")?;
        Ok(tape.sigmoid(logit))
    }
}

impl Parameters for Decoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.output.visit_mut(&format!("{prefix}.output"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub prior: EncoderParams,
    pub posterior: EncoderParams,
    pub decoder: Decoder,
}

impl ModelParams {
    pub fn uniform<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let prior = EncoderParams::uniform(config, false, rng);
        let posterior = EncoderParams::uniform(config, true, rng);
        let hidden = Linear::uniform(config.d + 1, config.decoder_width, rng);
        let output = Linear::uniform(config.decoder_width, 1, rng);
        Self {
            prior,
            posterior,
            decoder: Decoder { hidden, output },
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            prior: EncoderParams::zeros(config, false),
            posterior: EncoderParams::zeros(config, true),
            decoder: Decoder {
                hidden: Linear::zeros(config.d + 1, config.decoder_width),
                output: Linear::zeros(config.decoder_width, 1),
            },
        }
    }

    /// `(name, array)` for every trainable array, in optimizer order.
    pub fn trainable(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m, kind| {
            if kind == ArrayKind::Trainable {
                out.push((name, m));
            }
        });
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<*mut Matrix> = Vec::new();
        self.visit_mut("", &mut |_, m, kind| {
            if kind == ArrayKind::Trainable {
                out.push(m as *mut Matrix);
            }
        });
        // SAFETY: each pointer refers to a distinct field of `self`, which is
        // mutably borrowed for the lifetime of the returned references.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    /// `(name, array)` for every stored array, buffers included.
    pub fn arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m, _| out.push((name, m)));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, m)| m.is_finite())
    }

    pub fn update_running(&mut self, stats: &ModelStats) {
        self.prior.update_running(&stats.prior);
        if let Some(post) = &stats.posterior {
            self.posterior.update_running(post);
        }
    }
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_owned()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.prior.visit(&p("prior"), f);
        self.posterior.visit(&p("posterior"), f);
        self.decoder.visit(&p("decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_owned()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.prior.visit_mut(&p("prior"), f);
        self.posterior.visit_mut(&p("posterior"), f);
        self.decoder.visit_mut(&p("decoder"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmDistributions {
    pub z0: DiagonalGaussian,
    pub z1: DiagonalGaussian,
}

impl ArmDistributions {
    pub fn arm(&self, t: u8) -> &DiagonalGaussian {
        if t == 0 {
            &self.z0
        } else {
            &self.z1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub y0_hat: f64,
    pub y1_hat: f64,
}

impl PotentialOutcomes {
    pub fn arm(&self, t: u8) -> f64 {
        if t == 0 {
            self.y0_hat
        } else {
            self.y1_hat
        }
    }
}

/// Covariates and factual data for a set of samples, in matrix form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub x_tab: Matrix,
    pub x_img: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<u8>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>, d_tab: usize, d_img: usize) -> Self {
        let mut ids = Vec::new();
        let (mut tab, mut img, mut t, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            ids.push(s.id.clone());
            tab.extend_from_slice(&s.x_tab);
            img.extend_from_slice(&s.x_img);
            t.push(s.t);
            y.push(s.y);
        }
        let n = ids.len();
        Self {
            ids,
            x_tab: Matrix::from_vec(n, d_tab, tab),
            x_img: Matrix::from_vec(n, d_img, img),
            t,
            y,
        }
    }

    pub fn from_cohort(c: &Cohort) -> Self {
        Self::from_samples(&c.samples, c.d_tab, c.d_img)
    }

    pub fn from_indices(c: &Cohort, idx: &[usize]) -> Self {
        Self::from_samples(idx.iter().map(|&i| &c.samples[i]), c.d_tab, c.d_img)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Batch-norm statistics gathered during one training pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelStats {
    pub prior: EncoderStats,
    /// `None` when the posterior shares the prior's trunks.
    pub posterior: Option<EncoderStats>,
}

struct TrunkOut {
    tab: NodeId,
    img: NodeId,
    stats: EncoderStats,
}

fn run_trunks(
    tape: &mut Tape,
    enc: &EncoderParams,
    x_tab: NodeId,
    x_img: NodeId,
    mode: Mode,
) -> Result<TrunkOut, EncoderError> {
    let tab = enc.tab_trunk.forward(tape, x_tab, mode, "tab_trunk")?;
    let img = enc.img_trunk.forward(tape, x_img, mode, "img_trunk")?;
    Ok(TrunkOut {
        tab: tab.output,
        img: img.output,
        stats: EncoderStats {
            tab: tab.stats,
            img: img.stats,
        },
    })
}

/// Fused distribution on the tape. For the mixture variant `mu`/`var` are the
/// moment-matched Gaussian and `components` holds the experts.
struct Fused {
    mu: NodeId,
    var: NodeId,
    components: Option<[(NodeId, NodeId); 2]>,
}

/// Per-arm features for one modality pair.
struct ArmFeatures {
    tab: NodeId,
    img: NodeId,
}

fn arm_features(
    tape: &mut Tape,
    enc: &EncoderParams,
    trunks: &TrunkOut,
    t: NodeId,
) -> Result<ArmFeatures, EncoderError> {
    let tab = condition_node(tape, &enc.tab_condition, trunks.tab, t, "tab_condition")?;
    let img = condition_node(tape, &enc.img_condition, trunks.img, t, "img_condition")?;
    Ok(ArmFeatures { tab, img })
}

fn with_outcome(tape: &mut Tape, phi: NodeId, y: Option<NodeId>) -> NodeId {
    match y {
        Some(y) => tape.hconcat(phi, y),
        None => phi,
    }
}

fn poe_nodes(tape: &mut Tape, experts: &[(NodeId, NodeId)]) -> (NodeId, NodeId) {
    // unit prior expert: precision 1, mean 0
    let mut precision = None;
    let mut weighted = None;
    for &(mu, var) in experts {
        let p = tape.recip(var);
        let w = tape.div(mu, var);
        precision = Some(match precision {
            None => tape.add_scalar(p, 1.0),
            Some(acc) => tape.add(acc, p),
        });
        weighted = Some(match weighted {
            None => w,
            Some(acc) => tape.add(acc, w),
        });
    }
    let var = tape.recip(precision.expect("at least one expert"));
    let var = tape.clamp_min(var, FUSED_VARIANCE_FLOOR);
    let mu = tape.mul(weighted.expect("at least one expert"), var);
    (mu, var)
}

fn moment_match_nodes(tape: &mut Tape, a: (NodeId, NodeId), b: (NodeId, NodeId)) -> (NodeId, NodeId) {
    // equal weights: var = (v_a + v_b) / 2 + (m_a - m_b)^2 / 4
    let sum_mu = tape.add(a.0, b.0);
    let mean = tape.scale(sum_mu, 0.5);
    let spread = tape.sub(a.0, b.0);
    let spread_sq = tape.mul(spread, spread);
    let sum_var = tape.add(a.1, b.1);
    let within = tape.scale(sum_var, 0.5);
    let between = tape.scale(spread_sq, 0.25);
    let var = tape.add(within, between);
    (mean, tape.clamp_min(var, FUSED_VARIANCE_FLOOR))
}

fn fuse(
    tape: &mut Tape,
    heads: &Heads,
    fusion: Fusion,
    phi: &ArmFeatures,
    y: Option<NodeId>,
) -> Result<Fused, EncoderError> {
    match (heads, fusion) {
        (Heads::PerModality { tab, img }, Fusion::Poe | Fusion::Moe) => {
            let in_img = with_outcome(tape, phi.img, y);
            let in_tab = with_outcome(tape, phi.tab, y);
            let e_img = img.forward(tape, in_img, "heads.img")?;
            let e_tab = tab.forward(tape, in_tab, "heads.tab")?;
            if fusion == Fusion::Poe {
                let (mu, var) = poe_nodes(tape, &[e_img, e_tab]);
                Ok(Fused {
                    mu,
                    var,
                    components: None,
                })
            } else {
                let (mu, var) = moment_match_nodes(tape, e_img, e_tab);
                Ok(Fused {
                    mu,
                    var,
                    components: Some([e_img, e_tab]),
                })
            }
        }
        (Heads::Joint(head), Fusion::Concat) => {
            let joined = tape.hconcat(phi.img, phi.tab);
            let input = with_outcome(tape, joined, y);
            let (mu, var) = head.forward(tape, input, "heads.joint")?;
            Ok(Fused {
                mu,
                var,
                components: None,
            })
        }
        _ => Err(EncoderError::Width {
            layer: format!("heads (fusion {fusion})"),
            expected: 0,
            found: 0,
        }),
    }
}

fn check_inputs(config: &ModelConfig, x_tab: &Matrix, x_img: &Matrix) -> Result<(), ModelError> {
    if x_tab.cols() != config.d_tab {
        return Err(ModelError::Dimension {
            what: "tabular covariates",
            expected: config.d_tab,
            found: x_tab.cols(),
        });
    }
    if x_img.cols() != config.d_img {
        return Err(ModelError::Dimension {
            what: "image features",
            expected: config.d_img,
            found: x_img.cols(),
        });
    }
    Ok(())
}

fn column_of(values: &[u8]) -> Matrix {
    Matrix::from_vec(values.len(), 1, values.iter().map(|&v| f64::from(v)).collect())
}

/// Prior distributions of both arms for every row (eval mode).
pub fn prior_distributions_batch(
    x_tab: &Matrix,
    x_img: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<ArmDistributions>, ModelError> {
    check_inputs(config, x_tab, x_img)?;
    let mut tape = Tape::new();
    let xt = tape.constant(x_tab.clone());
    let xi = tape.constant(x_img.clone());
    let trunks = run_trunks(&mut tape, &params.prior, xt, xi, Mode::Eval)?;
    let rows = x_tab.rows();
    let mut arms = Vec::with_capacity(2);
    for t in [0.0, 1.0] {
        let tc = treatment_column(&mut tape, rows, t);
        let phi = arm_features(&mut tape, &params.prior, &trunks, tc)?;
        let fused = fuse(&mut tape, &params.prior.heads, config.fusion, &phi, None)?;
        arms.push(rows_to_gaussians(tape.value(fused.mu), tape.value(fused.var)));
    }
    let z1 = arms.pop().expect("two arms");
    let z0 = arms.pop().expect("two arms");
    Ok(z0
        .into_iter()
        .zip(z1)
        .map(|(z0, z1)| ArmDistributions { z0, z1 })
        .collect())
}

pub fn prior_distributions(
    x_tab: &[f64],
    x_img: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ArmDistributions, ModelError> {
    let xt = Matrix::from_vec(1, x_tab.len(), x_tab.to_vec());
    let xi = Matrix::from_vec(1, x_img.len(), x_img.to_vec());
    Ok(prior_distributions_batch(&xt, &xi, params, config)?.remove(0))
}

/// Posterior q(z | x, y, t) of the factual arm for every row (eval mode).
pub fn posterior_distribution_batch(
    batch: &Batch,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<DiagonalGaussian>, ModelError> {
    check_inputs(config, &batch.x_tab, &batch.x_img)?;
    let mut tape = Tape::new();
    let xt = tape.constant(batch.x_tab.clone());
    let xi = tape.constant(batch.x_img.clone());
    let owner = if config.tie_encoders {
        &params.prior
    } else {
        &params.posterior
    };
    let trunks = run_trunks(&mut tape, owner, xt, xi, Mode::Eval)?;
    let tc = tape.constant(column_of(&batch.t));
    let yc = tape.constant(column_of(&batch.y));
    let phi = arm_features(&mut tape, owner, &trunks, tc)?;
    let fused = fuse(&mut tape, &params.posterior.heads, config.fusion, &phi, Some(yc))?;
    Ok(rows_to_gaussians(tape.value(fused.mu), tape.value(fused.var)))
}

pub fn posterior_distribution(
    sample: &Sample,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<DiagonalGaussian, ModelError> {
    let batch = Batch::from_samples([sample], sample.x_tab.len(), sample.x_img.len());
    Ok(posterior_distribution_batch(&batch, params, config)?.remove(0))
}

/// Favorable-outcome probability for score `z` under arm `t`.
pub fn decode(z: &[f64], t: u8, params: &ModelParams) -> Result<f64, ModelError> {
    let d = params.decoder.hidden.input_width() - 1;
    if z.len() != d {
        return Err(ModelError::Dimension {
            what: "prognostic score",
            expected: d,
            found: z.len(),
        });
    }
    let mut tape = Tape::new();
    let zn = tape.constant(Matrix::from_vec(1, d, z.to_vec()));
    let tn = treatment_column(&mut tape, 1, f64::from(t));
    let p = params.decoder.forward(&mut tape, zn, tn)?;
    Ok(tape.value(p)[(0, 0)])
}

/// Potential outcomes from the prior means of both arms, for every row.
pub fn predict_batch(
    x_tab: &Matrix,
    x_img: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<PotentialOutcomes>, ModelError> {
    check_inputs(config, x_tab, x_img)?;
    let mut tape = Tape::new();
    let xt = tape.constant(x_tab.clone());
    let xi = tape.constant(x_img.clone());
    let trunks = run_trunks(&mut tape, &params.prior, xt, xi, Mode::Eval)?;
    let rows = x_tab.rows();
    let mut probs = Vec::with_capacity(2);
    for t in [0.0, 1.0] {
        let tc = treatment_column(&mut tape, rows, t);
        let phi = arm_features(&mut tape, &params.prior, &trunks, tc)?;
        let fused = fuse(&mut tape, &params.prior.heads, config.fusion, &phi, None)?;
        let p = params.decoder.forward(&mut tape, fused.mu, tc)?;
        probs.push(tape.value(p).as_slice().to_vec());
    }
    Ok(probs[0]
        .iter()
        .zip(&probs[1])
        .map(|(&y0_hat, &y1_hat)| PotentialOutcomes { y0_hat, y1_hat })
        .collect())
}

pub fn predict(
    x_tab: &[f64],
    x_img: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<PotentialOutcomes, ModelError> {
    let xt = Matrix::from_vec(1, x_tab.len(), x_tab.to_vec());
    let xi = Matrix::from_vec(1, x_img.len(), x_img.to_vec());
    Ok(predict_batch(&xt, &xi, params, config)?[0])
}

pub fn predict_cohort(
    cohort: &Cohort,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<PotentialOutcomes>, ModelError> {
    predict_batch(&cohort.tab_matrix(), &cohort.img_matrix(), params, config)
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    /// Batch mean of `cross_entropy + beta * kl`.
    pub loss: f64,
    pub cross_entropy: f64,
    pub kl: f64,
    /// Gradients aligned with [`ModelParams::trainable`].
    pub grads: Vec<Matrix>,
    pub stats: ModelStats,
}

/// Negative ELBO of a training batch and its exact gradients.
///
/// The posterior of the factual arm is sampled by reparameterization
/// (`mc_samples_train` draws, cross-entropy averaged over them) and the KL is
/// taken against the prior of the same arm. The counterfactual arm is never
/// evaluated.
pub fn elbo_loss<R: Rng + ?Sized>(
    batch: &Batch,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ElboOutput, ModelError> {
    let n = batch.len();
    if n < 2 {
        return Err(ModelError::BatchTooSmall(n));
    }
    check_inputs(config, &batch.x_tab, &batch.x_img)?;
    let mut tape = Tape::new();
    let xt = tape.constant(batch.x_tab.clone());
    let xi = tape.constant(batch.x_img.clone());
    let tc = tape.constant(column_of(&batch.t));
    let yc = tape.constant(column_of(&batch.y));
    let targets: Vec<f64> = batch.y.iter().map(|&v| f64::from(v)).collect();

    let prior_trunks = run_trunks(&mut tape, &params.prior, xt, xi, Mode::Train)?;
    let prior_phi = arm_features(&mut tape, &params.prior, &prior_trunks, tc)?;
    let prior = fuse(&mut tape, &params.prior.heads, config.fusion, &prior_phi, None)?;

    let (post_phi, post_stats) = if config.tie_encoders {
        (prior_phi, None)
    } else {
        let trunks = run_trunks(&mut tape, &params.posterior, xt, xi, Mode::Train)?;
        let phi = arm_features(&mut tape, &params.posterior, &trunks, tc)?;
        (phi, Some(trunks.stats))
    };
    let post = fuse(&mut tape, &params.posterior.heads, config.fusion, &post_phi, Some(yc))?;

    // KL(q || p) per row
    let ln_vp = tape.ln(prior.var);
    let ln_vq = tape.ln(post.var);
    let log_ratio = tape.sub(ln_vp, ln_vq);
    let diff = tape.sub(post.mu, prior.mu);
    let diff_sq = tape.mul(diff, diff);
    let num = tape.add(post.var, diff_sq);
    let quad = tape.div(num, prior.var);
    let inner = tape.add(log_ratio, quad);
    let inner = tape.add_scalar(inner, -1.0);
    let kl_sum = tape.sum_cols(inner);
    let kl_rows = tape.scale(kl_sum, 0.5);

    let mc = config.mc_samples_train;
    let mut ce_rows: Option<NodeId> = None;
    for _ in 0..mc {
        let z = sample_posterior(&mut tape, &post, n, config.d, rng);
        let p = params.decoder.forward(&mut tape, z, tc)?;
        let ce = tape.bce(p, targets.clone(), PROB_CLAMP, 1.0 - PROB_CLAMP);
        ce_rows = Some(match ce_rows {
            None => ce,
            Some(acc) => tape.add(acc, ce),
        });
    }
    let ce_rows = tape.scale(ce_rows.expect("mc_samples_train >= 1"), 1.0 / mc as f64);
    let weighted_kl = tape.scale(kl_rows, config.beta);
    let total_rows = tape.add(ce_rows, weighted_kl);

    if let Some(i) = tape.value(total_rows).as_slice().iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite {
            sample_id: batch.ids[i].clone(),
        });
    }
    let loss = tape.mean_all(total_rows);
    let grads = tape.backward(loss);
    let grads = params.trainable().into_iter().map(|(_, m)| grads.of_param(m)).collect();
    let mean = |id: NodeId| tape.value(id).sum() / n as f64;
    Ok(ElboOutput {
        loss: tape.value(loss)[(0, 0)],
        cross_entropy: mean(ce_rows),
        kl: mean(kl_rows),
        grads,
        stats: ModelStats {
            prior: prior_trunks.stats,
            posterior: post_stats,
        },
    })
}

fn noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

fn reparam(tape: &mut Tape, mu: NodeId, var: NodeId, eps: Matrix) -> NodeId {
    let e = tape.constant(eps);
    let sd = tape.sqrt(var);
    let scaled = tape.mul(sd, e);
    tape.add(mu, scaled)
}

fn sample_posterior<R: Rng + ?Sized>(tape: &mut Tape, post: &Fused, rows: usize, d: usize, rng: &mut R) -> NodeId {
    match post.components {
        None => {
            let eps = noise(rng, rows, d);
            reparam(tape, post.mu, post.var, eps)
        }
        Some([a, b]) => {
            // equal weights, component counts stratified across the batch
            let assign = stratified_assignment(&[0.5, 0.5], rows, rng);
            let eps = noise(rng, rows, d);
            let za = reparam(tape, a.0, a.1, eps.clone());
            let zb = reparam(tape, b.0, b.1, eps);
            tape.select_rows(assign.iter().map(|&k| k == 0).collect(), za, zb)
        }
    }
}

/// Builds a posterior that reproduces the prior's factual arm: trunks and
/// conditioning copied, head weights extended with a zero outcome row.
pub fn posterior_from_prior(prior: &EncoderParams) -> EncoderParams {
    fn extend(l: &Linear) -> Linear {
        let (rows, cols) = l.weight.shape();
        let mut w = Matrix::zeros(rows + 1, cols);
        for i in 0..rows {
            w.row_mut(i).copy_from_slice(l.weight.row(i));
        }
        Linear {
            weight: w,
            bias: l.bias.clone(),
        }
    }
    let head = |h: &GaussianHead| GaussianHead {
        mean: extend(&h.mean),
        var: extend(&h.var),
    };
    EncoderParams {
        tab_trunk: prior.tab_trunk.clone(),
        img_trunk: prior.img_trunk.clone(),
        tab_condition: prior.tab_condition.clone(),
        img_condition: prior.img_condition.clone(),
        heads: match &prior.heads {
            Heads::PerModality { tab, img } => Heads::PerModality {
                tab: head(tab),
                img: head(img),
            },
            Heads::Joint(h) => Heads::Joint(head(h)),
        },
    }
}
