//! Modality trunks, treatment conditioning and Gaussian heads.
//!
//! Each modality runs through a trunk of `affine -> batch-norm -> rectifier`
//! blocks. The trunk output is concatenated with a treatment column and sent
//! through one conditioning layer shared by both arms, giving the per-arm
//! features. Gaussian heads turn those features into expert distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::DiagonalGaussian;
use crate::model::{Fusion, ModelConfig};
use crate::tensor::{BatchStats, Matrix, NodeId, Tape};

pub const BN_EPS: f64 = 1e-8;
pub const BN_MOMENTUM: f64 = 0.1;
/// Floor on head variances after the softplus map.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Stored running statistics; a pure function of inputs and parameters.
    Eval,
}

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("train-mode batch norm needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{layer}: expected input width {expected}, got {found}")]
    Width {
        layer: String,
        expected: usize,
        found: usize,
    },
}

/// Visits every named array of a parameter set.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayKind {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    pub fn uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = |rows, cols| {
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let weight = draw(input, output);
        let bias = draw(1, output);
        Self { weight, bias }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn forward(&self, tape: &mut Tape, x: NodeId, layer: &str) -> Result<NodeId, EncoderError> {
        let found = tape.value(x).cols();
        if found != self.input_width() {
            return Err(EncoderError::Width {
                layer: layer.to_owned(),
                expected: self.input_width(),
                found,
            });
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let h = tape.matmul(x, w);
        Ok(tape.add_row(h, b))
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        out
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        f(join(prefix, "weight"), &self.weight, ArrayKind::Trainable);
        f(join(prefix, "bias"), &self.bias, ArrayKind::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        f(join(prefix, "weight"), &mut self.weight, ArrayKind::Trainable);
        f(join(prefix, "bias"), &mut self.bias, ArrayKind::Trainable);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Matrix,
    pub shift: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            scale: Matrix::filled(1, width, 1.0),
            shift: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, 1.0),
        }
    }

    fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode) -> (NodeId, Option<BatchStats>) {
        let gamma = tape.param(&self.scale);
        let beta = tape.param(&self.shift);
        match mode {
            Mode::Train => {
                let (out, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS);
                (out, Some(stats))
            }
            Mode::Eval => {
                let neg_mean = tape.constant(self.running_mean.map(|m| -m));
                let inv_std = tape.constant(self.running_var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
                let centered = tape.add_row(x, neg_mean);
                let normed = tape.mul_row(centered, inv_std);
                let scaled = tape.mul_row(normed, gamma);
                (tape.add_row(scaled, beta), None)
            }
        }
    }

    /// Exponential moving average update; the variance uses the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.n as f64;
        let unbias = if stats.n > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.as_mut_slice().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.as_mut_slice().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

impl Parameters for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        f(join(prefix, "scale"), &self.scale, ArrayKind::Trainable);
        f(join(prefix, "shift"), &self.shift, ArrayKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, ArrayKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, ArrayKind::Buffer);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        f(join(prefix, "scale"), &mut self.scale, ArrayKind::Trainable);
        f(join(prefix, "shift"), &mut self.shift, ArrayKind::Trainable);
        f(join(prefix, "running_mean"), &mut self.running_mean, ArrayKind::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, ArrayKind::Buffer);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub norm: BatchNorm,
}

impl Parameters for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Trace of one trunk pass on the tape.
pub(crate) struct TrunkPass {
    pub output: NodeId,
    pub normed: Vec<NodeId>,
    pub stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub blocks: Vec<Block>,
}

impl Trunk {
    /// `widths[0]` is the input width; one block per following entry.
    pub fn uniform<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let blocks = widths
            .windows(2)
            .map(|w| Block {
                linear: Linear::uniform(w[0], w[1], rng),
                norm: BatchNorm::new(w[1]),
            })
            .collect();
        Self { blocks }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let blocks = widths
            .windows(2)
            .map(|w| Block {
                linear: Linear::zeros(w[0], w[1]),
                norm: BatchNorm::new(w[1]),
            })
            .collect();
        Self { blocks }
    }

    pub fn input_width(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.linear.input_width())
    }

    pub fn output_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.linear.output_width())
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        name: &str,
    ) -> Result<TrunkPass, EncoderError> {
        let rows = tape.value(x).rows();
        if rows == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        if mode == Mode::Train && rows < 2 {
            return Err(EncoderError::BatchTooSmall(rows));
        }
        let mut h = x;
        let mut normed = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let a = block.linear.forward(tape, h, &format!("{name}.{i}"))?;
            let (n, s) = block.norm.forward(tape, a, mode);
            normed.push(n);
            stats.extend(s);
            h = tape.relu(n);
        }
        Ok(TrunkPass {
            output: h,
            normed,
            stats,
        })
    }

    /// Commits train-mode statistics (one entry per block) to the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.norm.update_running(s);
        }
    }
}

impl Parameters for Trunk {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Mean head (affine) and variance head (affine, softplus, floor).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Linear,
    pub var: Linear,
}

impl GaussianHead {
    pub fn zeros(input: usize, d: usize) -> Self {
        Self {
            mean: Linear::zeros(input, d),
            var: Linear::zeros(input, d),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(input: usize, d: usize, rng: &mut R) -> Self {
        let mean = Linear::uniform(input, d, rng);
        let var = Linear::uniform(input, d, rng);
        Self { mean, var }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, phi: NodeId, name: &str) -> Result<(NodeId, NodeId), EncoderError> {
        let mu = self.mean.forward(tape, phi, &format!("{name}.mean"))?;
        let raw = self.var.forward(tape, phi, &format!("{name}.var"))?;
        Ok((mu, tape.softplus_floor(raw, VARIANCE_FLOOR)))
    }
}

impl Parameters for GaussianHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        self.mean.visit(&join(prefix, "mean"), f);
        self.var.visit(&join(prefix, "var"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        self.mean.visit_mut(&join(prefix, "mean"), f);
        self.var.visit_mut(&join(prefix, "var"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Heads {
    /// One expert per modality (product- and mixture-of-experts fusion).
    PerModality { tab: GaussianHead, img: GaussianHead },
    /// One head over the concatenated per-arm features.
    Joint(GaussianHead),
}

impl Parameters for Heads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        match self {
            Heads::PerModality { tab, img } => {
                tab.visit(&join(prefix, "tab"), f);
                img.visit(&join(prefix, "img"), f);
            }
            Heads::Joint(h) => h.visit(&join(prefix, "joint"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        match self {
            Heads::PerModality { tab, img } => {
                tab.visit_mut(&join(prefix, "tab"), f);
                img.visit_mut(&join(prefix, "img"), f);
            }
            Heads::Joint(h) => h.visit_mut(&join(prefix, "joint"), f),
        }
    }
}

/// One inference network (prior or posterior): two trunks, a conditioning
/// layer per modality shared across arms, and the Gaussian heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tab_trunk: Trunk,
    pub img_trunk: Trunk,
    pub tab_condition: Linear,
    pub img_condition: Linear,
    pub heads: Heads,
}

fn trunk_widths(input: usize, widths: &[usize]) -> Vec<usize> {
    std::iter::once(input).chain(widths.iter().copied()).collect()
}

impl EncoderParams {
    /// Randomly initialized network. `with_outcome` adds the outcome column to
    /// the head inputs (posterior network).
    pub fn uniform<R: Rng + ?Sized>(config: &ModelConfig, with_outcome: bool, rng: &mut R) -> Self {
        let tab_trunk = Trunk::uniform(&trunk_widths(config.d_tab, &config.tab_widths), rng);
        let img_trunk = Trunk::uniform(&trunk_widths(config.d_img, &config.img_widths), rng);
        let cw = config.condition_width;
        let tab_condition = Linear::uniform(tab_trunk.output_width() + 1, cw, rng);
        let img_condition = Linear::uniform(img_trunk.output_width() + 1, cw, rng);
        let extra = usize::from(with_outcome);
        let heads = match config.fusion {
            Fusion::Poe | Fusion::Moe => Heads::PerModality {
                tab: GaussianHead::uniform(cw + extra, config.d, rng),
                img: GaussianHead::uniform(cw + extra, config.d, rng),
            },
            Fusion::Concat => Heads::Joint(GaussianHead::uniform(2 * cw + extra, config.d, rng)),
        };
        Self {
            tab_trunk,
            img_trunk,
            tab_condition,
            img_condition,
            heads,
        }
    }

    /// All affine maps zero, batch norms at identity statistics.
    pub fn zeros(config: &ModelConfig, with_outcome: bool) -> Self {
        let tab_trunk = Trunk::zeros(&trunk_widths(config.d_tab, &config.tab_widths));
        let img_trunk = Trunk::zeros(&trunk_widths(config.d_img, &config.img_widths));
        let cw = config.condition_width;
        let extra = usize::from(with_outcome);
        let heads = match config.fusion {
            Fusion::Poe | Fusion::Moe => Heads::PerModality {
                tab: GaussianHead::zeros(cw + extra, config.d),
                img: GaussianHead::zeros(cw + extra, config.d),
            },
            Fusion::Concat => Heads::Joint(GaussianHead::zeros(2 * cw + extra, config.d)),
        };
        Self {
            tab_condition: Linear::zeros(tab_trunk.output_width() + 1, cw),
            img_condition: Linear::zeros(img_trunk.output_width() + 1, cw),
            tab_trunk,
            img_trunk,
            heads,
        }
    }

    pub fn update_running(&mut self, stats: &EncoderStats) {
        self.tab_trunk.update_running(&stats.tab);
        self.img_trunk.update_running(&stats.img);
    }
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix, ArrayKind)) {
        self.tab_trunk.visit(&join(prefix, "tab_trunk"), f);
        self.img_trunk.visit(&join(prefix, "img_trunk"), f);
        self.tab_condition.visit(&join(prefix, "tab_condition"), f);
        self.img_condition.visit(&join(prefix, "img_condition"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix, ArrayKind)) {
        self.tab_trunk.visit_mut(&join(prefix, "tab_trunk"), f);
        self.img_trunk.visit_mut(&join(prefix, "img_trunk"), f);
        self.tab_condition.visit_mut(&join(prefix, "tab_condition"), f);
        self.img_condition.visit_mut(&join(prefix, "img_condition"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

/// Batch statistics produced by one train-mode pass of an encoder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderStats {
    pub tab: Vec<BatchStats>,
    pub img: Vec<BatchStats>,
}

/// Output of a standalone trunk evaluation.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Matrix,
    /// Batch-norm outputs (before the rectifier), one per block.
    pub normalized: Vec<Matrix>,
    /// Train-mode statistics to commit with [`Trunk::update_running`]; empty in eval mode.
    pub stats: Vec<BatchStats>,
}

fn run_trunk(trunk: &Trunk, x: &Matrix, mode: Mode, name: &str) -> Result<Encoded, EncoderError> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let pass = trunk.forward(&mut tape, xi, mode, name)?;
    Ok(Encoded {
        features: tape.value(pass.output).clone(),
        normalized: pass.normed.iter().map(|&n| tape.value(n).clone()).collect(),
        stats: pass.stats,
    })
}

pub fn encode_tabular(params: &EncoderParams, x_tab: &Matrix, mode: Mode) -> Result<Encoded, EncoderError> {
    run_trunk(&params.tab_trunk, x_tab, mode, "tab_trunk")
}

pub fn encode_image_features(params: &EncoderParams, x_img: &Matrix, mode: Mode) -> Result<Encoded, EncoderError> {
    run_trunk(&params.img_trunk, x_img, mode, "img_trunk")
}

pub(crate) fn treatment_column(tape: &mut Tape, rows: usize, t: f64) -> NodeId {
    tape.constant(Matrix::filled(rows, 1, t))
}

/// `relu([features, t] W + b)` for a per-row treatment column `t`.
pub(crate) fn condition_node(
    tape: &mut Tape,
    layer: &Linear,
    features: NodeId,
    t: NodeId,
    name: &str,
) -> Result<NodeId, EncoderError> {
    let joined = tape.hconcat(features, t);
    let h = layer.forward(tape, joined, name)?;
    Ok(tape.relu(h))
}

/// Per-arm features `(Φ₀, Φ₁)` from one shared conditioning layer.
pub fn condition_on_treatment(layer: &Linear, features: &Matrix) -> Result<(Matrix, Matrix), EncoderError> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let rows = features.rows();
    let t0 = treatment_column(&mut tape, rows, 0.0);
    let t1 = treatment_column(&mut tape, rows, 1.0);
    let phi0 = condition_node(&mut tape, layer, f, t0, "condition")?;
    let phi1 = condition_node(&mut tape, layer, f, t1, "condition")?;
    Ok((tape.value(phi0).clone(), tape.value(phi1).clone()))
}

/// One diagonal Gaussian per row of `phi`.
pub fn gaussian_head(phi: &Matrix, head: &GaussianHead) -> Result<Vec<DiagonalGaussian>, EncoderError> {
    let mut tape = Tape::new();
    let p = tape.constant(phi.clone());
    let (mu, var) = head.forward(&mut tape, p, "head")?;
    Ok(rows_to_gaussians(tape.value(mu), tape.value(var)))
}

pub(crate) fn rows_to_gaussians(mu: &Matrix, var: &Matrix) -> Vec<DiagonalGaussian> {
    (0..mu.rows())
        .map(|i| {
            DiagonalGaussian::new(mu.row(i).to_vec(), var.row(i).to_vec())
                .expect("head outputs are finite with positive variance")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect(),
        )
    }

    fn config() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn zero_trunk_in_eval_mode_gives_zero_features() {
        let params = EncoderParams::zeros(&config(), false);
        let x = random_matrix(5, 17, &mut rng(1));
        let out = encode_tabular(&params, &x, Mode::Eval).unwrap();
        assert_eq!(out.features.shape(), (5, 32));
        assert!(out.features.as_slice().iter().all(|&v| v == 0.0));
        let xi = random_matrix(5, 64, &mut rng(2));
        let out = encode_image_features(&params, &xi, Mode::Eval).unwrap();
        assert!(out.features.as_slice().iter().all(|&v| v == 0.0));
        let out = encode_image_features(&params, &Matrix::zeros(3, 64), Mode::Eval).unwrap();
        assert!(out.features.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_passes_positive_input_through() {
        for width in [17usize, 64] {
            let mut trunk = Trunk::zeros(&[width, width]);
            trunk.blocks[0].linear.weight = Matrix::identity(width);
            let mut r = rng(3);
            let x = Matrix::from_vec(4, width, (0..4 * width).map(|_| r.random_range(0.1..3.0)).collect());
            let out = run_trunk(&trunk, &x, Mode::Eval, "t").unwrap();
            for (a, b) in out.features.as_slice().iter().zip(x.as_slice()) {
                assert!((a - b).abs() < 1e-7 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn train_mode_normalizes_to_scale_and_shift() {
        for (widths, input) in [(vec![17, 32, 32, 32], 17), (vec![64, 32, 32, 32], 64)] {
            let mut r = rng(4);
            let mut trunk = Trunk::uniform(&widths, &mut r);
            for b in &mut trunk.blocks {
                b.norm.scale = random_matrix(1, b.norm.scale.cols(), &mut r).map(|v| v.abs() + 0.5);
                b.norm.shift = random_matrix(1, b.norm.shift.cols(), &mut r);
            }
            let x = random_matrix(4, input, &mut r);
            let out = run_trunk(&trunk, &x, Mode::Train, "t").unwrap();
            let last = out.normalized.last().unwrap();
            let norm = &trunk.blocks.last().unwrap().norm;
            for j in 0..last.cols() {
                let col: Vec<f64> = (0..4).map(|i| last[(i, j)]).collect();
                let mean = col.iter().sum::<f64>() / 4.0;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
                assert!((mean - norm.shift.as_slice()[j]).abs() < 1e-6);
                assert!((sd - norm.scale.as_slice()[j]).abs() < 1e-6, "sd {sd}");
            }
        }
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let params = EncoderParams::uniform(&config(), false, &mut rng(5));
        let x = Matrix::zeros(1, 17);
        assert_eq!(
            encode_tabular(&params, &x, Mode::Train).unwrap_err(),
            EncoderError::BatchTooSmall(1)
        );
        assert!(encode_tabular(&params, &x, Mode::Eval).is_ok());
        assert!(matches!(
            encode_tabular(&params, &Matrix::zeros(3, 16), Mode::Eval),
            Err(EncoderError::Width {
                expected: 17,
                found: 16,
                ..
            })
        ));
    }

    #[test]
    fn eval_mode_is_bit_reproducible() {
        let params = EncoderParams::uniform(&config(), false, &mut rng(6));
        let x = random_matrix(7, 64, &mut rng(7));
        let a = encode_image_features(&params, &x, Mode::Eval).unwrap();
        let b = encode_image_features(&params, &x, Mode::Eval).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn running_statistics_move_toward_batch() {
        let mut params = EncoderParams::uniform(&config(), false, &mut rng(8));
        let x = random_matrix(6, 17, &mut rng(9));
        let out = encode_tabular(&params, &x, Mode::Train).unwrap();
        assert_eq!(out.stats.len(), 3);
        let before = params.tab_trunk.blocks[0].norm.running_mean.clone();
        params.tab_trunk.update_running(&out.stats);
        let after = &params.tab_trunk.blocks[0].norm.running_mean;
        for j in 0..after.cols() {
            let expect = 0.9 * before.as_slice()[j] + 0.1 * out.stats[0].mean[j];
            assert!((after.as_slice()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn conditioning_ignoring_treatment_gives_equal_arms() {
        let mut r = rng(10);
        let mut layer = Linear::uniform(33, 32, &mut r);
        for j in 0..32 {
            layer.weight[(32, j)] = 0.0;
        }
        let f = random_matrix(5, 32, &mut r);
        let (p0, p1) = condition_on_treatment(&layer, &f).unwrap();
        assert_eq!(p0, p1);
    }

    #[test]
    fn conditioning_reading_only_treatment() {
        let mut layer = Linear::zeros(4, 3);
        for j in 0..3 {
            layer.weight[(3, j)] = 1.0;
        }
        let f = random_matrix(2, 3, &mut rng(11));
        let (p0, p1) = condition_on_treatment(&layer, &f).unwrap();
        assert!(p0.as_slice().iter().all(|&v| v == 0.0));
        assert!(p1.as_slice().iter().all(|&v| v == 1.0));
        assert!(condition_on_treatment(&layer, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn perturbing_shared_layer_moves_both_arms() {
        let mut r = rng(12);
        let layer = Linear::uniform(33, 32, &mut r);
        let f = random_matrix(5, 32, &mut r).map(f64::abs);
        let (a0, a1) = condition_on_treatment(&layer, &f).unwrap();
        let mut bumped = layer.clone();
        bumped.bias = bumped.bias.map(|b| b + 0.5);
        let (b0, b1) = condition_on_treatment(&bumped, &f).unwrap();
        assert_ne!(a0, b0);
        assert_ne!(a1, b1);
    }

    #[test]
    fn conditioning_registers_one_parameter_node_for_both_arms() {
        let layer = Linear::uniform(4, 2, &mut rng(13));
        let mut tape = Tape::new();
        let f = tape.constant(Matrix::filled(3, 3, 0.5));
        let t0 = treatment_column(&mut tape, 3, 0.0);
        let t1 = treatment_column(&mut tape, 3, 1.0);
        condition_node(&mut tape, &layer, f, t0, "c").unwrap();
        let w_first = tape.param(&layer.weight);
        condition_node(&mut tape, &layer, f, t1, "c").unwrap();
        assert_eq!(w_first, tape.param(&layer.weight));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn zero_head_gives_softplus_of_zero() {
        let head = GaussianHead::zeros(32, 10);
        let out = gaussian_head(&random_matrix(3, 32, &mut rng(14)), &head).unwrap();
        for g in out {
            assert!(g.mu().iter().all(|&m| m == 0.0));
            assert!(g.sigma2().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
            assert!((g.sigma2()[0] - 0.693147).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_bias_passes_through_zero_weights() {
        let mut head = GaussianHead::zeros(4, 2);
        head.mean.bias = Matrix::from_rows(&[[1.5, -2.0]]);
        let out = gaussian_head(&random_matrix(6, 4, &mut rng(15)), &head).unwrap();
        for g in out {
            assert_eq!(g.mu(), &[1.5, -2.0]);
        }
        assert!(gaussian_head(&Matrix::zeros(1, 5), &head).is_err());
    }

    #[test]
    fn head_variance_is_positive_for_random_inputs() {
        let mut r = rng(16);
        let mut head = GaussianHead::uniform(32, 10, &mut r);
        head.var.weight = head.var.weight.map(|w| w * 20.0);
        let phi = random_matrix(10_000, 32, &mut r).map(|v| v * 5.0);
        let out = gaussian_head(&phi, &head).unwrap();
        assert_eq!(out.len(), 10_000);
        assert!(out.iter().all(|g| g.sigma2().iter().all(|&v| v >= VARIANCE_FLOOR)));
    }

    /// Central differences of `sum(weights ⊙ features)` for every array.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut cfg = ModelConfig {
            d_tab: 4,
            d_img: 5,
            d: 2,
            tab_widths: vec![3, 3, 3],
            img_widths: vec![3, 3, 3],
            condition_width: 3,
            ..ModelConfig::default()
        };
        for fusion in [Fusion::Poe, Fusion::Concat] {
            cfg.fusion = fusion;
            let mut r = rng(17);
            let params = EncoderParams::uniform(&cfg, false, &mut r);
            let x_tab = random_matrix(4, 4, &mut r);
            let x_img = random_matrix(4, 5, &mut r);
            let t = Matrix::column(&[0.0, 1.0, 1.0, 0.0]);
            let probe = random_matrix(4, 2, &mut r);

            let objective = |p: &EncoderParams, tape: &mut Tape| -> NodeId {
                let xt = tape.constant(x_tab.clone());
                let xi = tape.constant(x_img.clone());
                let tc = tape.constant(t.clone());
                let ht = p.tab_trunk.forward(tape, xt, Mode::Train, "t").unwrap().output;
                let hi = p.img_trunk.forward(tape, xi, Mode::Train, "i").unwrap().output;
                let pt = condition_node(tape, &p.tab_condition, ht, tc, "ct").unwrap();
                let pi = condition_node(tape, &p.img_condition, hi, tc, "ci").unwrap();
                let (mu, var) = match &p.heads {
                    Heads::PerModality { tab, img } => {
                        let (m1, v1) = tab.forward(tape, pt, "h").unwrap();
                        let (m2, v2) = img.forward(tape, pi, "h").unwrap();
                        (tape.add(m1, m2), tape.mul(v1, v2))
                    }
                    Heads::Joint(h) => {
                        let joined = tape.hconcat(pi, pt);
                        h.forward(tape, joined, "h").unwrap()
                    }
                };
                let w = tape.constant(probe.clone());
                let a = tape.mul(mu, w);
                let b = tape.mul(var, w);
                let s = tape.add(a, b);
                let s = tape.sum_cols(s);
                tape.mean_all(s)
            };
            let eval = |p: &EncoderParams| {
                let mut tape = Tape::new();
                let out = objective(p, &mut tape);
                tape.value(out)[(0, 0)]
            };

            let mut tape = Tape::new();
            let out = objective(&params, &mut tape);
            let grads = tape.backward(out);
            let mut analytic = Vec::new();
            params.visit("", &mut |name, m, kind| {
                if kind == ArrayKind::Trainable {
                    analytic.push((name, grads.of_param(m)));
                }
            });

            let h = 1e-4;
            for (name, grad) in &analytic {
                for k in 0..grad.len() {
                    let bump = |delta: f64| {
                        let mut p = params.clone();
                        p.visit_mut("", &mut |n, m, _| {
                            if &n == name {
                                m.as_mut_slice()[k] += delta;
                            }
                        });
                        eval(&p)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    let a = grad.as_slice()[k];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{fusion:?} {name}[{k}]: analytic {a} numeric {numeric}"
                    );
                }
            }
        }
    }
}
