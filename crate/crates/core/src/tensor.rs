//! Dense row-major matrices and a small reverse-mode tape.
//!
//! The tape records every operation of one forward pass. Parameters enter as
//! leaves keyed by their address, so a layer used twice in the same pass (the
//! treatment-conditioning layer serves both arms) maps to a single node and
//! its gradient accumulates across uses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Panics if the length is not `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in zip_map");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), self.cols, data)
    }

    pub fn hconcat(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "row mismatch in hconcat");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Self::from_vec(self.rows, cols, data)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(false, self, false, other, &mut out, 0.0);
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `out = beta * out + op(a) * op(b)` where `op` optionally transposes.
fn gemm(ta: bool, a: &Matrix, tb: bool, b: &Matrix, out: &mut Matrix, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimension mismatch in matmul");
    assert_eq!(out.shape(), (m, n), "output shape mismatch in matmul");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out.data {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
    // whose lengths were checked against the asserted shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    SoftplusFloor(NodeId, f64),
    Sigmoid(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    ClampMin(NodeId, f64),
    HConcat(NodeId, NodeId),
    SumCols(NodeId),
    MeanAll(NodeId),
    SelectRows {
        mask: Vec<bool>,
        on_true: NodeId,
        on_false: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Bce {
        p: NodeId,
        target: Vec<f64>,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Per-feature statistics of one train-mode batch-norm application.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub n: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<*const Matrix, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter. The same matrix registered twice yields the same node.
    pub fn param(&mut self, m: &Matrix) -> NodeId {
        let key = m as *const Matrix;
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.push(m.clone(), Op::Leaf);
        self.params.insert(key, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "mul_row width mismatch");
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, s) in v.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *x *= s;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        self.push(v, Op::Relu(a))
    }

    /// `max(softplus(a), floor)`.
    pub fn softplus_floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| {
            let s = softplus(x);
            if s < floor {
                floor
            } else {
                s
            }
        });
        self.push(v, Op::SoftplusFloor(a, floor))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| if x < floor { floor } else { x });
        self.push(v, Op::ClampMin(a, floor))
    }

    pub fn hconcat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hconcat(self.value(b));
        self.push(v, Op::HConcat(a, b))
    }

    /// Row sums, producing an `rows x 1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let v = Matrix::from_vec(av.rows(), 1, data);
        self.push(v, Op::SumCols(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Matrix::filled(1, 1, av.sum() / av.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    /// Row `i` comes from `on_true` where `mask[i]`, else from `on_false`.
    pub fn select_rows(&mut self, mask: Vec<bool>, on_true: NodeId, on_false: NodeId) -> NodeId {
        let (a, b) = (self.value(on_true), self.value(on_false));
        assert_eq!(a.shape(), b.shape(), "select_rows shape mismatch");
        assert_eq!(mask.len(), a.rows(), "select_rows mask length mismatch");
        let mut v = b.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                v.row_mut(i).copy_from_slice(a.row(i));
            }
        }
        self.push(
            v,
            Op::SelectRows {
                mask,
                on_true,
                on_false,
            },
        )
    }

    /// Train-mode batch normalization over rows. Returns the output node and the
    /// batch statistics used.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> (NodeId, BatchStats) {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (acc, v) in mean.iter_mut().zip(xv.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; m];
        for i in 0..n {
            for ((acc, v), mu) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                xhat[(i, j)] = (xv[(i, j)] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out[(i, j)] = g.as_slice()[j] * xhat[(i, j)] + b.as_slice()[j];
            }
        }
        let stats = BatchStats { mean, var, n };
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (id, stats)
    }

    /// Per-row binary cross-entropy of probabilities `p` (`rows x 1`) against
    /// 0/1 targets, with `p` clamped to `[lo, hi]`.
    pub fn bce(&mut self, p: NodeId, target: Vec<f64>, lo: f64, hi: f64) -> NodeId {
        let pv = self.value(p);
        assert_eq!(pv.cols(), 1, "bce expects a column of probabilities");
        assert_eq!(pv.rows(), target.len(), "bce target length mismatch");
        let data = pv
            .as_slice()
            .iter()
            .zip(&target)
            .map(|(&q, &y)| {
                let q = q.clamp(lo, hi);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .collect();
        let v = Matrix::from_vec(target.len(), 1, data);
        self.push(v, Op::Bce { p, target, lo, hi })
    }

    /// Back-propagates from a `1 x 1` node and returns gradients indexed by node.
    pub fn backward(&self, root: NodeId) -> Gradients<'_> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { tape: self, grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let acc = grads[a.0].get_or_insert_with(|| Matrix::zeros(av.rows, av.cols));
                gemm(false, g, true, bv, acc, 1.0);
                let acc = grads[b.0].get_or_insert_with(|| Matrix::zeros(bv.rows, bv.cols));
                gemm(true, av, false, g, acc, 1.0);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                let mut rg = Matrix::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (acc, v) in rg.data.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *row, &rg);
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let mut ga = g.clone();
                let mut rg = Matrix::zeros(1, g.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        ga[(i, j)] *= rv.data[j];
                        rg.data[j] += g[(i, j)] * av[(i, j)];
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *row, &rg);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, &g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, &g.zip_map(val(*b), |d, y| d * y));
                accumulate(grads, *b, &g.zip_map(val(*a), |d, x| d * x));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                accumulate(grads, *a, &g.zip_map(bv, |d, y| d / y));
                let ga = g.zip_map(&node.value, |d, q| d * q);
                accumulate(grads, *b, &ga.zip_map(bv, |d, y| -d / y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, &g.map(|v| v * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Relu(a) => accumulate(grads, *a, &g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::SoftplusFloor(a, floor) => {
                let local = val(*a).zip_map(&node.value, |x, out| {
                    if softplus(x) < *floor {
                        0.0
                    } else {
                        debug_assert!(out >= *floor);
                        sigmoid(x)
                    }
                });
                accumulate(grads, *a, &g.zip_map(&local, |d, l| d * l));
            }
            Op::Sigmoid(a) => accumulate(grads, *a, &g.zip_map(&node.value, |d, s| d * s * (1.0 - s))),
            Op::Ln(a) => accumulate(grads, *a, &g.zip_map(val(*a), |d, x| d / x)),
            Op::Sqrt(a) => accumulate(grads, *a, &g.zip_map(&node.value, |d, r| d * 0.5 / r)),
            Op::Recip(a) => accumulate(grads, *a, &g.zip_map(&node.value, |d, r| -d * r * r)),
            Op::ClampMin(a, floor) => {
                accumulate(grads, *a, &g.zip_map(val(*a), |d, x| if x >= *floor { d } else { 0.0 }))
            }
            Op::HConcat(a, b) => {
                let ca = val(*a).cols;
                let cb = val(*b).cols;
                let mut ga = Matrix::zeros(g.rows, ca);
                let mut gb = Matrix::zeros(g.rows, cb);
                for i in 0..g.rows {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    ga.row_mut(i).fill(g.data[i]);
                }
                accumulate(grads, *a, &ga);
            }
            Op::MeanAll(a) => {
                let av = val(*a);
                let ga = Matrix::filled(av.rows, av.cols, g.data[0] / av.len() as f64);
                accumulate(grads, *a, &ga);
            }
            Op::SelectRows {
                mask,
                on_true,
                on_false,
            } => {
                let mut gt = Matrix::zeros(g.rows, g.cols);
                let mut gf = Matrix::zeros(g.rows, g.cols);
                for (i, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut gt } else { &mut gf };
                    dst.row_mut(i).copy_from_slice(g.row(i));
                }
                accumulate(grads, *on_true, &gt);
                accumulate(grads, *on_false, &gf);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, m) = g.shape();
                let gam = val(*gamma);
                let mut dgamma = Matrix::zeros(1, m);
                let mut dbeta = Matrix::zeros(1, m);
                for i in 0..n {
                    for j in 0..m {
                        dgamma.data[j] += g[(i, j)] * xhat[(i, j)];
                        dbeta.data[j] += g[(i, j)];
                    }
                }
                let nf = n as f64;
                let mut dx = Matrix::zeros(n, m);
                for i in 0..n {
                    for j in 0..m {
                        dx[(i, j)] = gam.data[j] * inv_std[j] / nf
                            * (nf * g[(i, j)] - dbeta.data[j] - xhat[(i, j)] * dgamma.data[j]);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::Bce { p, target, lo, hi } => {
                let pv = val(*p);
                let data = pv
                    .data
                    .iter()
                    .zip(target)
                    .zip(&g.data)
                    .map(|((&q, &y), &d)| {
                        if q < *lo || q > *hi {
                            0.0
                        } else {
                            d * (-(y / q) + (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                accumulate(grads, *p, &Matrix::from_vec(pv.rows, 1, data));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: &Matrix) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Matrix>>,
}

impl Gradients<'_> {
    pub fn of(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a registered parameter; zeros when it did not reach the loss.
    pub fn of_param(&self, m: &Matrix) -> Matrix {
        self.tape
            .params
            .get(&(m as *const Matrix))
            .and_then(|id| self.grads[id.0].clone())
            .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
    }
}
