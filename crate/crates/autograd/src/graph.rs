use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::conv::{conv1d_backward, conv1d_forward, ConvGeom};
use crate::ctc::{ctc_forward_backward, CtcError};
use crate::params::{ParamId, ParamStore};
use crate::Mat;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Mat),
    Borrowed(&'p Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Mish(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Pick(Var, Vec<(usize, usize)>),
    Ctc {
        x: Var,
        grad: Mat,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// `a · b`. A single-row `a` streams through the rows of `b` once, which
/// beats the packed GEMM path when `b` is large.
fn matmul_values(a: &Mat, b: &Mat) -> Mat {
    let (m, k) = a.dim();
    let n = b.ncols();
    assert_eq!(k, b.nrows(), "matmul: inner dimensions differ");
    match (m, b.as_slice()) {
        (1, Some(bs)) if n > 0 => {
            let mut out = vec![0.0; n];
            for (kk, row) in bs.chunks_exact(n).enumerate() {
                let s = a[[0, kk]];
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += s * r;
                }
            }
            Mat::from_shape_vec((1, n), out).expect("1 × n")
        }
        _ => a.dot(b),
    }
}

/// Tape of operations over 2-D matrices.
///
/// Shape mismatches between operands are programming errors and panic;
/// callers validate user-facing shapes before recording.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients of every parameter reached by the backward pass.
    pub fn into_params(mut self) -> Vec<(ParamId, Mat)> {
        let mut out = Vec::with_capacity(self.params.len());
        for (p, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.push((*p, g));
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let th = softplus(x).tanh();
    th + x * (1.0 - th * th) * sigmoid(x)
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    y
}

fn log_softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    y
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Differentiable input that is not stored in the parameter store.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store;
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul_values(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(y, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let y = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let y = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let y = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Mul(a, b), rg)
    }

    /// `a + r` with the `1 × C` row `r` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(r), (1, ca), "add_row: expected 1x{ca} row");
        let _ = ra;
        let y = self.value(a) + self.value(r);
        let rg = self.rg(a) || self.rg(r);
        self.push(y, Op::AddRow(a, r), rg)
    }

    /// `a ⊙ r` with the `1 × C` row `r` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (_, ca) = self.shape(a);
        assert_eq!(self.shape(r), (1, ca), "mul_row: expected 1x{ca} row");
        let y = self.value(a) * self.value(r);
        let rg = self.rg(a) || self.rg(r);
        self.push(y, Op::MulRow(a, r), rg)
    }

    /// `a ⊙ c` with the `L × 1` column `c` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (ra, _) = self.shape(a);
        assert_eq!(self.shape(c), (ra, 1), "mul_col: expected {ra}x1 column");
        let y = self.value(a) * self.value(c);
        let rg = self.rg(a) || self.rg(c);
        self.push(y, Op::MulCol(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let y = self.value(a) * k;
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let y = self.value(a) + k;
        let rg = self.rg(a);
        self.push(y, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(y, Op::Silu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(y, Op::Gelu(a), rg)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(mish);
        let rg = self.rg(a);
        self.push(y, Op::Mish(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(y, Op::Square(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(y, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let y = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(y, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(y, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Scales every row to unit Euclidean norm. Panics on an all-zero row;
    /// callers check [`Graph::min_row_norm`] first when that can happen.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "l2_normalize_rows: zero-norm row");
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(y, Op::L2NormalizeRows { x: a, norms }, rg)
    }

    pub fn min_row_norm(&self, a: Var) -> f64 {
        self.value(a)
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(y, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(y, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(y, Op::SliceCols(a, start), rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(y, Op::SliceRows(a, start), rg)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let y = self.value(a).select(Axis(0), index);
        let rg = self.rg(a);
        self.push(y, Op::GatherRows(a, index.to_vec()), rg)
    }

    /// Grouped 1-D convolution without bias.
    ///
    /// `x`: `[L × C_in]`; `w`: `[C_out × (C_in/groups · kernel)]`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, padding: usize, groups: usize) -> Var {
        let (in_len, in_ch) = self.shape(x);
        let (out_ch, wc) = self.shape(w);
        assert!(groups > 0 && in_ch % groups == 0 && out_ch % groups == 0);
        assert_eq!(wc, in_ch / groups * kernel, "conv1d: weight shape");
        let geom = ConvGeom {
            in_len,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
        };
        let y = conv1d_forward(self.value(x), self.value(w), &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(y, Op::Conv1d { x, w, geom }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(y, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let y = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        let rg = self.rg(a);
        self.push(y, Op::Mean(a), rg)
    }

    /// Column sums as a `1 × C` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let y = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(y, Op::SumRows(a), rg)
    }

    /// Selected entries as an `n × 1` column.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let y = Array2::from_shape_fn((coords.len(), 1), |(i, _)| m[coords[i]]);
        let rg = self.rg(a);
        self.push(y, Op::Pick(a, coords.to_vec()), rg)
    }

    /// CTC negative log-likelihood of `targets` given per-frame
    /// log-probabilities `log_probs` (`[frames × vocab]`).
    pub fn ctc_loss(&mut self, log_probs: Var, targets: &[usize], blank: usize) -> Result<Var, CtcError> {
        let (loss, grad) = ctc_forward_backward(self.value(log_probs).view(), targets, blank)?;
        let rg = self.rg(log_probs);
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::Ctc { x: log_probs, grad }, rg))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward from non-scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = node.value.get();
        let send = |v: Var, g: Mat, grads: &mut [Option<Mat>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, dy.dot(&self.value(*b).t()), grads);
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).t().dot(dy), grads);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    send(*a, dy.dot(self.value(*b)), grads);
                }
                if self.rg(*b) {
                    send(*b, dy.t().dot(self.value(*a)), grads);
                }
            }
            Op::Transpose(a) => send(*a, dy.t().as_standard_layout().into_owned(), grads),
            Op::Add(a, b) => {
                send(*a, dy.clone(), grads);
                send(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone(), grads);
                send(*b, -dy, grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, dy * self.value(*b), grads);
                }
                if self.rg(*b) {
                    send(*b, dy * self.value(*a), grads);
                }
            }
            Op::AddRow(a, r) => {
                send(*a, dy.clone(), grads);
                if self.rg(*r) {
                    send(*r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::MulRow(a, r) => {
                if self.rg(*a) {
                    send(*a, dy * self.value(*r), grads);
                }
                if self.rg(*r) {
                    let g = (dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*r, g, grads);
                }
            }
            Op::MulCol(a, c) => {
                if self.rg(*a) {
                    send(*a, dy * self.value(*c), grads);
                }
                if self.rg(*c) {
                    let g = (dy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*c, g, grads);
                }
            }
            Op::Scale(a, k) => send(*a, dy * *k, grads),
            Op::AddScalar(a) => send(*a, dy.clone(), grads),
            Op::Silu(a) => {
                let mut g = self.value(*a).mapv(|x| {
                    let s = sigmoid(x);
                    s + x * s * (1.0 - s)
                });
                g *= dy;
                send(*a, g, grads);
            }
            Op::Gelu(a) => {
                let mut g = self.value(*a).mapv(gelu_grad);
                g *= dy;
                send(*a, g, grads);
            }
            Op::Mish(a) => {
                let mut g = self.value(*a).mapv(mish_grad);
                g *= dy;
                send(*a, g, grads);
            }
            Op::Square(a) => {
                let g = self.value(*a) * dy * 2.0;
                send(*a, g, grads);
            }
            Op::SoftmaxRows(a) => {
                let mut g = dy * y;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = grow.sum();
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                }
                send(*a, g, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let mut g = dy.clone();
                for ((mut grow, yrow), dyrow) in g.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()) {
                    let total: f64 = dyrow.sum();
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv.exp() * total);
                }
                send(*a, g, grads);
            }
            Op::LayerNormRows { x, inv_std } => {
                let c = y.ncols() as f64;
                let mut g = Array2::zeros(y.dim());
                for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let sum_d: f64 = dr.sum();
                    let sum_dy: f64 = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..grow.len() {
                        grow[j] = inv_std[r] / c * (c * dr[j] - sum_d - yr[j] * sum_dy);
                    }
                }
                send(*x, g, grads);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut g = Array2::zeros(y.dim());
                for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: f64 = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..grow.len() {
                        grow[j] = (dr[j] - yr[j] * dot) / norms[r];
                    }
                }
                send(*x, g, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        send(p, dy.slice(s![.., off..off + w]).to_owned(), grads);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.rg(p) {
                        send(p, dy.slice(s![off..off + h, ..]).to_owned(), grads);
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                send(*a, g, grads);
            }
            Op::SliceRows(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                send(*a, g, grads);
            }
            Op::GatherRows(a, index) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (out_row, &src) in index.iter().enumerate() {
                    let mut grow = g.row_mut(src);
                    grow += &dy.row(out_row);
                }
                send(*a, g, grads);
            }
            Op::Conv1d { x, w, geom } => {
                let (dx, dw) = conv1d_backward(self.value(*x), self.value(*w), dy, geom);
                send(*x, dx, grads);
                send(*w, dw, grads);
            }
            Op::Sum(a) => {
                let g = Array2::from_elem(self.shape(*a), dy[[0, 0]]);
                send(*a, g, grads);
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                send(*a, Array2::from_elem(shape, dy[[0, 0]] / n), grads);
            }
            Op::SumRows(a) => {
                let (rows, _) = self.shape(*a);
                let g = dy.broadcast((rows, dy.ncols())).expect("broadcast").to_owned();
                send(*a, g, grads);
            }
            Op::Pick(a, coords) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (i, &c) in coords.iter().enumerate() {
                    g[c] += dy[[i, 0]];
                }
                send(*a, g, grads);
            }
            Op::Ctc { x, grad } => send(*x, grad * dy[[0, 0]], grads),
        }
    }
}
