//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! A [`Graph`] is built eagerly: every operation computes its value
//! immediately and records how to propagate gradients. Graphs are cheap and
//! short-lived; one is built per training record (or per inference call) and
//! dropped afterwards. Parameters are read from a shared [`ParamStore`] and
//! their gradients are collected into a [`Gradients`] accumulator.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    LogSigmoid(Var),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    SegmentSoftmax(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    LinComb(Vec<(Var, f64)>),
    DotConst(Var, Vec<f64>),
    PickPerRow(Var, Vec<usize>),
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// A constant input; receives no gradient outside the graph.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Parameter leaf, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Same value as `x`, but gradients are not propagated through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `m×n + 1×n`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert!(tr.rows() == 1 && tr.cols() == ta.cols(), "add_row shape mismatch");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_slice_mut(i).iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `m×n ⊙ 1×n`, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert!(tr.rows() == 1 && tr.cols() == ta.cols(), "mul_row shape mismatch");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_slice_mut(i).iter_mut().zip(tr.data()) {
                *o *= r;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// `m×n ⊙ m×1`, broadcasting the column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert!(tc.cols() == 1 && tc.rows() == ta.rows(), "mul_col shape mismatch");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let c = tc.data()[i];
            for o in out.row_slice_mut(i) {
                *o *= c;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul {:?} x {:?}", ta.shape(), tb.shape());
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm_nn(ta.data(), tb.data(), m, k, n, out.data_mut());
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_nt {:?} x {:?}ᵀ", ta.shape(), tb.shape());
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        gemm_nt(ta.data(), tb.data(), m, k, n, out.data_mut());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Row sums: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, data);
        self.push(v, Op::SumCols(a))
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.rows() > 0, "mean over zero rows");
        let mut out = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / t.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..out.rows() {
            let row = out.row_slice_mut(i);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.cols() as f64;
        let mut out = t.clone();
        for i in 0..out.rows() {
            let row = out.row_slice_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_slice_mut(i)[off..off + t.cols()].copy_from_slice(t.row_slice(i));
            }
            off += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        assert!(start + width <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), width);
        for i in 0..t.rows() {
            out.row_slice_mut(i)
                .copy_from_slice(&t.row_slice(i)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let t = self.value(a);
        assert!(start + count <= t.rows(), "slice_rows out of range");
        let c = t.cols();
        let out = Tensor::from_vec(count, c, t.data()[start * c..(start + count) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_vec(index.len(), c, data);
        self.push(out, Op::GatherRows(a, index.to_vec()))
    }

    /// Rows of a parameter table, without copying the whole table into the graph
    /// more than once.
    pub fn embed(&mut self, table: ParamId, index: &[usize]) -> Var {
        let t = self.param(table);
        self.gather_rows(t, index)
    }

    /// `1×n → m×n`.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "repeat_rows expects a row");
        let mut data = Vec::with_capacity(m * t.cols());
        for _ in 0..m {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(m, t.cols(), data);
        self.push(out, Op::RepeatRows(a))
    }

    /// Softmax over contiguous segments of a column vector. `offsets` has one
    /// entry per segment start plus a final end marker.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "segment_softmax expects a column");
        assert_eq!(
            *offsets.last().unwrap_or(&0),
            t.rows(),
            "segment offsets must cover the column"
        );
        let mut out = t.clone();
        for w in offsets.windows(2) {
            if w[1] > w[0] {
                softmax_in_place(&mut out.data_mut()[w[0]..w[1]]);
            }
        }
        self.push(out, Op::SegmentSoftmax(a, offsets.to_vec()))
    }

    /// `out[target[i]] += a[i]` into `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, target: &[usize], n_out: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), target.len(), "scatter target length mismatch");
        let mut out = Tensor::zeros(n_out, t.cols());
        for (i, &dst) in target.iter().enumerate() {
            for (o, x) in out.row_slice_mut(dst).iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        self.push(out, Op::ScatterAddRows(a, target.to_vec()))
    }

    /// `Σ cᵢ·xᵢ` over equally shaped inputs. Zero coefficients are skipped.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, f64)> = terms.iter().copied().filter(|&(_, c)| c != 0.0).collect();
        assert!(!terms.is_empty(), "lin_comb needs a non-zero term");
        let mut out = Tensor::zeros(self.value(terms[0].0).rows(), self.value(terms[0].0).cols());
        for &(v, c) in &terms {
            let t = self.value(v);
            assert_eq!(t.shape(), out.shape(), "lin_comb shape mismatch");
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        self.push(out, Op::LinComb(terms))
    }

    /// `Σ aᵢ·wᵢ` against constant weights, as `1×1`.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), weights.len(), "dot_const length mismatch");
        let v = t.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        self.push(Tensor::scalar(v), Op::DotConst(a, weights.to_vec()))
    }

    /// `out[i] = a[i, index[i]]`, as `m×1`.
    pub fn pick_per_row(&mut self, a: Var, index: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), index.len(), "pick_per_row length mismatch");
        let data = index.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        self.push(out, Op::PickPerRow(a, index.to_vec()))
    }

    /// Reverse pass from a scalar output. Returns gradients for every parameter
    /// that `output` depends on.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads = Gradients::new(self.params.len());
        self.backward_into(output, 1.0, &mut grads);
        grads
    }

    /// Like [`Graph::backward`] but seeds the output gradient with `seed` and
    /// accumulates into an existing buffer.
    pub fn backward_into(&self, output: Var, seed: f64, grads: &mut Gradients) {
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(seed));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc_with(&mut adj, *b, g.shape(), |d| {
                        for (o, x) in d.iter_mut().zip(g.data()) {
                            *o -= x;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc_with(&mut adj, *a, g.shape(), |d| {
                        for ((o, x), y) in d.iter_mut().zip(g.data()).zip(vb.data()) {
                            *o += x * y;
                        }
                    });
                    acc_with(&mut adj, *b, g.shape(), |d| {
                        for ((o, x), y) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *o += x * y;
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    acc(&mut adj, *a, &g);
                    acc_with(&mut adj, *row, (1, g.cols()), |d| {
                        for i in 0..g.rows() {
                            for (o, x) in d.iter_mut().zip(g.row_slice(i)) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (self.value(*a), self.value(*row));
                    acc_with(&mut adj, *a, g.shape(), |d| {
                        let c = g.cols();
                        for i in 0..g.rows() {
                            for j in 0..c {
                                d[i * c + j] += g.get(i, j) * vr.data()[j];
                            }
                        }
                    });
                    acc_with(&mut adj, *row, (1, g.cols()), |d| {
                        for i in 0..g.rows() {
                            for (j, o) in d.iter_mut().enumerate() {
                                *o += g.get(i, j) * va.get(i, j);
                            }
                        }
                    });
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (self.value(*a), self.value(*col));
                    acc_with(&mut adj, *a, g.shape(), |d| {
                        let c = g.cols();
                        for i in 0..g.rows() {
                            let s = vc.data()[i];
                            for j in 0..c {
                                d[i * c + j] += g.get(i, j) * s;
                            }
                        }
                    });
                    acc_with(&mut adj, *col, (g.rows(), 1), |d| {
                        for (i, o) in d.iter_mut().enumerate() {
                            *o += g
                                .row_slice(i)
                                .iter()
                                .zip(va.row_slice(i))
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc_with(&mut adj, *a, g.shape(), |d| {
                        for (o, x) in d.iter_mut().zip(g.data()) {
                            *o += s * x;
                        }
                    });
                }
                Op::AddScalar(a) => acc(&mut adj, *a, &g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    acc_with(&mut adj, *a, (m, k), |d| gemm_nt(g.data(), vb.data(), m, n, k, d));
                    acc_with(&mut adj, *b, (k, n), |d| gemm_tn(va.data(), g.data(), k, m, n, d));
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                    // C = A·Bᵀ: dA = G · B, dB = Gᵀ · A
                    acc_with(&mut adj, *a, (m, k), |d| gemm_nn(g.data(), vb.data(), m, n, k, d));
                    acc_with(&mut adj, *b, (n, k), |d| gemm_tn(g.data(), va.data(), n, m, k, d));
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    acc(&mut adj, *a, &gt);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    unary(&mut adj, *a, &g, y, |_, y| 1.0 - y * y);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    unary(&mut adj, *a, &g, y, |_, y| y * (1.0 - y));
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    unary(&mut adj, *a, &g, x, |x, _| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    unary(&mut adj, *a, &g, x, |x, _| if x > 0.0 { 1.0 } else { 0.0 });
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let slope = *slope;
                    unary(&mut adj, *a, &g, x, |x, _| if x > 0.0 { 1.0 } else { slope });
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    unary(&mut adj, *a, &g, y, |_, y| y);
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    unary(&mut adj, *a, &g, x, |x, _| 1.0 / x);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    unary(&mut adj, *a, &g, x, |x, _| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    unary(&mut adj, *a, &g, x, |x, _| 2.0 * x);
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    unary(&mut adj, *a, &g, x, |x, _| sigmoid(-x));
                }
                Op::Sum(a) => {
                    let s = g.item();
                    let shape = self.shape(*a);
                    acc_with(&mut adj, *a, shape, |d| {
                        for o in d.iter_mut() {
                            *o += s;
                        }
                    });
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    acc_with(&mut adj, *a, shape, |d| {
                        let c = shape.1;
                        for i in 0..shape.0 {
                            let s = g.data()[i];
                            for o in &mut d[i * c..(i + 1) * c] {
                                *o += s;
                            }
                        }
                    });
                }
                Op::MeanRows(a) => {
                    let shape = self.shape(*a);
                    let inv = 1.0 / shape.0 as f64;
                    acc_with(&mut adj, *a, shape, |d| {
                        let c = shape.1;
                        for i in 0..shape.0 {
                            for (o, x) in d[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                                *o += x * inv;
                            }
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    acc_with(&mut adj, *a, y.shape(), |d| {
                        let c = y.cols();
                        for i in 0..y.rows() {
                            let yr = y.row_slice(i);
                            let gr = g.row_slice(i);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    acc_with(&mut adj, *a, y.shape(), |d| {
                        let c = y.cols();
                        for i in 0..y.rows() {
                            let yr = y.row_slice(i);
                            let gr = g.row_slice(i);
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..c {
                                d[i * c + j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    });
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let eps = *eps;
                    acc_with(&mut adj, *a, y.shape(), |d| {
                        let c = y.cols();
                        let n = c as f64;
                        for i in 0..y.rows() {
                            let xr = x.row_slice(i);
                            let mean = xr.iter().sum::<f64>() / n;
                            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv = 1.0 / (var + eps).sqrt();
                            let yr = y.row_slice(i);
                            let gr = g.row_slice(i);
                            let gmean = gr.iter().sum::<f64>() / n;
                            let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                            for j in 0..c {
                                d[i * c + j] += inv * (gr[j] - gmean - yr[j] * gy);
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        acc_with(&mut adj, p, (r, c), |d| {
                            for i in 0..r {
                                for (o, x) in d[i * c..(i + 1) * c].iter_mut().zip(&g.row_slice(i)[off..off + c]) {
                                    *o += x;
                                }
                            }
                        });
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    let c = g.cols();
                    for &p in parts {
                        let (r, _) = self.shape(p);
                        acc_with(&mut adj, p, (r, c), |d| {
                            for (o, x) in d.iter_mut().zip(&g.data()[off * c..(off + r) * c]) {
                                *o += x;
                            }
                        });
                        off += r;
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = self.shape(*a);
                    let (start, w) = (*start, g.cols());
                    acc_with(&mut adj, *a, shape, |d| {
                        for i in 0..shape.0 {
                            for (o, x) in d[i * shape.1 + start..i * shape.1 + start + w]
                                .iter_mut()
                                .zip(g.row_slice(i))
                            {
                                *o += x;
                            }
                        }
                    });
                }
                Op::SliceRows(a, start) => {
                    let shape = self.shape(*a);
                    let c = shape.1;
                    let start = *start;
                    acc_with(&mut adj, *a, shape, |d| {
                        for (o, x) in d[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                            *o += x;
                        }
                    });
                }
                Op::GatherRows(a, index) => {
                    let shape = self.shape(*a);
                    let c = shape.1;
                    acc_with(&mut adj, *a, shape, |d| {
                        for (i, &src) in index.iter().enumerate() {
                            for (o, x) in d[src * c..(src + 1) * c].iter_mut().zip(g.row_slice(i)) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::RepeatRows(a) => {
                    let c = g.cols();
                    acc_with(&mut adj, *a, (1, c), |d| {
                        for i in 0..g.rows() {
                            for (o, x) in d.iter_mut().zip(g.row_slice(i)) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::SegmentSoftmax(a, offsets) => {
                    let y = &node.value;
                    acc_with(&mut adj, *a, y.shape(), |d| {
                        for w in offsets.windows(2) {
                            let (s, e) = (w[0], w[1]);
                            let yr = &y.data()[s..e];
                            let gr = &g.data()[s..e];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..e - s {
                                d[s + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::ScatterAddRows(a, target) => {
                    let shape = self.shape(*a);
                    let c = shape.1;
                    acc_with(&mut adj, *a, shape, |d| {
                        for (i, &dst) in target.iter().enumerate() {
                            for (o, x) in d[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(dst)) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        acc_with(&mut adj, v, g.shape(), |d| {
                            for (o, x) in d.iter_mut().zip(g.data()) {
                                *o += c * x;
                            }
                        });
                    }
                }
                Op::DotConst(a, w) => {
                    let s = g.item();
                    let shape = self.shape(*a);
                    acc_with(&mut adj, *a, shape, |d| {
                        for (o, x) in d.iter_mut().zip(w) {
                            *o += s * x;
                        }
                    });
                }
                Op::PickPerRow(a, index) => {
                    let shape = self.shape(*a);
                    acc_with(&mut adj, *a, shape, |d| {
                        for (i, &j) in index.iter().enumerate() {
                            d[i * shape.1 + j] += g.data()[i];
                        }
                    });
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn acc_with(adj: &mut [Option<Tensor>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut [f64])) {
    let slot = &mut adj[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.0, shape.1));
    }
    f(slot.as_mut().expect("slot initialized").data_mut());
}

/// Elementwise chain rule: `d += g ⊙ f'(x, y)` where `src` is whichever of
/// input/output the derivative needs.
fn unary(adj: &mut [Option<Tensor>], v: Var, g: &Tensor, src: &Tensor, deriv: impl Fn(f64, f64) -> f64) {
    acc_with(adj, v, g.shape(), |d| {
        for ((o, gx), s) in d.iter_mut().zip(g.data()).zip(src.data()) {
            *o += gx * deriv(*s, *s);
        }
    });
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
