//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every model in the crate (motion VQ-VAE, fusion network, token denoiser) is
//! written against [`Graph`]; parameters live in a [`ParamStore`] shared
//! read-only across worker threads, and [`Graph::backward`] returns a
//! [`Grads`] with one accumulator per parameter tensor.

use crate::tensor::Mat;

pub type ParamId = usize;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    /// `self ← (1 − rate)·self + rate·target`, for stores of identical layout.
    pub fn move_toward(&mut self, target: &ParamStore, rate: f64) {
        assert_eq!(self.names, target.names, "parameter layouts differ");
        for (a, b) in self.values.iter_mut().zip(&target.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += rate * (y - *x);
            }
        }
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self
                .values
                .iter()
                .map(|v| Mat::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Mat>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    RepeatRows { x: Var, factor: usize },
    AvgPoolRows { x: Var, stride: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    SmoothL1(Var, Var),
    DiffRows(Var),
    StraightThrough(Var),
    RowLinearMap { x: Var, maps: Vec<Mat> },
    LogFloor { x: Var, floor: f64 },
    DotConst { x: Var, weights: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Smooth-L1 (Huber, δ = 1) of a single residual.
#[inline]
pub fn huber(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
fn huber_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id] {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a 1×c row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a 1×c row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "mul_row width mismatch");
        let r = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (v, g) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= g;
            }
        }
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut value = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in value.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNormRows { x: a, inv_std }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut value = Mat::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x: a, start }, &[a])
    }

    /// im2col along time: row `o` holds the `kernel` input rows starting at
    /// `o·stride − pad`, zero outside the sequence, flattened kernel-major.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(a);
        let (t, c) = x.shape();
        let out_len = (t + 2 * pad - kernel) / stride + 1;
        let mut value = Mat::zeros(out_len, kernel * c);
        for o in 0..out_len {
            for k in 0..kernel {
                let src = (o * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    value.row_mut(o)[k * c..(k + 1) * c].copy_from_slice(x.row(src as usize));
                }
            }
        }
        self.push(
            value,
            Op::Unfold {
                x: a,
                kernel,
                stride,
                pad,
            },
            &[a],
        )
    }

    /// Nearest-neighbour upsampling: each row repeated `factor` times.
    pub fn repeat_rows(&mut self, a: Var, factor: usize) -> Var {
        let x = self.value(a);
        let mut value = Mat::zeros(x.rows() * factor, x.cols());
        for r in 0..x.rows() {
            for j in 0..factor {
                value.row_mut(r * factor + j).copy_from_slice(x.row(r));
            }
        }
        self.push(value, Op::RepeatRows { x: a, factor }, &[a])
    }

    /// Non-overlapping average pooling of `stride` consecutive rows.
    pub fn avg_pool_rows(&mut self, a: Var, stride: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows() % stride, 0, "avg_pool_rows: rows not divisible");
        let out_rows = x.rows() / stride;
        let mut value = Mat::zeros(out_rows, x.cols());
        for o in 0..out_rows {
            for j in 0..stride {
                let src = x.row(o * stride + j);
                for (v, s) in value.row_mut(o).iter_mut().zip(src) {
                    *v += s / stride as f64;
                }
            }
        }
        self.push(value, Op::AvgPoolRows { x: a, stride }, &[a])
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros(indices.len(), t.cols());
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(idx));
        }
        self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Repeats a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), 1, "broadcast_rows expects a single row");
        let mut value = Mat::zeros(n, x.cols());
        for r in 0..n {
            value.row_mut(r).copy_from_slice(x.row(0));
        }
        self.push(value, Op::BroadcastRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Mat::filled(1, 1, x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Mat::filled(1, 1, self.value(a).sum_sq());
        self.push(value, Op::SumSq(a), &[a])
    }

    /// Mean smooth-L1 over all elements of `a − b`.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "smooth_l1 shape mismatch");
        let total: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| huber(p - q))
            .sum();
        let value = Mat::filled(1, 1, total / x.len() as f64);
        self.push(value, Op::SmoothL1(a, b), &[a, b])
    }

    /// First differences along time: row `t` is `a[t+1] − a[t]`.
    pub fn diff_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let rows = x.rows().saturating_sub(1);
        let mut value = Mat::zeros(rows, x.cols());
        for r in 0..rows {
            let (next, cur) = (x.row(r + 1), x.row(r));
            for ((v, n), c) in value.row_mut(r).iter_mut().zip(next).zip(cur) {
                *v = n - c;
            }
        }
        self.push(value, Op::DiffRows(a), &[a])
    }

    /// Forward value `target`, backward identity into `a` (straight-through).
    pub fn straight_through(&mut self, a: Var, target: Mat) -> Var {
        assert_eq!(self.shape(a), target.shape(), "straight_through shape");
        self.push(target, Op::StraightThrough(a), &[a])
    }

    /// Row `i` of the output is `maps[i] · a[i]ᵀ`.
    pub fn row_linear_map(&mut self, a: Var, maps: Vec<Mat>) -> Var {
        let x = self.value(a);
        assert_eq!(maps.len(), x.rows(), "row_linear_map needs one map per row");
        let out_cols = maps.first().map_or(0, Mat::rows);
        let mut value = Mat::zeros(x.rows(), out_cols);
        for (i, m) in maps.iter().enumerate() {
            assert_eq!(m.cols(), x.cols(), "row_linear_map map width");
            assert_eq!(m.rows(), out_cols, "row_linear_map ragged maps");
            let xi = x.row(i);
            for (o, mrow) in value.row_mut(i).iter_mut().zip(m.iter_rows()) {
                *o = mrow.iter().zip(xi).map(|(p, q)| p * q).sum();
            }
        }
        self.push(value, Op::RowLinearMap { x: a, maps }, &[a])
    }

    /// `ln(max(a, floor))` elementwise.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(value, Op::LogFloor { x: a, floor }, &[a])
    }

    /// `Σ a ∘ weights`.
    pub fn dot_const(&mut self, a: Var, weights: Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), weights.shape(), "dot_const shape mismatch");
        let s: f64 = x.data().iter().zip(weights.data()).map(|(p, q)| p * q).sum();
        self.push(
            Mat::filled(1, 1, s),
            Op::DotConst { x: a, weights },
            &[a],
        )
    }

    /// Reverse pass from a scalar node; returns gradients for every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        let mut out = self.store.zero_grads();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.tensors[*id].add_assign(&g),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul_t(self.value(*b)), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, self.value(*a).t_matmul(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, g.t_matmul(self.value(*a)), &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.map(|x| -x), &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y), &mut grads);
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y), &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s), &mut grads),
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (d, v) in dr.row_mut(0).iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    acc(*a, g, &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let w = self.value(*row).row(0);
                    let mut da = g.clone();
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = x.row(r);
                        for c in 0..g.cols() {
                            dr[(0, c)] += gr[c] * xr[c];
                        }
                        for (d, wv) in da.row_mut(r).iter_mut().zip(w) {
                            *d *= wv;
                        }
                    }
                    acc(*a, da, &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::Silu(a) => {
                    let d = self.value(*a).zip_map(&g, |x, gv| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    });
                    acc(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let xhat = &node.value;
                    let cols = g.cols() as f64;
                    let mut d = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (hr, gr) = (xhat.row(r), g.row(r));
                        let mg = gr.iter().sum::<f64>() / cols;
                        let mgh = gr.iter().zip(hr).map(|(p, q)| p * q).sum::<f64>() / cols;
                        for ((o, hv), gv) in d.row_mut(r).iter_mut().zip(hr).zip(gr) {
                            *o = inv_std[r] * (gv - mg - hv * mgh);
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut d = Mat::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            acc(p, d, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Unfold {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (t, c) = self.shape(*x);
                    let mut d = Mat::zeros(t, c);
                    for o in 0..g.rows() {
                        for k in 0..*kernel {
                            let src = (o * stride + k) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let gs = &g.row(o)[k * c..(k + 1) * c];
                                for (dv, gv) in d.row_mut(src as usize).iter_mut().zip(gs) {
                                    *dv += gv;
                                }
                            }
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::RepeatRows { x, factor } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for j in 0..*factor {
                            let gs = g.row(r * factor + j);
                            for (dv, gv) in d.row_mut(r).iter_mut().zip(gs) {
                                *dv += gv;
                            }
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::AvgPoolRows { x, stride } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gs = g.row(r / stride);
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(gs) {
                            *dv = gv / *stride as f64;
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::GatherRows { table, indices } => {
                    let (rows, cols) = self.shape(*table);
                    let mut d = Mat::zeros(rows, cols);
                    for (i, &idx) in indices.iter().enumerate() {
                        for (dv, gv) in d.row_mut(idx).iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                    acc(*table, d, &mut grads);
                }
                Op::BroadcastRows(a) => {
                    let mut d = Mat::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (dv, gv) in d.row_mut(0).iter_mut().zip(r) {
                            *dv += gv;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Mat::filled(r, c, g[(0, 0)]), &mut grads);
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Mat::filled(r, c, g[(0, 0)] / (r * c) as f64), &mut grads);
                }
                Op::SumSq(a) => {
                    let s = 2.0 * g[(0, 0)];
                    acc(*a, self.value(*a).map(|x| s * x), &mut grads);
                }
                Op::SmoothL1(a, b) => {
                    let n = self.value(*a).len() as f64;
                    let s = g[(0, 0)] / n;
                    let d = self
                        .value(*a)
                        .zip_map(self.value(*b), |p, q| s * huber_grad(p - q));
                    acc(*a, d.clone(), &mut grads);
                    acc(*b, d.map(|x| -x), &mut grads);
                }
                Op::DiffRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            d[(r + 1, c)] += g[(r, c)];
                            d[(r, c)] -= g[(r, c)];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::StraightThrough(a) => acc(*a, g, &mut grads),
                Op::RowLinearMap { x, maps } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Mat::zeros(rows, cols);
                    for (i, m) in maps.iter().enumerate() {
                        let gi = g.row(i);
                        for (o, mrow) in m.iter_rows().enumerate() {
                            for (dv, mv) in d.row_mut(i).iter_mut().zip(mrow) {
                                *dv += gi[o] * mv;
                            }
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::LogFloor { x, floor } => {
                    let d = self
                        .value(*x)
                        .zip_map(&g, |v, gv| if v > *floor { gv / v } else { 0.0 });
                    acc(*x, d, &mut grads);
                }
                Op::DotConst { x, weights } => {
                    let s = g[(0, 0)];
                    acc(*x, weights.map(|w| w * s), &mut grads);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter entry of `store` against
    /// the tape gradient of `f`.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let loss = f(&mut graph);
            graph.backward(loss)
        };
        let eval = |s: &ParamStore| {
            let mut graph = Graph::new(s);
            let loss = f(&mut graph);
            graph.scalar(loss)
        };
        let h = 1e-5;
        for id in 0..store.len() {
            for i in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = g.tensors[id].data()[i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "{}[{i}]: numeric {numeric} analytic {analytic}",
                    store.name(id)
                );
            }
        }
    }

    fn store_with(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), Mat::randn(r, c, 0.7, &mut rng));
        }
        store
    }

    #[test]
    fn matmul_softmax_layer_norm_gradients() {
        let store = store_with(&[(4, 3), (3, 5), (1, 5), (1, 5)], 1);
        check(&store, |g| {
            let a = g.param(0);
            let b = g.param(1);
            let ab = g.matmul(a, b);
            let n = g.layer_norm_rows(ab, 1e-5);
            let gain = g.param(2);
            let n = g.mul_row(n, gain);
            let bias = g.param(3);
            let n = g.add_row(n, bias);
            let s = g.silu(n);
            let p = g.softmax_rows(s);
            let lp = g.log_softmax_rows(n);
            let m = g.mul(p, lp);
            g.sum(m)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let store = store_with(&[(8, 3), (12, 2), (1, 4)], 2);
        check(&store, |g| {
            let x = g.param(0);
            let u = g.unfold(x, 4, 2, 1);
            let w = g.param(1);
            let y = g.matmul(u, w);
            let up = g.repeat_rows(y, 2);
            let pooled = g.avg_pool_rows(up, 4);
            let d = g.diff_rows(up);
            let t = g.transpose(pooled);
            let tt = g.matmul_t(t, t);
            let sl = g.slice_cols(up, 1, 1);
            let row = g.param(2);
            let b = g.broadcast_rows(row, 2);
            let cat = g.concat_cols(&[pooled, b]);
            let gathered = g.gather_rows(cat, &[0, 1, 0, 1]);
            let l1 = g.sum_sq(gathered);
            let l2 = g.mean(d);
            let l3 = g.sum(tt);
            let zero = g.constant(Mat::zeros(8, 1));
            let l4 = g.smooth_l1(sl, zero);
            let a = g.add(l1, l2);
            let b2 = g.sub(l3, l4);
            let c = g.scale(b2, 0.3);
            g.add(a, c)
        });
    }

    #[test]
    fn probability_op_gradients() {
        let store = store_with(&[(3, 4)], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps: Vec<Mat> = (0..3)
            .map(|_| Mat::uniform(5, 4, 1.0, &mut rng).map(f64::abs))
            .collect();
        let weights = Mat::uniform(3, 5, 1.0, &mut rng);
        check(&store, |g| {
            let x = g.param(0);
            let p = g.softmax_rows(x);
            let mixed = g.row_linear_map(p, maps.clone());
            let l = g.log_floor(mixed, 1e-30);
            g.dot_const(l, weights.clone())
        });
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let store = store_with(&[(2, 2)], 4);
        let mut graph = Graph::new(&store);
        let z = graph.param(0);
        let q = graph.straight_through(z, Mat::filled(2, 2, 3.0));
        assert_eq!(graph.value(q), &Mat::filled(2, 2, 3.0));
        let l = graph.sum(q);
        let grads = graph.backward(l);
        assert_eq!(grads.tensors[0], Mat::filled(2, 2, 1.0));
    }

    #[test]
    fn huber_is_continuous_and_symmetric() {
        assert!((huber(1.0 - 1e-12) - huber(1.0)).abs() < 1e-9);
        assert_eq!(huber(1.0), 0.5);
        assert_eq!(huber(-0.3), huber(0.3));
    }
}
