//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every op records its inputs and output value. `backward` walks the tape in
//! reverse, propagating adjoints only into nodes that depend on a tracked
//! leaf. Parameter tensors are bound as leaves; frozen tensors become
//! untracked constants, so they never receive a gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamSet, Tensor};
use crate::tensor::{dot, Mat, Real};

/// Norm floor used by the cosine op.
pub const NORM_FLOOR: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
    Gelu(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    Cosine { e: Var, w: Var, eta: T, e_norm: T, e_clamped: bool, w_norms: Vec<T>, w_clamped: Vec<bool> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradient of a scalar output with respect to every node.
pub struct Grads<T> {
    adj: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Mat<T>> {
        self.adj[v.0].as_ref()
    }
}

/// Parameter name → leaf variable for one bound `ParamSet`.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Mat<T>, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    /// Registers every tensor of `params` as a leaf; frozen ones untracked.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Bound {
        let mut bound = Bound::default();
        for (name, t) in params.iter() {
            let (r, c) = t.dims2();
            let v = self.leaf(Mat::from_vec(r, c, t.data.clone()), !t.frozen);
            bound.vars.insert(name.to_string(), v);
            bound.order.push((name.to_string(), v));
        }
        bound
    }

    fn tracked2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].tracked || self.nodes[b.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let t = self.tracked2(a, b);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let t = self.tracked2(a, b);
        self.push(v, Op::MatMulNT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let t = self.tracked2(a, b);
        self.push(v, Op::Add(a, b), t)
    }

    /// Adds the 1×c row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, r.cols, "add_row width");
        for i in 0..v.rows {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x = *x + b;
            }
        }
        let t = self.tracked2(a, row);
        self.push(v, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = *x * s);
        let t = self.nodes[a.0].tracked;
        self.push(v, Op::Scale(a, s), t)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1×c each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(LAYER_NORM_EPS);
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let n = T::from_usize(cols).expect("width");
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat.data[i * cols + j] = h;
                out.data[i * cols + j] = h * g[j] + b[j];
            }
        }
        let t = self.nodes[x.0].tracked || self.nodes[gamma.0].tracked || self.nodes[beta.0].tracked;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, t)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = gelu(*a));
        let t = self.nodes[x.0].tracked;
        self.push(v, Op::Gelu(x), t)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for i in 0..v.rows {
            softmax_in_place(v.row_mut(i));
        }
        let t = self.nodes[x.0].tracked;
        self.push(v, Op::SoftmaxRows(x), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols out of range");
        let mut v = Mat::zeros(xv.rows, len);
        for i in 0..xv.rows {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let t = self.nodes[x.0].tracked;
        self.push(v, Op::SliceCols(x, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                v.row_mut(i)[off..off + pv.cols].copy_from_slice(pv.row(i));
                off += pv.cols;
            }
        }
        let t = parts.iter().any(|p| self.nodes[p.0].tracked);
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    /// Arithmetic mean over rows, giving a 1×c row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.rows.max(1)).expect("rows");
        let mut v = Mat::zeros(1, xv.cols);
        for i in 0..xv.rows {
            for (a, &b) in v.data.iter_mut().zip(xv.row(i)) {
                *a = *a + b;
            }
        }
        v.data.iter_mut().for_each(|a| *a = *a / n);
        let t = self.nodes[x.0].tracked;
        self.push(v, Op::MeanRows(x), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let t = self.nodes[x.0].tracked;
        self.push(Mat::scalar(s), Op::Sum(x), t)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|&v| v * v).sum();
        let t = self.nodes[x.0].tracked;
        self.push(Mat::scalar(s), Op::SumSquares(x), t)
    }

    /// `eta * cos(e, w_n)` for every row `w_n` of `w`; `e` is 1×d, `w` is n×d.
    /// Norms below [`NORM_FLOOR`] are clamped to it.
    pub fn cosine_logits(&mut self, e: Var, w: Var, eta: T) -> Var {
        let floor = T::lit(NORM_FLOOR);
        let ev = self.value(e);
        let wv = self.value(w);
        assert_eq!(ev.rows, 1, "cosine_logits expects a single embedding");
        assert_eq!(ev.cols, wv.cols, "cosine_logits width");
        let raw_e = ev.data.iter().map(|&v| v * v).sum::<T>().sqrt();
        let e_clamped = raw_e < floor;
        let e_norm = raw_e.max(floor);
        let mut w_norms = Vec::with_capacity(wv.rows);
        let mut w_clamped = Vec::with_capacity(wv.rows);
        let mut out = Mat::zeros(1, wv.rows);
        for n in 0..wv.rows {
            let row = wv.row(n);
            let raw = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            w_clamped.push(raw < floor);
            let wn = raw.max(floor);
            w_norms.push(wn);
            out.data[n] = eta * dot(&ev.data, row) / (e_norm * wn);
        }
        let t = self.tracked2(e, w);
        self.push(out, Op::Cosine { e, w, eta, e_norm, e_clamped, w_norms, w_clamped }, t)
    }

    /// Softmax cross-entropy of a 1×n logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.cols {
            return Err(Error::LabelOutOfRange { label, n_classes: lv.cols });
        }
        let mut probs = lv.data.clone();
        let max = probs.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = probs.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        let loss = lse - lv.data[label];
        softmax_in_place(&mut probs);
        let t = self.nodes[logits.0].tracked;
        Ok(self.push(Mat::scalar(loss), Op::CrossEntropy { logits, label, probs }, t))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::ShapeError(format!("backward from a {}x{} value", ov.rows, ov.cols)));
        }
        if !ov.data[0].is_finite() {
            return Err(Error::NumericalError("loss".into()));
        }
        let mut adj: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(Mat::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Grads { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, adj: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.is_tracked(*a) {
                    self.accumulate(adj, *a, g.matmul_nt(self.value(*b)));
                }
                if self.is_tracked(*b) {
                    self.accumulate(adj, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = A B^T: dA = G B, dB = G^T A
                if self.is_tracked(*a) {
                    self.accumulate(adj, *a, g.matmul(self.value(*b)));
                }
                if self.is_tracked(*b) {
                    self.accumulate(adj, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                if self.is_tracked(*row) {
                    let mut s = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (acc, &v) in s.data.iter_mut().zip(g.row(i)) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(adj, *row, s);
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|v| *v = *v * *s);
                self.accumulate(adj, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = (g.rows, g.cols);
                let gam = &self.value(*gamma).data;
                if self.is_tracked(*gamma) || self.is_tracked(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let gij = g.data[i * cols + j];
                            dg.data[j] = dg.data[j] + gij * xhat.data[i * cols + j];
                            db.data[j] = db.data[j] + gij;
                        }
                    }
                    self.accumulate(adj, *gamma, dg);
                    self.accumulate(adj, *beta, db);
                }
                if self.is_tracked(*x) {
                    let n = T::from_usize(cols).expect("width");
                    let mut dx = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..cols {
                            let d = g.data[i * cols + j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * xhat.data[i * cols + j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..cols {
                            let d = g.data[i * cols + j] * gam[j];
                            let h = xhat.data[i * cols + j];
                            dx.data[i * cols + j] = inv_std[i] * (d - mean_d - h * mean_dh);
                        }
                    }
                    self.accumulate(adj, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (dv, &a) in d.data.iter_mut().zip(&xv.data) {
                    *dv = *dv * gelu_grad(a);
                }
                self.accumulate(adj, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Mat::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let s = dot(yr, gr);
                    for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                        *dv = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(adj, *x, d);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for i in 0..g.rows {
                    d.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if self.is_tracked(p) {
                        let mut d = Mat::zeros(g.rows, pc);
                        for i in 0..g.rows {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        self.accumulate(adj, p, d);
                    }
                    off += pc;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.rows.max(1)).expect("rows");
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for i in 0..xv.rows {
                    for (dv, &gv) in d.row_mut(i).iter_mut().zip(&g.data) {
                        *dv = gv / n;
                    }
                }
                self.accumulate(adj, *x, d);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let d = Mat::from_vec(xv.rows, xv.cols, vec![g.data[0]; xv.len()]);
                self.accumulate(adj, *x, d);
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                let two = T::lit(2.0);
                let d = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| two * v * g.data[0]).collect());
                self.accumulate(adj, *x, d);
            }
            Op::Cosine { e, w, eta, e_norm, e_clamped, w_norms, w_clamped } => {
                // c_n = (e·w_n) / (|e| |w_n|) with clamped norms held constant.
                let ev = &self.value(*e).data;
                let wv = self.value(*w);
                let d = ev.len();
                let mut de = vec![T::zero(); d];
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                for n in 0..wv.rows {
                    let gn = g.data[n] * *eta;
                    if gn == T::zero() {
                        continue;
                    }
                    let row = wv.row(n);
                    let wn = w_norms[n];
                    let denom = *e_norm * wn;
                    let c = dot(ev, row) / denom;
                    for j in 0..d {
                        let mut dej = row[j] / denom;
                        if !*e_clamped {
                            dej = dej - c * ev[j] / (*e_norm * *e_norm);
                        }
                        de[j] = de[j] + gn * dej;
                        let mut dwj = ev[j] / denom;
                        if !w_clamped[n] {
                            dwj = dwj - c * row[j] / (wn * wn);
                        }
                        dw.data[n * d + j] = gn * dwj;
                    }
                }
                if self.is_tracked(*e) {
                    self.accumulate(adj, *e, Mat::row_vector(de));
                }
                if self.is_tracked(*w) {
                    self.accumulate(adj, *w, dw);
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut d = probs.clone();
                d[*label] = d[*label] - T::one();
                d.iter_mut().for_each(|v| *v = *v * g.data[0]);
                self.accumulate(adj, *logits, Mat::row_vector(d));
            }
        }
    }
}

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Gradient of each tensor of one bound `ParamSet`, in parameter order.
/// Frozen tensors map to zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: ParamSet<T>,
}

impl<T: Real> Gradients<T> {
    pub fn collect(params: &ParamSet<T>, bound: &Bound, grads: &Grads<T>) -> Self {
        let mut out = ParamSet::new();
        for (name, t) in params.iter() {
            let data = match bound.vars.get(name).and_then(|&v| grads.wrt(v)) {
                Some(g) if !t.frozen => g.data.clone(),
                _ => vec![T::zero(); t.data.len()],
            };
            out.insert(name, Tensor { shape: t.shape.clone(), data, frozen: t.frozen })
                .expect("names unique in source set");
        }
        Self { tensors: out }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.tensors.get(name).map(|t| t.data.as_slice())
    }

    /// Element-wise `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y * scale;
            }
        }
    }
}

/// Reverse-mode gradient of a scalar loss with respect to `params`.
///
/// `loss` builds the computation on the tape from the bound parameters and
/// returns the scalar output.
pub fn grad<T, F>(params: &ParamSet<T>, loss: F) -> Result<(T, Gradients<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = loss(&mut tape, &bound)?;
    let value = tape.value(out).data[0];
    let grads = tape.backward(out)?;
    Ok((value, Gradients::collect(params, &bound, &grads)))
}
