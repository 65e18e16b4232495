//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every model in the crate is written once against [`Graph`]. Training
//! builds a tracked graph and calls [`Graph::backward`]; decoding builds an
//! untracked one, which records no gradient bookkeeping for parameters.

use crate::linalg::{self, sigmoid, Mat};
use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxCols(Var),
    MeanCols(Var),
    LayerNormCols {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    CrossEntropyCols {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Sum(Var),
    Weighted(Vec<(Var, f64)>),
    KlToTarget {
        s: Var,
        log_target: Vec<f64>,
        log_eta: Vec<f64>,
    },
    BceLogits {
        s: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    track: bool,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    /// Graph whose parameter leaves receive gradients.
    pub fn tracked(params: &'p ParamStore) -> Self {
        Self::with_tracking(params, true)
    }

    /// Forward-only graph.
    pub fn untracked(params: &'p ParamStore) -> Self {
        Self::with_tracking(params, false)
    }

    fn with_tracking(params: &'p ParamStore, track: bool) -> Self {
        Self {
            params,
            track,
            nodes: Vec::with_capacity(256),
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

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(&self.value(b).scale(-1.0));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// `a + b` with the column vector `b` broadcast across columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add_col(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddCol(a, b), ng)
    }

    /// `w * x + b` for a column bias `b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wx = self.matmul(w, x);
        self.add_col(wx, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Mat::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a constant matrix (e.g. an attention mask or positional code).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let value = self.value(a).add(c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(m.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols: row mismatch");
            for i in 0..rows {
                for j in 0..m.cols() {
                    out.set(i, off + j, m.get(i, j));
                }
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let c = m.cols();
        let value = Mat::from_vec(len, c, m.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_cols(idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherCols(a, idx.to_vec()), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Softmax applied independently to each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows(), m.cols());
        for j in 0..m.cols() {
            let p = linalg::softmax(&m.col(j));
            for (i, v) in p.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxCols(a), ng)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_cols();
        let ng = self.ng(a);
        self.push(value, Op::MeanCols(a), ng)
    }

    /// Layer normalization over the rows of each column.
    pub fn layer_norm_cols(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Mat::zeros(r, c);
        let mut out = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(c);
        for j in 0..c {
            let col = m.col(j);
            let mu = col.iter().sum::<f64>() / r as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / r as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for i in 0..r {
                let xh = (col[i] - mu) * is;
                xhat.set(i, j, xh);
                out.set(i, j, g.data()[i] * xh + b.data()[i]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNormCols {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Summed negative log-likelihood: column `j` of `logits` scored against
    /// `targets[j]`. Returns a `1 x 1` node.
    pub fn cross_entropy_cols(&mut self, logits: Var, targets: &[usize]) -> Var {
        let m = self.value(logits);
        assert_eq!(m.cols(), targets.len());
        let mut probs = Mat::zeros(m.rows(), m.cols());
        let mut loss = 0.0;
        for (j, &t) in targets.iter().enumerate() {
            let col = m.col(j);
            let lp = linalg::log_softmax(&col);
            loss -= lp[t];
            for (i, l) in lp.iter().enumerate() {
                probs.set(i, j, l.exp());
            }
        }
        let ng = self.ng(logits);
        self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropyCols {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Mat::filled(1, 1, s), Op::Sum(a), ng)
    }

    /// `sum_k w_k * x_k` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Mat::filled(1, 1, s), Op::Weighted(terms.to_vec()), ng)
    }

    /// `KL(softmax(s) || target)` against a fixed target distribution given
    /// by its logarithm. `s` is an `m x 1` score column.
    pub fn kl_to_target(&mut self, s: Var, log_target: &[f64]) -> Var {
        let scores = self.value(s).data().to_vec();
        assert_eq!(scores.len(), log_target.len());
        let log_eta = linalg::log_softmax(&scores);
        let eta: Vec<f64> = log_eta.iter().map(|l| l.exp()).collect();
        let kl = eta
            .iter()
            .zip(&log_eta)
            .zip(log_target)
            .map(|((e, le), lt)| e * (le - lt))
            .sum();
        let ng = self.ng(s);
        self.push(
            Mat::filled(1, 1, kl),
            Op::KlToTarget {
                s,
                log_target: log_target.to_vec(),
                log_eta,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(s)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, s: Var, targets: &[f64]) -> Var {
        let scores = self.value(s).data();
        assert_eq!(scores.len(), targets.len());
        let m = scores.len() as f64;
        let loss = scores
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln())
            .sum::<f64>()
            / m;
        let ng = self.ng(s);
        self.push(
            Mat::filled(1, 1, loss),
            Op::BceLogits {
                s,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every
    /// parameter that participated.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Mat>> = vec![None; self.params.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut param_grads[id.0] {
                    Some(g) => g.add_assign(&dy),
                    slot @ None => *slot = Some(dy),
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let va = self.value(*a);
                        let g = slot(&mut grads, *a, va.shape());
                        linalg::matmul_nt_acc(&dy, self.value(*b), g);
                    }
                    if self.ng(*b) {
                        let vb = self.value(*b);
                        let g = slot(&mut grads, *b, vb.shape());
                        linalg::matmul_tn_acc(self.value(*a), &dy, g);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, &dy);
                    self.acc(&mut grads, *b, &dy);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, &dy);
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, &dy.scale(-1.0));
                    }
                }
                Op::AddCol(a, b) => {
                    self.acc(&mut grads, *a, &dy);
                    if self.ng(*b) {
                        let rs =
                            Mat::col_vec((0..dy.rows()).map(|r| dy.row(r).iter().sum()).collect());
                        self.acc(&mut grads, *b, &rs);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let g = zip_map(&dy, self.value(*b), |d, y| d * y);
                        self.acc(&mut grads, *a, &g);
                    }
                    if self.ng(*b) {
                        let g = zip_map(&dy, self.value(*a), |d, x| d * x);
                        self.acc(&mut grads, *b, &g);
                    }
                }
                Op::Scale(a, s) => self.acc(&mut grads, *a, &dy.scale(*s)),
                Op::AddConst(a) => self.acc(&mut grads, *a, &dy),
                Op::Sigmoid(a) => {
                    let g = zip_map(&dy, self.value(Var(i)), |d, y| d * y * (1.0 - y));
                    self.acc(&mut grads, *a, &g);
                }
                Op::Tanh(a) => {
                    let g = zip_map(&dy, self.value(Var(i)), |d, y| d * (1.0 - y * y));
                    self.acc(&mut grads, *a, &g);
                }
                Op::Relu(a) => {
                    let g = zip_map(&dy, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    self.acc(&mut grads, *a, &g);
                }
                Op::ConcatRows(parts) => {
                    let c = dy.cols();
                    let mut off = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.ng(p) {
                            let piece =
                                Mat::from_vec(r, c, dy.data()[off * c..(off + r) * c].to_vec());
                            self.acc(&mut grads, p, &piece);
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        if self.ng(p) {
                            let piece = Mat::from_fn(r, c, |ii, jj| dy.get(ii, off + jj));
                            self.acc(&mut grads, p, &piece);
                        }
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let shape = self.value(*a).shape();
                    let c = shape.1;
                    let g = slot(&mut grads, *a, shape);
                    for (dst, src) in g.data_mut()[start * c..start * c + dy.data().len()]
                        .iter_mut()
                        .zip(dy.data())
                    {
                        *dst += src;
                    }
                }
                Op::GatherCols(a, idx) => {
                    let shape = self.value(*a).shape();
                    let g = slot(&mut grads, *a, shape);
                    for (j, &src) in idx.iter().enumerate() {
                        for r in 0..dy.rows() {
                            let v = g.get(r, src) + dy.get(r, j);
                            g.set(r, src, v);
                        }
                    }
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, &dy.transpose()),
                Op::SoftmaxCols(a) => {
                    let y = self.value(Var(i));
                    let mut g = Mat::zeros(y.rows(), y.cols());
                    for j in 0..y.cols() {
                        let s: f64 = (0..y.rows()).map(|r| y.get(r, j) * dy.get(r, j)).sum();
                        for r in 0..y.rows() {
                            g.set(r, j, y.get(r, j) * (dy.get(r, j) - s));
                        }
                    }
                    self.acc(&mut grads, *a, &g);
                }
                Op::MeanCols(a) => {
                    let (r, c) = self.value(*a).shape();
                    let g = Mat::from_fn(r, c, |ii, _| dy.data()[ii] / c as f64);
                    self.acc(&mut grads, *a, &g);
                }
                Op::LayerNormCols {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = xhat.shape();
                    let gv = self.value(*gain);
                    if self.ng(*gain) {
                        let dg = Mat::col_vec(
                            (0..r)
                                .map(|ii| (0..c).map(|j| dy.get(ii, j) * xhat.get(ii, j)).sum())
                                .collect(),
                        );
                        self.acc(&mut grads, *gain, &dg);
                    }
                    if self.ng(*bias) {
                        let db = Mat::col_vec((0..r).map(|ii| dy.row(ii).iter().sum()).collect());
                        self.acc(&mut grads, *bias, &db);
                    }
                    if self.ng(*x) {
                        let mut dx = Mat::zeros(r, c);
                        let n = r as f64;
                        for j in 0..c {
                            let dxh: Vec<f64> =
                                (0..r).map(|ii| dy.get(ii, j) * gv.data()[ii]).collect();
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = (0..r).map(|ii| dxh[ii] * xhat.get(ii, j)).sum();
                            for ii in 0..r {
                                let v = inv_std[j] / n * (n * dxh[ii] - s1 - xhat.get(ii, j) * s2);
                                dx.set(ii, j, v);
                            }
                        }
                        self.acc(&mut grads, *x, &dx);
                    }
                }
                Op::CrossEntropyCols {
                    logits,
                    targets,
                    probs,
                } => {
                    let d = dy.data()[0];
                    let mut g = probs.scale(d);
                    for (j, &t) in targets.iter().enumerate() {
                        let v = g.get(t, j) - d;
                        g.set(t, j, v);
                    }
                    self.acc(&mut grads, *logits, &g);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut grads, *a, &Mat::filled(r, c, dy.data()[0]));
                }
                Op::Weighted(terms) => {
                    let d = dy.data()[0];
                    for &(v, w) in terms {
                        if self.ng(v) {
                            self.acc(&mut grads, v, &Mat::filled(1, 1, d * w));
                        }
                    }
                }
                Op::KlToTarget {
                    s,
                    log_target,
                    log_eta,
                } => {
                    let d = dy.data()[0];
                    let kl = self.value(Var(i)).data()[0];
                    let g: Vec<f64> = log_eta
                        .iter()
                        .zip(log_target)
                        .map(|(&le, &lt)| d * le.exp() * (le - lt - kl))
                        .collect();
                    self.acc(&mut grads, *s, &Mat::col_vec(g));
                }
                Op::BceLogits { s, targets } => {
                    let d = dy.data()[0];
                    let vs = self.value(*s);
                    let m = targets.len() as f64;
                    let g = Mat::from_vec(
                        vs.rows(),
                        vs.cols(),
                        vs.data()
                            .iter()
                            .zip(targets)
                            .map(|(&x, &t)| d * (sigmoid(x) - t) / m)
                            .collect(),
                    );
                    self.acc(&mut grads, *s, &g);
                }
            }
        }
        Grads::from_slots(param_grads)
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: &Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn slot(grads: &mut [Option<Mat>], v: Var, shape: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry for a scalar
    /// function built by `f`.
    fn check(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::tracked(store);
            let l = f(&mut g);
            g.backward(l)
        };
        let h = 1e-5;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.get(id).data().len();
            let ga = analytic.get_or_zeros(store, id);
            for k in 0..n {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let lp = {
                    let mut g = Graph::untracked(store);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data_mut()[k] = orig - h;
                let lm = {
                    let mut g = Graph::untracked(store);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data_mut()[k] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = ga.data()[k];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!(
                    (a - num).abs() / denom < 1e-5,
                    "{}[{k}]: analytic {a} vs numeric {num}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn gradients_of_every_op_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert("w", rand_mat(&mut rng, 4, 3));
        store.insert("x", rand_mat(&mut rng, 3, 5));
        store.insert("b", rand_mat(&mut rng, 4, 1));
        store.insert("g", rand_mat(&mut rng, 4, 1));
        store.insert("v", rand_mat(&mut rng, 4, 5));
        let mask = rand_mat(&mut rng, 4, 5);
        let f = move |g: &mut Graph| {
            let p = g.params();
            let (w, x, b, gain, v) = (
                g.param(p.id("w").unwrap()),
                g.param(p.id("x").unwrap()),
                g.param(p.id("b").unwrap()),
                g.param(p.id("g").unwrap()),
                g.param(p.id("v").unwrap()),
            );
            let y = g.affine(w, x, b); // 4x5
            let t = g.tanh(y);
            let s = g.sigmoid(v);
            let m = g.mul(t, s);
            let m = g.add_const(m, &mask);
            let r = g.relu(m);
            let d = g.sub(r, v);
            let ln = g.layer_norm_cols(d, gain, b);
            let sm = g.softmax_cols(ln);
            let tr = g.transpose(sm); // 5x4
            let sl = g.slice_rows(tr, 1, 3); // 3x4
            let ga = g.gather_cols(sl, &[2, 0, 2]); // 3x3
            let cc = g.concat_cols(&[ga, sl]); // 3x7
            let mc = g.mean_cols(cc); // 3x1
            let sc = g.scale(mc, 1.7);
            let ce = g.cross_entropy_cols(cc, &[0, 1, 2, 0, 1, 2, 0]);
            let kl = g.kl_to_target(sc, &[(0.2f64).ln(), (0.3f64).ln(), (0.5f64).ln()]);
            let bce = g.bce_with_logits(sc, &[1.0, 0.0, 1.0]);
            let su = g.sum(ln);
            let a2 = g.add(ln, ln);
            let su2 = g.sum(a2);
            g.weighted_sum(&[(ce, 0.5), (kl, 2.0), (bce, 1.3), (su, 0.1), (su2, -0.2)])
        };
        check(&mut store, &f);
    }

    #[test]
    fn concat_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a", rand_mat(&mut rng, 2, 1));
        store.insert("b", rand_mat(&mut rng, 3, 1));
        store.insert("w", rand_mat(&mut rng, 4, 5));
        let f = |g: &mut Graph| {
            let p = g.params();
            let (a, b, w) = (
                g.param(p.id("a").unwrap()),
                g.param(p.id("b").unwrap()),
                g.param(p.id("w").unwrap()),
            );
            let c = g.concat_rows(&[a, b]);
            let y = g.matmul(w, c);
            g.cross_entropy_cols(y, &[2])
        };
        check(&mut store, &f);
    }

    #[test]
    fn untracked_graph_shares_forward_values() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Mat::identity(3));
        let mut g = Graph::untracked(&store);
        let w = g.param(id);
        let x = g.constant(Mat::col_vec(vec![1.0, 2.0, 3.0]));
        let y = g.matmul(w, x);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(id).is_none());
    }

    #[test]
    fn kl_gradient_stays_finite_when_eta_underflows() {
        let mut store = ParamStore::new();
        let id = store.insert("s", Mat::col_vec(vec![900.0, 0.0, -900.0]));
        let mut g = Graph::tracked(&store);
        let s = g.param(id);
        let kl = g.kl_to_target(s, &[(0.2f64).ln(), (0.3f64).ln(), (0.5f64).ln()]);
        assert!(g.scalar(kl).is_finite());
        let grads = g.backward(kl);
        assert!(grads.is_finite());
    }
}
