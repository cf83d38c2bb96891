use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::params::{Grads, ParamId, ParamStore};
use super::NnError;
use crate::matrix::{dot, Matrix};
use crate::real::Real;
use crate::rng::Rng;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used as negative controls for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    GeluBackward,
}

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Gelu(Var),
    Dropout { x: Var, keep: Matrix<T> },
    Attention(AttentionCache<T>),
    GatherSum { table: Var, rows: Vec<Vec<usize>> },
    ConcatRows(Vec<Var>),
    Rows { x: Var, start: usize },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Sum(Var),
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// Softmax probabilities per head, `n × n`; masked keys hold exact zeros.
    probs: Vec<Matrix<T>>,
    /// Dropout multipliers per head (`0` or `1/(1-p)`), when dropout is active.
    keep: Option<Vec<Matrix<T>>>,
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
}

struct DropoutState<T> {
    p: T,
    rng: Rng,
}

/// Records a forward computation for later reverse-mode differentiation.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    dropout: Option<DropoutState<T>>,
    fault: Option<Fault>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Matrix<T>>>,
}

impl<'p, T: Real> Tape<'p, T> {
    /// Evaluation-mode tape (dropout disabled).
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), dropout: None, fault: None }
    }

    /// Training-mode tape with dropout probability `p` drawn from `rng`.
    pub fn with_dropout(params: &'p ParamStore<T>, p: f64, rng: Rng) -> Self {
        let dropout = (p > 0.0).then(|| DropoutState { p: T::lit(p), rng });
        Self { params, nodes: Vec::new(), dropout, fault: None }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Option<Matrix<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are still reported for it.
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(Some(m), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(NnError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let y = self.value(a).matmul(self.value(b));
        Ok(self.push(Some(y), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NnError::Shape { op: "add", lhs: sa, rhs: sb });
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(Some(y), Op::Add(a, b)))
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(NnError::Shape { op: "add_bias", lhs: sx, rhs: sb });
        }
        let mut y = self.value(x).clone();
        let b = self.value(bias).as_slice();
        for r in 0..sx.0 {
            for (o, &bv) in y.row_mut(r).iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(Some(y), Op::AddBias(x, bias)))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta` (both `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let sx = self.shape(x);
        for p in [gamma, beta] {
            let sp = self.shape(p);
            if sp != (1, sx.1) {
                return Err(NnError::Shape { op: "layer_norm", lhs: sx, rhs: sp });
            }
        }
        let (n, c) = sx;
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let cf = T::lit(c as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(n, c);
        let mut y = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            // Shifted mean keeps constant rows exactly constant after centering.
            let shift = row[0];
            let mean = shift + row.iter().map(|&v| v - shift).sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[(r, j)] = h;
                y[(r, j)] = h * g[j] + b[j];
            }
        }
        Ok(self.push(Some(y), Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let y = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(Some(y), Op::Gelu(x))
    }

    /// Inverted dropout; identity on evaluation tapes.
    pub fn dropout(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let Some(state) = self.dropout.as_mut() else {
            return x;
        };
        let keep = dropout_mask(r, c, state);
        let mut y = self.value(x).clone();
        for (o, &k) in y.as_mut_slice().iter_mut().zip(keep.as_slice()) {
            *o = *o * k;
        }
        self.push(Some(y), Op::Dropout { x, keep })
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v` (`n × d`).
    ///
    /// `key_mask[j] == false` removes key `j` from every softmax (exact zero weight).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var, NnError> {
        let (n, d) = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != (n, d) {
                return Err(NnError::Shape { op: "attention", lhs: (n, d), rhs: self.shape(other) });
            }
        }
        if key_mask.len() != n {
            return Err(NnError::Shape { op: "attention mask", lhs: (n, d), rhs: (key_mask.len(), 1) });
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::HeadsDoNotDivide { dim: d, heads });
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(NnError::NoUnmaskedKey);
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let keep = self.dropout.as_mut().map(|state| (0..heads).map(|_| dropout_mask(n, n, state)).collect::<Vec<_>>());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if key_mask[j] {
                        let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                        p[(i, j)] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let mut denom = T::zero();
                for j in 0..n {
                    if key_mask[j] {
                        let e = (p[(i, j)] - max).exp();
                        p[(i, j)] = e;
                        denom = denom + e;
                    }
                }
                for j in 0..n {
                    if key_mask[j] {
                        p[(i, j)] = p[(i, j)] / denom;
                    }
                }
            }
            probs.push(p);
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[h];
            let kh = keep.as_ref().map(|masks| &masks[h]);
            for i in 0..n {
                for j in 0..n {
                    let wij = p[(i, j)] * kh.map_or(T::one(), |m| m[(i, j)]);
                    if wij == T::zero() {
                        continue;
                    }
                    let vj = &vv.row(j)[cols.clone()];
                    let oi = &mut out.row_mut(i)[cols.clone()];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o = *o + wij * x;
                    }
                }
            }
        }
        Ok(self.push(Some(out), Op::Attention(AttentionCache { q, k, v, heads, probs, keep })))
    }

    /// Attention probabilities of the most recent attention node, per head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Row `i` of the output is the sum of `table` rows listed in `rows[i]`
    /// (an empty list yields a zero row).
    pub fn gather_sum(&mut self, table: Var, rows: Vec<Vec<usize>>) -> Result<Var, NnError> {
        let (tr, c) = self.shape(table);
        let tv = self.value(table);
        let mut y = Matrix::zeros(rows.len(), c);
        for (i, ids) in rows.iter().enumerate() {
            for &k in ids {
                if k >= tr {
                    return Err(NnError::IndexOutOfRange { index: k, rows: tr });
                }
                for (o, &x) in y.row_mut(i).iter_mut().zip(tv.row(k)) {
                    *o = *o + x;
                }
            }
        }
        Ok(self.push(Some(y), Op::GatherSum { table, rows }))
    }

    /// Embedding lookup: one table row per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        self.gather_sum(table, ids.iter().map(|&i| vec![i]).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let c = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.1 != c {
                return Err(NnError::Shape { op: "concat_rows", lhs: (rows, c), rhs: sp });
            }
            data.extend_from_slice(self.value(p).as_slice());
            rows += sp.0;
        }
        Ok(self.push(Some(Matrix::from_vec(rows, c, data)), Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let sx = self.shape(x);
        if start + len > sx.0 {
            return Err(NnError::IndexOutOfRange { index: start + len - 1, rows: sx.0 });
        }
        let data = self.value(x).as_slice()[start * sx.1..(start + len) * sx.1].to_vec();
        Ok(self.push(Some(Matrix::from_vec(len, sx.1, data)), Op::Rows { x, start }))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let nrm = dot(xv.row(r), xv.row(r)).sqrt();
            norms.push(nrm);
            for o in y.row_mut(r) {
                *o = *o / nrm;
            }
        }
        self.push(Some(y), Op::L2NormalizeRows { x, norms })
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().copied().sum::<T>();
        self.push(Some(Matrix::from_vec(1, 1, vec![s])), Op::Sum(x))
    }

    /// Reverse pass from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Matrix<T>) -> Result<Gradients<T>, NnError> {
        let so = self.shape(out);
        if seed.shape() != so {
            return Err(NnError::Shape { op: "backward seed", lhs: so, rhs: seed.shape() });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads })
    }

    fn backward_node(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                acc(grads, *x, g.clone());
                acc(grads, *bias, column_sums(g));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = g.shape();
                let gv = self.value(*gamma).as_slice();
                let cf = T::lit(c as f64);
                let mut dx = Matrix::zeros(n, c);
                let mut dgamma = Matrix::zeros(1, c);
                let mut dbeta = Matrix::zeros(1, c);
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        mean_d = mean_d + dh;
                        mean_dh = mean_dh + dh * hr[j];
                        dgamma[(0, j)] = dgamma[(0, j)] + gr[j] * hr[j];
                        dbeta[(0, j)] = dbeta[(0, j)] + gr[j];
                    }
                    mean_d = mean_d / cf;
                    mean_dh = mean_dh / cf;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[(r, j)] = inv_std[r] * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let three = T::lit(3.0);
                let wrong = if self.fault == Some(Fault::GeluBackward) { T::lit(1.05) } else { T::one() };
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    *o = *o * d * wrong;
                }
                acc(grads, *x, dx);
            }
            Op::Dropout { x, keep } => {
                let mut dx = g.clone();
                for (o, &k) in dx.as_mut_slice().iter_mut().zip(keep.as_slice()) {
                    *o = *o * k;
                }
                acc(grads, *x, dx);
            }
            Op::Attention(cache) => self.backward_attention(cache, g, grads),
            Op::GatherSum { table, rows } => {
                let (tr, c) = self.shape(*table);
                let mut dt = Matrix::zeros(tr, c);
                for (i, ids) in rows.iter().enumerate() {
                    for &k in ids {
                        for (o, &x) in dt.row_mut(k).iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let part = g.as_slice()[start * c..(start + r) * c].to_vec();
                    acc(grads, p, Matrix::from_vec(r, c, part));
                    start += r;
                }
            }
            Op::Rows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                dx.as_mut_slice()[start * c..start * c + g.as_slice().len()].copy_from_slice(g.as_slice());
                acc(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.nodes[idx].value.as_ref().expect("normalize output");
                let mut dx = g.clone();
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let proj = dot(yr, g.row(r));
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (*o - yr[j] * proj) / norms[r];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                let s = g.as_slice()[0];
                acc(grads, *x, Matrix::from_vec(r, c, vec![s; r * c]));
            }
        }
    }

    fn backward_attention(&self, cache: &AttentionCache<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let (qv, kv, vv) = (self.value(cache.q), self.value(cache.k), self.value(cache.v));
        let (n, d) = qv.shape();
        let dh = d / cache.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..cache.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[h];
            let keep = cache.keep.as_ref().map(|k| &k[h]);
            for i in 0..n {
                let gi = &g.row(i)[cols.clone()];
                // dW_ij = dO_i · V_j ; dP = dW ∘ keep
                let mut dp = vec![T::zero(); n];
                for j in 0..n {
                    if p[(i, j)] == T::zero() {
                        continue;
                    }
                    let kij = keep.map_or(T::one(), |k| k[(i, j)]);
                    let wij = p[(i, j)] * kij;
                    if wij != T::zero() {
                        let dvj = &mut dv.row_mut(j)[cols.clone()];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o = *o + wij * x;
                        }
                    }
                    dp[j] = dot(gi, &vv.row(j)[cols.clone()]) * kij;
                }
                let inner: T = (0..n).map(|j| p[(i, j)] * dp[j]).sum();
                for j in 0..n {
                    let pij = p[(i, j)];
                    if pij == T::zero() {
                        continue;
                    }
                    let ds = pij * (dp[j] - inner) * scale;
                    let kj = &kv.row(j)[cols.clone()];
                    let qi = &qv.row(i)[cols.clone()];
                    for c in 0..dh {
                        dq[(i, cols.start + c)] = dq[(i, cols.start + c)] + ds * kj[c];
                        dk[(j, cols.start + c)] = dk[(j, cols.start + c)] + ds * qi[c];
                    }
                }
            }
        }
        acc(grads, cache.q, dq);
        acc(grads, cache.k, dk);
        acc(grads, cache.v, dv);
    }
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Adds the gradients of all parameter leaves of `tape` into `grads`.
    pub fn accumulate_params(&self, tape: &Tape<'_, T>, grads: &mut Grads<T>) {
        for (node, g) in tape.nodes.iter().zip(&self.nodes) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                grads.accumulate(*id, g);
            }
        }
    }
}

fn dropout_mask<T: Real>(r: usize, c: usize, state: &mut DropoutState<T>) -> Matrix<T> {
    let keep_scale = T::one() / (T::one() - state.p);
    let p = state.p.as_f64();
    let data = (0..r * c).map(|_| if state.rng.random::<f64>() < p { T::zero() } else { keep_scale }).collect();
    Matrix::from_vec(r, c, data)
}

fn column_sums<T: Real>(g: &Matrix<T>) -> Matrix<T> {
    let mut s = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in s.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o = *o + x;
        }
    }
    s
}

fn acc<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::linear;
    use crate::nn::{grad_check, ParamStore};

    fn store_with(mats: &[(&str, Matrix<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, m) in mats {
            s.add(*n, m.clone());
        }
        s
    }

    fn pseudo(r: usize, c: usize, seed: u64) -> Matrix<f64> {
        let mut rng = crate::rng::derive(seed, "test", &[]);
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn linear_identity_and_hand_values() {
        let s = store_with(&[("w", Matrix::identity(2)), ("b", Matrix::zeros(1, 2))]);
        let mut t = Tape::new(&s);
        let x = t.input(Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        let (w, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
        let y = linear(&mut t, x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let s = store_with(&[("w", Matrix::identity(2)), ("b", Matrix::row_vector(vec![3.0, 4.0]))]);
        let mut t = Tape::new(&s);
        let x = t.input(Matrix::from_rows(&[&[1.0, 2.0]]));
        let (w, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
        let y = linear(&mut t, x, w, b).unwrap();
        assert_eq!(t.value(y).as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_an_error() {
        let s = store_with(&[("w", Matrix::zeros(3, 2)), ("b", Matrix::zeros(1, 2))]);
        let mut t = Tape::new(&s);
        let x = t.input(Matrix::zeros(1, 2));
        let w = t.param(ParamId(0));
        assert!(matches!(t.matmul(x, w), Err(NnError::Shape { .. })));
    }

    #[test]
    fn linear_weight_gradient_is_column_sums_of_input() {
        let s = store_with(&[("w", pseudo(3, 2, 1)), ("b", pseudo(1, 2, 2))]);
        let xm = pseudo(4, 3, 3);
        let mut t = Tape::new(&s);
        let x = t.input(xm.clone());
        let (w, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
        let y = linear(&mut t, x, w, b).unwrap();
        let out = t.sum(y);
        let g = t.backward(out, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        let mut grads = Grads::for_store(&s);
        g.accumulate_params(&t, &mut grads);
        let gw = grads.get(ParamId(0)).unwrap();
        for k in 0..3 {
            let colsum: f64 = (0..4).map(|i| xm[(i, k)]).sum();
            for j in 0..2 {
                assert!((gw[(k, j)] - colsum).abs() < 1e-12);
            }
        }
        // finite-difference oracle
        let f = |s: &ParamStore<f64>| {
            let mut t = Tape::new(s);
            let x = t.input(xm.clone());
            let (w, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
            let y = linear(&mut t, x, w, b).unwrap();
            t.value(y).as_slice().iter().sum::<f64>()
        };
        let report = grad_check(f, &s, &grads, 1e-4, usize::MAX, 0).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    fn attention_loss(s: &ParamStore<f64>, x: &Matrix<f64>, mask: &[bool], heads: usize) -> (f64, Grads<f64>) {
        let mut t = Tape::new(s);
        let xi = t.input(x.clone());
        let ids: Vec<Var> = (0..6).map(|i| t.param(ParamId(i))).collect();
        let q = linear(&mut t, xi, ids[0], ids[1]).unwrap();
        let k = linear(&mut t, xi, ids[2], ids[3]).unwrap();
        let v = linear(&mut t, xi, ids[4], ids[5]).unwrap();
        let a = t.attention(q, k, v, mask, heads).unwrap();
        // weighted sum so the seed is not uniform
        let wts = t.input(pseudo(x.rows(), x.cols(), 99));
        let prod = t.add(a, wts).unwrap();
        let sq = t.gelu(prod);
        let out = t.sum(sq);
        let val = t.value(out)[(0, 0)];
        let g = t.backward(out, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        let mut grads = Grads::for_store(s);
        g.accumulate_params(&t, &mut grads);
        (val, grads)
    }

    fn attention_store(d: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, n) in ["wq", "bq", "wk", "bk", "wv", "bv"].iter().enumerate() {
            let m = if i % 2 == 0 { pseudo(d, d, i as u64 + 10) } else { pseudo(1, d, i as u64 + 10) };
            s.add(*n, m);
        }
        s
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let (n, d, h) = (3, 8, 2);
        let s = attention_store(d);
        let x = pseudo(n, d, 5);
        let mask = [true, true, true];
        let (_, grads) = attention_loss(&s, &x, &mask, h);
        let report = grad_check(|s| attention_loss(s, &x, &mask, h).0, &s, &grads, 1e-4, usize::MAX, 0).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn attention_rows_are_distributions_over_unmasked_keys() {
        let (n, d) = (5, 8);
        let s = attention_store(d);
        let mut t = Tape::new(&s);
        let xi = t.input(pseudo(n, d, 6));
        let q = t.input(pseudo(n, d, 7));
        let mask = [true, false, true, true, false];
        let a = t.attention(q, xi, xi, &mask, 2).unwrap();
        for p in t.attention_probs(a).unwrap() {
            for i in 0..n {
                let row_sum: f64 = (0..n).map(|j| p[(i, j)]).sum();
                assert!((row_sum - 1.0).abs() < 1e-6);
                for j in 0..n {
                    assert!(p[(i, j)] >= 0.0);
                    if !mask[j] {
                        assert_eq!(p[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let s = attention_store(4);
        let mut t = Tape::new(&s);
        let q = t.input(pseudo(1, 4, 1));
        let k = t.input(pseudo(1, 4, 2));
        let v = t.input(pseudo(1, 4, 3));
        let a = t.attention(q, k, v, &[true], 2).unwrap();
        assert_eq!(t.value(a), t.value(v));
    }

    #[test]
    fn masked_padding_leaves_other_rows_unchanged() {
        let s = attention_store(8);
        let base = pseudo(3, 8, 11);
        let pad = pseudo(1, 8, 12);
        let run = |x: Matrix<f64>, mask: &[bool]| {
            let mut t = Tape::new(&s);
            let xi = t.input(x);
            let ids: Vec<Var> = (0..6).map(|i| t.param(ParamId(i))).collect();
            let q = linear(&mut t, xi, ids[0], ids[1]).unwrap();
            let k = linear(&mut t, xi, ids[2], ids[3]).unwrap();
            let v = linear(&mut t, xi, ids[4], ids[5]).unwrap();
            let a = t.attention(q, k, v, mask, 2).unwrap();
            t.value(a).clone()
        };
        let a = run(base.clone(), &[true; 3]);
        let mut padded = base.into_vec();
        padded.extend_from_slice(pad.as_slice());
        let b = run(Matrix::from_vec(4, 8, padded), &[true, true, true, false]);
        for i in 0..3 {
            for j in 0..8 {
                assert!((a[(i, j)] - b[(i, j)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let x = t.input(Matrix::zeros(2, 6));
        assert_eq!(t.attention(x, x, x, &[true, true], 4), Err(NnError::HeadsDoNotDivide { dim: 6, heads: 4 }));
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let s = store_with(&[("g", Matrix::row_vector(vec![1.0; 4])), ("b", Matrix::zeros(1, 4))]);
        let mut t = Tape::new(&s);
        let x = t.input(Matrix::from_rows(&[&[0.1, 0.1, 0.1, 0.1], &[0.0; 4]]));
        let (g, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gelu_and_gather_gradients() {
        let s = store_with(&[("g", pseudo(1, 5, 1)), ("b", pseudo(1, 5, 2)), ("table", pseudo(6, 5, 3))]);
        let f = |s: &ParamStore<f64>, want_grads: bool| {
            let mut t = Tape::new(s);
            let (g, b, tab) = (t.param(ParamId(0)), t.param(ParamId(1)), t.param(ParamId(2)));
            let e = t.gather_sum(tab, vec![vec![0], vec![1, 2], vec![], vec![5, 5]]).unwrap();
            let x = t.input(pseudo(4, 5, 4));
            let z = t.add(e, x).unwrap();
            let y = t.layer_norm(z, g, b).unwrap();
            let y = t.gelu(y);
            let r = t.rows(y, 1, 2).unwrap();
            let c = t.concat_rows(&[r, y]).unwrap();
            let nrm = t.l2_normalize_rows(c);
            let w = t.input(pseudo(6, 5, 8));
            let p = t.add(nrm, w).unwrap();
            let p = t.gelu(p);
            let out = t.sum(p);
            let mut grads = Grads::for_store(s);
            if want_grads {
                let gr = t.backward(out, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
                gr.accumulate_params(&t, &mut grads);
            }
            (t.value(out)[(0, 0)], grads)
        };
        let (_, grads) = f(&s, true);
        let report = grad_check(|s| f(s, false).0, &s, &grads, 1e-4, usize::MAX, 0).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn embedding_lookup_returns_row() {
        let table = pseudo(4, 3, 21);
        let s = store_with(&[("e", table.clone())]);
        let mut t = Tape::new(&s);
        let e = t.param(ParamId(0));
        let y = t.embedding(e, &[2]).unwrap();
        assert_eq!(t.value(y).as_slice(), table.row(2));
        assert!(matches!(t.embedding(e, &[4]), Err(NnError::IndexOutOfRange { index: 4, rows: 4 })));
    }

    #[test]
    fn faulty_gelu_backward_is_detected() {
        let s = store_with(&[("w", pseudo(3, 3, 1))]);
        let f = |s: &ParamStore<f64>, fault: bool| {
            let mut t = Tape::new(s);
            if fault {
                t.inject_fault(Fault::GeluBackward);
            }
            let x = t.input(pseudo(2, 3, 2));
            let w = t.param(ParamId(0));
            let y = t.matmul(x, w).unwrap();
            let y = t.gelu(y);
            let out = t.sum(y);
            let gr = t.backward(out, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
            let mut grads = Grads::for_store(s);
            gr.accumulate_params(&t, &mut grads);
            (t.value(out)[(0, 0)], grads)
        };
        let (_, bad) = f(&s, true);
        let report = grad_check(|s| f(s, false).0, &s, &bad, 1e-4, usize::MAX, 0).unwrap();
        assert!(report.max_rel_error > 1e-2);
    }
}
