//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Graph`] borrows the parameter store for one forward pass, records every
//! operation together with whatever it needs for the backward sweep, and is
//! dropped afterwards. Frozen parameters never receive gradients, and nodes that
//! do not depend on a trainable parameter are skipped during the sweep.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<T> },
    Tokens { patches: Var, cls: Var, pos: Var, batch: usize, patches_per_sample: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Softmax(Var),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].as_ref()
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(*id).value,
            _ => self.nodes[v.0].value.as_ref().expect("non-parameter node stores its value"),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t), false)
    }

    /// Input leaf that receives a gradient (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t), true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let rg = !self.params.get(id).frozen;
        self.push(Op::Param(id), None, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dimension");
        let out = Tensor::from_vec(&[m, n], matmul(av.data(), bv.data(), m, k, n)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Some(out), rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        let n = out.cols();
        assert_eq!(n, bias.len(), "bias width");
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += *bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Op::AddBias(x, b), Some(out), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), Some(out), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(x);
        self.push(Op::Gelu(x), Some(out), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::from_f64_lossy(LN_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out).unwrap();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, Some(out), rg)
    }

    /// Multi-head self attention over `batch` sequences of `tokens` rows each.
    ///
    /// `qkv` is `[batch * tokens, 3 * dim]` with query, key and value blocks side
    /// by side. Returns the `[batch * tokens, dim]` context.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let dim3 = qv.cols();
        assert_eq!(dim3 % 3, 0);
        let dim = dim3 / 3;
        assert_eq!(dim % heads, 0);
        assert_eq!(qv.rows(), batch * tokens);
        let dh = dim / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let src = qv.data();
        let nn = tokens * tokens;
        let mut probs = vec![T::zero(); batch * heads * nn];
        let mut out = vec![T::zero(); batch * tokens * dim];
        for b in 0..batch {
            let base = b * tokens * dim3;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * nn..(b * heads + h + 1) * nn];
                let q = &src[base + h * dh..];
                let k = &src[base + dim + h * dh..];
                T::gemm(tokens, dh, tokens, scale, q, dim3 as isize, 1, k, 1, dim3 as isize, T::zero(), p, tokens as isize, 1);
                for row in p.chunks_mut(tokens) {
                    softmax_in_place(row);
                }
                let v = &src[base + 2 * dim + h * dh..];
                let o = &mut out[b * tokens * dim + h * dh..];
                T::gemm(tokens, tokens, dh, T::one(), p, tokens as isize, 1, v, dim3 as isize, 1, T::zero(), o, dim as isize, 1);
            }
        }
        let out = Tensor::from_vec(&[batch * tokens, dim], out).unwrap();
        let rg = self.rg(qkv);
        self.push(Op::Attention { qkv, batch, tokens, heads, probs }, Some(out), rg)
    }

    /// Attention weights `[batch, heads, tokens, tokens]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, batch, tokens, heads, .. } => Some((probs, *batch, *heads, *tokens)),
            _ => None,
        }
    }

    /// Prepends a class token to every sequence and adds position embeddings.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Var {
        let pv = self.value(patches);
        let dim = pv.cols();
        let m = pv.rows() / batch;
        assert_eq!(pv.rows(), batch * m);
        let c = self.value(cls).data();
        let ps = self.value(pos).data();
        assert_eq!(ps.len(), (m + 1) * dim);
        let mut out = vec![T::zero(); batch * (m + 1) * dim];
        for b in 0..batch {
            let dst = &mut out[b * (m + 1) * dim..(b + 1) * (m + 1) * dim];
            for d in 0..dim {
                dst[d] = c[d] + ps[d];
            }
            for t in 0..m {
                let src = pv.row(b * m + t);
                for d in 0..dim {
                    dst[(t + 1) * dim + d] = src[d] + ps[(t + 1) * dim + d];
                }
            }
        }
        let out = Tensor::from_vec(&[batch * (m + 1), dim], out).unwrap();
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        self.push(Op::Tokens { patches, cls, pos, batch, patches_per_sample: m }, Some(out), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            out.extend_from_slice(xv.row(r));
        }
        let out = Tensor::from_vec(&[rows.len(), n], out).unwrap();
        let rg = self.rg(x);
        self.push(Op::SelectRows { x, rows }, Some(out), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Op::Softmax(x), Some(out), rg)
    }

    /// Runs the reverse sweep from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed gradient shape");
            if self.rg(*v) {
                accumulate(&mut grads[v.0], g.clone());
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(gout);
                }
                Op::Param(id) => {
                    accumulate(&mut pgrads[id.0], gout);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, T::one(), gout.data(), n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                        accumulate(&mut grads[a.0], Tensor::from_vec(av.shape(), da).unwrap());
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, gout.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
                        accumulate(&mut grads[b.0], Tensor::from_vec(bv.shape(), db).unwrap());
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let n = gout.cols();
                        let mut db = vec![T::zero(); n];
                        for row in gout.data().chunks(n) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += *g;
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::from_vec(self.value(*b).shape(), db).unwrap());
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], gout);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads[b.0], gout.clone());
                        accumulate(&mut grads[a.0], gout);
                    } else if self.rg(*a) {
                        accumulate(&mut grads[a.0], gout);
                    } else if self.rg(*b) {
                        accumulate(&mut grads[b.0], gout);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = gout;
                    for (g, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *g *= gelu(*v).1;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = gout.cols();
                    let rows = gout.rows();
                    let g = self.value(*gamma).data();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = vec![T::zero(); n];
                        let mut dbeta = vec![T::zero(); n];
                        for r in 0..rows {
                            let go = gout.row(r);
                            for c in 0..n {
                                dg[c] += go[c] * xhat[r * n + c];
                                dbeta[c] += go[c];
                            }
                        }
                        if self.rg(*gamma) {
                            accumulate(&mut grads[gamma.0], Tensor::from_vec(&[n], dg).unwrap());
                        }
                        if self.rg(*beta) {
                            accumulate(&mut grads[beta.0], Tensor::from_vec(&[n], dbeta).unwrap());
                        }
                    }
                    if self.rg(*x) {
                        let nf = T::from_usize(n).unwrap();
                        let mut dx = vec![T::zero(); rows * n];
                        for r in 0..rows {
                            let go = gout.row(r);
                            let xh = &xhat[r * n..(r + 1) * n];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for c in 0..n {
                                let dxh = go[c] * g[c];
                                s1 += dxh;
                                s2 += dxh * xh[c];
                            }
                            for c in 0..n {
                                let dxh = go[c] * g[c];
                                dx[r * n + c] = rstd[r] * (dxh - s1 / nf - xh[c] * s2 / nf);
                            }
                        }
                        accumulate(&mut grads[x.0], Tensor::from_vec(gout.shape(), dx).unwrap());
                    }
                }
                Op::Attention { qkv, batch, tokens, heads, probs } => {
                    let dqkv = attention_backward(self.value(*qkv), gout.data(), probs, *batch, *tokens, *heads);
                    accumulate(&mut grads[qkv.0], dqkv);
                }
                Op::Tokens { patches, cls, pos, batch, patches_per_sample: m } => {
                    let dim = gout.cols();
                    let (batch, m) = (*batch, *m);
                    if self.rg(*patches) {
                        let mut dp = vec![T::zero(); batch * m * dim];
                        for b in 0..batch {
                            for t in 0..m {
                                dp[(b * m + t) * dim..(b * m + t + 1) * dim].copy_from_slice(gout.row(b * (m + 1) + t + 1));
                            }
                        }
                        accumulate(&mut grads[patches.0], Tensor::from_vec(&[batch * m, dim], dp).unwrap());
                    }
                    if self.rg(*cls) {
                        let mut dc = vec![T::zero(); dim];
                        for b in 0..batch {
                            for (d, g) in dc.iter_mut().zip(gout.row(b * (m + 1))) {
                                *d += *g;
                            }
                        }
                        accumulate(&mut grads[cls.0], Tensor::from_vec(self.value(*cls).shape(), dc).unwrap());
                    }
                    if self.rg(*pos) {
                        let mut dpos = vec![T::zero(); (m + 1) * dim];
                        for b in 0..batch {
                            let blk = &gout.data()[b * (m + 1) * dim..(b + 1) * (m + 1) * dim];
                            for (d, g) in dpos.iter_mut().zip(blk) {
                                *d += *g;
                            }
                        }
                        accumulate(&mut grads[pos.0], Tensor::from_vec(self.value(*pos).shape(), dpos).unwrap());
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(gout.row(i)) {
                            *d += *g;
                        }
                    }
                    debug_assert_eq!(dx.cols(), n);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let n = y.cols();
                    let mut dx = gout;
                    for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: T = drow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for (d, yy) in drow.iter_mut().zip(yrow) {
                            *d = *yy * (*d - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        Gradients { nodes: grads, params: pgrads }
    }
}

fn attention_backward<T: Scalar>(
    qkv: &Tensor<T>,
    gout: &[T],
    probs: &[T],
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Tensor<T> {
    let dim3 = qkv.cols();
    let dim = dim3 / 3;
    let dh = dim / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let src = qkv.data();
    let nn = tokens * tokens;
    let mut dqkv = vec![T::zero(); src.len()];
    let mut da = vec![T::zero(); nn];
    let (ld3, ldd, ldt) = (dim3 as isize, dim as isize, tokens as isize);
    for b in 0..batch {
        let base = b * tokens * dim3;
        let go = &gout[b * tokens * dim..];
        for h in 0..heads {
            let p = &probs[(b * heads + h) * nn..(b * heads + h + 1) * nn];
            let go_h = &go[h * dh..];
            // dA = dO V^T
            T::gemm(tokens, dh, tokens, T::one(), go_h, ldd, 1, &src[base + 2 * dim + h * dh..], 1, ld3, T::zero(), &mut da, ldt, 1);
            // dV = A^T dO
            T::gemm(tokens, tokens, dh, T::one(), p, 1, ldt, go_h, ldd, 1, T::one(), &mut dqkv[base + 2 * dim + h * dh..], ld3, 1);
            // dS = A * (dA - rowsum(dA * A))
            for (drow, prow) in da.chunks_mut(tokens).zip(p.chunks(tokens)) {
                let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (d, pp) in drow.iter_mut().zip(prow) {
                    *d = *pp * (*d - dot);
                }
            }
            // dQ = scale dS K ; dK = scale dS^T Q
            T::gemm(tokens, tokens, dh, scale, &da, ldt, 1, &src[base + dim + h * dh..], ld3, 1, T::one(), &mut dqkv[base + h * dh..], ld3, 1);
            T::gemm(tokens, tokens, dh, scale, &da, 1, ldt, &src[base + h * dh..], ld3, 1, T::one(), &mut dqkv[base + dim + h * dh..], ld3, 1);
        }
    }
    Tensor::from_vec(qkv.shape(), dqkv).unwrap()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044_715);
    let three = T::from_f64_lossy(3.0);
    let x2 = x * x;
    let inner = c * (x + a * x2 * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * a * x2);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}
