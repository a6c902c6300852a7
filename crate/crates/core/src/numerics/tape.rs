//! Reverse-mode tape restricted to the primitives a pre-norm transformer
//! block, its training loss and the distribution-matching losses need.
//!
//! Leaves are either watched parameters or constants. A node only carries a
//! gradient when one of its inputs does, so frozen weights never get one.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, attention_forward, gather_head, mm_nn, mm_nt, mm_tn, scatter_head};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    MatMulNt(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        saved: Vec<(T, T)>,
    },
    RmsNorm {
        x: Var,
        gamma: Var,
        saved: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ChannelStats(Var),
    L1(Var, Var),
    Mse(Var, Var),
    Kl {
        f: Var,
        q: Var,
        log_pf: Vec<T>,
        log_pq: Vec<T>,
        row_kl: Vec<T>,
    },
    /// Fake quantization with a straight-through gradient.
    FakeQuant(Var),
}

/// Records forward values so that [`GradTape::backward`] can return
/// gradients for the watched parameters.
pub struct GradTape<T: Real> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    watched: Vec<Var>,
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss keyed by watched parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            watched: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn watched(&self) -> &[Var] {
        &self.watched
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// A parameter whose gradient [`GradTape::backward`] reports.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.watched.push(v);
        v
    }

    /// A frozen input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Elementwise sum. `b` may also be a block of whole rows that is
    /// repeated over `a` (e.g. positional embeddings over a batch).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = va.shape() != vb.shape();
        if broadcast
            && (vb.is_empty() || va.len() % vb.len() != 0 || va.last_dim() != vb.last_dim())
        {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let n = vb.len();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vb.data()[i % n];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// `x · wᵀ` for a Linear weight `w` stored `[out, in]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(x), self.value(w))?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::MatMulNt(x, w), ng))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: T) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gamma));
        let vb = beta.map(|b| self.value(b));
        if vg.len() != vx.last_dim() || vb.is_some_and(|b| b.len() != vx.last_dim()) {
            return Err(Error::shape("layernorm", vx.shape(), vg.shape()));
        }
        let (out, saved) = ops::layernorm_rows(vx, vg.data(), vb.map(|b| b.data()), eps);
        let ng = self.ng(x) || self.ng(gamma) || beta.is_some_and(|b| self.ng(b));
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            ng,
        ))
    }

    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gamma));
        if vg.len() != vx.last_dim() {
            return Err(Error::shape("rmsnorm", vx.shape(), vg.shape()));
        }
        let (out, saved) = ops::rmsnorm_rows(vx, vg.data(), eps);
        let ng = self.ng(x) || self.ng(gamma);
        Ok(self.push(out, Op::RmsNorm { x, gamma, saved }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Causal multi-head attention; `q`, `k`, `v` are `[batch, seq, hidden]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let vq = self.value(q);
        if vq.rank() != 3 || self.value(k).shape() != vq.shape() || self.value(v).shape() != vq.shape()
        {
            return Err(Error::shape("attention", vq.shape(), self.value(k).shape()));
        }
        let (batch, seq, hidden) = (vq.shape()[0], vq.shape()[1], vq.shape()[2]);
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::contract("attention heads must divide the hidden size"));
        }
        let (out, probs) = attention_forward(
            vq.data(),
            self.value(k).data(),
            self.value(v).data(),
            batch,
            seq,
            hidden,
            heads,
        );
        let out = Tensor::from_parts(vq.shape().to_vec(), out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`, shaped `[ids.len(), cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::shape("gather", vt.shape(), &[2]));
        }
        let (rows, cols) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::input(alloc::format!("row id {id} out of range 0..{rows}")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean next-token cross-entropy of `logits` (`[..., vocab]`) against
    /// one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let vocab = vl.last_dim();
        if vl.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::input(alloc::format!("target {t} out of range 0..{vocab}")));
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            ops::softmax_rows(row);
            total -= libm::log(row[t].as_f64().max(f64::MIN_POSITIVE));
        }
        let loss = T::from_f64(total / targets.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-channel statistics of `x` over all leading positions, as a
    /// `[2, C]` tensor: row 0 the means, row 1 the population variances.
    pub fn channel_stats(&mut self, x: Var) -> Var {
        let (mean, var) = ops::channel_mean_var(self.value(x));
        let c = mean.len();
        let data = mean.into_iter().chain(var).map(T::from_f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![2, c], data), Op::ChannelStats(x), ng)
    }

    /// `Σ |a − b|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let s = d.data().iter().map(|v| v.abs()).sum::<T>();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), ng))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let s = d.data().iter().map(|v| *v * *v).sum::<T>() / T::from_usize(d.len().max(1));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    /// Mean over rows of `KL(softmax(f) ‖ softmax(q))`, softmax over the last
    /// dimension.
    pub fn kl(&mut self, f: Var, q: Var) -> Result<Var> {
        let (vf, vq) = (self.value(f), self.value(q));
        if vf.shape() != vq.shape() {
            return Err(Error::shape("kl", vf.shape(), vq.shape()));
        }
        let c = vf.last_dim();
        let rows = vf.rows();
        let log_pf = log_softmax(vf);
        let log_pq = log_softmax(vq);
        let mut row_kl = Vec::with_capacity(rows);
        for r in 0..rows {
            let (lf, lq) = (&log_pf[r * c..(r + 1) * c], &log_pq[r * c..(r + 1) * c]);
            row_kl.push(lf.iter().zip(lq).map(|(&a, &b)| a.libm_exp() * (a - b)).sum::<T>());
        }
        let loss = row_kl.iter().copied().sum::<T>() / T::from_usize(rows.max(1));
        let ng = self.ng(f) || self.ng(q);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kl {
                f,
                q,
                log_pf,
                log_pq,
                row_kl,
            },
            ng,
        ))
    }

    /// 8-bit per-tensor fake quantization; the gradient passes straight
    /// through.
    pub fn fake_quant(&mut self, x: Var, bits: u8) -> Result<Var> {
        let out = crate::quant::quantize_activations(self.value(x), bits)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::FakeQuant(x), ng))
    }

    /// Gradients of the scalar `loss` for every watched parameter, visiting
    /// the recorded operations in exact reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.ops.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.watched.is_empty() {
            return Err(Error::contract("backward with no watched parameters"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.ops.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for &w in &self.watched {
            let g = grads[w.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(w).shape()));
            out.insert(w, g);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out_val = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let vb = self.value(*b);
                    let n = vb.len();
                    let mut gb = vec![T::zero(); n];
                    for (k, &gv) in g.data().iter().enumerate() {
                        gb[k % n] += gv;
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b)).expect("shape"));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a)).expect("shape"));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape).expect("reshape"));
            }
            Op::MatMulNt(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (vx.rows(), vx.last_dim(), vw.shape()[0]);
                if self.ng(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    mm_nn(g.data(), vw.data(), &mut gx, m, n, k);
                    self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
                if self.ng(*w) {
                    let mut gw = vec![T::zero(); n * k];
                    mm_tn(g.data(), vx.data(), &mut gw, m, n, k);
                    self.accumulate(grads, *w, Tensor::from_parts(vw.shape().to_vec(), gw));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let vx = self.value(*x);
                let gam = self.value(*gamma).data();
                let h = vx.last_dim();
                let hf = T::from_usize(h);
                let mut gx = vec![T::zero(); vx.len()];
                let mut gg = vec![T::zero(); h];
                let mut gb = vec![T::zero(); h];
                let mut xhat = vec![T::zero(); h];
                let mut dxhat = vec![T::zero(); h];
                for (r, &(mean, rstd)) in saved.iter().enumerate() {
                    let row = vx.row(r);
                    let gr = g.row(r);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..h {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / hf, s2 / hf);
                    for j in 0..h {
                        gx[r * h + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![h], gg));
                if let Some(b) = beta {
                    self.accumulate(grads, *b, Tensor::from_parts(vec![h], gb));
                }
            }
            Op::RmsNorm { x, gamma, saved } => {
                let vx = self.value(*x);
                let gam = self.value(*gamma).data();
                let h = vx.last_dim();
                let hf = T::from_usize(h);
                let mut gx = vec![T::zero(); vx.len()];
                let mut gg = vec![T::zero(); h];
                for (r, &rinv) in saved.iter().enumerate() {
                    let row = vx.row(r);
                    let gr = g.row(r);
                    let mut s = T::zero();
                    for j in 0..h {
                        gg[j] += gr[j] * row[j] * rinv;
                        s += gr[j] * gam[j] * row[j];
                    }
                    let c = rinv * rinv * rinv * s / hf;
                    for j in 0..h {
                        gx[r * h + j] = rinv * gr[j] * gam[j] - row[j] * c;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![h], gg));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let gx = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * ops::gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, g);
                let shape = out_val.shape().to_vec();
                self.accumulate(grads, *q, Tensor::from_parts(shape.clone(), gq));
                self.accumulate(grads, *k, Tensor::from_parts(shape.clone(), gk));
                self.accumulate(grads, *v, Tensor::from_parts(shape, gv));
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.shape()[1];
                let mut gt = vec![T::zero(); vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in gt[id * cols..(id + 1) * cols].iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(vt.shape().to_vec(), gt));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vl = self.value(*logits);
                let vocab = vl.last_dim();
                let scale = g.data()[0] / T::from_usize(targets.len());
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::from_parts(vl.shape().to_vec(), gl));
            }
            Op::ChannelStats(x) => {
                let vx = self.value(*x);
                let c = vx.last_dim();
                let n = T::from_usize(vx.rows().max(1));
                let (gmean, gvar) = g.data().split_at(c);
                let mean = &out_val.data()[..c];
                let two = T::from_f64(2.0);
                let mut gx = Vec::with_capacity(vx.len());
                for r in 0..vx.rows() {
                    for (j, &xv) in vx.row(r).iter().enumerate() {
                        gx.push((gmean[j] + gvar[j] * two * (xv - mean[j])) / n);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::L1(a, b) => {
                let gv = g.data()[0];
                let sign = self
                    .value(*a)
                    .sub(self.value(*b))
                    .expect("shape")
                    .map(|d| signum0(d) * gv);
                if self.ng(*b) {
                    self.accumulate(grads, *b, sign.scale(-T::one()));
                }
                self.accumulate(grads, *a, sign);
            }
            Op::Mse(a, b) => {
                let d = self.value(*a).sub(self.value(*b)).expect("shape");
                let s = T::from_f64(2.0) * g.data()[0] / T::from_usize(d.len().max(1));
                let ga = d.scale(s);
                if self.ng(*b) {
                    self.accumulate(grads, *b, ga.scale(-T::one()));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Kl {
                f,
                q,
                log_pf,
                log_pq,
                row_kl,
            } => {
                let vf = self.value(*f);
                let c = vf.last_dim();
                let rows = vf.rows();
                let s = g.data()[0] / T::from_usize(rows.max(1));
                if self.ng(*q) {
                    let gq = log_pq
                        .iter()
                        .zip(log_pf)
                        .map(|(&lq, &lf)| (lq.libm_exp() - lf.libm_exp()) * s)
                        .collect();
                    self.accumulate(grads, *q, Tensor::from_parts(vf.shape().to_vec(), gq));
                }
                if self.ng(*f) {
                    let mut gf = Vec::with_capacity(vf.len());
                    for r in 0..rows {
                        for j in 0..c {
                            let (lf, lq) = (log_pf[r * c + j], log_pq[r * c + j]);
                            gf.push(lf.libm_exp() * (lf - lq - row_kl[r]) * s);
                        }
                    }
                    self.accumulate(grads, *f, Tensor::from_parts(vf.shape().to_vec(), gf));
                }
            }
            Op::FakeQuant(x) => self.accumulate(grads, *x, g.clone()),
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let hidden = self.value(q).last_dim();
        let d = hidden / heads;
        let scale = T::one() / T::from_usize(d).sqrt();
        let n = batch * seq * hidden;
        let (mut gq, mut gk, mut gv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        let mut qh = vec![T::zero(); seq * d];
        let mut kh = vec![T::zero(); seq * d];
        let mut vh = vec![T::zero(); seq * d];
        let mut goh = vec![T::zero(); seq * d];
        let mut dp = vec![T::zero(); seq * seq];
        let mut buf = vec![T::zero(); seq * d];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(vq, &mut qh, b, h, seq, hidden, d);
                gather_head(vk, &mut kh, b, h, seq, hidden, d);
                gather_head(vv, &mut vh, b, h, seq, hidden, d);
                gather_head(g.data(), &mut goh, b, h, seq, hidden, d);
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];

                // dV = Pᵀ · dO
                buf.iter_mut().for_each(|x| *x = T::zero());
                mm_tn(p, &goh, &mut buf, seq, seq, d);
                scatter_head(&buf, &mut gv, b, h, seq, hidden, d);

                // dP = dO · Vᵀ, then softmax backward into dS (stored in dp)
                mm_nt(&goh, &vh, &mut dp, seq, d, seq);
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let mut s = T::zero();
                    for j in 0..=i {
                        s += pr[j] * dr[j];
                    }
                    for j in 0..seq {
                        dr[j] = if j <= i { pr[j] * (dr[j] - s) * scale } else { T::zero() };
                    }
                }

                // dQ = dS · K
                buf.iter_mut().for_each(|x| *x = T::zero());
                mm_nn(&dp, &kh, &mut buf, seq, seq, d);
                scatter_head(&buf, &mut gq, b, h, seq, hidden, d);

                // dK = dSᵀ · Q
                buf.iter_mut().for_each(|x| *x = T::zero());
                mm_tn(&dp, &qh, &mut buf, seq, seq, d);
                scatter_head(&buf, &mut gk, b, h, seq, hidden, d);
            }
        }
        (gq, gk, gv)
    }
}

fn signum0<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Row-wise log-softmax over the last dimension.
pub(crate) fn log_softmax<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let c = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).libm_exp()).sum::<T>().libm_ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
        debug_assert_eq!(out.len(), (r + 1) * c);
    }
    out
}
