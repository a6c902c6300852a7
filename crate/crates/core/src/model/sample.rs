use alloc::vec;
use alloc::vec::Vec;

use super::transformer::TransformerModel;
use crate::error::{Error, Result};
use crate::numerics::{dot, gelu, softmax_rows, Real, Rng, Tensor};

/// Next-token selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    Greedy,
    /// Sample from `softmax(logits / t)`; `t <= 0` degenerates to greedy.
    Temperature(f64),
    /// Sample among the `k` most likely tokens at temperature `t`.
    TopK { k: usize, temperature: f64 },
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl SamplingPolicy {
    pub fn choose<T: Real>(&self, logits: &[T], rng: &mut Rng) -> usize {
        match *self {
            SamplingPolicy::Greedy => argmax(logits),
            SamplingPolicy::Temperature(t) => {
                if t <= 0.0 {
                    return argmax(logits);
                }
                let idx: Vec<usize> = (0..logits.len()).collect();
                sample_from(logits, &idx, t, rng)
            }
            SamplingPolicy::TopK { k, temperature } => {
                if temperature <= 0.0 || k <= 1 {
                    return argmax(logits);
                }
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                // stable: equal logits keep ascending id order
                idx.sort_by(|&a, &b| {
                    logits[b]
                        .partial_cmp(&logits[a])
                        .unwrap_or(core::cmp::Ordering::Equal)
                });
                idx.truncate(k.min(logits.len()));
                sample_from(logits, &idx, temperature, rng)
            }
        }
    }
}

fn sample_from<T: Real>(logits: &[T], idx: &[usize], t: f64, rng: &mut Rng) -> usize {
    let mut p: Vec<f64> = idx.iter().map(|&i| logits[i].as_f64() / t).collect();
    softmax_rows(&mut p);
    let u = rng.uniform();
    let mut acc = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            return idx[j];
        }
    }
    // rounding left u above the final cumulative sum
    idx[p.iter().rposition(|&v| v > 0.0).unwrap_or(0)]
}

/// Incremental decoder holding per-block keys and values. Produces the same
/// logits as a full forward over the prefix (without activation quantization,
/// bit for bit).
pub struct DecodeCache<'m, T: Real> {
    model: &'m TransformerModel<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    pos: usize,
}

impl<'m, T: Real> DecodeCache<'m, T> {
    pub fn new(model: &'m TransformerModel<T>) -> Self {
        let l = model.n_layers();
        Self {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<T>> {
        let m = self.model;
        let cfg = &m.config;
        if self.pos >= cfg.max_seq_len {
            return Err(Error::contract("decode position exceeds max_seq_len"));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::input(alloc::format!("token id {token} out of range")));
        }
        let h = cfg.hidden;
        let heads = cfg.n_heads;
        let d = h / heads;
        let scale = T::one() / T::from_usize(d).sqrt();
        let eps = T::from_f64(cfg.eps);
        let a = m.act_bits;
        let x: Vec<T> = m
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(m.pos_emb.row(self.pos))
            .map(|(&t, &p)| t + p)
            .collect();
        let mut x = Tensor::from_parts(vec![1, 1, h], x);
        let t_len = self.pos + 1;
        for (l, b) in m.blocks.iter().enumerate() {
            let h1 = b.norm1.forward(&x, eps)?;
            let q = b.wq.forward(&h1, a)?;
            let k = b.wk.forward(&h1, a)?;
            let v = b.wv.forward(&h1, a)?;
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
            let (ks, vs) = (&self.keys[l], &self.values[l]);
            let mut att = vec![T::zero(); h];
            let mut p = vec![T::zero(); t_len];
            for hd in 0..heads {
                let qh = &q.data()[hd * d..(hd + 1) * d];
                for j in 0..t_len {
                    p[j] = dot(qh, &ks[j * h + hd * d..j * h + (hd + 1) * d]) * scale;
                }
                softmax_rows(&mut p);
                let out = &mut att[hd * d..(hd + 1) * d];
                for j in 0..t_len {
                    let vj = &vs[j * h + hd * d..j * h + (hd + 1) * d];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
            let att = Tensor::from_parts(vec![1, 1, h], att);
            let o = b.wo.forward(&att, a)?;
            let x1 = x.add(&o)?;
            let h2 = b.norm2.forward(&x1, eps)?;
            let u = b.w_up.forward(&h2, a)?;
            let g = u.map(gelu);
            let dn = b.w_down.forward(&g, a)?;
            x = x1.add(&dn)?;
        }
        self.pos += 1;
        Ok(m.head(&x)?.into_data())
    }
}

/// Returns `prompt` followed by `n_tokens` generated ids.
pub fn sample<T: Real>(
    model: &TransformerModel<T>,
    prompt: &[u32],
    n_tokens: usize,
    policy: SamplingPolicy,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::input("prompt must not be empty"));
    }
    if n_tokens == 0 {
        return Err(Error::input("n_tokens must be at least 1"));
    }
    if prompt.len() + n_tokens > model.config.max_seq_len {
        return Err(Error::contract("prompt plus generated tokens exceed max_seq_len"));
    }
    let mut cache = DecodeCache::new(model);
    let mut out = prompt.to_vec();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = cache.step(t)?;
    }
    for i in 0..n_tokens {
        let next = policy.choose(&logits, rng) as u32;
        out.push(next);
        if i + 1 < n_tokens {
            logits = cache.step(next)?;
        }
    }
    Ok(out)
}
