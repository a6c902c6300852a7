//! Forward kernels shared by eager execution and the tape.
//!
//! Every reduction runs in a fixed order so results do not depend on how a
//! caller batches work.

use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Dot product with eight independent accumulators, combined pairwise.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `c += a[0]·b[0] + a[1]·b[1] + a[2]·b[2] + a[3]·b[3]`, adding the terms to
/// each element in that order.
#[inline]
pub(crate) fn axpy4_generic<T: Real>(c: &mut [T], a: [T; 4], b: [&[T]; 4]) {
    for ((((cv, &x0), &x1), &x2), &x3) in c.iter_mut().zip(b[0]).zip(b[1]).zip(b[2]).zip(b[3]) {
        let mut v = *cv;
        v += a[0] * x0;
        v += a[1] * x1;
        v += a[2] * x2;
        v += a[3] * x3;
        *cv = v;
    }
}

/// SSE version of [`axpy4_generic`] for `f32`.
#[cfg(target_arch = "x86_64")]
#[inline]
pub(crate) fn axpy4_f32(c: &mut [f32], a: [f32; 4], b: [&[f32]; 4]) {
    use core::arch::x86_64::{_mm_add_ps, _mm_loadu_ps, _mm_mul_ps, _mm_set1_ps, _mm_storeu_ps};
    let n = c.len();
    for r in b {
        assert!(r.len() >= n);
    }
    let full = n / 4 * 4;
    // SAFETY: SSE is part of the x86_64 baseline. Every access covers
    // j..j + 4 with j + 4 <= full <= the length of c and of each b row.
    unsafe {
        let s = [_mm_set1_ps(a[0]), _mm_set1_ps(a[1]), _mm_set1_ps(a[2]), _mm_set1_ps(a[3])];
        let mut j = 0;
        while j < full {
            let mut v = _mm_loadu_ps(c.as_ptr().add(j));
            for r in 0..4 {
                v = _mm_add_ps(v, _mm_mul_ps(s[r], _mm_loadu_ps(b[r].as_ptr().add(j))));
            }
            _mm_storeu_ps(c.as_mut_ptr().add(j), v);
            j += 4;
        }
    }
    axpy4_generic(&mut c[full..], a, [&b[0][full..], &b[1][full..], &b[2][full..], &b[3][full..]]);
}

/// `c_row += Σ_p a[p] · b_rows[p]`, applying the terms to each element in
/// increasing `p`, four rows per pass.
#[inline]
fn axpy_rows<T: Real>(c_row: &mut [T], a: &[T], b: &[T], n: usize) {
    let k = a.len();
    let c_row = &mut c_row[..n];
    let mut p = 0;
    while p + 4 <= k {
        let rows = [
            &b[p * n..(p + 1) * n],
            &b[(p + 1) * n..(p + 2) * n],
            &b[(p + 2) * n..(p + 3) * n],
            &b[(p + 3) * n..(p + 4) * n],
        ];
        T::axpy4(c_row, [a[p], a[p + 1], a[p + 2], a[p + 3]], rows);
        p += 4;
    }
    for p in p..k {
        let av = a[p];
        for (cv, &bv) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *cv += av * bv;
        }
    }
}

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        axpy_rows(&mut c[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], b, n);
    }
}

/// Four dot products against one shared `b`; each result is bitwise equal
/// to [`dot`] of the same pair.
#[inline]
pub(crate) fn dot4_generic<T: Real>(a: [&[T]; 4], b: &[T]) -> [T; 4] {
    let mut acc = [[T::zero(); LANES]; 4];
    let full = b.len() / LANES * LANES;
    let mut p = 0;
    while p < full {
        let y = &b[p..p + LANES];
        for r in 0..4 {
            let x = &a[r][p..p + LANES];
            for l in 0..LANES {
                acc[r][l] += x[l] * y[l];
            }
        }
        p += LANES;
    }
    finish4(&acc, a, b, full)
}

#[inline]
fn finish4<T: Real>(acc: &[[T; LANES]; 4], a: [&[T]; 4], b: &[T], full: usize) -> [T; 4] {
    let mut out = [T::zero(); 4];
    for r in 0..4 {
        let c = &acc[r];
        let mut s = ((c[0] + c[1]) + (c[2] + c[3])) + ((c[4] + c[5]) + (c[6] + c[7]));
        for q in full..b.len() {
            s += a[r][q] * b[q];
        }
        out[r] = s;
    }
    out
}

/// SSE version of [`dot4_generic`] for `f32`. Lanes 0..4 and 4..8 live in
/// two registers per row; separate multiply and add keep rounding identical.
#[cfg(target_arch = "x86_64")]
#[inline]
pub(crate) fn dot4_f32(a: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
    use core::arch::x86_64::{__m128, _mm_add_ps, _mm_loadu_ps, _mm_mul_ps, _mm_setzero_ps, _mm_storeu_ps};
    for r in a {
        assert!(r.len() >= b.len());
    }
    let full = b.len() / LANES * LANES;
    // SAFETY: SSE is part of the x86_64 baseline. Every load and store
    // touches p..p + 8 with p + 8 <= full, within each slice and array.
    let acc = unsafe {
        let mut lo: [__m128; 4] = [_mm_setzero_ps(); 4];
        let mut hi: [__m128; 4] = [_mm_setzero_ps(); 4];
        let mut p = 0;
        while p < full {
            let y0 = _mm_loadu_ps(b.as_ptr().add(p));
            let y1 = _mm_loadu_ps(b.as_ptr().add(p + 4));
            for r in 0..4 {
                let x = a[r].as_ptr().add(p);
                lo[r] = _mm_add_ps(lo[r], _mm_mul_ps(_mm_loadu_ps(x), y0));
                hi[r] = _mm_add_ps(hi[r], _mm_mul_ps(_mm_loadu_ps(x.add(4)), y1));
            }
            p += LANES;
        }
        let mut acc = [[0.0f32; LANES]; 4];
        for r in 0..4 {
            _mm_storeu_ps(acc[r].as_mut_ptr(), lo[r]);
            _mm_storeu_ps(acc[r].as_mut_ptr().add(4), hi[r]);
        }
        acc
    };
    finish4(&acc, a, b, full)
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let rows = [
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        ];
        for j in 0..n {
            let d = T::dot4(rows, &b[j * k..(j + 1) * k]);
            for r in 0..4 {
                c[(i + r) * n + j] = d[r];
            }
        }
        i += 4;
    }
    for i in i..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    let mut col = Vec::with_capacity(k);
    for i in 0..m {
        col.clear();
        col.extend((0..k).map(|p| a[p * m + i]));
        axpy_rows(&mut c[i * n..(i + 1) * n], &col, b, n);
    }
}

fn out_shape(lead: &[usize], last: usize) -> Vec<usize> {
    let mut s = lead.to_vec();
    s.push(last);
    s
}

/// Matrix product `a · b` where `a` is `[..., k]` (leading dims flattened)
/// and `b` is `[k, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.last_dim(), b.shape()[1]);
    let mut c = vec![T::zero(); m * n];
    mm_nn(a.data(), b.data(), &mut c, m, k, n);
    Ok(Tensor::from_parts(out_shape(&a.shape()[..a.rank() - 1], n), c))
}

/// `a · bᵀ` with `a` as `[..., k]` and `b` as `[n, k]`; the Linear-layer
/// product for weights stored `[out, in]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.shape()[1] {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.last_dim(), b.shape()[0]);
    let mut c = vec![T::zero(); m * n];
    mm_nt(a.data(), b.data(), &mut c, m, k, n);
    Ok(Tensor::from_parts(out_shape(&a.shape()[..a.rank() - 1], n), c))
}

/// `aᵀ · b` with `a` as `[..., m]` and `b` as `[..., n]` sharing the same
/// flattened row count; yields `[m, n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 1 || b.rank() < 1 || a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows(), a.last_dim(), b.last_dim());
    let mut c = vec![T::zero(); m * n];
    mm_tn(a.data(), b.data(), &mut c, k, m, n);
    Ok(Tensor::from_parts(vec![m, n], c))
}

fn check_norm_params<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: Option<&Tensor<T>>,
) -> Result<()> {
    let h = x.last_dim();
    if gamma.len() != h {
        return Err(Error::shape(op, x.shape(), gamma.shape()));
    }
    if let Some(b) = beta {
        if b.len() != h {
            return Err(Error::shape(op, x.shape(), b.shape()));
        }
    }
    Ok(())
}

/// LayerNorm over the last dimension with population variance. Also returns
/// the per-row `(mean, 1/sqrt(var + eps))` pairs the backward pass needs.
pub(crate) fn layernorm_rows<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: Option<&[T]>,
    eps: T,
) -> (Tensor<T>, Vec<(T, T)>) {
    let h = x.last_dim();
    let rows = x.rows();
    let mut out = Vec::with_capacity(x.len());
    let mut saved = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = super::tensor::mean_of(row);
        let var = super::tensor::var_of(row, mean);
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..h {
            let y = (row[j] - mean) * rstd * gamma[j];
            out.push(match beta {
                Some(b) => y + b[j],
                None => y,
            });
        }
        saved.push((mean, rstd));
    }
    (Tensor::from_parts(x.shape().to_vec(), out), saved)
}

pub fn layernorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: Option<&Tensor<T>>,
    eps: T,
) -> Result<Tensor<T>> {
    check_norm_params("layernorm", x, gamma, beta)?;
    Ok(layernorm_rows(x, gamma.data(), beta.map(|b| b.data()), eps).0)
}

/// RMSNorm rows plus the saved `1/sqrt(mean(x²) + eps)` per row.
pub(crate) fn rmsnorm_rows<T: Real>(x: &Tensor<T>, gamma: &[T], eps: T) -> (Tensor<T>, Vec<T>) {
    let h = x.last_dim();
    let rows = x.rows();
    let mut out = Vec::with_capacity(x.len());
    let mut saved = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_usize(h);
        let rinv = T::one() / (ms + eps).sqrt();
        for j in 0..h {
            out.push(row[j] * rinv * gamma[j]);
        }
        saved.push(rinv);
    }
    (Tensor::from_parts(x.shape().to_vec(), out), saved)
}

pub fn rmsnorm_forward<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    check_norm_params("rmsnorm", x, gamma, None)?;
    Ok(rmsnorm_rows(x, gamma.data(), eps).0)
}

/// In-place softmax of one row, max-subtracted.
pub fn softmax_rows<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).libm_exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", x.shape(), &[axis]));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = x.clone();
    let mut lane = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..n {
                lane[k] = x.data()[(o * n + k) * inner + i];
            }
            softmax_rows(&mut lane);
            for k in 0..n {
                out.data_mut()[(o * n + k) * inner + i] = lane[k];
            }
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).libm_tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).libm_tanh();
    let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Causal multi-head self-attention over `[batch, seq, hidden]` projections.
/// Returns the attended values and the `[batch, heads, seq, seq]` attention
/// probabilities (zero above the diagonal).
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let d = hidden / heads;
    let scale = T::one() / T::from_usize(d).sqrt();
    let mut out = vec![T::zero(); batch * seq * hidden];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut qh = vec![T::zero(); seq * d];
    let mut kh = vec![T::zero(); seq * d];
    let mut vh = vec![T::zero(); seq * d];
    let mut oh = vec![T::zero(); seq * d];
    for b in 0..batch {
        for h in 0..heads {
            gather_head(q, &mut qh, b, h, seq, hidden, d);
            gather_head(k, &mut kh, b, h, seq, hidden, d);
            gather_head(v, &mut vh, b, h, seq, hidden, d);
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                for j in 0..=i {
                    row[j] = dot(&qh[i * d..(i + 1) * d], &kh[j * d..(j + 1) * d]) * scale;
                }
                softmax_rows(&mut row[..=i]);
            }
            oh.iter_mut().for_each(|o| *o = T::zero());
            mm_nn(p, &vh, &mut oh, seq, seq, d);
            scatter_head(&oh, &mut out, b, h, seq, hidden, d);
        }
    }
    (out, probs)
}

pub(crate) fn gather_head<T: Real>(
    src: &[T],
    dst: &mut [T],
    b: usize,
    h: usize,
    seq: usize,
    hidden: usize,
    d: usize,
) {
    for t in 0..seq {
        let base = (b * seq + t) * hidden + h * d;
        dst[t * d..(t + 1) * d].copy_from_slice(&src[base..base + d]);
    }
}

pub(crate) fn scatter_head<T: Real>(
    src: &[T],
    dst: &mut [T],
    b: usize,
    h: usize,
    seq: usize,
    hidden: usize,
    d: usize,
) {
    for t in 0..seq {
        let base = (b * seq + t) * hidden + h * d;
        dst[base..base + d].copy_from_slice(&src[t * d..(t + 1) * d]);
    }
}

/// Per-channel mean and population variance over all leading positions.
/// Accumulates in `f64` regardless of `T`.
pub(crate) fn channel_mean_var<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let c = x.last_dim();
    let rows = x.rows();
    let mut mean = vec![0.0f64; c];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.as_f64();
        }
    }
    let n = rows.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}
