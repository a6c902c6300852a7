//! Hessian-based weight reconstruction: columns are quantized one at a time
//! and each column's rounding error is spread over the not-yet-quantized
//! columns through the inverse Hessian of the layer's inputs.

use alloc::vec;
use alloc::vec::Vec;

use super::config::{qmax, QuantConfig};
use super::linalg::{cholesky_upper, spd_inverse};
use super::rtn::{absmax_scale, quantize_value, QuantizedLinear};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Columns processed together before the trailing columns are updated.
pub const GPTQ_BLOCK_SIZE: usize = 32;

/// `2·Σ xxᵀ` over calibration positions, damped on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    dim: usize,
    h: Vec<f64>,
    /// Number of activation rows accumulated.
    pub n_rows: usize,
    pub damping_frac: f64,
    /// Value added to every diagonal entry.
    pub damping: f64,
}

impl HessianEstimate {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.h
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim + j]
    }

    /// Damped Hessian built directly from a matrix (used by tests and
    /// synthetic experiments).
    pub fn from_matrix(dim: usize, h: Vec<f64>, damping_frac: f64) -> Result<Self> {
        if h.len() != dim * dim {
            return Err(Error::shape("hessian", &[dim, dim], &[h.len()]));
        }
        let mut est = Self {
            dim,
            h,
            n_rows: 0,
            damping_frac,
            damping: 0.0,
        };
        est.apply_damping();
        Ok(est)
    }

    fn apply_damping(&mut self) {
        let n = self.dim;
        let mean_diag = (0..n).map(|i| self.h[i * n + i]).sum::<f64>() / n as f64;
        // All-zero activations leave nothing to scale by; fall back to unit scale.
        let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        self.damping = self.damping_frac * base;
        for i in 0..n {
            self.h[i * n + i] += self.damping;
        }
    }
}

/// Accumulates `H = 2·Σ xxᵀ` over every row of every batch, then adds
/// `damping_frac · mean(diag H)` to the diagonal.
pub fn estimate_hessian<'a, T: Real>(
    activations: impl IntoIterator<Item = &'a Tensor<T>>,
    damping_frac: f64,
) -> Result<HessianEstimate> {
    let mut dim = None;
    let mut h: Vec<f64> = Vec::new();
    let mut n_rows = 0;
    let mut row64 = Vec::new();
    for x in activations {
        let k = x.last_dim();
        match dim {
            None => {
                dim = Some(k);
                h = vec![0.0; k * k];
            }
            Some(d) if d != k => return Err(Error::shape("estimate_hessian", &[d], x.shape())),
            _ => {}
        }
        for r in 0..x.rows() {
            row64.clear();
            row64.extend(x.row(r).iter().map(|v| core::f64::consts::SQRT_2 * v.as_f64()));
            // lower triangle, mirrored below
            for i in 0..k {
                let xi = row64[i];
                if xi == 0.0 {
                    continue;
                }
                let hrow = &mut h[i * k..i * k + i + 1];
                for (hv, &xj) in hrow.iter_mut().zip(&row64[..=i]) {
                    *hv += xi * xj;
                }
            }
            n_rows += 1;
        }
    }
    let Some(dim) = dim else {
        return Err(Error::contract("estimate_hessian needs at least one activation batch"));
    };
    if n_rows == 0 {
        return Err(Error::contract("estimate_hessian got only empty batches"));
    }
    for i in 0..dim {
        for j in 0..i {
            h[j * dim + i] = h[i * dim + j];
        }
    }
    let mut est = HessianEstimate {
        dim,
        h,
        n_rows,
        damping_frac,
        damping: 0.0,
    };
    est.apply_damping();
    Ok(est)
}

/// Quantizes `w` (`[out, in]`) column by column with inverse-Hessian error
/// compensation. Scales follow `cfg.granularity`; with groups, each group's
/// scales are taken from the partially updated weights when the group's
/// first column is reached.
pub fn gptq_quantize<T: Real>(
    w: &Tensor<T>,
    hessian: &HessianEstimate,
    cfg: &QuantConfig,
) -> Result<QuantizedLinear> {
    if w.rank() != 2 {
        return Err(Error::shape("gptq_quantize", w.shape(), &[2]));
    }
    if !matches!(cfg.bits, 2 | 3 | 4 | 8) {
        return Err(Error::contract("gptq_quantize needs bits in {2, 3, 4, 8}"));
    }
    let (out, n) = (w.shape()[0], w.shape()[1]);
    if hessian.dim() != n {
        return Err(Error::shape("gptq_quantize", w.shape(), &[hessian.dim(), hessian.dim()]));
    }
    cfg.check_shape(n)?;
    let q = qmax(cfg.bits);
    let g = cfg.granularity.group_size(n);
    let groups = n / g;

    // Column-major working copy: wt[col * out + row].
    let mut wt = vec![0.0f64; n * out];
    for o in 0..out {
        for i in 0..n {
            wt[i * out + o] = w.data()[o * n + i].as_f64();
        }
    }
    let mut h = hessian.matrix().to_vec();
    for i in 0..n {
        if h[i * n + i] == 0.0 {
            h[i * n + i] = 1.0;
            wt[i * out..(i + 1) * out].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let hinv = spd_inverse(&h, n)?;
    let u = cholesky_upper(&hinv, n)?;

    let mut scales = vec![0.0f32; out * groups];
    let mut codes = vec![0i8; out * n];
    let mut col32 = vec![0.0f32; out];
    let mut err_block = vec![0.0f64; GPTQ_BLOCK_SIZE * out];

    for start in (0..n).step_by(GPTQ_BLOCK_SIZE) {
        let end = (start + GPTQ_BLOCK_SIZE).min(n);
        for i in start..end {
            if i % g == 0 {
                let gi = i / g;
                for o in 0..out {
                    let vals = (i..i + g).map(|c| wt[c * out + o] as f32);
                    scales[o * groups + gi] = absmax_scale(vals, q);
                }
            }
            let gi = i / g;
            let d = u[i * n + i];
            for o in 0..out {
                col32[o] = wt[i * out + o] as f32;
            }
            let erow = &mut err_block[(i - start) * out..(i - start + 1) * out];
            for o in 0..out {
                let s = scales[o * groups + gi];
                let c = quantize_value(col32[o], s, q);
                codes[o * n + i] = c;
                let deq = (c as f32 * s) as f64;
                erow[o] = (wt[i * out + o] - deq) / d;
            }
            // compensate the rest of this block
            for j in i + 1..end {
                let uij = u[i * n + j];
                for (wv, &e) in wt[j * out..(j + 1) * out].iter_mut().zip(erow.iter()) {
                    *wv -= e * uij;
                }
            }
        }
        // lazy update of every later column with the whole block's error
        for j in end..n {
            let col = &mut wt[j * out..(j + 1) * out];
            for i in start..end {
                let uij = u[i * n + j];
                let erow = &err_block[(i - start) * out..(i - start + 1) * out];
                for (wv, &e) in col.iter_mut().zip(erow) {
                    *wv -= e * uij;
                }
            }
        }
    }

    Ok(QuantizedLinear {
        codes: Tensor::from_parts(vec![out, n], codes),
        scales: Tensor::from_parts(vec![out, groups], scales),
        bits: cfg.bits,
        granularity: cfg.granularity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::quant::{rtn_quantize, Granularity};

    #[test]
    fn one_hot_activation() {
        let x = Tensor::new(&[1, 3], vec![0.0f64, 1.0, 0.0]).unwrap();
        let h = estimate_hessian([&x], 0.01).unwrap();
        // 2·e1e1ᵀ has mean diagonal 2/3
        let damp = 0.01 * 2.0 / 3.0;
        assert!((h.damping - damp).abs() < 1e-15);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == 1 && j == 1 { 2.0 } else { 0.0 } + if i == j { damp } else { 0.0 };
                assert!((h.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_stream_is_contract_error() {
        let none: [&Tensor<f32>; 0] = [];
        assert!(matches!(estimate_hessian(none, 0.01), Err(Error::Contract(_))));
    }

    #[test]
    fn symmetric_and_factorizable() {
        let mut rng = Rng::new(3);
        let xs: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::randn(&[5, 12], 1.0, &mut rng)).collect();
        let h = estimate_hessian(xs.iter(), 0.01).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert!((h.get(i, j) - h.get(j, i)).abs() <= 1e-6);
            }
        }
        assert!(super::super::linalg::cholesky_lower(h.matrix(), 12).is_ok());
        // rank-deficient (5 rows < 12 dims) still factorizes thanks to damping
        let zero = Tensor::<f32>::zeros(&[2, 4]);
        let hz = estimate_hessian([&zero], 0.01).unwrap();
        assert!(super::super::linalg::cholesky_lower(hz.matrix(), 4).is_ok());
    }

    #[test]
    fn identity_hessian_matches_rtn() {
        let mut rng = Rng::new(21);
        for &(bits, gran) in &[
            (4, Granularity::PerChannel),
            (2, Granularity::PerGroup(8)),
            (8, Granularity::PerChannel),
        ] {
            let w = Tensor::<f32>::randn(&[7, 16], 1.0, &mut rng);
            let eye = (0..256).map(|i| if i % 17 == 0 { 1.0 } else { 0.0 }).collect();
            let h = HessianEstimate::from_matrix(16, eye, 0.01).unwrap();
            let cfg = QuantConfig::new(bits, gran);
            assert_eq!(gptq_quantize(&w, &h, &cfg).unwrap(), rtn_quantize(&w, &cfg).unwrap());
        }
    }

    #[test]
    fn shape_mismatch() {
        let h = HessianEstimate::from_matrix(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 0.01)
            .unwrap();
        let w = Tensor::<f32>::zeros(&[2, 4]);
        assert!(gptq_quantize(&w, &h, &QuantConfig::default()).is_err());
    }
}
