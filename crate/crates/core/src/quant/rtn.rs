use alloc::vec::Vec;

use super::config::{qmax, Granularity, QuantConfig};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, Real, Tensor};

/// Integer weight codes with symmetric scales (zero-point 0).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    /// `[out, in]`, each in `[-qmax, qmax]`.
    pub codes: Tensor<i8>,
    /// `[out, in / group_size]`.
    pub scales: Tensor<f32>,
    pub bits: u8,
    pub granularity: Granularity,
}

impl QuantizedLinear {
    pub fn out_features(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn group_size(&self) -> usize {
        self.granularity.group_size(self.in_features())
    }

    /// `code * scale` per element.
    pub fn dequantize<T: Real>(&self) -> Tensor<T> {
        let (out, inp) = (self.out_features(), self.in_features());
        let g = self.group_size();
        let groups = inp / g;
        let mut data = Vec::with_capacity(out * inp);
        for o in 0..out {
            for i in 0..inp {
                let s = self.scales.data()[o * groups + i / g];
                let c = self.codes.data()[o * inp + i];
                data.push(T::from_f64((c as f32 * s) as f64));
            }
        }
        Tensor::from_parts(alloc::vec![out, inp], data)
    }
}

/// Symmetric scale for a run of weights: `max|w| / qmax`, or 1 for an
/// all-zero run.
pub(crate) fn absmax_scale(values: impl Iterator<Item = f32>, qmax: i32) -> f32 {
    let m = values.fold(0.0f32, |m, v| m.max(v.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / qmax as f32
    }
}

/// Round half away from zero, then clamp to the symmetric range.
#[inline]
pub(crate) fn quantize_value(w: f32, scale: f32, qmax: i32) -> i8 {
    let r = libm::roundf(w / scale);
    r.clamp(-(qmax as f32), qmax as f32) as i8
}

/// Round-to-nearest quantization of a `[out, in]` weight.
pub fn rtn_quantize<T: Real>(w: &Tensor<T>, cfg: &QuantConfig) -> Result<QuantizedLinear> {
    if w.rank() != 2 {
        return Err(Error::shape("rtn_quantize", w.shape(), &[2]));
    }
    if !matches!(cfg.bits, 2 | 3 | 4 | 8) {
        return Err(Error::contract("rtn_quantize needs bits in {2, 3, 4, 8}"));
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    cfg.check_shape(inp)?;
    let q = qmax(cfg.bits);
    let g = cfg.granularity.group_size(inp);
    let groups = inp / g;
    let w32: Vec<f32> = w.data().iter().map(|v| v.as_f64() as f32).collect();
    let mut scales = Vec::with_capacity(out * groups);
    let mut codes = Vec::with_capacity(out * inp);
    for o in 0..out {
        let row = &w32[o * inp..(o + 1) * inp];
        for chunk in row.chunks(g) {
            let s = absmax_scale(chunk.iter().copied(), q);
            scales.push(s);
            codes.extend(chunk.iter().map(|&v| quantize_value(v, s, q)));
        }
    }
    Ok(QuantizedLinear {
        codes: Tensor::from_parts(alloc::vec![out, inp], codes),
        scales: Tensor::from_parts(alloc::vec![out, groups], scales),
        bits: cfg.bits,
        granularity: cfg.granularity,
    })
}

/// `x · dequant(ql)ᵀ` for `x` shaped `[..., in]`.
pub fn qlinear_forward<T: Real>(ql: &QuantizedLinear, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.last_dim() != ql.in_features() {
        return Err(Error::shape("qlinear_forward", x.shape(), ql.codes.shape()));
    }
    matmul_nt(x, &ql.dequantize())
}
