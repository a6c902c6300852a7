//! SmoothQuant-style scale migration: per-input-channel factors move range
//! from activations into weights, `s_j = a_j^α / w_j^(1-α)`. The weight
//! column is multiplied by `s_j` and the producer of the activation divides
//! by it, so the float function is unchanged.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const ABSMAX_FLOOR: f64 = 1e-5;

/// Per-input-channel migration factors.
pub fn smooth_scales(act_absmax: &[f64], weight_absmax: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if act_absmax.len() != weight_absmax.len() {
        return Err(Error::shape("smooth_scales", &[act_absmax.len()], &[weight_absmax.len()]));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract("smooth alpha must lie in [0, 1]"));
    }
    Ok(act_absmax
        .iter()
        .zip(weight_absmax)
        .map(|(&a, &w)| {
            let a = a.max(ABSMAX_FLOOR);
            let w = w.max(ABSMAX_FLOOR);
            libm::pow(a, alpha) / libm::pow(w, 1.0 - alpha)
        })
        .collect())
}

/// Column-wise `max |W[:, j]|` over one or more weights that share an input.
pub fn weight_column_absmax<T: Real>(weights: &[&Tensor<T>]) -> Result<Vec<f64>> {
    let Some(first) = weights.first() else {
        return Err(Error::contract("no weights to smooth"));
    };
    let n = first.last_dim();
    let mut m = alloc::vec![0.0f64; n];
    for w in weights {
        if w.rank() != 2 || w.last_dim() != n {
            return Err(Error::shape("weight_column_absmax", first.shape(), w.shape()));
        }
        for r in 0..w.rows() {
            for (mv, v) in m.iter_mut().zip(w.row(r)) {
                *mv = mv.max(v.as_f64().abs());
            }
        }
    }
    Ok(m)
}

/// Scales the columns of every weight by `s`.
pub fn apply_column_scales<T: Real>(w: &Tensor<T>, s: &[f64]) -> Result<Tensor<T>> {
    if w.last_dim() != s.len() {
        return Err(Error::shape("apply_column_scales", w.shape(), &[s.len()]));
    }
    let mut out = w.clone();
    for r in 0..out.rows() {
        for (v, &sj) in out.row_mut(r).iter_mut().zip(s) {
            *v = T::from_f64(v.as_f64() * sj);
        }
    }
    Ok(out)
}

/// Migrates one weight `[out, in]` against per-input activation maxima.
/// Returns the rescaled weight and the divisor the activation must absorb.
pub fn smooth_migrate<T: Real>(
    w: &Tensor<T>,
    act_absmax: &[f64],
    alpha: f64,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let wmax = weight_column_absmax(&[w])?;
    let s = smooth_scales(act_absmax, &wmax, alpha)?;
    Ok((apply_column_scales(w, &s)?, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul_nt, Rng};

    #[test]
    fn alpha_zero_inverts_weight_max() {
        let s = smooth_scales(&[3.0, 0.5], &[2.0, 4.0], 0.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!((s[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn balanced_case_is_one() {
        let s = smooth_scales(&[3.0, 0.5, 7.0], &[3.0, 0.5, 7.0], 0.5).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn product_is_preserved() {
        let mut rng = Rng::new(5);
        let w = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 6], 2.0, &mut rng);
        let amax: Vec<f64> = (0..6).map(|j| (0..3).map(|r| x.row(r)[j].abs()).fold(0.0, f64::max)).collect();
        let (w2, s) = smooth_migrate(&w, &amax, 0.5).unwrap();
        let mut xs = x.clone();
        for r in 0..3 {
            for (v, sj) in xs.row_mut(r).iter_mut().zip(&s) {
                *v /= sj;
            }
        }
        let a = matmul_nt(&x, &w).unwrap();
        let b = matmul_nt(&xs, &w2).unwrap();
        assert!(a.max_rel_diff(&b, 1e-12) < 1e-12);
    }
}
