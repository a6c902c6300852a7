use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{channel_mean_var, log_softmax, GradTape, Real, Tensor, Var};

/// Objective matching quantized block outputs to float ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Channel-wise mean and variance distance.
    #[default]
    Dist,
    Mse,
    /// `KL(float ‖ quantized)` over channels at each position.
    Kl,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dist => "dist",
            LossKind::Mse => "mse",
            LossKind::Kl => "kl",
        }
    }
}

impl core::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dist" => Ok(LossKind::Dist),
            "mse" => Ok(LossKind::Mse),
            "kl" => Ok(LossKind::Kl),
            other => Err(Error::input(alloc::format!("unknown loss '{other}'"))),
        }
    }
}

/// Per-channel mean and population variance of a block output.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub mu: Tensor<f64>,
    pub var: Tensor<f64>,
}

impl ActivationStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// `[2, C]` with means in row 0 and variances in row 1.
    pub fn stacked<T: Real>(&self) -> Tensor<T> {
        let c = self.channels();
        let data = self.mu.data().iter().chain(self.var.data()).map(|&v| T::from_f64(v)).collect();
        Tensor::new(&[2, c], data).expect("2×C")
    }
}

/// Mean and variance per channel over every leading (batch × token) position.
pub fn channel_stats<T: Real>(t: &Tensor<T>) -> Result<ActivationStats> {
    if t.rank() < 2 {
        return Err(Error::shape("channel_stats", t.shape(), &[2]));
    }
    if t.rows() < 2 {
        return Err(Error::contract("channel_stats needs at least two positions"));
    }
    let (mu, var) = channel_mean_var(t);
    let c = mu.len();
    Ok(ActivationStats {
        mu: Tensor::new(&[c], mu)?,
        var: Tensor::new(&[c], var)?,
    })
}

fn check_channels(f: &ActivationStats, q: &ActivationStats) -> Result<()> {
    if f.channels() != q.channels() {
        return Err(Error::contract(alloc::format!(
            "channel count mismatch: {} vs {}",
            f.channels(),
            q.channels()
        )));
    }
    Ok(())
}

/// Channel-wise distribution loss:
/// `(1/C) Σ_c (|μ_f − μ_q| + |σ²_f − σ²_q|)`.
pub fn loss_dist(f: &ActivationStats, q: &ActivationStats) -> Result<f64> {
    Ok(delta_mu(f, q)? + delta_var(f, q)?)
}

/// `(1/C) Σ_c |μ_f − μ_q|`.
pub fn delta_mu(f: &ActivationStats, q: &ActivationStats) -> Result<f64> {
    check_channels(f, q)?;
    Ok(mean_abs_diff(f.mu.data(), q.mu.data()))
}

/// `(1/C) Σ_c |σ²_f − σ²_q|`.
pub fn delta_var(f: &ActivationStats, q: &ActivationStats) -> Result<f64> {
    check_channels(f, q)?;
    Ok(mean_abs_diff(f.var.data(), q.var.data()))
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Mean squared elementwise difference.
pub fn loss_mse<T: Real>(f: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if f.shape() != q.shape() {
        return Err(Error::shape("loss_mse", f.shape(), q.shape()));
    }
    let s: f64 = f.data().iter().zip(q.data()).map(|(a, b)| { let d = a.as_f64() - b.as_f64(); d * d }).sum();
    Ok(s / f.len().max(1) as f64)
}

/// Mean over positions of `KL(softmax(f) ‖ softmax(q))`, softmax over
/// channels.
pub fn loss_kl<T: Real>(f: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if f.shape() != q.shape() {
        return Err(Error::shape("loss_kl", f.shape(), q.shape()));
    }
    let f64s = f.cast::<f64>();
    let q64s = q.cast::<f64>();
    let lf: Vec<f64> = log_softmax(&f64s);
    let lq: Vec<f64> = log_softmax(&q64s);
    let total: f64 = lf.iter().zip(&lq).map(|(&a, &b)| libm::exp(a) * (a - b)).sum();
    Ok(total / f.rows().max(1) as f64)
}

/// Loss of `kind` between a float block output and a quantized one.
pub fn layer_loss<T: Real>(
    kind: LossKind,
    f_out: &Tensor<T>,
    f_stats: &ActivationStats,
    q_out: &Tensor<T>,
) -> Result<f64> {
    match kind {
        LossKind::Dist => loss_dist(f_stats, &channel_stats(q_out)?),
        LossKind::Mse => loss_mse(f_out, q_out),
        LossKind::Kl => loss_kl(f_out, q_out),
    }
}

/// Records the loss of `kind` on `tape` with the float side held constant.
pub fn record_loss<T: Real>(
    tape: &mut GradTape<T>,
    kind: LossKind,
    f_out: &Tensor<T>,
    f_stats: &ActivationStats,
    q_out: Var,
) -> Result<Var> {
    match kind {
        LossKind::Dist => {
            let qs = tape.channel_stats(q_out);
            let fs = tape.constant(f_stats.stacked());
            let l1 = tape.l1(qs, fs)?;
            Ok(tape.scale(l1, T::from_f64(1.0 / f_stats.channels() as f64)))
        }
        LossKind::Mse => {
            let f = tape.constant(f_out.clone());
            tape.mse(q_out, f)
        }
        LossKind::Kl => {
            let f = tape.constant(f_out.clone());
            tape.kl(f, q_out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn stats(mu: &[f64], var: &[f64]) -> ActivationStats {
        ActivationStats {
            mu: Tensor::new(&[mu.len()], mu.to_vec()).unwrap(),
            var: Tensor::new(&[var.len()], var.to_vec()).unwrap(),
        }
    }

    #[test]
    fn constant_tensor_stats() {
        let t = Tensor::<f32>::full(&[2, 3, 4], 2.5);
        let s = channel_stats(&t).unwrap();
        assert!(s.mu.data().iter().all(|&m| m == 2.5));
        assert!(s.var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_population_variance() {
        let t = Tensor::new(&[1, 2, 1], alloc::vec![1.0f64, 3.0]).unwrap();
        let s = channel_stats(&t).unwrap();
        assert_eq!(s.mu.data(), &[2.0]);
        assert_eq!(s.var.data(), &[1.0]);
    }

    #[test]
    fn single_position_rejected() {
        let t = Tensor::<f32>::zeros(&[1, 1, 4]);
        assert!(matches!(channel_stats(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f64>::randn(&[1, 6, 3], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| t.row(r).to_vec()).collect();
        rows.reverse();
        rows.swap(1, 4);
        let p = Tensor::new(&[1, 6, 3], rows.concat()).unwrap();
        let (a, b) = (channel_stats(&t).unwrap(), channel_stats(&p).unwrap());
        for (x, y) in a.mu.data().iter().zip(b.mu.data()).chain(a.var.data().iter().zip(b.var.data())) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dist_examples() {
        let a = stats(&[0.3, -1.0], &[1.0, 2.0]);
        assert_eq!(loss_dist(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_dist(&stats(&[0.0], &[1.0]), &stats(&[1.0], &[1.0])).unwrap(), 1.0);
        let f = stats(&[0.5, 0.0], &[1.25, 1.0]);
        let q = stats(&[0.0, 0.5], &[1.0, 1.0]);
        assert!((loss_dist(&f, &q).unwrap() - 0.625).abs() < 1e-15);
        assert!(loss_dist(&f, &stats(&[0.0], &[0.0])).is_err());
    }

    #[test]
    fn taped_losses_match_eager() {
        let mut rng = Rng::new(21);
        let f = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        let q = Tensor::<f64>::randn(&[2, 5, 6], 1.2, &mut rng);
        let fs = channel_stats(&f).unwrap();
        for kind in [LossKind::Dist, LossKind::Mse, LossKind::Kl] {
            let mut tape = GradTape::new();
            let qv = tape.param(q.clone());
            let l = record_loss(&mut tape, kind, &f, &fs, qv).unwrap();
            let eager = layer_loss(kind, &f, &fs, &q).unwrap();
            assert!((tape.value(l).item().unwrap() - eager).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn mse_and_kl_examples() {
        let z = Tensor::new(&[1, 2], alloc::vec![0.0f64, 0.0]).unwrap();
        let o = Tensor::new(&[1, 2], alloc::vec![1.0f64, 1.0]).unwrap();
        assert_eq!(loss_mse(&z, &o).unwrap(), 1.0);
        assert_eq!(loss_mse(&o, &o).unwrap(), 0.0);
        assert_eq!(loss_kl(&o, &o).unwrap(), 0.0);
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let a = Tensor::<f32>::randn(&[3, 5], 2.0, &mut rng);
            let b = Tensor::<f32>::randn(&[3, 5], 2.0, &mut rng);
            assert!(loss_kl(&a, &b).unwrap() >= 0.0);
        }
    }
}
