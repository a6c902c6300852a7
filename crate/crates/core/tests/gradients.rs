//! Central finite differences against the tape's reverse pass, in f64.

use normtweak_core::numerics::{GradTape, Tensor, Var};
use normtweak_core::Rng;

const H: f64 = 1e-6;

fn weighted_sum(tape: &mut GradTape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut Rng::new(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let v = tape.value(out).item().unwrap();
        (tape, vars, out, v)
    };
    let (tape, vars, out, _) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).unwrap();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus).3 - eval(&minus).3) / (2.0 * H);
            let an = g.data()[j];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-5, "{name}: input {i} elem {j}: analytic {an} fd {fd}");
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

#[test]
fn elementwise_ops() {
    check("add", &[randn(&[3, 4], 1), randn(&[3, 4], 2)], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 9)
    });
    check("add_rows", &[randn(&[2, 3, 4], 1), randn(&[3, 4], 2)], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 9)
    });
    check("mul", &[randn(&[5], 3), randn(&[5], 4)], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 9)
    });
    check("scale_sum", &[randn(&[2, 2], 5)], |t, v| {
        let y = t.scale(v[0], -1.7);
        t.sum(y)
    });
    check("reshape", &[randn(&[2, 6], 6)], |t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        weighted_sum(t, y, 9)
    });
    check("gelu", &[randn(&[2, 5], 7)], |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, 9)
    });
}

#[test]
fn matmul_nt() {
    check("matmul_nt", &[randn(&[2, 3, 4], 1), randn(&[5, 4], 2)], |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, y, 9)
    });
}

#[test]
fn norms() {
    check("layernorm", &[randn(&[2, 3, 6], 1), randn(&[6], 2), randn(&[6], 3)], |t, v| {
        let y = t.layernorm(v[0], v[1], Some(v[2]), 1e-5).unwrap();
        weighted_sum(t, y, 9)
    });
    check("layernorm_no_beta", &[randn(&[4, 5], 4), randn(&[5], 5)], |t, v| {
        let y = t.layernorm(v[0], v[1], None, 1e-5).unwrap();
        weighted_sum(t, y, 9)
    });
    check("rmsnorm", &[randn(&[2, 3, 6], 6), randn(&[6], 7)], |t, v| {
        let y = t.rmsnorm(v[0], v[1], 1e-5).unwrap();
        weighted_sum(t, y, 9)
    });
}

#[test]
fn attention() {
    let s = [2, 4, 6];
    check("attention", &[randn(&s, 1), randn(&s, 2), randn(&s, 3)], |t, v| {
        let y = t.attention(v[0], v[1], v[2], 2).unwrap();
        weighted_sum(t, y, 9)
    });
}

#[test]
fn gather_and_cross_entropy() {
    check("gather", &[randn(&[5, 3], 1)], |t, v| {
        let y = t.gather(v[0], &[4, 0, 4, 2]).unwrap();
        weighted_sum(t, y, 9)
    });
    check("cross_entropy", &[randn(&[2, 3, 7], 2)], |t, v| {
        t.cross_entropy(v[0], &[1, 6, 0, 3, 3, 2]).unwrap()
    });
}

#[test]
fn distribution_losses() {
    check("channel_stats", &[randn(&[2, 5, 4], 1)], |t, v| {
        let y = t.channel_stats(v[0]);
        weighted_sum(t, y, 9)
    });
    check("l1", &[randn(&[3, 4], 2), randn(&[3, 4], 3)], |t, v| t.l1(v[0], v[1]).unwrap());
    check("mse", &[randn(&[3, 4], 4), randn(&[3, 4], 5)], |t, v| t.mse(v[0], v[1]).unwrap());
    check("kl", &[randn(&[2, 3, 5], 6), randn(&[2, 3, 5], 7)], |t, v| t.kl(v[0], v[1]).unwrap());
}

#[test]
fn fake_quant_passes_gradient_straight_through() {
    let x = randn(&[3, 4], 1);
    let mut tape = GradTape::new();
    let v = tape.param(x);
    let q = tape.fake_quant(v, 8).unwrap();
    let s = weighted_sum(&mut tape, q, 9);
    let g = tape.backward(s).unwrap();
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, &mut Rng::new(9));
    assert_eq!(g.get(v).unwrap().data(), w.data());
}
