use alloc::vec::Vec;

use super::config::{ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::numerics::{layernorm_forward, matmul_nt, rmsnorm_forward, GradTape, Real, Rng, Tensor, Var};
use crate::quant::{quantize_activations, QuantizedLinear};

/// A bias-free Linear layer with weight `[out, in]`. When quantized, `weight`
/// holds the dequantized values of `quant`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub quant: Option<QuantizedLinear>,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: Tensor<T>) -> Self {
        Self { weight, quant: None }
    }

    pub fn from_quantized(q: QuantizedLinear) -> Self {
        Self {
            weight: q.dequantize(),
            quant: Some(q),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, act_bits: Option<u8>) -> Result<Tensor<T>> {
        match act_bits {
            Some(b) => matmul_nt(&quantize_activations(x, b)?, &self.weight),
            None => matmul_nt(x, &self.weight),
        }
    }
}

/// LayerNorm (with `beta`) or RMSNorm (without).
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T: Real> {
    pub kind: NormKind,
    pub gamma: Tensor<T>,
    pub beta: Option<Tensor<T>>,
}

impl<T: Real> Norm<T> {
    pub fn identity(kind: NormKind, h: usize) -> Self {
        Self {
            kind,
            gamma: Tensor::ones(&[h]),
            beta: match kind {
                NormKind::LayerNorm => Some(Tensor::zeros(&[h])),
                NormKind::RmsNorm => None,
            },
        }
    }

    pub fn forward(&self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        match self.kind {
            NormKind::LayerNorm => layernorm_forward(x, &self.gamma, self.beta.as_ref(), eps),
            NormKind::RmsNorm => rmsnorm_forward(x, &self.gamma, eps),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.as_ref().map_or(0, |b| b.len())
    }

    pub(crate) fn record(&self, tape: &mut GradTape<T>, watch: bool) -> NormVars {
        let leaf = |tape: &mut GradTape<T>, t: &Tensor<T>| {
            if watch {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        NormVars {
            gamma: leaf(tape, &self.gamma),
            beta: self.beta.as_ref().map(|b| leaf(tape, b)),
        }
    }

    pub(crate) fn apply_recorded(
        &self,
        tape: &mut GradTape<T>,
        vars: &NormVars,
        x: Var,
        eps: T,
    ) -> Result<Var> {
        match self.kind {
            NormKind::LayerNorm => tape.layernorm(x, vars.gamma, vars.beta, eps),
            NormKind::RmsNorm => tape.rmsnorm(x, vars.gamma, eps),
        }
    }
}

/// Tape handles for one normalization layer.
#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Option<Var>,
}

/// Which block tensors become watched parameters on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Watch {
    /// Only normalization gamma/beta; Linear weights are constants.
    Norms,
    /// Everything (training).
    All,
}

/// Tape handles for a recorded block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub norm2: NormVars,
    /// q, k, v, o, up, down.
    pub linears: [Var; 6],
}

impl BlockVars {
    pub fn norm_vars(&self) -> Vec<Var> {
        let mut v = alloc::vec![self.norm1.gamma];
        v.extend(self.norm1.beta);
        v.push(self.norm2.gamma);
        v.extend(self.norm2.beta);
        v
    }
}

/// Runtime settings a block forward needs from the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCtx {
    pub heads: usize,
    pub eps: f64,
    pub act_bits: Option<u8>,
}

/// Inputs seen by each Linear of a block, captured during a forward pass.
#[derive(Debug, Clone)]
pub struct LinearInputs<T: Real> {
    /// Output of the pre-attention norm; feeds q, k and v.
    pub attn_in: Tensor<T>,
    /// Attention output; feeds the output projection.
    pub proj_in: Tensor<T>,
    /// Output of the pre-MLP norm; feeds the up-projection.
    pub mlp_in: Tensor<T>,
    /// GELU output; feeds the down-projection.
    pub down_in: Tensor<T>,
}

/// Pre-norm block: `x + Attn(Norm1(x))`, then `+ MLP(Norm2(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T: Real> {
    pub norm1: Norm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub norm2: Norm<T>,
    pub w_up: Linear<T>,
    pub w_down: Linear<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        let std = 0.02;
        let resid_std = std / libm::sqrt(2.0 * cfg.n_layers as f64);
        let mut lin = |o: usize, i: usize, s: f64| Linear::new(Tensor::randn(&[o, i], s, rng));
        Self {
            norm1: Norm::identity(cfg.norm_kind, h),
            wq: lin(h, h, std),
            wk: lin(h, h, std),
            wv: lin(h, h, std),
            wo: lin(h, h, resid_std),
            norm2: Norm::identity(cfg.norm_kind, h),
            w_up: lin(4 * h, h, std),
            w_down: lin(h, 4 * h, resid_std),
        }
    }

    pub fn linears(&self) -> [&Linear<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear<T>; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn norm_param_count(&self) -> usize {
        self.norm1.param_count() + self.norm2.param_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let h = self.norm1.gamma.len();
        if x.rank() != 3 || x.shape()[2] != h {
            return Err(Error::shape("block_forward", x.shape(), &[h]));
        }
        Ok((x.shape()[0], x.shape()[1]))
    }

    /// Eager forward of `x` shaped `[batch, seq, hidden]`.
    pub fn forward(&self, x: &Tensor<T>, ctx: &BlockCtx) -> Result<Tensor<T>> {
        self.forward_inner(x, ctx, None)
    }

    /// Forward that also returns the input of every Linear.
    pub fn forward_capture(&self, x: &Tensor<T>, ctx: &BlockCtx) -> Result<(Tensor<T>, LinearInputs<T>)> {
        let mut cap = None;
        let out = self.forward_inner(x, ctx, Some(&mut cap))?;
        Ok((out, cap.expect("captured")))
    }

    fn forward_inner(
        &self,
        x: &Tensor<T>,
        ctx: &BlockCtx,
        capture: Option<&mut Option<LinearInputs<T>>>,
    ) -> Result<Tensor<T>> {
        let (batch, seq) = self.check_input(x)?;
        let hidden = x.shape()[2];
        if ctx.heads == 0 || !hidden.is_multiple_of(ctx.heads) {
            return Err(Error::contract("attention heads must divide the hidden size"));
        }
        let eps = T::from_f64(ctx.eps);
        let a = ctx.act_bits;
        let h1 = self.norm1.forward(x, eps)?;
        let q = self.wq.forward(&h1, a)?;
        let k = self.wk.forward(&h1, a)?;
        let v = self.wv.forward(&h1, a)?;
        let (att, _) = crate::numerics::attention_forward(q.data(), k.data(), v.data(), batch, seq, hidden, ctx.heads);
        let att = Tensor::from_parts(x.shape().to_vec(), att);
        let o = self.wo.forward(&att, a)?;
        let x1 = x.add(&o)?;
        let h2 = self.norm2.forward(&x1, eps)?;
        let u = self.w_up.forward(&h2, a)?;
        let g = u.map(crate::numerics::gelu);
        let d = self.w_down.forward(&g, a)?;
        let out = x1.add(&d)?;
        if let Some(slot) = capture {
            *slot = Some(LinearInputs {
                attn_in: h1,
                proj_in: att,
                mlp_in: h2,
                down_in: g,
            });
        }
        Ok(out)
    }

    /// Puts this block's tensors on `tape`.
    pub fn record(&self, tape: &mut GradTape<T>, watch: Watch) -> BlockVars {
        let norm1 = self.norm1.record(tape, true);
        let norm2 = self.norm2.record(tape, true);
        let linears = self.linears().map(|l| match watch {
            Watch::All => tape.param(l.weight.clone()),
            Watch::Norms => tape.constant(l.weight.clone()),
        });
        BlockVars {
            norm1,
            norm2,
            linears,
        }
    }

    /// Taped forward; the recorded values match [`TransformerBlock::forward`]
    /// bit for bit.
    pub fn forward_recorded(
        &self,
        tape: &mut GradTape<T>,
        vars: &BlockVars,
        x: Var,
        ctx: &BlockCtx,
    ) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let eps = T::from_f64(ctx.eps);
        let [wq, wk, wv, wo, wu, wd] = vars.linears;
        let lin = |tape: &mut GradTape<T>, x: Var, w: Var| -> Result<Var> {
            let x = match ctx.act_bits {
                Some(b) => tape.fake_quant(x, b)?,
                None => x,
            };
            tape.matmul_nt(x, w)
        };
        let h1 = self.norm1.apply_recorded(tape, &vars.norm1, x, eps)?;
        let q = lin(tape, h1, wq)?;
        let k = lin(tape, h1, wk)?;
        let v = lin(tape, h1, wv)?;
        let att = tape.attention(q, k, v, ctx.heads)?;
        let o = lin(tape, att, wo)?;
        let x1 = tape.add(x, o)?;
        let h2 = self.norm2.apply_recorded(tape, &vars.norm2, x1, eps)?;
        let u = lin(tape, h2, wu)?;
        let g = tape.gelu(u);
        let d = lin(tape, g, wd)?;
        tape.add(x1, d)
    }
}
