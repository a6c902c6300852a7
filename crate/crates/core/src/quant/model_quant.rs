//! Whole-block and whole-model quantization. Blocks are processed in order;
//! calibration inputs for block `l` come from the already quantized blocks
//! before it.

use alloc::vec::Vec;

use super::config::QuantConfig;
use super::gptq::{estimate_hessian, gptq_quantize};
use super::rtn::rtn_quantize;
use super::smooth::{apply_column_scales, smooth_scales, weight_column_absmax};
use crate::error::{Error, Result};
use crate::model::{BlockCtx, Linear, LinearInputs, Norm, TransformerBlock, TransformerModel};
use crate::numerics::{Real, Tensor};

/// Captured Linear inputs for one block.
pub type BlockInputs<T> = LinearInputs<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    /// Round-to-nearest.
    Rtn,
    /// Hessian-based reconstruction.
    Gptq,
    /// Scale migration into the preceding norm, then round-to-nearest.
    SmoothQuant,
}

impl Quantizer {
    pub fn needs_calibration(self) -> bool {
        !matches!(self, Quantizer::Rtn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Quantizer::Rtn => "rtn",
            Quantizer::Gptq => "gptq",
            Quantizer::SmoothQuant => "smoothquant",
        }
    }
}

impl core::str::FromStr for Quantizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Quantizer::Rtn),
            "gptq" => Ok(Quantizer::Gptq),
            "smoothquant" | "smoothquant+rtn" => Ok(Quantizer::SmoothQuant),
            other => Err(Error::input(alloc::format!("unknown quantizer '{other}'"))),
        }
    }
}

fn column_absmax<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let mut m = alloc::vec![0.0f64; x.last_dim()];
    for r in 0..x.rows() {
        for (mv, v) in m.iter_mut().zip(x.row(r)) {
            *mv = mv.max(v.as_f64().abs());
        }
    }
    m
}

fn divide_norm<T: Real>(norm: &mut Norm<T>, s: &[f64]) {
    let div = |t: &mut Tensor<T>| {
        for (v, &sj) in t.data_mut().iter_mut().zip(s) {
            *v = T::from_f64(v.as_f64() / sj);
        }
    };
    div(&mut norm.gamma);
    if let Some(b) = norm.beta.as_mut() {
        div(b);
    }
}

/// Applies SmoothQuant migration to the Linears that read a normalization
/// output (q/k/v after the first norm, the up-projection after the second).
/// The float function of the block is unchanged.
pub fn smooth_block<T: Real>(
    block: &TransformerBlock<T>,
    inputs: &BlockInputs<T>,
    alpha: f64,
) -> Result<TransformerBlock<T>> {
    let mut b = block.clone();
    let wmax = weight_column_absmax(&[&b.wq.weight, &b.wk.weight, &b.wv.weight])?;
    let s1 = smooth_scales(&column_absmax(&inputs.attn_in), &wmax, alpha)?;
    for lin in [&mut b.wq, &mut b.wk, &mut b.wv] {
        lin.weight = apply_column_scales(&lin.weight, &s1)?;
    }
    divide_norm(&mut b.norm1, &s1);

    let wmax = weight_column_absmax(&[&b.w_up.weight])?;
    let s2 = smooth_scales(&column_absmax(&inputs.mlp_in), &wmax, alpha)?;
    b.w_up.weight = apply_column_scales(&b.w_up.weight, &s2)?;
    divide_norm(&mut b.norm2, &s2);
    Ok(b)
}

/// Quantizes every Linear of `block`. GPTQ and SmoothQuant need the block's
/// captured Linear inputs.
pub fn quantize_block<T: Real>(
    block: &TransformerBlock<T>,
    inputs: Option<&BlockInputs<T>>,
    quantizer: Quantizer,
    cfg: &QuantConfig,
) -> Result<TransformerBlock<T>> {
    cfg.validate()?;
    if cfg.is_passthrough() {
        return Ok(block.clone());
    }
    let need = || {
        inputs.ok_or_else(|| {
            Error::contract(alloc::format!("{} needs calibration activations", quantizer.name()))
        })
    };
    match quantizer {
        Quantizer::Rtn => {
            let mut b = block.clone();
            for lin in b.linears_mut() {
                *lin = Linear::from_quantized(rtn_quantize(&lin.weight, cfg)?);
            }
            Ok(b)
        }
        Quantizer::SmoothQuant => {
            let mut b = smooth_block(block, need()?, cfg.smooth_alpha)?;
            for lin in b.linears_mut() {
                *lin = Linear::from_quantized(rtn_quantize(&lin.weight, cfg)?);
            }
            Ok(b)
        }
        Quantizer::Gptq => {
            let inp = need()?;
            let h_attn = estimate_hessian([&inp.attn_in], cfg.damping_frac)?;
            let h_proj = estimate_hessian([&inp.proj_in], cfg.damping_frac)?;
            let h_mlp = estimate_hessian([&inp.mlp_in], cfg.damping_frac)?;
            let h_down = estimate_hessian([&inp.down_in], cfg.damping_frac)?;
            let mut b = block.clone();
            let hs = [&h_attn, &h_attn, &h_attn, &h_proj, &h_mlp, &h_down];
            for (lin, h) in b.linears_mut().into_iter().zip(hs) {
                *lin = Linear::from_quantized(gptq_quantize(&lin.weight, h, cfg)?);
            }
            Ok(b)
        }
    }
}

/// Quantizes a model block by block. `calib` is the block-0 input batch
/// `[batch, seq, hidden]`; it is required by GPTQ and SmoothQuant.
pub fn quantize_model<T: Real>(
    model: &TransformerModel<T>,
    quantizer: Quantizer,
    cfg: &QuantConfig,
    calib: Option<&Tensor<T>>,
) -> Result<TransformerModel<T>> {
    cfg.validate()?;
    let mut q = model.clone();
    q.act_bits = cfg.act_bits;
    let ctx: BlockCtx = q.block_ctx();
    let mut x = match (quantizer.needs_calibration() && !cfg.is_passthrough(), calib) {
        (true, None) => {
            return Err(Error::contract(alloc::format!(
                "{} needs a calibration batch",
                quantizer.name()
            )))
        }
        (true, Some(c)) => Some(c.clone()),
        (false, _) => None,
    };
    for l in 0..q.blocks.len() {
        let captured = match &x {
            Some(xv) => Some(q.blocks[l].forward_capture(xv, &ctx).map_err(|e| e.at_layer(l))?.1),
            None => None,
        };
        let nb = quantize_block(&q.blocks[l], captured.as_ref(), quantizer, cfg)
            .map_err(|e| e.at_layer(l))?;
        if let Some(xv) = &x {
            x = Some(nb.forward(xv, &ctx).map_err(|e| e.at_layer(l))?);
        }
        q.blocks[l] = nb;
    }
    Ok(q)
}
