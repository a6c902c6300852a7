//! Layer-by-layer quantization with normalization tweaking.

use alloc::string::String;
use alloc::vec::Vec;

use super::adam::{adam_step, AdamState};
use super::config::{ReferenceInput, TweakConfig};
use super::loss::{channel_stats, delta_mu, delta_var, layer_loss, record_loss, ActivationStats};
use super::report::{LayerReport, LrCandidate, TweakReport};
use super::schedule::TweakSchedule;
use crate::error::{Error, Result};
use crate::model::{BlockCtx, Norm, TransformerBlock, TransformerModel, Watch};
use crate::numerics::{GradTape, Real, Tensor};
use crate::quant::{quantize_block, QuantConfig, Quantizer};

/// Quantizes `float` block by block and tweaks each block's normalization
/// parameters so its output statistics track the float model. `x0` is the
/// block-0 input batch `[batch, seq, hidden]`.
pub fn tweak_model<T: Real>(
    float: &TransformerModel<T>,
    quantizer: Quantizer,
    x0: &Tensor<T>,
    qcfg: &QuantConfig,
    tcfg: &TweakConfig,
) -> Result<(TransformerModel<T>, TweakReport)> {
    tweak_model_timed(float, quantizer, x0, qcfg, tcfg, None)
}

/// [`tweak_model`] with a clock (seconds) used for per-layer timings.
pub fn tweak_model_timed<T: Real>(
    float: &TransformerModel<T>,
    quantizer: Quantizer,
    x0: &Tensor<T>,
    qcfg: &QuantConfig,
    tcfg: &TweakConfig,
    clock: Option<&dyn Fn() -> f64>,
) -> Result<(TransformerModel<T>, TweakReport)> {
    qcfg.validate()?;
    tcfg.validate()?;
    check_batch(float, x0)?;
    let Some(grid) = &tcfg.lr_search else {
        return run(float, quantizer, x0, qcfg, tcfg, clock);
    };

    let batch = x0.shape()[0];
    if batch < 2 {
        return Err(Error::contract("lr search needs at least two calibration samples"));
    }
    let held = (batch / 4).max(1);
    let (fit, heldout) = split_batch(x0, batch - held)?;
    let mut search = Vec::with_capacity(grid.len());
    let mut best: Option<LrCandidate> = None;
    for &lr0 in grid {
        let cfg = TweakConfig {
            lr0,
            lr_search: None,
            ..tcfg.clone()
        };
        let (m, _) = run(float, quantizer, &fit, qcfg, &cfg, None)?;
        let c = LrCandidate {
            lr0,
            heldout_loss: pipeline_loss(float, &m, &heldout, &cfg)?,
        };
        if best.is_none_or(|b| c.heldout_loss < b.heldout_loss) {
            best = Some(c);
        }
        search.push(c);
    }
    let cfg = TweakConfig {
        lr0: best.map_or(tcfg.lr0, |b| b.lr0),
        lr_search: None,
        ..tcfg.clone()
    };
    let (m, mut report) = run(float, quantizer, x0, qcfg, &cfg, clock)?;
    report.search = search;
    Ok((m, report))
}

fn check_batch<T: Real>(model: &TransformerModel<T>, x0: &Tensor<T>) -> Result<()> {
    let h = model.config.hidden;
    if x0.rank() != 3 || x0.shape()[2] != h {
        return Err(Error::shape("tweak_model", x0.shape(), &[0, 0, h]));
    }
    if x0.rows() < 2 {
        return Err(Error::contract("calibration batch needs at least two positions"));
    }
    Ok(())
}

/// Splits `[batch, ...]` into the first `n` samples and the rest.
fn split_batch<T: Real>(x: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let per = x.len() / x.shape()[0];
    let (a, b) = x.data().split_at(n * per);
    let mut sa = x.shape().to_vec();
    sa[0] = n;
    let mut sb = x.shape().to_vec();
    sb[0] = x.shape()[0] - n;
    Ok((Tensor::new(&sa, a.to_vec())?, Tensor::new(&sb, b.to_vec())?))
}

/// Sum over layers of the tweaking loss between the float pipeline and the
/// quantized pipeline on `x`.
fn pipeline_loss<T: Real>(
    float: &TransformerModel<T>,
    quant: &TransformerModel<T>,
    x: &Tensor<T>,
    cfg: &TweakConfig,
) -> Result<f64> {
    let ft = float.run_blocks(x.clone())?;
    let qt = quant.run_blocks(x.clone())?;
    let mut total = 0.0;
    for l in 0..ft.len() {
        let fs = channel_stats(ft.output(l))?;
        total += layer_loss(cfg.loss, ft.output(l), &fs, qt.output(l))?;
    }
    Ok(total)
}

fn run<T: Real>(
    float: &TransformerModel<T>,
    quantizer: Quantizer,
    x0: &Tensor<T>,
    qcfg: &QuantConfig,
    tcfg: &TweakConfig,
    clock: Option<&dyn Fn() -> f64>,
) -> Result<(TransformerModel<T>, TweakReport)> {
    let mut q = float.clone();
    q.act_bits = qcfg.act_bits;
    let fctx = float.block_ctx();
    let qctx = q.block_ctx();
    let n = float.n_layers();
    let schedule = TweakSchedule::new(tcfg.lr0, tcfg.scale, n);
    let capture = quantizer.needs_calibration() && !qcfg.is_passthrough();

    let mut f_x = x0.clone();
    let mut q_x = x0.clone();
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let at = |e: Error| e.at_layer(l);
        let start = clock.map(|c| c());
        let reference = match tcfg.reference {
            ReferenceInput::FloatPipeline => &f_x,
            ReferenceInput::QuantizedInput => &q_x,
        };
        let f_out = float.blocks[l].forward(reference, &fctx).map_err(at)?;
        let captured = if capture {
            Some(q.blocks[l].forward_capture(&q_x, &qctx).map_err(at)?.1)
        } else {
            None
        };
        let mut qb = quantize_block(&q.blocks[l], captured.as_ref(), quantizer, qcfg).map_err(at)?;

        let f_stats = channel_stats(&f_out).map_err(at)?;
        let before = qb.forward(&q_x, &qctx).map_err(at)?;
        let before_stats = channel_stats(&before).map_err(at)?;
        let pre_loss = layer_loss(tcfg.loss, &f_out, &f_stats, &before).map_err(at)?;

        let lr = schedule.lrs[l];
        let final_norm = if l + 1 == n { Some(&mut q.final_norm) } else { None };
        let (steps, warning) = tweak_block(&mut qb, final_norm, &q_x, &f_out, &f_stats, &qctx, tcfg, lr)
            .map_err(at)?;

        let after = qb.forward(&q_x, &qctx).map_err(at)?;
        let after_stats = channel_stats(&after).map_err(at)?;
        let post_loss = layer_loss(tcfg.loss, &f_out, &f_stats, &after).map_err(at)?;
        layers.push(LayerReport {
            layer: l,
            lr,
            pre_loss,
            post_loss,
            delta_mu_before: delta_mu(&f_stats, &before_stats)?,
            delta_mu_after: delta_mu(&f_stats, &after_stats)?,
            delta_var_before: delta_var(&f_stats, &before_stats)?,
            delta_var_after: delta_var(&f_stats, &after_stats)?,
            steps,
            warning,
            seconds: clock.zip(start).map(|(c, s)| c() - s),
        });
        q.blocks[l] = qb;
        if tcfg.reference == ReferenceInput::FloatPipeline {
            f_x = f_out;
        }
        q_x = after;
    }
    Ok((
        q,
        TweakReport {
            loss: tcfg.loss,
            lr0: tcfg.lr0,
            iters: tcfg.iters,
            layers,
            search: Vec::new(),
        },
    ))
}

fn norm_tensors<'a, T: Real>(
    block: &'a mut TransformerBlock<T>,
    final_norm: Option<&'a mut Norm<T>>,
) -> Vec<&'a mut Tensor<T>> {
    let mut out = Vec::new();
    for n in [&mut block.norm1, &mut block.norm2].into_iter().chain(final_norm) {
        out.push(&mut n.gamma);
        if let Some(b) = n.beta.as_mut() {
            out.push(b);
        }
    }
    out
}

/// Runs the optimizer on the block's normalization parameters. On a
/// non-finite loss or gradient every parameter is restored and a warning
/// is returned.
fn tweak_block<T: Real>(
    block: &mut TransformerBlock<T>,
    mut final_norm: Option<&mut Norm<T>>,
    x: &Tensor<T>,
    f_out: &Tensor<T>,
    f_stats: &ActivationStats,
    ctx: &BlockCtx,
    tcfg: &TweakConfig,
    lr: f64,
) -> Result<(usize, Option<String>)> {
    if tcfg.iters == 0 {
        return Ok((0, None));
    }
    let saved: Vec<Tensor<T>> = norm_tensors(block, final_norm.as_deref_mut())
        .into_iter()
        .map(|t| t.clone())
        .collect();
    let mut states: Vec<AdamState> = saved.iter().map(|t| AdamState::new(t.len())).collect();
    for it in 0..tcfg.iters {
        let mut tape = GradTape::new();
        let vars = block.record(&mut tape, Watch::Norms);
        let mut watched = vars.norm_vars();
        if let Some(n) = final_norm.as_deref() {
            let fv = n.record(&mut tape, true);
            watched.push(fv.gamma);
            watched.extend(fv.beta);
        }
        let xv = tape.constant(x.clone());
        let out = block.forward_recorded(&mut tape, &vars, xv, ctx)?;
        let loss = record_loss(&mut tape, tcfg.loss, f_out, f_stats, out)?;

        let problem = if !tape.value(loss).item()?.is_finite() {
            Some("non-finite loss")
        } else {
            let grads = tape.backward(loss)?;
            if !grads.all_finite() {
                Some("non-finite gradient")
            } else {
                let params = norm_tensors(block, final_norm.as_deref_mut());
                for ((p, v), st) in params.into_iter().zip(&watched).zip(&mut states) {
                    let g = grads.get(*v).expect("watched parameter");
                    adam_step(p.data_mut(), g.data(), st, lr, &tcfg.adam)?;
                }
                None
            }
        };
        if let Some(p) = problem {
            for (t, s) in norm_tensors(block, final_norm.as_deref_mut()).into_iter().zip(saved) {
                *t = s;
            }
            return Ok((0, Some(alloc::format!("{p} at iteration {it}; layer left untweaked"))));
        }
    }
    Ok((tcfg.iters, None))
}
