use alloc::vec::Vec;

use super::block::Watch;
use super::transformer::TransformerModel;
use crate::error::{Error, Result};
use crate::normtweak::{adam_step, AdamConfig, AdamState};
use crate::numerics::{GradTape, Real, Rng};

/// Next-token training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Linear warmup length in steps.
    pub warmup: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 3e-3,
            batch_size: 4,
            seq_len: 128,
            warmup: 20,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mini-batch loss per step.
    pub losses: Vec<f64>,
}

/// Full-parameter next-token cross-entropy training with Adam.
pub fn train_toy<T: Real>(
    model: &TransformerModel<T>,
    corpus: &[u32],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(TransformerModel<T>, TrainLog)> {
    train_toy_with(model, corpus, cfg, rng, |_, _| {})
}

/// [`train_toy`] with a per-step `(step, loss)` callback.
pub fn train_toy_with<T: Real>(
    model: &TransformerModel<T>,
    corpus: &[u32],
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(TransformerModel<T>, TrainLog)> {
    let max_len = model.config.max_seq_len;
    if corpus.len() < 10 * max_len {
        return Err(Error::input(alloc::format!(
            "corpus has {} tokens; training needs at least {}",
            corpus.len(),
            10 * max_len
        )));
    }
    if cfg.seq_len == 0 || cfg.seq_len > max_len || cfg.batch_size == 0 {
        return Err(Error::input("seq_len must be in 1..=max_seq_len and batch_size positive"));
    }
    let mut model = model.clone();
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((model, log));
    }
    let mut states: Vec<AdamState> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| AdamState::new(t.len()))
        .collect();
    let adam = AdamConfig::default();
    let (b, s) = (cfg.batch_size, cfg.seq_len);
    let mut inputs = Vec::with_capacity(b * s);
    let mut targets = Vec::with_capacity(b * s);
    for step in 0..cfg.steps {
        inputs.clear();
        targets.clear();
        for _ in 0..b {
            let start = rng.below(corpus.len() - s);
            inputs.extend_from_slice(&corpus[start..start + s]);
            targets.extend(corpus[start + 1..start + s + 1].iter().map(|&t| t as usize));
        }
        let mut tape = GradTape::new();
        let vars = model.record(&mut tape, Watch::All);
        let logits = model.forward_recorded(&mut tape, &vars, &inputs, b, s)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let loss_val = tape.value(loss).item()?.as_f64();
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss_val,
            });
        }
        let grads = tape.backward(loss)?;
        let order = vars.in_order();
        let sq: f64 = order
            .iter()
            .map(|v| grads.get(*v).map_or(0.0, |g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum()))
            .sum();
        let norm = libm::sqrt(sq);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss_val,
            });
        }
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let lr = if step < cfg.warmup {
            cfg.lr * (step + 1) as f64 / cfg.warmup as f64
        } else {
            cfg.lr
        };
        for ((var, (_, param)), state) in order
            .iter()
            .zip(model.named_tensors_mut())
            .zip(states.iter_mut())
        {
            let g = grads.get(*var).expect("watched");
            let scaled: Vec<T> = g.data().iter().map(|&x| x * T::from_f64(clip)).collect();
            adam_step(param.data_mut(), &scaled, state, lr, &adam)?;
        }
        log.losses.push(loss_val);
        on_step(step, loss_val);
    }
    Ok((model, log))
}
