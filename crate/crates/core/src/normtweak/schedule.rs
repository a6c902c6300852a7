use alloc::vec::Vec;

/// Layer-stepped learning rate `lr_0 · (1 + scale · i / L)` with 0-based `i`.
pub fn layer_lr(lr0: f64, scale: f64, i: usize, n_layers: usize) -> f64 {
    lr0 * (1.0 + scale * (i as f64 / n_layers as f64))
}

/// Per-layer learning rates for a whole pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TweakSchedule {
    pub lrs: Vec<f64>,
}

impl TweakSchedule {
    pub fn new(lr0: f64, scale: f64, n_layers: usize) -> Self {
        Self {
            lrs: (0..n_layers).map(|i| layer_lr(lr0, scale, i, n_layers)).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.lrs.len()
    }
}
