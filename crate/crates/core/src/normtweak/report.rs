use alloc::string::String;
use alloc::vec::Vec;

use super::loss::LossKind;

/// Outcome of tweaking one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub lr: f64,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub delta_mu_before: f64,
    pub delta_mu_after: f64,
    pub delta_var_before: f64,
    pub delta_var_after: f64,
    /// Optimizer steps that were kept.
    pub steps: usize,
    pub warning: Option<String>,
    pub seconds: Option<f64>,
}

/// One grid-search candidate and its held-out loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrCandidate {
    pub lr0: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TweakReport {
    pub loss: LossKind,
    pub lr0: f64,
    pub iters: usize,
    pub layers: Vec<LayerReport>,
    pub search: Vec<LrCandidate>,
}

impl TweakReport {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn mean(&self, f: impl Fn(&LayerReport) -> f64) -> f64 {
        self.layers.iter().map(f).sum::<f64>() / self.layers.len().max(1) as f64
    }

    pub fn mean_delta_mu_before(&self) -> f64 {
        self.mean(|l| l.delta_mu_before)
    }

    pub fn mean_delta_mu_after(&self) -> f64 {
        self.mean(|l| l.delta_mu_after)
    }

    pub fn mean_pre_loss(&self) -> f64 {
        self.mean(|l| l.pre_loss)
    }

    pub fn mean_post_loss(&self) -> f64 {
        self.mean(|l| l.post_loss)
    }

    /// Layers whose post-tweak loss is below the pre-tweak loss.
    pub fn improved_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.post_loss < l.pre_loss).count()
    }

    pub fn warnings(&self) -> impl Iterator<Item = (usize, &str)> {
        self.layers.iter().filter_map(|l| l.warning.as_deref().map(|w| (l.layer, w)))
    }
}
