use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Shape of the toy decoder-only transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub eps: f64,
}

impl Default for ModelConfig {
    /// Byte-level vocabulary padded to 512, h=128, 4 layers, 4 heads.
    fn default() -> Self {
        Self {
            vocab_size: 512,
            hidden: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 128,
            norm_kind: NormKind::LayerNorm,
            eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
        ] {
            if val == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.hidden.is_multiple_of(self.n_heads) {
            v.push(format!(
                "n_heads ({}) must divide hidden ({})",
                self.n_heads, self.hidden
            ));
        }
        if self.max_seq_len < 2 {
            v.push(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            v.push(format!("eps must be positive, got {}", self.eps));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(v.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Parameters held by a block's two normalization layers.
    pub fn norm_param_count(&self) -> usize {
        match self.norm_kind {
            NormKind::LayerNorm => 4 * self.hidden,
            NormKind::RmsNorm => 2 * self.hidden,
        }
    }
}
