use alloc::string::String;
use alloc::vec::Vec;

use super::adam::AdamConfig;
use super::loss::LossKind;
use crate::error::{Error, Result};

/// Candidate base learning rates tried by the optional grid search.
pub const DEFAULT_LR_GRID: [f64; 3] = [3e-6, 1e-5, 3e-5];

/// Which input the float reference block consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceInput {
    /// Float block `l` reads the float output of block `l − 1`.
    #[default]
    FloatPipeline,
    /// Float block `l` reads the quantized output of block `l − 1`.
    QuantizedInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TweakConfig {
    pub lr0: f64,
    pub scale: f64,
    /// Full calibration passes per layer. Zero disables tweaking.
    pub iters: usize,
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub lr_search: Option<Vec<f64>>,
    pub reference: ReferenceInput,
}

impl Default for TweakConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-5,
            scale: 1.0,
            iters: 1,
            loss: LossKind::Dist,
            adam: AdamConfig::default(),
            lr_search: None,
            reference: ReferenceInput::FloatPipeline,
        }
    }
}

impl TweakConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            v.push(alloc::format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            v.push(alloc::format!("lr scale must be non-negative, got {}", self.scale));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            v.push(String::from("adam betas must lie in [0, 1)"));
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            v.push(String::from("adam eps must be positive"));
        }
        if let Some(grid) = &self.lr_search {
            if grid.is_empty() {
                v.push(String::from("lr search grid is empty"));
            }
            if grid.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
                v.push(String::from("lr search candidates must be positive"));
            }
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
}
