use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// How weights share a scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One scale per output channel.
    PerChannel,
    /// One scale per contiguous run of `group_size` input columns within an
    /// output channel.
    PerGroup(usize),
}

impl Granularity {
    pub fn group_size(self, in_features: usize) -> usize {
        match self {
            Granularity::PerChannel => in_features,
            Granularity::PerGroup(g) => g,
        }
    }
}

/// Symmetric weight quantization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    /// Weight bit width: 2, 3, 4 or 8. 16 means weights stay in float
    /// (passthrough).
    pub bits: u8,
    pub granularity: Granularity,
    /// Activation fake-quantization width at Linear inputs (only 8 supported).
    pub act_bits: Option<u8>,
    /// SmoothQuant migration strength.
    pub smooth_alpha: f64,
    /// Hessian damping as a fraction of the mean diagonal.
    pub damping_frac: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            granularity: Granularity::PerChannel,
            act_bits: None,
            smooth_alpha: 0.5,
            damping_frac: 0.01,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, granularity: Granularity) -> Self {
        Self {
            bits,
            granularity,
            ..Self::default()
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 16
    }

    /// Largest code magnitude, `2^(b-1) - 1`.
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !matches!(self.bits, 2 | 3 | 4 | 8 | 16) {
            v.push(format!("bits must be one of 2, 3, 4, 8 (or 16 for passthrough), got {}", self.bits));
        }
        if let Granularity::PerGroup(0) = self.granularity {
            v.push(String::from("group_size must be positive"));
        }
        if let Some(a) = self.act_bits {
            if a != 8 {
                v.push(format!("act_bits must be 8 when set, got {a}"));
            }
        }
        if !(0.0..=1.0).contains(&self.smooth_alpha) {
            v.push(format!("smooth_alpha must lie in [0, 1], got {}", self.smooth_alpha));
        }
        if self.damping_frac.is_nan() || self.damping_frac <= 0.0 {
            v.push(format!("damping_frac must be positive, got {}", self.damping_frac));
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

    /// Checks that the granularity fits a weight with `in_features` columns.
    pub fn check_shape(&self, in_features: usize) -> Result<()> {
        if let Granularity::PerGroup(g) = self.granularity {
            if g == 0 || !in_features.is_multiple_of(g) {
                return Err(Error::contract(format!(
                    "group size {g} does not divide the input dimension {in_features}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_violation() {
        let cfg = QuantConfig {
            bits: 5,
            granularity: Granularity::PerGroup(0),
            act_bits: Some(4),
            smooth_alpha: 2.0,
            damping_frac: 0.0,
        };
        assert_eq!(cfg.violations().len(), 5);
        assert!(QuantConfig::default().validate().is_ok());
    }

    #[test]
    fn code_ranges() {
        assert_eq!(qmax(2), 1);
        assert_eq!(qmax(4), 7);
        assert_eq!(qmax(8), 127);
    }

    #[test]
    fn group_must_divide() {
        let cfg = QuantConfig::new(2, Granularity::PerGroup(64));
        assert!(cfg.check_shape(128).is_ok());
        assert!(cfg.check_shape(96).is_err());
    }
}
