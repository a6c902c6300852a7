//! Calibration data: self-generated sequences, windows of real text, and a
//! Gaussian control batch.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{DecodeCache, SamplingPolicy, TransformerModel};
use crate::normtweak::ActivationStats;
use crate::numerics::{Real, Rng, Tensor};

/// Where calibration sequences come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CalibSource {
    /// Sampled from the float model itself.
    #[default]
    Generated,
    /// Contiguous windows of a token file.
    Real(String),
    /// Gaussian activations injected at the block-0 input.
    Gaussian,
}

impl CalibSource {
    pub fn describe(&self) -> String {
        match self {
            CalibSource::Generated => String::from("generated"),
            CalibSource::Real(p) => alloc::format!("real:{p}"),
            CalibSource::Gaussian => String::from("gaussian"),
        }
    }
}

impl core::str::FromStr for CalibSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generated" => Ok(CalibSource::Generated),
            "gaussian" => Ok(CalibSource::Gaussian),
            _ => match s.strip_prefix("real:") {
                Some(p) if !p.is_empty() => Ok(CalibSource::Real(String::from(p))),
                _ => Err(Error::input(alloc::format!("unknown calibration source '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub n_samples: usize,
    pub token_length: usize,
    pub source: CalibSource,
    pub first_token_whitelist: BTreeSet<u32>,
    /// Tokens drawn stochastically, counting the first one.
    pub stage1_len: usize,
    pub stage1_temperature: f64,
    pub stage2_policy: SamplingPolicy,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            token_length: 128,
            source: CalibSource::Generated,
            first_token_whitelist: BTreeSet::new(),
            stage1_len: 4,
            stage1_temperature: 1.0,
            stage2_policy: SamplingPolicy::Greedy,
        }
    }
}

impl CalibrationConfig {
    /// Every violated constraint against a model of `vocab` tokens and
    /// `max_seq_len` positions.
    pub fn violations(&self, vocab: usize, max_seq_len: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_samples == 0 {
            v.push(String::from("n_samples must be positive"));
        }
        if self.token_length == 0 {
            v.push(String::from("token_length must be positive"));
        }
        if self.token_length > max_seq_len {
            v.push(alloc::format!(
                "token_length {} exceeds max_seq_len {max_seq_len}",
                self.token_length
            ));
        }
        if self.source == CalibSource::Generated {
            if self.first_token_whitelist.is_empty() {
                v.push(String::from("first-token whitelist is empty"));
            }
            if let Some(&t) = self.first_token_whitelist.iter().find(|&&t| t as usize >= vocab) {
                v.push(alloc::format!("whitelist token {t} is outside the vocabulary"));
            }
            if self.stage1_len == 0 {
                v.push(String::from("stage1_len must be positive"));
            }
            if !(self.stage1_temperature.is_finite() && self.stage1_temperature > 0.0) {
                v.push(String::from("stage1 temperature must be positive"));
            }
        }
        v
    }

    pub fn validate(&self, vocab: usize, max_seq_len: usize) -> Result<()> {
        let v = self.violations(vocab, max_seq_len);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub source: CalibSource,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn n_samples(&self) -> usize {
        self.sequences.len()
    }

    pub fn token_length(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn flat(&self) -> Vec<u32> {
        self.sequences.concat()
    }

    /// Block-0 input batch `[n_samples, token_length, hidden]`.
    pub fn embeddings<T: Real>(&self, model: &TransformerModel<T>) -> Result<Tensor<T>> {
        if self.sequences.is_empty() {
            return Err(Error::contract("calibration set is empty"));
        }
        let len = self.token_length();
        if self.sequences.iter().any(|s| s.len() != len) {
            return Err(Error::contract("calibration sequences differ in length"));
        }
        model.embed(&self.flat(), self.n_samples(), len)
    }
}

/// Most frequent tokens whose cumulative share of `corpus` reaches
/// `top_fraction`. Equal counts are taken in ascending id order.
pub fn build_whitelist(corpus: &[u32], top_fraction: f64) -> Result<BTreeSet<u32>> {
    if corpus.is_empty() {
        return Err(Error::contract("whitelist needs a non-empty corpus"));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::input(alloc::format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in corpus {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let need = top_fraction * corpus.len() as f64 - 1e-9;
    let mut out = BTreeSet::new();
    let mut cum = 0usize;
    for (t, c) in ranked {
        out.insert(t);
        cum += c;
        if cum as f64 >= need {
            break;
        }
    }
    Ok(out)
}

/// Samples `cfg.n_samples` sequences from `model`. Sample `i` uses its own
/// stream derived from `(seed, i)`.
pub fn generate_calibration<T: Real>(
    model: &TransformerModel<T>,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<CalibrationSet> {
    cfg.validate(model.config.vocab_size, model.config.max_seq_len)?;
    if cfg.source != CalibSource::Generated {
        return Err(Error::contract("generate_calibration needs a generated source"));
    }
    let whitelist: Vec<u32> = cfg.first_token_whitelist.iter().copied().collect();
    let mut sequences = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = Rng::indexed(seed, "gendata", i as u64);
        let first = whitelist[rng.below(whitelist.len())];
        let mut seq = alloc::vec![first];
        let mut cache = DecodeCache::new(model);
        let mut logits = cache.step(first)?;
        while seq.len() < cfg.token_length {
            let policy = if seq.len() < cfg.stage1_len {
                SamplingPolicy::Temperature(cfg.stage1_temperature)
            } else {
                cfg.stage2_policy
            };
            let next = policy.choose(&logits, &mut rng) as u32;
            seq.push(next);
            if seq.len() < cfg.token_length {
                logits = cache.step(next)?;
            }
        }
        sequences.push(seq);
    }
    Ok(CalibrationSet {
        sequences,
        source: CalibSource::Generated,
        seed,
    })
}

/// `cfg.n_samples` random contiguous windows of `tokens`.
pub fn load_real(tokens: &[u32], cfg: &CalibrationConfig, seed: u64) -> Result<CalibrationSet> {
    if cfg.n_samples == 0 || cfg.token_length == 0 {
        return Err(Error::input("n_samples and token_length must be positive"));
    }
    if tokens.len() < cfg.token_length {
        return Err(Error::input(alloc::format!(
            "text has {} tokens, fewer than token_length {}",
            tokens.len(),
            cfg.token_length
        )));
    }
    let mut rng = Rng::substream(seed, "calib.real");
    let starts = tokens.len() - cfg.token_length + 1;
    let sequences = (0..cfg.n_samples)
        .map(|_| {
            let s = rng.below(starts);
            tokens[s..s + cfg.token_length].to_vec()
        })
        .collect();
    Ok(CalibrationSet {
        sequences,
        source: cfg.source.clone(),
        seed,
    })
}

/// Gaussian block-0 inputs `[n_samples, token_length, C]` whose per-channel
/// sample mean and variance are rescaled to equal `reference` exactly.
pub fn random_gaussian<T: Real>(
    reference: &ActivationStats,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    let (n, len, c) = (cfg.n_samples, cfg.token_length, reference.channels());
    if n * len < 2 {
        return Err(Error::contract("gaussian batch needs at least two positions"));
    }
    let rows = n * len;
    let mut rng = Rng::substream(seed, "calib.gaussian");
    let z: Vec<f64> = (0..rows * c).map(|_| rng.normal()).collect();
    let mut out = alloc::vec![T::zero(); rows * c];
    for j in 0..c {
        let mean = (0..rows).map(|r| z[r * c + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| { let d = z[r * c + j] - mean; d * d }).sum::<f64>() / rows as f64;
        let target_sd = libm::sqrt(reference.var.data()[j].max(0.0));
        let k = if var > 0.0 { target_sd / libm::sqrt(var) } else { 0.0 };
        for r in 0..rows {
            out[r * c + j] = T::from_f64(reference.mu.data()[j] + (z[r * c + j] - mean) * k);
        }
    }
    Tensor::new(&[n, len, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::normtweak::channel_stats;

    fn tiny() -> TransformerModel<f32> {
        let cfg = ModelConfig {
            vocab_size: 32,
            hidden: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 24,
            ..ModelConfig::default()
        };
        TransformerModel::init(cfg, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn whitelist_examples() {
        let corpus = [0u32, 0, 0, 0, 0, 1, 1, 1, 2, 2];
        assert_eq!(build_whitelist(&corpus, 0.8).unwrap(), [0, 1].into());
        assert_eq!(build_whitelist(&corpus, 1.0).unwrap(), [0, 1, 2].into());
        assert_eq!(build_whitelist(&[7, 7, 7], 0.5).unwrap(), [7].into());
        assert!(build_whitelist(&[], 0.5).is_err());
    }

    #[test]
    fn whitelist_ties_prefer_low_ids() {
        assert_eq!(build_whitelist(&[5, 3, 9, 1], 0.5).unwrap(), [1, 3].into());
    }

    #[test]
    fn generation_shape_and_whitelist() {
        let m = tiny();
        let cfg = CalibrationConfig {
            n_samples: 5,
            token_length: 20,
            first_token_whitelist: [3, 4].into(),
            ..CalibrationConfig::default()
        };
        let a = generate_calibration(&m, &cfg, 9).unwrap();
        assert_eq!(a.n_samples(), 5);
        for s in &a.sequences {
            assert_eq!(s.len(), 20);
            assert!(cfg.first_token_whitelist.contains(&s[0]));
            assert!(s.iter().all(|&t| t < 32));
        }
        assert_eq!(a, generate_calibration(&m, &cfg, 9).unwrap());
    }

    #[test]
    fn config_violations_are_all_listed() {
        let cfg = CalibrationConfig {
            n_samples: 0,
            token_length: 100,
            ..CalibrationConfig::default()
        };
        assert_eq!(cfg.violations(32, 24).len(), 3);
    }

    #[test]
    fn real_windows_in_bounds() {
        let tokens: Vec<u32> = (0..50).collect();
        let cfg = CalibrationConfig {
            n_samples: 30,
            token_length: 10,
            ..CalibrationConfig::default()
        };
        let s = load_real(&tokens, &cfg, 4).unwrap();
        for w in &s.sequences {
            assert_eq!(w.len(), 10);
            assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        }
        assert_eq!(s, load_real(&tokens, &cfg, 4).unwrap());
        assert!(load_real(&tokens[..5], &cfg, 4).is_err());
    }

    #[test]
    fn gaussian_matches_reference_moments() {
        let reference = ActivationStats {
            mu: Tensor::new(&[3], alloc::vec![0.5, -2.0, 0.0]).unwrap(),
            var: Tensor::new(&[3], alloc::vec![1.0, 0.25, 4.0]).unwrap(),
        };
        let cfg = CalibrationConfig {
            n_samples: 16,
            token_length: 128,
            ..CalibrationConfig::default()
        };
        let x = random_gaussian::<f64>(&reference, &cfg, 2).unwrap();
        let s = channel_stats(&x).unwrap();
        for j in 0..3 {
            assert!((s.mu.data()[j] - reference.mu.data()[j]).abs() < 1e-9);
            assert!((s.var.data()[j] / reference.var.data()[j] - 1.0).abs() < 1e-9);
        }
    }
}
