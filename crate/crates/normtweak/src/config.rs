//! Run configuration: a JSON file whose values command-line flags override.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use normtweak_core::calib::{CalibSource, CalibrationConfig};
use normtweak_core::model::{ModelConfig, NormKind, SamplingPolicy, TrainConfig};
use normtweak_core::normtweak::{AdamConfig, LossKind, ReferenceInput, TweakConfig};
use normtweak_core::quant::{Granularity, QuantConfig, Quantizer};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Input checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// `layernorm` or `rmsnorm`.
    pub norm: String,
    pub eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            checkpoint: None,
            vocab_size: c.vocab_size,
            hidden: c.hidden,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
            norm: "layernorm".into(),
            eps: c.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            corpus: None,
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            warmup: t.warmup,
            grad_clip: t.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub quantizer: String,
    pub bits: u8,
    /// Absent means one scale per output channel.
    pub group_size: Option<usize>,
    pub act_bits: Option<u8>,
    pub smooth_alpha: f64,
    pub damping: f64,
}

impl Default for QuantSection {
    fn default() -> Self {
        let q = QuantConfig::default();
        Self {
            quantizer: "gptq".into(),
            bits: q.bits,
            group_size: None,
            act_bits: None,
            smooth_alpha: q.smooth_alpha,
            damping: q.damping_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TweakSection {
    pub lr0: f64,
    pub lr_scale: f64,
    pub iters: usize,
    pub loss: String,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_search: Option<Vec<f64>>,
    /// `float` or `quantized`.
    pub reference: String,
}

impl Default for TweakSection {
    fn default() -> Self {
        let t = TweakConfig::default();
        Self {
            lr0: t.lr0,
            lr_scale: t.scale,
            iters: t.iters,
            loss: "dist".into(),
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            lr_search: None,
            reference: "float".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    /// `generated`, `real:<path>` or `gaussian`.
    pub source: String,
    /// Previously written calibration file; overrides `source`.
    pub file: Option<PathBuf>,
    /// Corpus that defines the first-token whitelist; defaults to the
    /// training corpus.
    pub whitelist_corpus: Option<PathBuf>,
    /// Real text whose embedding statistics the Gaussian control matches.
    pub reference: Option<PathBuf>,
    pub n_samples: usize,
    pub token_length: usize,
    pub top_fraction: f64,
    pub stage1_len: usize,
    pub stage1_temperature: f64,
    /// `greedy` or `top_k:<k>`.
    pub stage2: String,
}

impl Default for CalibSection {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            source: "generated".into(),
            file: None,
            whitelist_corpus: None,
            reference: None,
            n_samples: c.n_samples,
            token_length: c.token_length,
            top_fraction: 0.9,
            stage1_len: c.stage1_len,
            stage1_temperature: c.stage1_temperature,
            stage2: "greedy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub datasets: Vec<NamedPath>,
    pub stride: usize,
    /// Cap on scored tokens per dataset; 0 scores the whole file.
    pub max_tokens: usize,
    pub cloze_items: usize,
    pub cloze_context: usize,
    /// Checkpoints compared by `compare`.
    pub models: Vec<NamedPath>,
    /// Second checkpoint for `divergence`.
    pub other: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            stride: 64,
            max_tokens: 0,
            cloze_items: 200,
            cloze_context: 64,
            models: Vec::new(),
            other: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Record per-layer wall-clock time in the tweak report. Off by default
    /// so that reruns produce identical files.
    pub timing: bool,
    pub model: ModelSection,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub tweak: TweakSection,
    pub calib: CalibSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            timing: false,
            model: ModelSection::default(),
            train: TrainSection::default(),
            quant: QuantSection::default(),
            tweak: TweakSection::default(),
            calib: CalibSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Flag values that replace file values when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub bits: Option<u8>,
    pub group_size: Option<usize>,
    pub quantizer: Option<String>,
    pub loss: Option<String>,
    pub iters: Option<usize>,
    pub lr0: Option<f64>,
    pub lr_scale: Option<f64>,
    pub calib: Option<String>,
}

/// Paths a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Corpus,
    Checkpoint,
    Datasets,
    Models,
    Other,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.bits {
            self.quant.bits = v;
        }
        if let Some(v) = o.group_size {
            self.quant.group_size = (v > 0).then_some(v);
        }
        if let Some(v) = &o.quantizer {
            self.quant.quantizer = v.clone();
        }
        if let Some(v) = &o.loss {
            self.tweak.loss = v.clone();
        }
        if let Some(v) = o.iters {
            self.tweak.iters = v;
        }
        if let Some(v) = o.lr0 {
            self.tweak.lr0 = v;
        }
        if let Some(v) = o.lr_scale {
            self.tweak.lr_scale = v;
        }
        if let Some(v) = &o.calib {
            self.calib.source = v.clone();
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let norm_kind = match self.model.norm.as_str() {
            "layernorm" => NormKind::LayerNorm,
            "rmsnorm" => NormKind::RmsNorm,
            other => bail!("unknown norm kind '{other}'"),
        };
        Ok(ModelConfig {
            vocab_size: self.model.vocab_size,
            hidden: self.model.hidden,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_seq_len: self.model.max_seq_len,
            norm_kind,
            eps: self.model.eps,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seq_len: self.train.seq_len,
            warmup: self.train.warmup,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn quantizer(&self) -> Result<Quantizer> {
        Ok(self.quant.quantizer.parse()?)
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.quant.bits,
            granularity: self.quant.group_size.map_or(Granularity::PerChannel, Granularity::PerGroup),
            act_bits: self.quant.act_bits,
            smooth_alpha: self.quant.smooth_alpha,
            damping_frac: self.quant.damping,
        }
    }

    fn reference(&self) -> Result<ReferenceInput> {
        match self.tweak.reference.as_str() {
            "float" => Ok(ReferenceInput::FloatPipeline),
            "quantized" => Ok(ReferenceInput::QuantizedInput),
            other => bail!("unknown reference input '{other}'"),
        }
    }

    fn tweak_numbers(&self) -> TweakConfig {
        TweakConfig {
            lr0: self.tweak.lr0,
            scale: self.tweak.lr_scale,
            iters: self.tweak.iters,
            adam: AdamConfig {
                beta1: self.tweak.beta1,
                beta2: self.tweak.beta2,
                eps: self.tweak.adam_eps,
            },
            lr_search: self.tweak.lr_search.clone(),
            ..TweakConfig::default()
        }
    }

    pub fn tweak_config(&self) -> Result<TweakConfig> {
        Ok(TweakConfig {
            loss: self.tweak.loss.parse::<LossKind>()?,
            reference: self.reference()?,
            ..self.tweak_numbers()
        })
    }

    pub fn calib_source(&self) -> Result<CalibSource> {
        Ok(self.calib.source.parse()?)
    }

    fn stage2_policy(&self) -> Result<SamplingPolicy> {
        match self.calib.stage2.as_str() {
            "greedy" => Ok(SamplingPolicy::Greedy),
            s => match s.strip_prefix("top_k:").and_then(|k| k.parse().ok()) {
                Some(k) => Ok(SamplingPolicy::TopK { k, temperature: 1.0 }),
                None => bail!("unknown stage2 policy '{s}'"),
            },
        }
    }

    pub fn calib_config(&self, whitelist: BTreeSet<u32>) -> Result<CalibrationConfig> {
        Ok(CalibrationConfig {
            n_samples: self.calib.n_samples,
            token_length: self.calib.token_length,
            source: self.calib_source()?,
            first_token_whitelist: whitelist,
            stage1_len: self.calib.stage1_len,
            stage1_temperature: self.calib.stage1_temperature,
            stage2_policy: self.stage2_policy()?,
        })
    }

    /// Every problem with this configuration for a command reading `needs`.
    pub fn violations(&self, needs: &[Needs]) -> Vec<String> {
        let mut v = Vec::new();
        let mut push_err = |r: Result<()>| {
            if let Err(e) = r {
                v.push(e.to_string());
            }
        };
        push_err(self.model_config().and_then(|c| Ok(c.validate()?)));
        push_err(self.quantizer().map(|_| ()));
        push_err(self.calib_source().map(|_| ()));
        push_err(self.stage2_policy().map(|_| ()));
        push_err(self.tweak.loss.parse::<LossKind>().map(|_| ()).map_err(Into::into));
        push_err(self.reference().map(|_| ()));
        v.extend(self.quant_config().violations());
        v.extend(self.tweak_numbers().violations());
        if !(self.calib.top_fraction > 0.0 && self.calib.top_fraction <= 1.0) {
            v.push(format!("calib.top_fraction must lie in (0, 1], got {}", self.calib.top_fraction));
        }
        if self.calib.n_samples == 0 || self.calib.token_length == 0 {
            v.push("calib.n_samples and calib.token_length must be positive".into());
        }
        if self.calib.token_length > self.model.max_seq_len {
            v.push(format!(
                "calib.token_length {} exceeds model.max_seq_len {}",
                self.calib.token_length, self.model.max_seq_len
            ));
        }
        if self.eval.stride == 0 {
            v.push("eval.stride must be positive".into());
        }
        let mut need_path = |what: &str, p: Option<&Path>| match p {
            None => v.push(format!("{what} is required")),
            Some(p) if !p.exists() => v.push(format!("{what} {} does not exist", p.display())),
            Some(_) => {}
        };
        for n in needs {
            match n {
                Needs::Corpus => need_path("train.corpus", self.train.corpus.as_deref()),
                Needs::Checkpoint => need_path("model.checkpoint", self.model.checkpoint.as_deref()),
                Needs::Other => need_path("eval.other", self.eval.other.as_deref()),
                Needs::Datasets => {
                    if self.eval.datasets.is_empty() {
                        need_path("eval.datasets", None);
                    }
                    for d in &self.eval.datasets {
                        need_path(&format!("eval dataset '{}'", d.name), Some(&d.path));
                    }
                }
                Needs::Models => {
                    if self.eval.models.is_empty() {
                        need_path("eval.models", None);
                    }
                    for m in &self.eval.models {
                        need_path(&format!("model '{}'", m.name), Some(&m.path));
                    }
                }
            }
        }
        for p in [&self.calib.file, &self.calib.whitelist_corpus, &self.calib.reference].into_iter().flatten() {
            need_path("calibration input", Some(p));
        }
        if let Ok(CalibSource::Real(p)) = self.calib_source() {
            need_path("real calibration text", Some(Path::new(&p)));
        }
        v
    }

    pub fn validate(&self, needs: &[Needs]) -> Result<()> {
        let v = self.violations(needs);
        if v.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration: {}", v.join("; "))
        }
    }

    /// Canonical JSON of everything except the output directory.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let s = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "quant": {"bits": 2, "group_size": 64}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.quant_config().granularity, Granularity::PerGroup(64));
        assert_eq!(c.tweak.lr0, 1e-5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            bits: Some(2),
            group_size: Some(0),
            loss: Some("kl".into()),
            ..Overrides::default()
        });
        assert_eq!(c.quant.bits, 2);
        assert_eq!(c.quant.group_size, None);
        assert_eq!(c.tweak_config().unwrap().loss, LossKind::Kl);
    }

    #[test]
    fn every_violation_listed() {
        let mut c = RunConfig::default();
        c.quant.bits = 5;
        c.tweak.lr0 = -1.0;
        c.tweak.loss = "hinge".into();
        c.calib.top_fraction = 0.0;
        c.model.n_heads = 3;
        let v = c.violations(&[Needs::Checkpoint]);
        assert_eq!(v.len(), 6, "{v:?}");
    }

    #[test]
    fn hash_input_ignores_out() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.canonical_json(), b.canonical_json());
    }
}
