//! The command-line front end. Each command reads a [`RunConfig`] (file plus
//! flag overrides), validates it in full and writes its outputs under
//! `config.out`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use normtweak_core::calib::{self, CalibSource, CalibrationSet};
use normtweak_core::eval::{self, EvalResult};
use normtweak_core::model::{train_toy_with, TransformerModel};
use normtweak_core::normtweak::{channel_stats, tweak_model_timed};
use normtweak_core::quant::quantize_model;
use normtweak_core::{Rng, Tensor};
use serde_json::json;

use crate::calibfile::{load_calibration, save_calibration};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Needs, Overrides, RunConfig};
use crate::provenance::Provenance;
use crate::report;
use crate::tokens::read_tokens;

#[derive(Debug, Parser)]
#[command(name = "normtweak", version, about = "Post-training quantization with norm tweaking")]
pub struct Cli {
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Flags {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub bits: Option<u8>,
    /// Weights per scale group; 0 means one scale per output channel.
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// rtn, gptq or smoothquant.
    #[arg(long, global = true)]
    pub quantizer: Option<String>,
    /// dist, mse or kl.
    #[arg(long, global = true)]
    pub loss: Option<String>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub lr0: Option<f64>,
    #[arg(long, global = true)]
    pub lr_scale: Option<f64>,
    /// generated, real:<path> or gaussian.
    #[arg(long, global = true)]
    pub calib: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a float toy model on `train.corpus`.
    Train,
    /// Write a calibration set for `model.checkpoint`.
    Gendata,
    /// Quantize `model.checkpoint`.
    Quantize,
    /// Quantize and tweak `model.checkpoint`.
    Tweak,
    /// Evaluate `model.checkpoint` on `eval.datasets`.
    Eval,
    /// Evaluate every model in `eval.models` and tabulate.
    Compare,
    /// Per-layer statistics gap between `model.checkpoint` and `eval.other`.
    Divergence,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Gendata => "gendata",
            Command::Quantize => "quantize",
            Command::Tweak => "tweak",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::Divergence => "divergence",
        }
    }

    fn needs(self) -> &'static [Needs] {
        match self {
            Command::Train => &[Needs::Corpus],
            Command::Gendata | Command::Quantize | Command::Tweak => &[Needs::Checkpoint],
            Command::Eval => &[Needs::Checkpoint, Needs::Datasets],
            Command::Compare => &[Needs::Models, Needs::Datasets],
            Command::Divergence => &[Needs::Checkpoint, Needs::Other],
        }
    }
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            bits: self.bits,
            group_size: self.group_size,
            quantizer: self.quantizer.clone(),
            loss: self.loss.clone(),
            iters: self.iters,
            lr0: self.lr0,
            lr_scale: self.lr_scale,
            calib: self.calib.clone(),
        }
    }
}

/// Builds the effective configuration for `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.flags.overrides());
    cfg.validate(cli.command.needs())?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let prov = Provenance::new(cli.command.name(), &cfg);
    match cli.command {
        Command::Train => cmd_train(&cfg, prov),
        Command::Gendata => cmd_gendata(&cfg, prov),
        Command::Quantize => cmd_quantize(&cfg, prov),
        Command::Tweak => cmd_tweak(&cfg, prov),
        Command::Eval => cmd_eval(&cfg, prov),
        Command::Compare => cmd_compare(&cfg, prov),
        Command::Divergence => cmd_divergence(&cfg, prov),
    }
}

/// Renders an error chain on one line.
pub fn one_line(e: &anyhow::Error) -> String {
    let msg = e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let dir = cfg.model.checkpoint.as_deref().context("model.checkpoint is required")?;
    load_checkpoint(dir)
}

fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("model")
}

fn cmd_train(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let corpus = read_tokens(cfg.train.corpus.as_deref().context("train.corpus is required")?)?;
    let init = TransformerModel::<f32>::init(cfg.model_config()?, &mut Rng::substream(cfg.seed, "train.init"))?;
    let mut rng = Rng::substream(cfg.seed, "train");
    let (model, log) = train_toy_with(&init, &corpus, &cfg.train_config(), &mut rng, |_, _| {})?;
    save_checkpoint(&model, &prov, &model_dir(cfg))?;
    report::write_json(&cfg.out.join("train_log.json"), &prov, json!({ "losses": log.losses }))
}

fn whitelist(cfg: &RunConfig, vocab: usize) -> Result<BTreeSet<u32>> {
    match cfg.calib.whitelist_corpus.as_ref().or(cfg.train.corpus.as_ref()) {
        Some(p) => Ok(calib::build_whitelist(&read_tokens(p)?, cfg.calib.top_fraction)?),
        None => Ok((0..vocab as u32).collect()),
    }
}

/// Token-level calibration set for `model`. Fails for the Gaussian source,
/// which has no tokens.
fn calibration_set(cfg: &RunConfig, model: &TransformerModel<f32>) -> Result<CalibrationSet> {
    if let Some(p) = &cfg.calib.file {
        return Ok(load_calibration(p)?.0);
    }
    let ccfg = cfg.calib_config(whitelist(cfg, model.config.vocab_size)?)?;
    match &ccfg.source {
        CalibSource::Generated => Ok(calib::generate_calibration(model, &ccfg, cfg.seed)?),
        CalibSource::Real(p) => Ok(calib::load_real(&read_tokens(Path::new(p))?, &ccfg, cfg.seed)?),
        CalibSource::Gaussian => bail!("gaussian calibration has no token form; use it with quantize, tweak or divergence"),
    }
}

/// Block-0 calibration batch `[n_samples, token_length, hidden]`.
fn calibration_batch(cfg: &RunConfig, model: &TransformerModel<f32>) -> Result<Tensor<f32>> {
    if cfg.calib.file.is_some() || cfg.calib_source()? != CalibSource::Gaussian {
        return Ok(calibration_set(cfg, model)?.embeddings(model)?);
    }
    let text = cfg
        .calib
        .reference
        .as_ref()
        .or(cfg.train.corpus.as_ref())
        .context("gaussian calibration needs calib.reference or train.corpus")?;
    let mut real_cfg = cfg.calib_config(BTreeSet::new())?;
    real_cfg.source = CalibSource::Real(text.display().to_string());
    let real = calib::load_real(&read_tokens(text)?, &real_cfg, cfg.seed)?.embeddings(model)?;
    let stats = channel_stats(&real)?;
    Ok(calib::random_gaussian(&stats, &real_cfg, cfg.seed)?)
}

fn cmd_gendata(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let ck = checkpoint(cfg)?;
    let set = calibration_set(cfg, &ck.model)?;
    save_calibration(&set, &prov.with_model(Some(ck.provenance.run_id)), &cfg.out.join("calib.bin"))
}

fn cmd_quantize(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let ck = checkpoint(cfg)?;
    let quantizer = cfg.quantizer()?;
    let qcfg = cfg.quant_config();
    let x0 = if quantizer.needs_calibration() && !qcfg.is_passthrough() {
        Some(calibration_batch(cfg, &ck.model)?)
    } else {
        None
    };
    let q = quantize_model(&ck.model, quantizer, &qcfg, x0.as_ref())?;
    save_checkpoint(&q, &prov.with_model(Some(ck.provenance.run_id)), &model_dir(cfg))
}

fn cmd_tweak(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let ck = checkpoint(cfg)?;
    let x0 = calibration_batch(cfg, &ck.model)?;
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let clock_ref: Option<&dyn Fn() -> f64> = if cfg.timing { Some(&clock) } else { None };
    let (q, rep) = tweak_model_timed(&ck.model, cfg.quantizer()?, &x0, &cfg.quant_config(), &cfg.tweak_config()?, clock_ref)?;
    let prov = prov.with_model(Some(ck.provenance.run_id));
    save_checkpoint(&q, &prov, &model_dir(cfg))?;
    report::write_json(&cfg.out.join("tweak_report.json"), &prov, report::tweak_json(&rep))?;
    report::write_text(&cfg.out.join("tweak_report.csv"), &prov, &report::tweak_csv(&rep))
}

/// Perplexity and last-word accuracy of `model` on every configured dataset.
pub fn evaluate(cfg: &RunConfig, model: &TransformerModel<f32>) -> Result<Vec<EvalResult>> {
    let mut out = Vec::new();
    for d in &cfg.eval.datasets {
        let mut tokens = read_tokens(&d.path)?;
        if cfg.eval.max_tokens > 0 {
            tokens.truncate(cfg.eval.max_tokens);
        }
        let ppl = eval::perplexity(model, &tokens, cfg.eval.stride).with_context(|| format!("dataset '{}'", d.name))?;
        let mut r = if cfg.eval.cloze_items > 0 {
            let items = eval::cloze_items(&tokens, cfg.eval.cloze_items, cfg.eval.cloze_context, cfg.seed)
                .with_context(|| format!("dataset '{}'", d.name))?;
            ppl.merge(eval::last_word_accuracy(model, &items)?)
        } else {
            ppl
        };
        r.dataset = d.name.clone();
        out.push(r);
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let ck = checkpoint(cfg)?;
    let results = evaluate(cfg, &ck.model)?;
    let prov = prov.with_model(Some(ck.provenance.run_id));
    report::write_json(&cfg.out.join("eval.json"), &prov, report::eval_json(&results))?;
    report::write_text(&cfg.out.join("eval.csv"), &prov, &report::eval_csv(&results))
}

fn cmd_compare(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let mut methods = Vec::new();
    for m in &cfg.eval.models {
        let ck = load_checkpoint(&m.path).with_context(|| format!("model '{}'", m.name))?;
        methods.push((m.name.clone(), evaluate(cfg, &ck.model)?));
    }
    let table = eval::compare(&methods)?;
    report::write_json(&cfg.out.join("comparison.json"), &prov, report::comparison_json(&table))?;
    report::write_text(&cfg.out.join("comparison.csv"), &prov, &table.to_csv())?;
    report::write_text(&cfg.out.join("comparison.txt"), &prov, &table.to_text())
}

fn cmd_divergence(cfg: &RunConfig, prov: Provenance) -> Result<()> {
    let reference = checkpoint(cfg)?;
    let other = load_checkpoint(cfg.eval.other.as_deref().context("eval.other is required")?)?;
    let x0 = calibration_batch(cfg, &reference.model)?;
    let mut rep = eval::divergence_profile(&reference.model, &other.model, &x0)?;
    rep.reference_id = reference.provenance.run_id.clone();
    rep.other_id = other.provenance.run_id;
    let prov = prov.with_model(Some(reference.provenance.run_id));
    report::write_json(&cfg.out.join("divergence.json"), &prov, report::divergence_json(&rep))?;
    report::write_text(&cfg.out.join("divergence.csv"), &prov, &report::divergence_csv(&rep))?;
    report::write_text(&cfg.out.join("divergence.txt"), &prov, &rep.to_text())
}
