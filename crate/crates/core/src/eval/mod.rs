//! Perplexity, final-token accuracy, per-layer divergence and comparison
//! tables.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{argmax, TransformerModel};
use crate::normtweak::{channel_stats, delta_mu, delta_var};
use crate::numerics::{log_softmax, Real, Rng, Tensor};

/// Metrics of one model on one dataset. Absent metrics were not measured.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub dataset: String,
    pub ppl: Option<f64>,
    pub mean_nll: Option<f64>,
    pub n_tokens: usize,
    pub last_word_acc: Option<f64>,
    pub n_items: usize,
}

impl EvalResult {
    /// Fills metrics missing here from `other`.
    pub fn merge(mut self, other: EvalResult) -> EvalResult {
        if self.ppl.is_none() {
            self.ppl = other.ppl;
            self.mean_nll = other.mean_nll;
            self.n_tokens = other.n_tokens;
        }
        if self.last_word_acc.is_none() {
            self.last_word_acc = other.last_word_acc;
            self.n_items = other.n_items;
        }
        self
    }
}

/// Sliding-window perplexity. Windows span `max_seq_len` tokens and advance
/// by `stride`; each position is scored once, in the first window that
/// reaches it.
pub fn perplexity<T: Real>(model: &TransformerModel<T>, tokens: &[u32], stride: usize) -> Result<EvalResult> {
    let window = model.config.max_seq_len.min(tokens.len());
    if tokens.len() < 2 {
        return Err(Error::contract("perplexity needs at least two tokens"));
    }
    if stride == 0 || stride > window {
        return Err(Error::input(alloc::format!("stride must lie in 1..={window}, got {stride}")));
    }
    let v = model.config.vocab_size;
    let mut nll = 0.0f64;
    let mut scored = 0usize;
    let mut prev_end = 0usize;
    let mut begin = 0usize;
    loop {
        let end = (begin + window).min(tokens.len());
        let logits = model.forward(&tokens[begin..end], 1, end - begin)?.cast::<f64>();
        let logp = log_softmax(&logits);
        // position p predicts token p + 1
        let first = prev_end.max(begin + 1);
        for t in first..end {
            let p = t - 1 - begin;
            nll -= logp[p * v + tokens[t] as usize];
            scored += 1;
        }
        prev_end = end;
        if end == tokens.len() {
            break;
        }
        begin += stride;
    }
    let mean = nll / scored as f64;
    Ok(EvalResult {
        dataset: String::new(),
        ppl: Some(libm::exp(mean)),
        mean_nll: Some(mean),
        n_tokens: scored,
        last_word_acc: None,
        n_items: 0,
    })
}

/// A context and the token that should follow it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClozeItem {
    pub context: Vec<u32>,
    pub target: u32,
}

/// Fraction of items whose greedy next-token prediction equals the target.
pub fn last_word_accuracy<T: Real>(model: &TransformerModel<T>, items: &[ClozeItem]) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(Error::contract("last_word_accuracy needs at least one item"));
    }
    let v = model.config.vocab_size;
    let mut hits = 0usize;
    for it in items {
        let n = it.context.len();
        let logits = model.forward(&it.context, 1, n)?;
        if argmax(&logits.data()[(n - 1) * v..n * v]) == it.target as usize {
            hits += 1;
        }
    }
    Ok(EvalResult {
        dataset: String::new(),
        ppl: None,
        mean_nll: None,
        n_tokens: 0,
        last_word_acc: Some(hits as f64 / items.len() as f64),
        n_items: items.len(),
    })
}

/// `n` random windows of `context_len + 1` tokens; the final token is the
/// target.
pub fn cloze_items(tokens: &[u32], n: usize, context_len: usize, seed: u64) -> Result<Vec<ClozeItem>> {
    if context_len == 0 || tokens.len() < context_len + 1 {
        return Err(Error::input("text too short for the requested cloze context"));
    }
    let mut rng = Rng::substream(seed, "eval.cloze");
    let starts = tokens.len() - context_len;
    Ok((0..n)
        .map(|_| {
            let s = rng.below(starts);
            ClozeItem {
                context: tokens[s..s + context_len].to_vec(),
                target: tokens[s + context_len],
            }
        })
        .collect())
}

/// Per-layer distance between two models' block-output statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub reference_id: String,
    pub other_id: String,
    /// `samples x tokens` of the batch.
    pub batch: String,
    pub delta_mu: Vec<f64>,
    pub delta_var: Vec<f64>,
}

impl DivergenceReport {
    pub fn mean_delta_mu(&self) -> f64 {
        self.delta_mu.iter().sum::<f64>() / self.delta_mu.len().max(1) as f64
    }

    pub fn mean_delta_var(&self) -> f64 {
        self.delta_var.iter().sum::<f64>() / self.delta_var.len().max(1) as f64
    }

    /// Whitespace-aligned table, one row per layer.
    pub fn to_text(&self) -> String {
        let mut s = alloc::format!("{:>5} {:>12} {:>12}\n", "layer", "delta_mu", "delta_var");
        for (l, (m, v)) in self.delta_mu.iter().zip(&self.delta_var).enumerate() {
            s += &alloc::format!("{l:>5} {m:>12.6} {v:>12.6}\n");
        }
        s
    }
}

/// Runs both models on the block-0 batch `x0`, each along its own pipeline,
/// and compares block outputs layer by layer.
pub fn divergence_profile<T: Real>(
    reference: &TransformerModel<T>,
    other: &TransformerModel<T>,
    x0: &Tensor<T>,
) -> Result<DivergenceReport> {
    if reference.config != other.config {
        return Err(Error::contract("models have different configurations"));
    }
    let a = reference.run_blocks(x0.clone())?;
    let b = other.run_blocks(x0.clone())?;
    let mut delta_mu_l = Vec::with_capacity(a.len());
    let mut delta_var_l = Vec::with_capacity(a.len());
    for l in 0..a.len() {
        let (sa, sb) = (channel_stats(a.output(l))?, channel_stats(b.output(l))?);
        delta_mu_l.push(delta_mu(&sa, &sb)?);
        delta_var_l.push(delta_var(&sa, &sb)?);
    }
    let shape = x0.shape();
    Ok(DivergenceReport {
        reference_id: String::from("reference"),
        other_id: String::from("other"),
        batch: alloc::format!("{}x{}", shape[0], shape.get(1).copied().unwrap_or(1)),
        delta_mu: delta_mu_l,
        delta_var: delta_var_l,
    })
}

/// Methods as rows, metrics as columns, values fixed to four decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| alloc::format!("{x:.4}"))
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for c in &self.columns {
            s.push(',');
            s += c;
        }
        s.push('\n');
        for (name, vals) in &self.rows {
            s += name;
            for v in vals {
                s.push(',');
                s += &cell(*v);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut head = alloc::vec![String::from("method")];
        head.extend(self.columns.iter().cloned());
        table.push(head);
        for (name, vals) in &self.rows {
            let mut r = alloc::vec![name.clone()];
            r.extend(vals.iter().map(|v| cell(*v)));
            table.push(r);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in &table {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, &w))| if i == 0 { alloc::format!("{v:<w$}") } else { alloc::format!("{v:>w$}") })
                .collect();
            s += line.join("  ").trim_end();
            s.push('\n');
        }
        s
    }
}

/// Builds a table from per-method results. Columns follow the dataset order
/// of the first method: `<dataset>.ppl` then `<dataset>.acc`.
pub fn compare(methods: &[(String, Vec<EvalResult>)]) -> Result<ComparisonTable> {
    let Some((_, first)) = methods.first() else {
        return Err(Error::contract("compare needs at least one method"));
    };
    let datasets: Vec<&str> = first.iter().map(|r| r.dataset.as_str()).collect();
    let mut columns = Vec::new();
    for d in &datasets {
        columns.push(alloc::format!("{d}.ppl"));
        columns.push(alloc::format!("{d}.acc"));
    }
    let rows = methods
        .iter()
        .map(|(name, results)| {
            let mut vals = Vec::with_capacity(columns.len());
            for d in &datasets {
                let r = results.iter().find(|r| r.dataset == *d);
                vals.push(r.and_then(|r| r.ppl));
                vals.push(r.and_then(|r| r.last_word_acc));
            }
            (name.clone(), vals)
        })
        .collect();
    Ok(ComparisonTable { columns, rows })
}
