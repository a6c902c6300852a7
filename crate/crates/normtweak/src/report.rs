//! JSON, CSV and text renderings of run outputs. Every file carries the
//! producing run's provenance.

use std::path::Path;

use anyhow::{Context, Result};
use normtweak_core::eval::{ComparisonTable, DivergenceReport, EvalResult};
use normtweak_core::normtweak::TweakReport;
use serde::Serialize;
use serde_json::{json, Value};

use crate::provenance::Provenance;

pub fn write_json(path: &Path, provenance: &Provenance, body: Value) -> Result<()> {
    let doc = json!({ "provenance": provenance, "report": body });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, provenance: &Provenance, body: &str) -> Result<()> {
    std::fs::write(path, format!("{}\n{body}", provenance.comment())).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct LayerJson {
    layer: usize,
    lr: f64,
    pre_loss: f64,
    post_loss: f64,
    delta_mu_before: f64,
    delta_mu_after: f64,
    delta_var_before: f64,
    delta_var_after: f64,
    steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds: Option<f64>,
}

pub fn tweak_json(r: &TweakReport) -> Value {
    let layers: Vec<LayerJson> = r
        .layers
        .iter()
        .map(|l| LayerJson {
            layer: l.layer,
            lr: l.lr,
            pre_loss: l.pre_loss,
            post_loss: l.post_loss,
            delta_mu_before: l.delta_mu_before,
            delta_mu_after: l.delta_mu_after,
            delta_var_before: l.delta_var_before,
            delta_var_after: l.delta_var_after,
            steps: l.steps,
            warning: l.warning.clone(),
            seconds: l.seconds,
        })
        .collect();
    let search: Vec<Value> = r.search.iter().map(|c| json!({"lr0": c.lr0, "heldout_loss": c.heldout_loss})).collect();
    json!({
        "loss": r.loss.name(),
        "lr0": r.lr0,
        "iters": r.iters,
        "layers": layers,
        "lr_search": search,
        "mean_delta_mu_before": r.mean_delta_mu_before(),
        "mean_delta_mu_after": r.mean_delta_mu_after(),
    })
}

pub fn tweak_csv(r: &TweakReport) -> String {
    let mut s = String::from("layer,lr,pre_loss,post_loss,delta_mu_before,delta_mu_after,delta_var_before,delta_var_after,steps\n");
    for l in &r.layers {
        s += &format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            l.layer, l.lr, l.pre_loss, l.post_loss, l.delta_mu_before, l.delta_mu_after, l.delta_var_before, l.delta_var_after, l.steps
        );
    }
    s
}

pub fn eval_json(results: &[EvalResult]) -> Value {
    Value::Array(
        results
            .iter()
            .map(|r| {
                json!({
                    "dataset": r.dataset,
                    "ppl": r.ppl,
                    "mean_nll": r.mean_nll,
                    "n_tokens": r.n_tokens,
                    "last_word_acc": r.last_word_acc,
                    "n_items": r.n_items,
                })
            })
            .collect(),
    )
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

pub fn eval_csv(results: &[EvalResult]) -> String {
    let mut s = String::from("dataset,ppl,mean_nll,n_tokens,last_word_acc,n_items\n");
    for r in results {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.dataset,
            cell(r.ppl),
            cell(r.mean_nll),
            r.n_tokens,
            cell(r.last_word_acc),
            r.n_items
        );
    }
    s
}

pub fn divergence_json(r: &DivergenceReport) -> Value {
    json!({
        "reference": r.reference_id,
        "other": r.other_id,
        "batch": r.batch,
        "delta_mu": r.delta_mu,
        "delta_var": r.delta_var,
        "mean_delta_mu": r.mean_delta_mu(),
        "mean_delta_var": r.mean_delta_var(),
    })
}

pub fn divergence_csv(r: &DivergenceReport) -> String {
    let mut s = String::from("layer,delta_mu,delta_var\n");
    for (l, (m, v)) in r.delta_mu.iter().zip(&r.delta_var).enumerate() {
        s += &format!("{l},{m:.6},{v:.6}\n");
    }
    s
}

pub fn comparison_json(t: &ComparisonTable) -> Value {
    let rows: Vec<Value> = t
        .rows
        .iter()
        .map(|(name, vals)| {
            let mut m = serde_json::Map::new();
            m.insert("method".into(), json!(name));
            for (c, v) in t.columns.iter().zip(vals) {
                m.insert(c.clone(), json!(v));
            }
            Value::Object(m)
        })
        .collect();
    json!({ "columns": t.columns, "rows": rows })
}
