//! Checkpoint directories: `manifest.json` lists every tensor by byte range
//! in `weights.bin` together with the blob's SHA-256; `model.json` carries the
//! config. Both JSON files carry the provenance of the run that wrote them.
//! Quantized Linears are stored as i8 codes plus f32 scales.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use normtweak_core::model::{Linear, ModelConfig, NormKind, TransformerModel};
use normtweak_core::quant::{Granularity, QuantizedLinear};
use normtweak_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::provenance::Provenance;

const FORMAT: &str = "normtweak-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub provenance: Provenance,
    pub weights_sha256: String,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigJson {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub norm: String,
    pub eps: f64,
}

impl From<&ModelConfig> for ConfigJson {
    fn from(c: &ModelConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            hidden: c.hidden,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
            norm: match c.norm_kind {
                NormKind::LayerNorm => "layernorm",
                NormKind::RmsNorm => "rmsnorm",
            }
            .into(),
            eps: c.eps,
        }
    }
}

impl ConfigJson {
    fn to_config(&self) -> Result<ModelConfig> {
        let norm_kind = match self.norm.as_str() {
            "layernorm" => NormKind::LayerNorm,
            "rmsnorm" => NormKind::RmsNorm,
            other => bail!("unknown norm kind '{other}'"),
        };
        let c = ModelConfig {
            vocab_size: self.vocab_size,
            hidden: self.hidden,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            norm_kind,
            eps: self.eps,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    pub format: String,
    pub config: ConfigJson,
    pub act_bits: Option<u8>,
    pub provenance: Provenance,
}

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerModel<f32>,
    pub provenance: Provenance,
}

fn linear_names(model: &TransformerModel<f32>) -> Vec<(String, &Linear<f32>)> {
    let mut out = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        let names = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];
        for (n, lin) in names.iter().zip(b.linears()) {
            out.push((format!("blocks.{l}.{n}"), lin));
        }
    }
    out
}

/// Writes `model` under `dir`, creating it if needed.
pub fn save_checkpoint(model: &TransformerModel<f32>, provenance: &Provenance, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let quantized: BTreeMap<String, &QuantizedLinear> = linear_names(model)
        .into_iter()
        .filter_map(|(n, l)| l.quant.as_ref().map(|q| (n, q)))
        .collect();
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = Vec::new();
    let mut push = |name: String, shape: &[usize], dtype: &str, bytes: Vec<u8>, q: Option<&QuantizedLinear>| {
        manifest.push(ManifestEntry {
            name,
            shape: shape.to_vec(),
            dtype: dtype.into(),
            offset: blob.len(),
            length: bytes.len(),
            bits: q.map(|q| q.bits),
            group_size: q.and_then(|q| match q.granularity {
                Granularity::PerChannel => None,
                Granularity::PerGroup(g) => Some(g),
            }),
        });
        blob.extend_from_slice(&bytes);
    };
    let f32_bytes = |t: &[f32]| t.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    for (name, t) in model.named_tensors() {
        match quantized.get(&name) {
            Some(q) => {
                let codes = q.codes.data().iter().map(|&c| c as u8).collect();
                push(format!("{name}.codes"), q.codes.shape(), "i8", codes, Some(q));
                push(format!("{name}.scales"), q.scales.shape(), "f32", f32_bytes(q.scales.data()), Some(q));
            }
            None => push(name, t.shape(), "f32", f32_bytes(t.data()), None),
        }
    }
    let meta = ModelJson {
        format: FORMAT.into(),
        config: (&model.config).into(),
        act_bits: model.act_bits,
        provenance: provenance.clone(),
    };
    std::fs::write(dir.join("weights.bin"), &blob)?;
    let manifest = Manifest {
        provenance: provenance.clone(),
        weights_sha256: hex::encode(Sha256::digest(&blob)),
        tensors: manifest,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Slices and checks one manifest entry against the blob.
fn entry_bytes<'a>(e: &ManifestEntry, blob: &'a [u8], dtype: &str, shape: &[usize]) -> Result<&'a [u8]> {
    if e.dtype != dtype {
        bail!("tensor '{}': dtype {} where {dtype} was expected", e.name, e.dtype);
    }
    if e.shape != shape {
        bail!("tensor '{}': shape {:?} where {shape:?} was expected", e.name, e.shape);
    }
    let width = if dtype == "i8" { 1 } else { 4 };
    let want = e.shape.iter().product::<usize>() * width;
    if e.length != want {
        bail!("tensor '{}': length {} does not match shape {:?} ({want} bytes)", e.name, e.length, e.shape);
    }
    let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len());
    match end {
        Some(end) => Ok(&blob[e.offset..end]),
        None => bail!(
            "tensor '{}': bytes {}..{} lie outside weights.bin ({} bytes)",
            e.name,
            e.offset,
            e.offset.saturating_add(e.length),
            blob.len()
        ),
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Reads a checkpoint; any inconsistency is an error naming the tensor and
/// no partial model is returned.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: ModelJson = read_json(&dir.join("model.json"))?;
    if meta.format != FORMAT {
        bail!("{}: unsupported checkpoint format '{}'", dir.display(), meta.format);
    }
    let Manifest {
        weights_sha256,
        tensors: manifest,
        ..
    } = read_json(&dir.join("manifest.json"))?;
    let blob = std::fs::read(dir.join("weights.bin")).with_context(|| format!("reading {}/weights.bin", dir.display()))?;
    let config = meta.config.to_config()?;
    let mut entries: BTreeMap<&str, &ManifestEntry> = BTreeMap::new();
    for e in &manifest {
        if entries.insert(&e.name, e).is_some() {
            bail!("tensor '{}' listed twice in the manifest", e.name);
        }
    }

    // the shapes come from an initialized model of the same config
    let mut model = TransformerModel::<f32>::init(config, &mut normtweak_core::Rng::new(0))?;
    model.act_bits = meta.act_bits;
    let mut used = 0usize;
    let linears: Vec<String> = linear_names(&model).into_iter().map(|(n, _)| n).collect();
    let mut quantized: BTreeMap<String, QuantizedLinear> = BTreeMap::new();
    for (name, t) in model.named_tensors_mut() {
        if let Some(e) = entries.get(name.as_str()) {
            let bytes = entry_bytes(e, &blob, "f32", t.shape())?;
            t.data_mut().copy_from_slice(&f32s(bytes));
            used += 1;
            continue;
        }
        let codes_name = format!("{name}.codes");
        let scales_name = format!("{name}.scales");
        let (Some(c), Some(s)) = (entries.get(codes_name.as_str()), entries.get(scales_name.as_str())) else {
            bail!("tensor '{name}' missing from the manifest");
        };
        if !linears.contains(&name) {
            bail!("tensor '{name}' cannot be stored quantized");
        }
        let bits = c.bits.with_context(|| format!("tensor '{codes_name}' has no bits"))?;
        let granularity = c.group_size.map_or(Granularity::PerChannel, Granularity::PerGroup);
        let (out, inp) = (t.shape()[0], t.shape()[1]);
        let groups = inp / granularity.group_size(inp).max(1);
        let codes_b = entry_bytes(c, &blob, "i8", &[out, inp])?;
        let scales_b = entry_bytes(s, &blob, "f32", &[out, groups])?;
        let q = QuantizedLinear {
            codes: Tensor::new(&[out, inp], codes_b.iter().map(|&b| b as i8).collect())?,
            scales: Tensor::new(&[out, groups], f32s(scales_b))?,
            bits,
            granularity,
        };
        let qmax = (1i32 << (bits - 1)) - 1;
        if q.codes.data().iter().any(|&v| (v as i32).abs() > qmax) {
            bail!("tensor '{codes_name}': code outside the {bits}-bit range");
        }
        *t = q.dequantize();
        quantized.insert(name, q);
        used += 2;
    }
    if used != manifest.len() {
        let known: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let extra = manifest
            .iter()
            .find(|e| !known.iter().any(|k| e.name == *k || e.name == format!("{k}.codes") || e.name == format!("{k}.scales")))
            .map_or_else(|| "?".to_string(), |e| e.name.clone());
        bail!("tensor '{extra}' in the manifest is not part of the model");
    }
    if hex::encode(Sha256::digest(&blob)) != weights_sha256 {
        bail!("{}/weights.bin does not match the manifest checksum", dir.display());
    }
    for (l, b) in model.blocks.iter_mut().enumerate() {
        let names = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];
        for (n, lin) in names.iter().zip(b.linears_mut()) {
            if let Some(q) = quantized.remove(&format!("blocks.{l}.{n}")) {
                *lin = Linear::from_quantized(q);
            }
        }
    }
    Ok(Checkpoint {
        model,
        provenance: meta.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use normtweak_core::quant::{quantize_model, QuantConfig, Quantizer};
    use normtweak_core::Rng;

    fn tiny() -> TransformerModel<f32> {
        let cfg = ModelConfig {
            vocab_size: 20,
            hidden: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        TransformerModel::init(cfg, &mut Rng::new(4)).unwrap()
    }

    fn prov() -> Provenance {
        Provenance::new("test", &RunConfig::default())
    }

    #[test]
    fn float_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny();
        save_checkpoint(&m, &prov(), dir.path()).unwrap();
        let c = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.provenance, prov());
    }

    #[test]
    fn quantized_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = QuantConfig::new(2, Granularity::PerGroup(8));
        cfg.act_bits = Some(8);
        let q = quantize_model(&tiny(), Quantizer::Rtn, &cfg, None).unwrap();
        save_checkpoint(&q, &prov(), dir.path()).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap().model, q);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&tiny(), &prov(), dir.path()).unwrap();
        let p = dir.path().join("weights.bin");
        let blob = std::fs::read(&p).unwrap();
        std::fs::write(&p, &blob[..blob.len() - 3]).unwrap();
        let e = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(e.contains("final_norm.beta"), "{e}");
    }

    #[test]
    fn wrong_shape_product_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&tiny(), &prov(), dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        m.tensors[3].length += 4;
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        let e = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(e.contains(&m.tensors[3].name), "{e}");
    }

    #[test]
    fn corrupted_blob_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&tiny(), &prov(), dir.path()).unwrap();
        let p = dir.path().join("weights.bin");
        let mut blob = std::fs::read(&p).unwrap();
        blob[0] ^= 1;
        std::fs::write(&p, &blob).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn missing_and_extra_tensors() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&tiny(), &prov(), dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let orig: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let mut m = orig.clone();
        m.tensors.remove(1);
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("pos_emb"));
        let mut m = orig;
        let mut extra = m.tensors[0].clone();
        extra.name = "stray".into();
        m.tensors.push(extra);
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("stray"));
    }
}
