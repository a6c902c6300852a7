//! Calibration sets on disk: u16 token ids plus a JSON sidecar carrying the
//! shape, checksum and provenance.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use normtweak_core::calib::{CalibSource, CalibrationSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::provenance::Provenance;
use crate::tokens::encode_u16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibSidecar {
    pub n_samples: usize,
    pub token_length: usize,
    pub source: String,
    pub seed: u64,
    /// SHA-256 of the token file.
    pub sha256: String,
    pub provenance: Provenance,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn save_calibration(set: &CalibrationSet, provenance: &Provenance, bin: &Path) -> Result<()> {
    let bytes = encode_u16(&set.flat())?;
    let side = CalibSidecar {
        n_samples: set.n_samples(),
        token_length: set.token_length(),
        source: set.source.describe(),
        seed: set.seed,
        sha256: hex::encode(Sha256::digest(&bytes)),
        provenance: provenance.clone(),
    };
    std::fs::write(bin, &bytes).with_context(|| format!("writing {}", bin.display()))?;
    std::fs::write(sidecar_path(bin), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn load_calibration(bin: &Path) -> Result<(CalibrationSet, CalibSidecar)> {
    let sp = sidecar_path(bin);
    let side: CalibSidecar = serde_json::from_str(
        &std::fs::read_to_string(&sp).with_context(|| format!("reading {}", sp.display()))?,
    )
    .with_context(|| format!("parsing {}", sp.display()))?;
    let bytes = std::fs::read(bin).with_context(|| format!("reading {}", bin.display()))?;
    let want = side.n_samples * side.token_length * 2;
    if hex::encode(Sha256::digest(&bytes)) != side.sha256 {
        bail!("{} does not match the checksum in {}", bin.display(), sp.display());
    }
    if bytes.len() != want || side.n_samples == 0 {
        bail!(
            "{}: {} bytes where the sidecar implies {want}",
            bin.display(),
            bytes.len()
        );
    }
    let ids: Vec<u32> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect();
    let set = CalibrationSet {
        sequences: ids.chunks(side.token_length).map(<[u32]>::to_vec).collect(),
        source: side.source.parse().unwrap_or(CalibSource::Generated),
        seed: side.seed,
    };
    Ok((set, side))
}
