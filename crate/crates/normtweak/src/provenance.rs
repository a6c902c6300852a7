use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub run_id: String,
    /// Run that produced the model this output describes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_run_id: Option<String>,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let config_hash = hex::encode(Sha256::digest(cfg.canonical_json().as_bytes()));
        let run_id = hex::encode(Sha256::digest(format!("{command}:{config_hash}:{}", cfg.seed).as_bytes()))[..16].to_string();
        Self {
            command: command.to_string(),
            seed: cfg.seed,
            config_hash,
            version: VERSION.to_string(),
            run_id,
            model_run_id: None,
        }
    }

    pub fn with_model(mut self, model_run_id: Option<String>) -> Self {
        self.model_run_id = model_run_id;
        self
    }

    /// One-line form for the head of CSV and text files.
    pub fn comment(&self) -> String {
        let mut s = format!(
            "# command={} seed={} config_hash={} version={} run_id={}",
            self.command, self.seed, self.config_hash, self.version, self.run_id
        );
        if let Some(m) = &self.model_run_id {
            s += &format!(" model_run_id={m}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_seed_sensitive() {
        let c = RunConfig::default();
        let a = Provenance::new("tweak", &c);
        assert_eq!(a, Provenance::new("tweak", &c));
        assert_eq!(a.config_hash.len(), 64);
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(a.run_id, Provenance::new("tweak", &d).run_id);
        assert_ne!(a.run_id, Provenance::new("eval", &c).run_id);
    }
}
