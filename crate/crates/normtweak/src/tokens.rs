//! Token corpora: raw little-endian u16 ids or UTF-8 text.

use std::path::Path;

use anyhow::{bail, Context, Result};
use normtweak_core::model::tokenizer;

fn is_binary(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("bin" | "u16"))
}

/// Reads `.bin`/`.u16` files as u16 ids and anything else as UTF-8 text
/// through the byte tokenizer.
pub fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_binary(path) {
        if bytes.len() % 2 != 0 {
            bail!("{}: odd byte count for u16 token file", path.display());
        }
        Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect())
    } else {
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
        Ok(tokenizer::encode(&text))
    }
}

pub fn encode_u16(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len() * 2);
    for &t in tokens {
        let t = u16::try_from(t).with_context(|| format!("token id {t} does not fit in u16"))?;
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn write_tokens(path: &Path, tokens: &[u32]) -> Result<()> {
    std::fs::write(path, encode_u16(tokens)?).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_and_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tokens(&p, &[0, 1, 65535, 300]).unwrap();
        assert_eq!(read_tokens(&p).unwrap(), vec![0, 1, 65535, 300]);
        assert!(write_tokens(&p, &[70000]).is_err());
        let q = dir.path().join("t.txt");
        std::fs::write(&q, "hi").unwrap();
        assert_eq!(read_tokens(&q).unwrap(), vec![104, 105]);
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        assert!(read_tokens(&p).is_err());
    }
}
