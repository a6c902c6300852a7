//! Byte-level tokenizer: token id = byte value. Ids 256.. are unused by text
//! and exist only to pad the vocabulary.

use alloc::string::String;
use alloc::vec::Vec;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Lossy decode; ids outside the byte range are skipped.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
