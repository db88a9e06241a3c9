//! `tokens.jsonl`: one JSON record per image, `{"source_id": ..,
//! "indices": [8 ints]}`, in input order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::util::store::write_atomic;

use super::TokenSequence;

/// Writes sequences as newline-delimited JSON (atomically).
pub fn write_tokens_file(path: &Path, sequences: &[TokenSequence]) -> Result<()> {
    let mut out = String::new();
    for seq in sequences {
        out.push_str(&serde_json::to_string(seq)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a file written by [`write_tokens_file`].
pub fn read_tokens_file(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| Error::format(format!("{}: bad token record: {e}", path.display())))
        })
        .collect()
}
