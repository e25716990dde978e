use unicode_normalization::UnicodeNormalization;

use super::vocab::UNK_TOKEN;
use crate::error::{Error, Result};

/// Non-ASCII punctuation removed in addition to ASCII punctuation.
pub const EXTRA_PUNCTUATION: &[char] = &[
    '\u{2013}', // – en dash
    '\u{2014}', // — em dash
    '\u{2026}', // … ellipsis
    '\u{05C0}', // ׀ paseq
    '\u{0964}', // । danda
    '\u{0965}', // ॥ double danda
];

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCTUATION.contains(&c)
}

/// NFC-normalizes, splits on Unicode whitespace and deletes punctuation
/// characters from each piece. No case folding. The literal `<unk>` marker
/// survives so decoded captions re-encode to the same ids.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    normalized
        .split_whitespace()
        .filter_map(|piece| {
            if piece == UNK_TOKEN {
                return Some(piece.to_string());
            }
            let kept: String = piece.chars().filter(|c| !is_punctuation(*c)).collect();
            (!kept.is_empty()).then_some(kept)
        })
        .collect()
}

pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Encoding(format!("invalid UTF-8 at byte {}", e.valid_up_to())))?;
    Ok(tokenize(text))
}
