//! Token id mapping for the frozen LM.
//!
//! Two schemes cover both worlds: a character-level tokenizer over a fixed
//! 128-symbol alphabet for real-text runs, and raw integer ids for
//! synthetic corpora. Ids 0 and 1 are reserved for `<s>` and `</s>` in
//! both schemes.

use crate::error::{Error, Result};

/// Beginning-of-sequence token id (`<s>`).
pub const BOS: u32 = 0;
/// End-of-sequence token id (`</s>`).
pub const EOS: u32 = 1;

/// First printable ASCII character covered by the char tokenizer.
const CHAR_BASE: u32 = 2;
const FIRST_CHAR: u8 = b' '; // 0x20
const LAST_CHAR: u8 = b'~'; // 0x7e

pub const CHAR_VOCAB_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    /// 128-slot vocabulary: bos, eos, printable ASCII, spare slots.
    Chars,
    /// Whitespace-separated integer ids over an explicit vocabulary size.
    RawIds { vocab_size: usize },
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Chars => CHAR_VOCAB_SIZE,
            Tokenizer::RawIds { vocab_size } => *vocab_size,
        }
    }

    /// Encode plain text (no `<s>`/`</s>` markers).
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Chars => text
                .bytes()
                .map(|b| {
                    if (FIRST_CHAR..=LAST_CHAR).contains(&b) {
                        Ok(CHAR_BASE + (b - FIRST_CHAR) as u32)
                    } else {
                        Err(Error::Precondition(format!(
                            "byte 0x{b:02x} is outside the 128-symbol alphabet"
                        )))
                    }
                })
                .collect(),
            Tokenizer::RawIds { vocab_size } => text
                .split_whitespace()
                .map(|tok| {
                    let id: u32 = tok.parse().map_err(|_| {
                        Error::Precondition(format!("'{tok}' is not a raw token id"))
                    })?;
                    if (id as usize) < *vocab_size {
                        Ok(id)
                    } else {
                        Err(Error::Precondition(format!(
                            "token id {id} outside vocabulary of size {vocab_size}"
                        )))
                    }
                })
                .collect(),
        }
    }

    /// Decode a transcript token sequence back to text. `<s>`/`</s>` are
    /// dropped; raw ids render space-separated.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::Chars => {
                let mut s = String::with_capacity(ids.len());
                for &id in ids {
                    if id == BOS || id == EOS {
                        continue;
                    }
                    let off = id.checked_sub(CHAR_BASE).ok_or_else(|| {
                        Error::Precondition(format!("id {id} is not a character token"))
                    })?;
                    let b = FIRST_CHAR as u32 + off;
                    if b > LAST_CHAR as u32 {
                        return Err(Error::Precondition(format!(
                            "id {id} is outside the character range"
                        )));
                    }
                    s.push(b as u8 as char);
                }
                Ok(s)
            }
            Tokenizer::RawIds { .. } => Ok(ids
                .iter()
                .filter(|&&id| id != BOS && id != EOS)
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(" ")),
        }
    }

    /// Render a vocab token as a display label (alignment-map column labels).
    pub fn token_label(&self, id: u32) -> String {
        match self {
            Tokenizer::Chars => match id {
                BOS => "<s>".into(),
                EOS => "</s>".into(),
                _ => {
                    let b = FIRST_CHAR as u32 + id - CHAR_BASE;
                    if id >= CHAR_BASE && b <= LAST_CHAR as u32 {
                        (b as u8 as char).to_string()
                    } else {
                        format!("<{id}>")
                    }
                }
            },
            Tokenizer::RawIds { .. } => match id {
                BOS => "<s>".into(),
                EOS => "</s>".into(),
                _ => id.to_string(),
            },
        }
    }

    /// Content tokens a synthetic corpus may draw from (everything except
    /// the reserved specials).
    pub fn content_tokens(&self) -> Vec<u32> {
        (2..self.vocab_size() as u32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chars_roundtrip() {
        let t = Tokenizer::Chars;
        let ids = t.encode_text("Transcribe speech to text.").unwrap();
        assert_eq!(t.decode_text(&ids).unwrap(), "Transcribe speech to text.");
    }

    #[test]
    fn chars_rejects_non_ascii() {
        let t = Tokenizer::Chars;
        assert!(t.encode_text("caf\u{e9}").is_err());
        assert!(t.encode_text("tab\there").is_err());
    }

    #[test]
    fn raw_ids_parse_and_respect_vocab() {
        let t = Tokenizer::RawIds { vocab_size: 8 };
        assert_eq!(t.encode_text("2 5 7").unwrap(), vec![2, 5, 7]);
        assert!(t.encode_text("9").is_err());
        assert!(t.encode_text("x").is_err());
        assert_eq!(t.decode_text(&[2, 5, 7]).unwrap(), "2 5 7");
    }

    #[test]
    fn specials_are_skipped_on_decode() {
        let t = Tokenizer::Chars;
        let mut ids = vec![BOS];
        ids.extend(t.encode_text("ab").unwrap());
        ids.push(EOS);
        assert_eq!(t.decode_text(&ids).unwrap(), "ab");
    }
}
