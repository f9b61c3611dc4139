//! Character-level tokenizer over a fixed 101-token vocabulary.
//!
//! 98 character tokens (ids 0..=97) plus BOS (98), EOS (99) and PAD (100).
//! The character set is the 94 printable ASCII characters 0x21..=0x7E (space
//! excluded) at ids 0..=93, plus four reserved control characters
//! (NUL, TAB, LF, CR) at ids 94..=97 that never appear in task data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 101;
pub const BOS: u32 = 98;
pub const EOS: u32 = 99;
pub const PAD: u32 = 100;

const RESERVED: [u8; 4] = [0x00, 0x09, 0x0a, 0x0d];

/// Serializable description of the vocabulary, stored in checkpoints so a
/// model can only be reloaded with the tokenizer it was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub version: u32,
    /// The 98 characters in id order.
    pub chars: String,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    char_to_id: [Option<u32>; 128],
    id_to_char: [u8; 98],
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut char_to_id = [None; 128];
        let mut id_to_char = [0u8; 98];
        let mut id = 0u32;
        for c in 0x21u8..=0x7e {
            char_to_id[c as usize] = Some(id);
            id_to_char[id as usize] = c;
            id += 1;
        }
        for c in RESERVED {
            char_to_id[c as usize] = Some(id);
            id_to_char[id as usize] = c;
            id += 1;
        }
        debug_assert_eq!(id, 98);
        Tokenizer { char_to_id, id_to_char }
    }

    pub fn spec(&self) -> TokenizerSpec {
        TokenizerSpec {
            version: 1,
            chars: self.id_to_char.iter().map(|&c| c as char).collect(),
            bos: BOS,
            eos: EOS,
            pad: PAD,
        }
    }

    pub fn matches_spec(&self, spec: &TokenizerSpec) -> bool {
        *spec == self.spec()
    }

    fn char_id(&self, ch: char, index: usize) -> Result<u32> {
        let code = ch as usize;
        if code < 128 {
            if let Some(id) = self.char_to_id[code] {
                return Ok(id);
            }
        }
        Err(Error::OutOfVocab { ch, index })
    }

    /// `[BOS] + per-character ids + [EOS]`.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len() + 2);
        out.push(BOS);
        for (i, ch) in text.chars().enumerate() {
            out.push(self.char_id(ch, i)?);
        }
        out.push(EOS);
        Ok(out)
    }

    /// `[BOS] + per-character ids`, no EOS: an open prefix for generation or
    /// representation extraction.
    pub fn encode_prefix(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len() + 1);
        out.push(BOS);
        for (i, ch) in text.chars().enumerate() {
            out.push(self.char_id(ch, i)?);
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode): skips BOS, stops at the first
    /// EOS (trailing PADs are therefore ignored), rejects PAD inside content
    /// and unknown ids.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            match id {
                BOS => {}
                EOS => break,
                PAD => return Err(Error::PadInContent { index: i }),
                _ if (id as usize) < 98 => out.push(self.id_to_char[id as usize] as char),
                _ => return Err(Error::InvalidTokenId { id }),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string_is_bos_eos() {
        let t = Tokenizer::new();
        assert_eq!(t.encode("").unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn paper_example_length() {
        let t = Tokenizer::new();
        let s = "dist(c_0865,c_4879)=769";
        assert_eq!(t.encode(s).unwrap().len(), s.len() + 2);
        assert_eq!(t.encode(s).unwrap().len(), 25);
    }

    #[test]
    fn round_trip_and_eos_stop() {
        let t = Tokenizer::new();
        let s = "cross(c_2345,c_6789;c_0123,c_4567)=TRUE";
        let mut ids = t.encode(s).unwrap();
        assert_eq!(t.decode(&ids).unwrap(), s);
        ids.extend([PAD, PAD, PAD]); // right padding is ignored
        assert_eq!(t.decode(&ids).unwrap(), s);
    }

    #[test]
    fn single_char() {
        let t = Tokenizer::new();
        let ids = t.encode("a").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(t.decode(&ids).unwrap(), "a");
    }

    #[test]
    fn rejects_oov_and_bad_ids() {
        let t = Tokenizer::new();
        match t.encode("ab cd") {
            Err(Error::OutOfVocab { ch: ' ', index: 2 }) => {}
            other => panic!("expected OOV at 2, got {other:?}"),
        }
        assert!(matches!(t.decode(&[200]), Err(Error::InvalidTokenId { id: 200 })));
        assert!(matches!(t.decode(&[BOS, 0, PAD, EOS]), Err(Error::PadInContent { index: 2 })));
    }

    #[test]
    fn vocab_is_dense_and_bijective() {
        let t = Tokenizer::new();
        let spec = t.spec();
        assert_eq!(spec.chars.chars().count(), 98);
        let mut seen = std::collections::HashSet::new();
        for ch in spec.chars.chars() {
            assert!(seen.insert(ch));
        }
        assert!(t.matches_spec(&spec));
    }
}
