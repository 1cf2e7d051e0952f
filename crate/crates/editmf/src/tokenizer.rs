//! Word-level tokenizer. Keeping entity names at one token per word makes
//! edit targets short, which is what the editing machinery wants.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const BOS_TOKEN: &str = "<bos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MAX_VOCAB: usize = 4096;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Split text into word-level units: whitespace-separated words with leading
/// and trailing punctuation peeled off as single-character tokens. Internal
/// punctuation (as in "Thornfield's") stays part of the word.
pub fn split_units(text: &str) -> Vec<String> {
    let is_punct = |c: char| ".,!?;:'\"()".contains(c);
    let mut units = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        let mut lead = Vec::new();
        let mut trail = Vec::new();
        while start < end && is_punct(chars[start]) {
            lead.push(chars[start].to_string());
            start += 1;
        }
        while end > start && is_punct(chars[end - 1]) {
            trail.push(chars[end - 1].to_string());
            end -= 1;
        }
        units.extend(lead);
        if start < end {
            units.push(chars[start..end].iter().collect());
        }
        trail.reverse();
        units.extend(trail);
    }
    units
}

impl Tokenizer {
    /// Build from an ordered token list. The first two entries must be the
    /// begin-of-sequence and unknown markers.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != BOS_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Config(
                "token list must start with the <bos> and <unk> markers".into(),
            ));
        }
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens exceeds the {MAX_VOCAB} limit; raise the limit or \
                 shrink the corpus",
                tokens.len()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encode text; unknown units map to the unknown marker.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_units(text)
            .iter()
            .map(|u| self.index.get(u).copied().unwrap_or(1))
            .collect()
    }

    /// Encode text, erroring on any unit outside the vocabulary.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        split_units(text)
            .iter()
            .map(|u| {
                self.index.get(u).copied().ok_or_else(|| {
                    Error::Argument(format!("token {u:?} is not in the vocabulary"))
                })
            })
            .collect()
    }

    /// Decode ids to text. Tokens are joined with single spaces; comparisons
    /// against original text should be whitespace-normalized.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.tokens.get(id as usize).map(|s| s.as_str()).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_tokens(tokens)
    }
}

/// Strip whitespace differences for round-trip and match comparisons.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True when `continuation` begins with `expected`, compared word-by-word
/// after whitespace normalization.
pub fn begins_with_normalized(continuation: &str, expected: &str) -> bool {
    let cont: Vec<&str> = continuation.split_whitespace().collect();
    let want: Vec<&str> = expected.split_whitespace().collect();
    !want.is_empty() && cont.len() >= want.len() && cont[..want.len()] == want[..]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        let mut tokens = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for t in [
            "In", "Caleb", "Thornfield's", "novel", "The", "Golden", "Legacy", ",", "the",
            "protagonist", "is", ".", "'",
        ] {
            tokens.push(t.to_string());
        }
        Tokenizer::from_tokens(tokens).unwrap()
    }

    #[test]
    fn splits_leading_and_trailing_punctuation() {
        assert_eq!(
            split_units("'The Golden Legacy', sure."),
            vec!["'", "The", "Golden", "Legacy", "'", ",", "sure", "."]
        );
        assert_eq!(split_units("Thornfield's"), vec!["Thornfield's"]);
    }

    #[test]
    fn encode_decode_round_trip_up_to_whitespace() {
        let t = toy();
        let text = "In Caleb Thornfield's novel The Golden Legacy, the protagonist is";
        let ids = t.encode(text);
        let back = t.decode(&ids);
        assert_eq!(
            normalize_whitespace(&back).replace(' ', ""),
            normalize_whitespace(text).replace(' ', "")
        );
    }

    #[test]
    fn unknown_units_hit_the_unknown_marker() {
        let t = toy();
        let ids = t.encode("In Zanzibar");
        assert_eq!(ids[1], t.unk_id());
        assert!(t.encode_strict("In Zanzibar").is_err());
    }

    #[test]
    fn prefix_match_is_word_aligned() {
        assert!(begins_with_normalized("Darius Nightshade .", "Darius Nightshade"));
        assert!(!begins_with_normalized("Darius Nightshades", "Darius Nightshade"));
        assert!(!begins_with_normalized("Darius", "Darius Nightshade"));
    }
}
