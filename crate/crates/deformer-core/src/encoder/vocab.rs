//! Closed-vocabulary whitespace tokenizer.
//!
//! Four ids are reserved; every other id is assigned by sorting the unique
//! corpus tokens, so the same corpus always yields the same mapping.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Display strings for the reserved ids, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Token-string ↔ id mapping with the four reserved ids up front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Deduplicates and sorts the corpus tokens, assigning ids from 4 upward.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Vocab {
    let mut unique: Vec<String> = corpus
        .iter()
        .map(|t| t.as_ref().to_string())
        .filter(|t| !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    unique.sort();
    unique.dedup();

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
    tokens.extend(unique);
    Vocab::from_tokens(tokens).expect("reserved prefix is always valid")
}

impl Vocab {
    /// Rebuilds a vocabulary from its full token list (reserved ids first),
    /// the form used for serialization.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "vocabulary must start with [PAD], [CLS], [SEP], [UNK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved prefix is always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Maps tokens to ids, unknown tokens to [`UNK_ID`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    /// Maps ids back to token strings; out-of-range ids become `[UNK]`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i as usize)
                    .cloned()
                    .unwrap_or_else(|| RESERVED_TOKENS[UNK_ID as usize].to_string())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_sorted_after_reserved() {
        let v = build_vocab(&["b", "a"]);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("[PAD]"), Some(PAD_ID));
        assert_eq!(v.id("[CLS]"), Some(CLS_ID));
        assert_eq!(v.id("[SEP]"), Some(SEP_ID));
        assert_eq!(v.id("[UNK]"), Some(UNK_ID));
    }

    #[test]
    fn repeated_tokens_collapse() {
        let v = build_vocab(&["x", "x", "x"]);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn unknown_tokens_become_unk() {
        let v = build_vocab(&["a"]);
        assert_eq!(v.encode(&["a", "zzz"]), vec![4, UNK_ID]);
    }

    #[test]
    fn round_trip_is_identity_for_in_vocab_tokens() {
        let corpus: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&corpus);
        for chunk in corpus.chunks(7) {
            let ids = v.encode(chunk);
            assert_eq!(v.decode(&ids), chunk.to_vec());
        }
    }

    #[test]
    fn from_tokens_rejects_bad_prefix() {
        assert!(Vocab::from_tokens(vec!["a".into(), "b".into()]).is_err());
    }
}
