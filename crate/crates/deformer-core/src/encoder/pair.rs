//! Question/passage packing with cache-stable positions.
//!
//! The packed layout is `[CLS] question-padded-to-q_max [SEP] passage [SEP]`.
//! Because the question slot has a fixed width, passage tokens always sit at
//! positions `q_max + 2` onward regardless of the actual question length —
//! the property that lets passage representations be cached across
//! questions.

use super::vocab::{CLS_ID, PAD_ID, SEP_ID};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Token rows ready for embedding: ids plus the per-row position, segment,
/// and attention-key validity. Shared by full pairs and single segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Whether each row may be attended to as a key (pads may not).
    pub key_valid: Vec<bool>,
}

impl Rows {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Row-major `len x len` self-attention mask where every query row may
    /// attend to every valid key.
    pub fn attention_mask(&self) -> Vec<bool> {
        let s = self.len();
        let mut mask = vec![false; s * s];
        for i in 0..s {
            for j in 0..s {
                mask[i * s + j] = self.key_valid[j];
            }
        }
        mask
    }
}

/// A packed (question, passage) input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub rows: Rows,
    /// Real question tokens (before padding).
    pub q_len: usize,
    /// Real passage tokens.
    pub p_len: usize,
    pub q_max: usize,
}

impl SegmentPair {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees CLS and separators
    }

    /// First row of the passage block: `[CLS]` + `q_max` question slots +
    /// `[SEP]`.
    pub fn passage_block_start(&self) -> usize {
        self.q_max + 2
    }

    /// Rows holding real passage tokens — the slots predictions range over.
    pub fn passage_slots(&self) -> Vec<usize> {
        let start = self.passage_block_start();
        (start..start + self.p_len).collect()
    }

    /// Full-attention mask (pads excluded as keys).
    pub fn attention_mask(&self) -> Vec<bool> {
        self.rows.attention_mask()
    }

    /// Block-diagonal mask: keys must be valid *and* in the query's own
    /// block, with the boundary between the question block (rows
    /// `0..q_max+2`) and the passage block. Used for segment-local lower
    /// layers.
    pub fn block_diagonal_mask(&self) -> Vec<bool> {
        let s = self.len();
        let boundary = self.passage_block_start();
        let mut mask = vec![false; s * s];
        for i in 0..s {
            for j in 0..s {
                mask[i * s + j] = self.rows.key_valid[j] && (i < boundary) == (j < boundary);
            }
        }
        mask
    }

    /// Rows that carry real content (everything except question padding).
    pub fn non_pad_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rows.key_valid[i]).collect()
    }
}

/// Packs a question and passage into the fixed layout. Rejects empty or
/// over-length segments and out-of-vocabulary ids; never truncates.
pub fn pack_pair(question: &[u32], passage: &[u32], config: &ModelConfig) -> Result<SegmentPair> {
    check_segment(question, config.q_max, "question", config)?;
    check_segment(passage, config.p_max, "passage", config)?;

    let s = config.q_max + 2 + passage.len() + 1;
    let mut token_ids = Vec::with_capacity(s);
    let mut key_valid = Vec::with_capacity(s);

    token_ids.push(CLS_ID);
    key_valid.push(true);
    for i in 0..config.q_max {
        match question.get(i) {
            Some(&id) => {
                token_ids.push(id);
                key_valid.push(true);
            }
            None => {
                token_ids.push(PAD_ID);
                key_valid.push(false);
            }
        }
    }
    token_ids.push(SEP_ID);
    key_valid.push(true);
    token_ids.extend_from_slice(passage);
    key_valid.extend(std::iter::repeat(true).take(passage.len()));
    token_ids.push(SEP_ID);
    key_valid.push(true);

    let boundary = config.q_max + 2;
    let rows = Rows {
        position_ids: (0..token_ids.len()).collect(),
        segment_ids: (0..token_ids.len()).map(|i| usize::from(i >= boundary)).collect(),
        token_ids,
        key_valid,
    };
    Ok(SegmentPair { rows, q_len: question.len(), p_len: passage.len(), q_max: config.q_max })
}

/// Like [`pack_pair`] but appends `extra_pads` masked pad rows after the
/// final separator — only useful for padding-invariance checks.
pub fn pack_pair_padded(
    question: &[u32],
    passage: &[u32],
    config: &ModelConfig,
    extra_pads: usize,
) -> Result<SegmentPair> {
    let mut pair = pack_pair(question, passage, config)?;
    let base = pair.len();
    if base + extra_pads > config.max_positions {
        return Err(Error::Input(format!(
            "{extra_pads} extra pads push sequence past max_positions {}",
            config.max_positions
        )));
    }
    for i in 0..extra_pads {
        pair.rows.token_ids.push(PAD_ID);
        pair.rows.position_ids.push(base + i);
        pair.rows.segment_ids.push(1);
        pair.rows.key_valid.push(false);
    }
    Ok(pair)
}

fn check_segment(tokens: &[u32], max_len: usize, what: &str, config: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input(format!("{what} must not be empty")));
    }
    if tokens.len() > max_len {
        return Err(Error::Input(format!(
            "{what} has {} tokens, limit is {max_len} (no silent truncation)",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "{what} token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}
