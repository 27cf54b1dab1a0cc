//! The decomposed encoder: the lower `k` layers run over question and
//! passage independently, the upper `n − k` layers run over the joined
//! pair with full cross-attention.
//!
//! Because the packed-pair layout gives the passage block position ids that
//! depend only on `q_max` (never on the actual question), a passage's lower
//! states are the same for every question — that is what makes storing and
//! reusing them sound. The correspondence with the full encoder is sharper
//! than a numerical approximation: running the *joint* pair through the
//! full encoder with a block-diagonal attention mask on the lower layers
//! ([`masked_oracle`]) reproduces the decomposed computation bit for bit,
//! because a masked softmax entry is exactly `0.0` and contributes exactly
//! nothing to any attention-weighted sum.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    bind_weights, encode_layer_range, pack_pair, qa_head_on_tape, BoundWeights, EncoderWeights,
    PredictionDistribution, Rows, SegmentPair,
};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Which side of the pair a segment encoding belongs to. Tagging the states
/// makes an accidental question/passage swap a loud error instead of silent
/// layout corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentRole {
    Question,
    Passage,
}

/// Lower-layer representations of one segment: matrices for layers `0..=k`
/// (embedding output first), all with the same row count.
#[derive(Debug, Clone)]
pub struct SegmentStates {
    pub role: SegmentRole,
    /// Split layer these states were computed for.
    pub k: usize,
    /// One `(rows, d)` matrix per layer `0..=k`.
    pub layers: Vec<Tensor>,
    /// Which rows are valid attention keys (question pads are not).
    pub key_valid: Vec<bool>,
}

impl SegmentStates {
    /// The layer-`k` matrix — the part worth caching.
    pub fn top(&self) -> &Tensor {
        self.layers.last().expect("layers 0..=k is never empty")
    }

    pub fn rows(&self) -> usize {
        self.key_valid.len()
    }
}

/// A full encoder plus the split layer `k`.
#[derive(Debug, Clone)]
pub struct DeformerModel {
    pub weights: EncoderWeights,
    k: usize,
}

impl DeformerModel {
    pub fn split_layer(&self) -> usize {
        self.k
    }

    /// Identity of this model for cache compatibility: the weight
    /// fingerprint together with the split layer. States computed at one
    /// split are not interchangeable with another.
    pub fn fingerprint(&self) -> ([u8; 32], usize) {
        (self.weights.fingerprint(), self.k)
    }
}

/// Builds a decomposed model from full-encoder weights: parameters are
/// copied verbatim (identical shapes, so pretrained weights transfer as-is)
/// and only the split layer is new.
pub fn transfer_weights(full: &EncoderWeights, k: usize) -> Result<DeformerModel> {
    if k > full.config.n_layers {
        return Err(Error::Param(format!(
            "split layer {k} out of range for a {}-layer encoder",
            full.config.n_layers
        )));
    }
    Ok(DeformerModel { weights: full.clone(), k })
}

/// Token/position/segment rows for one segment, laid out exactly as the
/// same segment appears inside [`pack_pair`]: the question block is
/// `[CLS] question pads [SEP]` at positions `0..q_max+2`, the passage block
/// is `passage [SEP]` at positions starting from `q_max+2` with segment
/// id 1.
pub fn segment_rows(
    role: SegmentRole,
    tokens: &[u32],
    config: &crate::encoder::ModelConfig,
) -> Result<Rows> {
    // Pack a joint pair with a placeholder opposite side, then slice out the
    // rows for the requested block — single source of truth for the layout.
    let placeholder = [crate::encoder::UNK_ID];
    let pair = match role {
        SegmentRole::Question => pack_pair(tokens, &placeholder, config)?,
        SegmentRole::Passage => pack_pair(&placeholder, tokens, config)?,
    };
    let boundary = pair.passage_block_start();
    let range = match role {
        SegmentRole::Question => 0..boundary,
        SegmentRole::Passage => boundary..pair.len(),
    };
    let r = &pair.rows;
    Ok(Rows {
        token_ids: r.token_ids[range.clone()].to_vec(),
        position_ids: r.position_ids[range.clone()].to_vec(),
        segment_ids: r.segment_ids[range.clone()].to_vec(),
        key_valid: r.key_valid[range].to_vec(),
    })
}

/// Runs embeddings plus the lower `k` layers over one segment, attention
/// restricted to the segment's own (valid) tokens.
pub fn encode_lower(
    model: &DeformerModel,
    role: SegmentRole,
    tokens: &[u32],
) -> Result<SegmentStates> {
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, &model.weights, false);
    let ids = encode_lower_on_tape(&mut tape, &bw, model.k, role, tokens, &model.weights.config)?;
    let rows = segment_rows(role, tokens, &model.weights.config)?;
    Ok(SegmentStates {
        role,
        k: model.k,
        layers: ids.iter().map(|&id| tape.value(id).clone()).collect(),
        key_valid: rows.key_valid,
    })
}

/// Tape-level lower encoding; returns one node per layer `0..=k`.
pub fn encode_lower_on_tape(
    tape: &mut Tape,
    bw: &BoundWeights,
    k: usize,
    role: SegmentRole,
    tokens: &[u32],
    config: &crate::encoder::ModelConfig,
) -> Result<Vec<NodeId>> {
    if k > bw.layers.len() {
        return Err(Error::Param(format!(
            "split layer {k} out of range for a {}-layer encoder",
            bw.layers.len()
        )));
    }
    let rows = segment_rows(role, tokens, config)?;
    let mask = rows.attention_mask();
    let masks = vec![mask; k];
    let x = crate::encoder::embed_rows(tape, bw, &rows)?;
    let mut stack = vec![x];
    stack.extend(encode_layer_range(tape, bw, x, 0, &masks)?);
    Ok(stack)
}

/// Joint output of the decomposed pipeline.
#[derive(Debug, Clone)]
pub struct DeformerOutput {
    pub k: usize,
    pub q_len: usize,
    pub p_len: usize,
    q_max: usize,
    /// Question-side lower stack, layers `0..=k`.
    pub lower_question: Vec<Tensor>,
    /// Passage-side lower stack, layers `0..=k` when the passage was
    /// encoded from tokens; only the layer-`k` matrix when it came from a
    /// store (the store holds nothing below `k`).
    pub lower_passage: Vec<Tensor>,
    /// Joint matrices for layers `k+1..=n`.
    pub upper: Vec<Tensor>,
    pub dist: PredictionDistribution,
}

impl DeformerOutput {
    /// Row indices of real passage tokens within the joint layout.
    pub fn passage_slots(&self) -> Vec<usize> {
        let start = self.q_max + 2;
        (start..start + self.p_len).collect()
    }

    /// The full joint stack, layers `0..=n`: lower layers as row-wise
    /// concatenation of the two segments, upper layers as computed. Errors
    /// if the passage lower history is partial (store-backed passages only
    /// carry layer `k`).
    pub fn joint_stack(&self) -> Result<Vec<Tensor>> {
        if self.lower_passage.len() != self.k + 1 {
            return Err(Error::State(
                "store-backed passage has no lower-layer history to join".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.lower_question.len() + self.upper.len());
        for (q, p) in self.lower_question.iter().zip(&self.lower_passage) {
            out.push(concat_rows(q, p)?);
        }
        out.extend(self.upper.iter().cloned());
        Ok(out)
    }
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cannot stack {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Joins two layer-`k` segment states in pair layout and runs the upper
/// layers with full attention. Returns the joint stack for layers `k..=n`
/// (the joined input first).
pub fn join_and_encode_upper(
    model: &DeformerModel,
    q: &SegmentStates,
    p: &SegmentStates,
) -> Result<Vec<Tensor>> {
    check_joinable(model, q, p)?;
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, &model.weights, false);
    let joint = concat_rows(q.top(), p.top())?;
    let key_valid: Vec<bool> = q.key_valid.iter().chain(&p.key_valid).copied().collect();
    let x = tape.leaf(joint.clone());
    let ids = encode_upper_on_tape(&mut tape, &bw, model.k, x, &key_valid)?;
    let mut out = vec![joint];
    out.extend(ids.iter().map(|&id| tape.value(id).clone()));
    Ok(out)
}

fn check_joinable(model: &DeformerModel, q: &SegmentStates, p: &SegmentStates) -> Result<()> {
    if q.role != SegmentRole::Question || p.role != SegmentRole::Passage {
        return Err(Error::Input(format!(
            "join expects (question, passage) states, got ({:?}, {:?})",
            q.role, p.role
        )));
    }
    for (side, st) in [("question", q), ("passage", p)] {
        if st.k != model.k {
            return Err(Error::State(format!(
                "{side} states were encoded at split {} but the model splits at {}",
                st.k, model.k
            )));
        }
        let d = st.top().cols();
        if d != model.weights.config.hidden_dim {
            return Err(Error::Shape(format!(
                "{side} states have width {d}, model hidden_dim is {}",
                model.weights.config.hidden_dim
            )));
        }
    }
    Ok(())
}

/// Upper layers `k+1..=n` over a joined matrix, full attention over valid
/// keys. Public so training code can build the same graph on a tape that
/// holds trainable weights.
pub fn encode_upper_on_tape(
    tape: &mut Tape,
    bw: &BoundWeights,
    k: usize,
    x: NodeId,
    key_valid: &[bool],
) -> Result<Vec<NodeId>> {
    let s = key_valid.len();
    let mut mask = vec![false; s * s];
    for i in 0..s {
        for j in 0..s {
            mask[i * s + j] = key_valid[j];
        }
    }
    let masks = vec![mask; bw.layers.len() - k];
    encode_layer_range(tape, bw, x, k, &masks)
}

/// Where the passage's layer-`k` representation comes from.
#[derive(Debug, Clone)]
pub enum PassageSource<'a> {
    /// Encode the passage tokens inline, full 64-bit arithmetic.
    Tokens(&'a [u32]),
    /// Encode inline but round the layer-`k` block through a storage
    /// precision before joining — the fallback for a store miss. Serving a
    /// hit and re-encoding a miss then land on identical bits, so a mixed
    /// hit/miss batch stays self-consistent.
    TokensVia(&'a [u32], crate::cache::StoragePrecision),
    /// A layer-`k` matrix computed earlier (typically read back from the
    /// store), with the fingerprint of the model that produced it.
    Precomputed {
        layer_k: &'a Tensor,
        fingerprint: ([u8; 32], usize),
    },
}

/// End-to-end decomposed forward pass: one tape for the question's lower
/// stack, the joined upper stack, and the span head. With
/// [`PassageSource::Precomputed`] the stored states stand in for the
/// passage's lower computation — after checking they were produced by this
/// very model at this very split.
pub fn deformer_forward(
    model: &DeformerModel,
    question: &[u32],
    passage: PassageSource<'_>,
) -> Result<DeformerOutput> {
    let cfg = &model.weights.config;
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, &model.weights, false);

    let q_ids = encode_lower_on_tape(&mut tape, &bw, model.k, SegmentRole::Question, question, cfg)?;
    let q_rows = segment_rows(SegmentRole::Question, question, cfg)?;

    let (p_top, p_layers, p_len): (NodeId, Vec<Tensor>, usize) = match passage {
        PassageSource::Tokens(tokens) => {
            let ids =
                encode_lower_on_tape(&mut tape, &bw, model.k, SegmentRole::Passage, tokens, cfg)?;
            let tensors: Vec<Tensor> = ids.iter().map(|&id| tape.value(id).clone()).collect();
            (*ids.last().expect("layers 0..=k"), tensors, tokens.len())
        }
        PassageSource::TokensVia(tokens, precision) => {
            let ids =
                encode_lower_on_tape(&mut tape, &bw, model.k, SegmentRole::Passage, tokens, cfg)?;
            let mut tensors: Vec<Tensor> = ids.iter().map(|&id| tape.value(id).clone()).collect();
            let exact = tensors.last().expect("layers 0..=k");
            let rounded = Tensor::from_vec(
                exact.shape().to_vec(),
                exact.data().iter().map(|&v| precision.round_through(v)).collect(),
            )?;
            *tensors.last_mut().expect("layers 0..=k") = rounded.clone();
            (tape.leaf(rounded), tensors, tokens.len())
        }
        PassageSource::Precomputed { layer_k, fingerprint } => {
            let own = model.fingerprint();
            if fingerprint.1 != own.1 {
                return Err(Error::CacheCompat(format!(
                    "stored states were split at layer {}, model splits at {}",
                    fingerprint.1, own.1
                )));
            }
            if fingerprint.0 != own.0 {
                return Err(Error::CacheCompat(
                    "stored states were produced by a different model (weight fingerprint \
                     mismatch)"
                        .into(),
                ));
            }
            if layer_k.cols() != cfg.hidden_dim {
                return Err(Error::CacheCompat(format!(
                    "stored states have width {}, model hidden_dim is {}",
                    layer_k.cols(),
                    cfg.hidden_dim
                )));
            }
            if layer_k.rows() < 2 {
                return Err(Error::CacheCompat(
                    "stored passage block is too short to contain a token and separator".into(),
                ));
            }
            let node = tape.leaf(layer_k.clone());
            (node, vec![layer_k.clone()], layer_k.rows() - 1)
        }
    };

    let q_top = *q_ids.last().expect("layers 0..=k");
    let joint = tape.concat_rows(q_top, p_top)?;
    let mut key_valid = q_rows.key_valid.clone();
    key_valid.extend(std::iter::repeat(true).take(p_len + 1));
    let upper_ids = encode_upper_on_tape(&mut tape, &bw, model.k, joint, &key_valid)?;

    let top = *upper_ids.last().unwrap_or(&joint);
    let slots: Vec<usize> = (cfg.q_max + 2..cfg.q_max + 2 + p_len).collect();
    let (s_id, e_id) = qa_head_on_tape(&mut tape, &bw, top, &slots)?;

    Ok(DeformerOutput {
        k: model.k,
        q_len: question.len(),
        p_len,
        q_max: cfg.q_max,
        lower_question: q_ids.iter().map(|&id| tape.value(id).clone()).collect(),
        lower_passage: p_layers,
        upper: upper_ids.iter().map(|&id| tape.value(id).clone()).collect(),
        dist: PredictionDistribution::from_tape(&tape, s_id, e_id, slots),
    })
}

/// Independent oracle for the decomposition: run the *full* encoder over
/// the joint pair, but mask attention block-diagonally (question↔question,
/// passage↔passage) for layers `1..=k` and fully above. Returns the whole
/// joint stack, layers `0..=n`.
pub fn masked_oracle(pair: &SegmentPair, full: &EncoderWeights, k: usize) -> Result<Vec<Tensor>> {
    if k > full.config.n_layers {
        return Err(Error::Param(format!(
            "split layer {k} out of range for a {}-layer encoder",
            full.config.n_layers
        )));
    }
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, full, false);
    let block = pair.block_diagonal_mask();
    let full_mask = pair.attention_mask();
    let mut masks = vec![block; k];
    masks.extend(std::iter::repeat(full_mask).take(full.config.n_layers - k));
    let ids = crate::encoder::encode_rows_on_tape(&mut tape, &bw, &pair.rows, &masks)?;
    Ok(ids.iter().map(|&id| tape.value(id).clone()).collect())
}

/// Span distributions read off a joint stack's top layer — companion to
/// [`masked_oracle`] for end-to-end comparisons.
pub fn head_over_stack(
    full: &EncoderWeights,
    top: &Tensor,
    pair: &SegmentPair,
) -> Result<PredictionDistribution> {
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, full, false);
    let x = tape.leaf(top.clone());
    let slots = pair.passage_slots();
    let (s_id, e_id) = qa_head_on_tape(&mut tape, &bw, x, &slots)?;
    Ok(PredictionDistribution::from_tape(&tape, s_id, e_id, slots))
}
