//! Tape builders for the encoder forward pass, plus inference conveniences.
//!
//! Everything here is expressed through tape primitives so the same code
//! path serves inference, FLOP instrumentation, and gradient-based training.
//! The decomposed variant reuses these builders on segment sub-ranges, which
//! is what makes full-vs-decomposed comparisons exact rather than
//! approximate.

use super::pair::{Rows, SegmentPair};
use super::EncoderWeights;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
}

/// Tape handles for all encoder parameters, with the scalars the builders
/// need alongside.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    pub token_emb: NodeId,
    pub pos_emb: NodeId,
    pub seg_emb: NodeId,
    pub emb_ln_gain: NodeId,
    pub emb_ln_bias: NodeId,
    pub layers: Vec<BoundLayer>,
    pub qa_w: NodeId,
    pub qa_b: NodeId,
    pub n_heads: usize,
    pub layer_norm_eps: f64,
}

impl BoundWeights {
    /// Handles in the canonical parameter order (matching
    /// [`EncoderWeights::params`]), for zipping with gradients.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = vec![
            self.token_emb,
            self.pos_emb,
            self.seg_emb,
            self.emb_ln_gain,
            self.emb_ln_bias,
        ];
        for l in &self.layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias, l.ffn_w1,
                l.ffn_b1, l.ffn_w2, l.ffn_b2, l.ln2_gain, l.ln2_bias,
            ]);
        }
        out.push(self.qa_w);
        out.push(self.qa_b);
        out
    }
}

/// Places every parameter on the tape — as trainable params when `trainable`
/// is set, otherwise as constants.
pub fn bind_weights(tape: &mut Tape, w: &EncoderWeights, trainable: bool) -> BoundWeights {
    let mut bind = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.leaf(t.clone())
        }
    };
    let token_emb = bind(&w.token_emb);
    let pos_emb = bind(&w.pos_emb);
    let seg_emb = bind(&w.seg_emb);
    let emb_ln_gain = bind(&w.emb_ln_gain);
    let emb_ln_bias = bind(&w.emb_ln_bias);
    let layers = w
        .layers
        .iter()
        .map(|l| BoundLayer {
            wq: bind(&l.wq),
            bq: bind(&l.bq),
            wk: bind(&l.wk),
            bk: bind(&l.bk),
            wv: bind(&l.wv),
            bv: bind(&l.bv),
            wo: bind(&l.wo),
            bo: bind(&l.bo),
            ln1_gain: bind(&l.ln1_gain),
            ln1_bias: bind(&l.ln1_bias),
            ffn_w1: bind(&l.ffn_w1),
            ffn_b1: bind(&l.ffn_b1),
            ffn_w2: bind(&l.ffn_w2),
            ffn_b2: bind(&l.ffn_b2),
            ln2_gain: bind(&l.ln2_gain),
            ln2_bias: bind(&l.ln2_bias),
        })
        .collect();
    BoundWeights {
        token_emb,
        pos_emb,
        seg_emb,
        emb_ln_gain,
        emb_ln_bias,
        layers,
        qa_w: bind(&w.qa_w),
        qa_b: bind(&w.qa_b),
        n_heads: w.config.n_heads,
        layer_norm_eps: w.config.layer_norm_eps,
    }
}

/// Token + position + segment embeddings followed by layer norm.
pub fn embed_rows(tape: &mut Tape, bw: &BoundWeights, rows: &Rows) -> Result<NodeId> {
    let token_idx: Vec<usize> = rows.token_ids.iter().map(|&t| t as usize).collect();
    let tok = tape.gather_rows(bw.token_emb, &token_idx)?;
    let pos = tape.gather_rows(bw.pos_emb, &rows.position_ids)?;
    let seg = tape.gather_rows(bw.seg_emb, &rows.segment_ids)?;
    let x = tape.add(tok, pos)?;
    let x = tape.add(x, seg)?;
    let x = tape.layer_norm(x, bw.emb_ln_gain, bw.emb_ln_bias, bw.layer_norm_eps)?;
    require_finite(tape, x, 0)?;
    Ok(x)
}

/// One post-layer-norm encoder layer: multi-head self-attention with the
/// given key-validity mask, then a GELU feed-forward block, residuals around
/// both. Masked keys are excluded from the softmax, which is numerically
/// identical to scoring them at negative infinity.
pub fn attention_layer(
    tape: &mut Tape,
    lw: &BoundLayer,
    x: NodeId,
    mask: &[bool],
    n_heads: usize,
    eps: f64,
) -> Result<NodeId> {
    let s = tape.value(x).rows();
    let d = tape.value(x).cols();
    if mask.len() != s * s {
        return Err(Error::Shape(format!(
            "attention mask has {} entries, expected {s}x{s}",
            mask.len()
        )));
    }
    let dh = d / n_heads;

    let q = tape.matmul(x, lw.wq)?;
    let q = tape.add_row(q, lw.bq)?;
    let k = tape.matmul(x, lw.wk)?;
    let k = tape.add_row(k, lw.bk)?;
    let v = tape.matmul(x, lw.wv)?;
    let v = tape.add_row(v, lw.bv)?;

    let mut ctx: Option<NodeId> = None;
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax_masked(scaled, 1, mask)?;
        let ctx_h = tape.matmul(attn, vh)?;
        ctx = Some(match ctx {
            None => ctx_h,
            Some(acc) => tape.concat_cols(acc, ctx_h)?,
        });
    }
    let ctx = ctx.expect("n_heads is validated positive");

    let o = tape.matmul(ctx, lw.wo)?;
    let o = tape.add_row(o, lw.bo)?;
    let res = tape.add(x, o)?;
    let h1 = tape.layer_norm(res, lw.ln1_gain, lw.ln1_bias, eps)?;

    let f1 = tape.matmul(h1, lw.ffn_w1)?;
    let f1 = tape.add_row(f1, lw.ffn_b1)?;
    let g = tape.gelu(f1)?;
    let f2 = tape.matmul(g, lw.ffn_w2)?;
    let f2 = tape.add_row(f2, lw.ffn_b2)?;
    let res2 = tape.add(h1, f2)?;
    tape.layer_norm(res2, lw.ln2_gain, lw.ln2_bias, eps)
}

/// Runs the embedding plus every layer over `rows`, one mask per layer.
/// Returns the full stack of n+1 node handles (embedding output first).
pub fn encode_rows_on_tape(
    tape: &mut Tape,
    bw: &BoundWeights,
    rows: &Rows,
    layer_masks: &[Vec<bool>],
) -> Result<Vec<NodeId>> {
    if layer_masks.len() != bw.layers.len() {
        return Err(Error::Param(format!(
            "{} masks supplied for {} layers",
            layer_masks.len(),
            bw.layers.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::Input("cannot encode an empty row set".into()));
    }
    let x = embed_rows(tape, bw, rows)?;
    let mut stack = vec![x];
    stack.extend(encode_layer_range(tape, bw, x, 0, layer_masks)?);
    Ok(stack)
}

/// Applies layers `first_layer .. first_layer + masks.len()` to `x`, one
/// mask per layer. Returns the output of each layer applied, in order.
/// Numerical errors name the absolute layer index, so a stack split across
/// several calls still reports coherent positions.
pub fn encode_layer_range(
    tape: &mut Tape,
    bw: &BoundWeights,
    x: NodeId,
    first_layer: usize,
    masks: &[Vec<bool>],
) -> Result<Vec<NodeId>> {
    if first_layer + masks.len() > bw.layers.len() {
        return Err(Error::Param(format!(
            "layer range {}..{} exceeds the {}-layer stack",
            first_layer,
            first_layer + masks.len(),
            bw.layers.len()
        )));
    }
    let layers: Vec<BoundLayer> = bw.layers[first_layer..first_layer + masks.len()].to_vec();
    let mut out = Vec::with_capacity(masks.len());
    let mut x = x;
    for (i, (lw, mask)) in layers.iter().zip(masks).enumerate() {
        x = attention_layer(tape, lw, x, mask, bw.n_heads, bw.layer_norm_eps)?;
        require_finite(tape, x, first_layer + i + 1)?;
        out.push(x);
    }
    Ok(out)
}

/// Full-attention encoding of a packed pair (pads masked as keys).
pub fn encode_full_on_tape(
    tape: &mut Tape,
    bw: &BoundWeights,
    pair: &SegmentPair,
) -> Result<Vec<NodeId>> {
    let mask = pair.attention_mask();
    let masks = vec![mask; bw.layers.len()];
    encode_rows_on_tape(tape, bw, &pair.rows, &masks)
}

fn require_finite(tape: &Tape, x: NodeId, layer: usize) -> Result<()> {
    if !tape.value(x).is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite activation at layer {layer}"
        )));
    }
    Ok(())
}

/// Span head: two logits per token from the top layer, each normalized over
/// the given passage slot rows only. Returns `(start, end)` probability
/// nodes of shape `(1, p)`.
pub fn qa_head_on_tape(
    tape: &mut Tape,
    bw: &BoundWeights,
    top: NodeId,
    slots: &[usize],
) -> Result<(NodeId, NodeId)> {
    if slots.is_empty() {
        return Err(Error::Input("no valid passage slots to predict over".into()));
    }
    let logits = tape.matmul(top, bw.qa_w)?;
    let logits = tape.add_row(logits, bw.qa_b)?;
    let p = slots.len();
    let mut dists = Vec::with_capacity(2);
    for col in 0..2 {
        let column = tape.slice_cols(logits, col, col + 1)?;
        let picked = tape.gather_rows(column, slots)?;
        let row = tape.reshape(picked, vec![1, p])?;
        dists.push(tape.softmax(row, 1)?);
    }
    Ok((dists[0], dists[1]))
}

/// Start/end probabilities over the real passage token slots. Mass on
/// padding or question slots is structurally zero: probabilities are only
/// defined over `slots`, which index the passage rows of the packed pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Row indices of the slots within the packed pair, in passage order.
    pub slots: Vec<usize>,
}

impl PredictionDistribution {
    /// Number of candidate answer positions.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Checks both distributions are proper: non-negative, summing to one
    /// within 1e-6.
    pub fn validate(&self) -> Result<()> {
        for (name, dist) in [("start", &self.start), ("end", &self.end)] {
            if dist.len() != self.slots.len() {
                return Err(Error::Shape(format!(
                    "{name} distribution has {} entries for {} slots",
                    dist.len(),
                    self.slots.len()
                )));
            }
            if dist.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
                return Err(Error::Numerical(format!("{name} has out-of-range mass")));
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Numerical(format!("{name} sums to {total}")));
            }
        }
        Ok(())
    }

    pub fn from_tape(tape: &Tape, start: NodeId, end: NodeId, slots: Vec<usize>) -> Self {
        Self {
            start: tape.value(start).data().to_vec(),
            end: tape.value(end).data().to_vec(),
            slots,
        }
    }
}

/// Most likely span `(start, end)` under the product of start and end
/// probabilities, over pairs with `start ≤ end < start + max_span_len`.
/// Ties break toward the smallest start, then the smallest end. Indices are
/// passage-relative.
pub fn predict_span(dist: &PredictionDistribution, max_span_len: usize) -> Result<(usize, usize)> {
    if max_span_len == 0 {
        return Err(Error::Param("max_span_len must be at least 1".into()));
    }
    let p = dist.len();
    if p == 0 {
        return Err(Error::Input("empty prediction distribution".into()));
    }
    let mut best = (0usize, 0usize);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..p {
        for e in s..(s + max_span_len).min(p) {
            let score = dist.start[s] * dist.end[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    Ok(best)
}

/// Output of a no-gradient full-encoder run.
#[derive(Debug, Clone)]
pub struct FullForward {
    /// Layers 0 (embeddings) through n, each `(sequence length, d)`.
    pub stack: Vec<Tensor>,
    pub dist: PredictionDistribution,
}

/// Convenience inference pass: packs nothing, takes an already packed pair,
/// runs the full encoder and span head on a private tape.
pub fn forward_full(w: &EncoderWeights, pair: &SegmentPair) -> Result<FullForward> {
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, w, false);
    let stack_ids = encode_full_on_tape(&mut tape, &bw, pair)?;
    let top = *stack_ids.last().expect("stack has the embedding layer");
    let (s_id, e_id) = qa_head_on_tape(&mut tape, &bw, top, &pair.passage_slots())?;
    let stack = stack_ids.iter().map(|&id| tape.value(id).clone()).collect();
    let dist = PredictionDistribution::from_tape(&tape, s_id, e_id, pair.passage_slots());
    Ok(FullForward { stack, dist })
}
