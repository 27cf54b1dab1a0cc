//! Representation diagnostics: how question-dependent the passage
//! representations are at each layer (the motivation for splitting low), and
//! how far a decomposed model's representations drift from its teacher's.

use serde::{Deserialize, Serialize};

use crate::decomposed::{deformer_forward, DeformerModel, PassageSource};
use crate::encoder::{forward_full, pack_pair, EncoderWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that can produce the joint hidden stack (layers `0..=n`) for a
/// question/passage pair. Implemented by both the full encoder and the
/// decomposed model so the diagnostics run on either side of a comparison.
pub trait PairEncoder {
    fn config(&self) -> &ModelConfig;
    /// Layers below which the passage never sees the question: 0 for the
    /// full encoder.
    fn split_layer(&self) -> usize;
    fn encode_pair(&self, question: &[u32], passage: &[u32]) -> Result<Vec<Tensor>>;
}

impl PairEncoder for EncoderWeights {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn split_layer(&self) -> usize {
        0
    }

    fn encode_pair(&self, question: &[u32], passage: &[u32]) -> Result<Vec<Tensor>> {
        let pair = pack_pair(question, passage, &self.config)?;
        Ok(forward_full(self, &pair)?.stack)
    }
}

impl PairEncoder for DeformerModel {
    fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    fn split_layer(&self) -> usize {
        DeformerModel::split_layer(self)
    }

    fn encode_pair(&self, question: &[u32], passage: &[u32]) -> Result<Vec<Tensor>> {
        deformer_forward(self, question, PassageSource::Tokens(passage))?.joint_stack()
    }
}

/// Mean cosine distance of a set of vectors from their elementwise-mean
/// centroid. Bitwise-identical vectors short-circuit to exactly 0.0 — zero
/// dispersion by definition, with no rounding residue from the norm
/// arithmetic.
pub fn centroid_cosine_variance(vectors: &[&[f64]]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::Input(format!(
            "need at least two vectors to measure dispersion, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("vectors must share a non-zero length".into()));
    }
    if vectors[1..].iter().all(|v| bits_eq(v, vectors[0])) {
        return Ok(0.0);
    }

    let mut centroid = vec![0.0; dim];
    for v in vectors {
        for (c, x) in centroid.iter_mut().zip(*v) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= vectors.len() as f64;
    }
    let centroid_norm = norm(&centroid);
    if centroid_norm == 0.0 {
        return Err(Error::Input("centroid has zero norm; cosine undefined".into()));
    }

    let mut acc = 0.0;
    for v in vectors {
        let v_norm = norm(v);
        if v_norm == 0.0 {
            return Err(Error::Input("zero-norm vector; cosine undefined".into()));
        }
        let dot: f64 = v.iter().zip(&centroid).map(|(a, b)| a * b).sum();
        let d = 1.0 - dot / (v_norm * centroid_norm);
        // Guard the tiny negative residue of norm rounding; written as a
        // comparison so a NaN would propagate rather than be clamped.
        acc += if d < 0.0 { 0.0 } else { d };
    }
    Ok(acc / vectors.len() as f64)
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Min-max normalization to [0, 1] across a slice. All-equal input maps to
/// all zeros (there is no spread to express). Idempotent: normalizing a
/// normalized profile reproduces it exactly.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Question-dependence of passage representations, per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceProfile {
    /// Mean centroid cosine distance per layer (`0..=n`), over passage
    /// tokens and passages.
    pub raw: Vec<f64>,
    /// [`min_max_normalize`] of `raw`.
    pub normalized: Vec<f64>,
    pub passages: usize,
    pub questions_per_passage: usize,
    /// Token/layer slots skipped because their centroid (or a vector) had
    /// zero norm — degenerate for a cosine, reported rather than hidden.
    pub skipped_tokens: usize,
}

/// How much each passage token's representation moves when the question
/// changes: encodes every (question, passage) pair, then measures the
/// per-token dispersion across question variants, averaged over tokens and
/// passages, layer by layer.
pub fn passage_variance_profile(
    encoder: &impl PairEncoder,
    passages: &[Vec<u32>],
    questions: &[Vec<u32>],
) -> Result<VarianceProfile> {
    if passages.is_empty() {
        return Err(Error::Input("no passages to profile".into()));
    }
    if questions.len() < 2 {
        return Err(Error::Input(format!(
            "need at least two questions to measure question-dependence, got {}",
            questions.len()
        )));
    }
    let cfg = encoder.config();
    let n_layers = cfg.n_layers;
    let block_start = cfg.q_max + 2;

    let mut sums = vec![0.0; n_layers + 1];
    let mut counts = vec![0usize; n_layers + 1];
    let mut skipped = 0usize;

    for passage in passages {
        // One stack per question: layers 0..=n of the joint pair.
        let stacks: Vec<Vec<Tensor>> = questions
            .iter()
            .map(|q| encoder.encode_pair(q, passage))
            .collect::<Result<_>>()?;
        for layer in 0..=n_layers {
            for t in 0..passage.len() {
                let row = block_start + t;
                let variants: Vec<&[f64]> =
                    stacks.iter().map(|stack| stack[layer].row(row)).collect();
                match centroid_cosine_variance(&variants) {
                    Ok(v) => {
                        sums[layer] += v;
                        counts[layer] += 1;
                    }
                    Err(Error::Input(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }

    let raw: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let normalized = min_max_normalize(&raw);
    Ok(VarianceProfile {
        raw,
        normalized,
        passages: passages.len(),
        questions_per_passage: questions.len(),
        skipped_tokens: skipped,
    })
}

/// Distance used by [`divergence_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMetric {
    /// Per-token euclidean distance — the similarity loss's own metric.
    Euclidean,
    /// Per-token cosine distance.
    Cosine,
}

/// Per-layer distance between two models' representations of the same
/// inputs, split into question-block and passage-block tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceProfile {
    /// Mean distance over question tokens, per layer (`0..=n`).
    pub question: Vec<f64>,
    /// Mean distance over passage tokens, per layer (`0..=n`).
    pub passage: Vec<f64>,
    pub examples: usize,
    pub metric: DistanceMetric,
}

impl DivergenceProfile {
    /// Mean passage divergence over the layers above a split — the slice
    /// the similarity loss targets.
    pub fn upper_passage_mean(&self, k: usize) -> f64 {
        let upper = &self.passage[k + 1..];
        if upper.is_empty() {
            return 0.0;
        }
        upper.iter().sum::<f64>() / upper.len() as f64
    }
}

/// Measures, layer by layer, how far two models' token representations sit
/// apart on the same (question, passage) pairs. Both encoders must share a
/// configuration shape so rows correspond.
pub fn divergence_profile(
    a: &impl PairEncoder,
    b: &impl PairEncoder,
    pairs: &[(Vec<u32>, Vec<u32>)],
    metric: DistanceMetric,
) -> Result<DivergenceProfile> {
    if !rows_correspond(a.config(), b.config()) {
        return Err(Error::Config(
            "models disagree on packing shape; rows would not correspond".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to profile".into()));
    }
    let cfg = a.config();
    let n_layers = cfg.n_layers;
    let block_start = cfg.q_max + 2;

    let mut q_sums = vec![0.0; n_layers + 1];
    let mut p_sums = vec![0.0; n_layers + 1];
    let mut q_count = 0usize;
    let mut p_count = 0usize;

    for (question, passage) in pairs {
        let stack_a = a.encode_pair(question, passage)?;
        let stack_b = b.encode_pair(question, passage)?;
        // Real token rows only: specials and padding are neither question
        // nor passage content.
        let q_rows: Vec<usize> = (1..1 + question.len()).collect();
        let p_rows: Vec<usize> = (block_start..block_start + passage.len()).collect();
        for layer in 0..=n_layers {
            for &r in &q_rows {
                q_sums[layer] += distance(stack_a[layer].row(r), stack_b[layer].row(r), metric)?;
            }
            for &r in &p_rows {
                p_sums[layer] += distance(stack_a[layer].row(r), stack_b[layer].row(r), metric)?;
            }
        }
        q_count += q_rows.len();
        p_count += p_rows.len();
    }

    let mean = |sums: Vec<f64>, count: usize| -> Vec<f64> {
        sums.into_iter().map(|s| if count == 0 { 0.0 } else { s / count as f64 }).collect()
    };
    Ok(DivergenceProfile {
        question: mean(q_sums, q_count),
        passage: mean(p_sums, p_count),
        examples: pairs.len(),
        metric,
    })
}

/// Same stack depth, vector width, and packing geometry — the fields that
/// make row `r` of one model's stack the same token as row `r` of the
/// other's. Seeds and norm epsilons may differ freely.
fn rows_correspond(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.n_layers == b.n_layers
        && a.hidden_dim == b.hidden_dim
        && a.q_max == b.q_max
        && a.p_max == b.p_max
}

fn distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    match metric {
        DistanceMetric::Euclidean => {
            Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        }
        DistanceMetric::Cosine => {
            if bits_eq(a, b) {
                return Ok(0.0);
            }
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Input("zero-norm vector; cosine undefined".into()));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let d = 1.0 - dot / (na * nb);
            Ok(if d < 0.0 { 0.0 } else { d })
        }
    }
}
