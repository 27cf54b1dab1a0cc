//! Distillation fine-tuning: adapts a decomposed model to the independent
//! lower-layer encoding it inherited, pulled toward its frozen full-encoder
//! teacher by the knowledge-distillation and representation-similarity
//! losses on top of plain span supervision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{kd_loss_on_tape, lrs_loss_on_tape, span_loss_on_tape, total_loss_on_tape};
use super::{Adam, LossWeights};
use crate::data::{evaluate, EncodedExample};
use crate::decomposed::{
    deformer_forward, encode_lower_on_tape, encode_upper_on_tape, transfer_weights, DeformerModel,
    PassageSource, SegmentRole,
};
use crate::encoder::{
    bind_weights, forward_full, pack_pair, predict_span, qa_head_on_tape, EncoderWeights,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// One step's loss components and their weighted sum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ts: f64,
    pub l_kd: f64,
    pub l_lrs: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Combines finite parts under the given weights; the total is always
    /// exactly `γ·ts + α·kd + β·lrs`.
    pub fn new(weights: &LossWeights, l_ts: f64, l_kd: f64, l_lrs: f64) -> Result<Self> {
        for (name, v) in [("task", l_ts), ("distillation", l_kd), ("similarity", l_lrs)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite {name} loss {v}")));
            }
        }
        Ok(Self {
            l_ts,
            l_kd,
            l_lrs,
            l_total: weights.gamma * l_ts + weights.alpha * l_kd + weights.beta * l_lrs,
        })
    }
}

/// Frozen per-example teacher outputs, computed once up front — the teacher
/// never changes during fine-tuning, so neither do these.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// `(1, p)` start-probability rows, one per example.
    start: Vec<Tensor>,
    /// `(1, p)` end-probability rows, one per example.
    end: Vec<Tensor>,
    /// Teacher hidden layers `k+1..=n`, one stack per example.
    upper: Vec<Vec<Tensor>>,
    /// Non-pad row indices per example, the support of the similarity loss.
    rows: Vec<Vec<usize>>,
}

impl TeacherTargets {
    /// Runs the teacher over every example. `k` is the student's split
    /// layer: only layers above it are kept for the similarity loss.
    pub fn compute(
        teacher: &EncoderWeights,
        k: usize,
        examples: &[EncodedExample],
    ) -> Result<Self> {
        let mut start = Vec::with_capacity(examples.len());
        let mut end = Vec::with_capacity(examples.len());
        let mut upper = Vec::with_capacity(examples.len());
        let mut rows = Vec::with_capacity(examples.len());
        for ex in examples {
            let pair = pack_pair(&ex.question, &ex.passage, &teacher.config)?;
            let out = forward_full(teacher, &pair)?;
            let p = out.dist.len();
            start.push(Tensor::from_vec(vec![1, p], out.dist.start.clone())?);
            end.push(Tensor::from_vec(vec![1, p], out.dist.end.clone())?);
            upper.push(out.stack[k + 1..].to_vec());
            rows.push(pair.non_pad_rows());
        }
        Ok(Self { start, end, upper, rows })
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    /// Teacher start-probability row for example `i`, shape `(1, p)`.
    pub fn start(&self, i: usize) -> &Tensor {
        &self.start[i]
    }

    /// Teacher end-probability row for example `i`, shape `(1, p)`.
    pub fn end(&self, i: usize) -> &Tensor {
        &self.end[i]
    }

    /// Teacher hidden layers above the split for example `i`.
    pub fn upper(&self, i: usize) -> &[Tensor] {
        &self.upper[i]
    }

    /// Non-pad row indices for example `i`.
    pub fn rows(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }
}

/// Knobs for [`finetune_student`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub steps: usize,
    /// Peak learning rate; held constant after warmup.
    pub lr: f64,
    /// Steps of linear learning-rate ramp from zero; 0 means constant.
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Evaluate exact match every this many steps; 0 disables periodic eval.
    pub eval_every: usize,
    pub seed: u64,
    pub max_span_len: usize,
    pub weights: LossWeights,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            warmup_steps: 0,
            batch_size: 8,
            eval_every: 100,
            seed: 0,
            max_span_len: 8,
            weights: LossWeights::default(),
        }
    }
}

/// One step's entry in the fine-tuning history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRecord {
    /// 1-based step index.
    pub step: usize,
    /// Batch-mean loss components.
    pub breakdown: LossBreakdown,
    /// Exact match (percent) on the eval set, present at eval intervals.
    pub exact_match: Option<f64>,
}

/// Learning rate at a 1-based step under linear warmup.
fn lr_at(base: f64, warmup_steps: usize, step: usize) -> f64 {
    if warmup_steps == 0 {
        base
    } else {
        base * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Fine-tunes a decomposed student against its frozen teacher. Each step
/// optimizes the weighted total of span loss, prediction distillation, and
/// upper-layer representation similarity; the teacher only ever provides
/// targets. Zero steps returns the student unchanged with empty history.
pub fn finetune_student(
    student: &DeformerModel,
    teacher: &EncoderWeights,
    train: &[EncodedExample],
    eval: &[EncodedExample],
    opts: &FinetuneOptions,
) -> Result<(DeformerModel, Vec<FinetuneRecord>)> {
    if student.weights.config != teacher.config {
        return Err(Error::Config(
            "student and teacher disagree on the model configuration".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    opts.weights.validate()?;
    if opts.steps == 0 {
        return Ok((student.clone(), Vec::new()));
    }

    let k = student.split_layer();
    let targets = TeacherTargets::compute(teacher, k, train)?;
    let mut w = student.weights.clone();
    let sizes: Vec<usize> = w.params().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::new(opts.lr, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut records = Vec::with_capacity(opts.steps);

    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        opt.lr = lr_at(opts.lr, opts.warmup_steps, step);
        let breakdown =
            finetune_step(&mut w, k, train, &targets, &batch, &opts.weights, &mut opt).map_err(
                |e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
                    other => other,
                },
            )?;

        let exact_match = if opts.eval_every > 0 && step % opts.eval_every == 0 {
            let current = transfer_weights(&w, k)?;
            Some(exact_match_decomposed(&current, eval, opts.max_span_len)?)
        } else {
            None
        };
        records.push(FinetuneRecord { step, breakdown, exact_match });
    }

    Ok((transfer_weights(&w, k)?, records))
}

/// One optimizer step over a batch: builds every example's decomposed
/// forward graph and the three losses on a single tape, averages, checks
/// finiteness, then backpropagates and applies Adam. Returns the
/// batch-mean breakdown.
#[allow(clippy::too_many_arguments)]
fn finetune_step(
    w: &mut EncoderWeights,
    k: usize,
    train: &[EncodedExample],
    targets: &TeacherTargets,
    batch: &[usize],
    weights: &LossWeights,
    opt: &mut Adam,
) -> Result<LossBreakdown> {
    let cfg = w.config.clone();
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, w, true);
    let mut total = None;
    let (mut ts_sum, mut kd_sum, mut lrs_sum) = (0.0, 0.0, 0.0);

    for &i in batch {
        let ex = &train[i];
        let pair = pack_pair(&ex.question, &ex.passage, &cfg)?;

        let q_ids =
            encode_lower_on_tape(&mut tape, &bw, k, SegmentRole::Question, &ex.question, &cfg)?;
        let p_ids =
            encode_lower_on_tape(&mut tape, &bw, k, SegmentRole::Passage, &ex.passage, &cfg)?;
        let joint = tape.concat_rows(
            *q_ids.last().expect("layers 0..=k"),
            *p_ids.last().expect("layers 0..=k"),
        )?;
        let upper_ids = encode_upper_on_tape(&mut tape, &bw, k, joint, &pair.rows.key_valid)?;
        let top = *upper_ids.last().unwrap_or(&joint);
        let (s_dist, e_dist) = qa_head_on_tape(&mut tape, &bw, top, &pair.passage_slots())?;

        let span = span_loss_on_tape(&mut tape, s_dist, e_dist, ex.answer_start, ex.answer_end)?;
        let kd_start = kd_loss_on_tape(&mut tape, s_dist, &targets.start[i])?;
        let kd_end = kd_loss_on_tape(&mut tape, e_dist, &targets.end[i])?;
        let kd = tape.add(kd_start, kd_end)?;
        let lrs = lrs_loss_on_tape(&mut tape, &upper_ids, &targets.upper[i], &targets.rows[i])?;

        ts_sum += tape.value(span).data()[0];
        kd_sum += tape.value(kd).data()[0];
        lrs_sum += tape.value(lrs).data()[0];

        let example_total = total_loss_on_tape(&mut tape, weights, span, Some(kd), Some(lrs))?;
        total = Some(match total {
            None => example_total,
            Some(acc) => tape.add(acc, example_total)?,
        });
    }

    let n = batch.len() as f64;
    let breakdown = LossBreakdown::new(weights, ts_sum / n, kd_sum / n, lrs_sum / n)?;

    let total = total.expect("batch is non-empty");
    let mean = tape.scale(total, 1.0 / n)?;
    let grads = tape.backward(mean)?;
    let ids = bw.flat();
    let sizes: Vec<usize> = w.params().iter().map(|t| t.numel()).collect();
    let grad_vecs: Vec<Vec<f64>> = ids
        .iter()
        .zip(&sizes)
        .map(|(&id, &n)| grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
        .collect();
    let grad_slices: Vec<&[f64]> = grad_vecs.iter().map(Vec::as_slice).collect();
    let mut params = w.params_mut();
    let mut param_slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
    opt.step(&mut param_slices, &grad_slices)?;
    Ok(breakdown)
}

/// Exact match (percent) of a decomposed model over a dataset, predicting
/// spans from inline-encoded passages.
pub fn exact_match_decomposed(
    model: &DeformerModel,
    examples: &[EncodedExample],
    max_span_len: usize,
) -> Result<f64> {
    let metrics = evaluate(examples, |ex| {
        let out = deformer_forward(model, &ex.question, PassageSource::Tokens(&ex.passage))?;
        predict_span(&out.dist, max_span_len)
    })?;
    Ok(metrics.exact_match)
}
