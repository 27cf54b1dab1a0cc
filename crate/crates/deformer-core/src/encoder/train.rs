//! Span-supervised training of the full encoder — produces the teacher
//! model the decomposed variant is later distilled from.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{
    bind_weights, encode_full_on_tape, forward_full, predict_span, qa_head_on_tape,
};
use super::pair::pack_pair;
use super::EncoderWeights;
use crate::data::{evaluate, EncodedExample};
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::training::{span_loss_on_tape, Adam};

/// Knobs for [`train_teacher`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub batch_size: usize,
    /// Evaluate exact match every this many steps; 0 disables periodic eval.
    pub eval_every: usize,
    /// Seed for batch shuffling (weight init is seeded by the config).
    pub seed: u64,
    pub max_span_len: usize,
    /// Linear learning-rate ramp over this many leading steps. Post-LN
    /// encoders are unstable at full rate from a cold start.
    pub warmup_steps: usize,
    /// Decay the rate linearly to zero between warmup and the final step.
    pub decay: bool,
    /// Adam second-moment decay. The 0.999 default suits large batches;
    /// smaller values track gradient scale changes faster.
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

fn default_beta2() -> f64 {
    0.999
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            batch_size: 8,
            eval_every: 100,
            seed: 0,
            max_span_len: 8,
            warmup_steps: 0,
            decay: false,
            beta2: default_beta2(),
        }
    }
}

/// Learning rate at a 1-based step: linear warmup to the peak, then either a
/// constant hold or a linear decay that reaches zero one step past the end.
fn lr_at(opts: &TrainOptions, step: usize) -> f64 {
    if opts.warmup_steps > 0 && step <= opts.warmup_steps {
        return opts.lr * step as f64 / opts.warmup_steps as f64;
    }
    if !opts.decay {
        return opts.lr;
    }
    let span = (opts.steps + 1 - opts.warmup_steps) as f64;
    opts.lr * (opts.steps + 1 - step) as f64 / span
}

/// One step's entry in the metric history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based step index.
    pub step: usize,
    /// Mean span loss over the step's batch.
    pub loss: f64,
    /// Exact match (percent) on the eval set, present at eval intervals.
    pub exact_match: Option<f64>,
}

/// Trains the encoder on gold spans with bias-corrected Adam (0.9 / 0.999
/// moments, 1e-8 denominator floor), shuffling the dataset each epoch.
/// `eval` is scored at every `eval_every` interval; pass the training set
/// itself if no held-out split is available.
///
/// Zero steps returns the weights untouched. A non-finite batch loss stops
/// training with an error naming the step.
pub fn train_teacher(
    weights: &EncoderWeights,
    train: &[EncodedExample],
    eval: &[EncodedExample],
    opts: &TrainOptions,
) -> Result<(EncoderWeights, Vec<TrainRecord>)> {
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    let mut w = weights.clone();
    if opts.steps == 0 {
        return Ok((w, Vec::new()));
    }

    let sizes: Vec<usize> = w.params().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::with_betas(opts.lr, 0.9, opts.beta2, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut records = Vec::with_capacity(opts.steps);

    for step in 1..=opts.steps {
        // Draw the next batch, reshuffling at epoch boundaries.
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }

        opt.lr = lr_at(opts, step);
        let loss = train_step(&mut w, &batch, &mut opt).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
            other => other,
        })?;
        let exact_match = if opts.eval_every > 0 && step % opts.eval_every == 0 {
            Some(exact_match_percent(&w, eval, opts.max_span_len)?)
        } else {
            None
        };
        records.push(TrainRecord { step, loss, exact_match });
    }
    Ok((w, records))
}

/// Builds one tape holding every example's forward graph, averages the span
/// losses, backpropagates once, and applies an optimizer step. Returns the
/// batch loss. A non-finite loss aborts before the optimizer touches the
/// weights.
fn train_step(w: &mut EncoderWeights, batch: &[&EncodedExample], opt: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let bw = bind_weights(&mut tape, w, true);
    let mut total = None;
    for ex in batch {
        let pair = pack_pair(&ex.question, &ex.passage, &w.config)?;
        let stack = encode_full_on_tape(&mut tape, &bw, &pair)?;
        let top = *stack.last().expect("non-empty stack");
        let (s_dist, e_dist) = qa_head_on_tape(&mut tape, &bw, top, &pair.passage_slots())?;
        let loss = span_loss_on_tape(&mut tape, s_dist, e_dist, ex.answer_start, ex.answer_end)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = total.expect("batch is non-empty");
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(mean).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!("non-finite batch loss {loss_value}")));
    }

    let grads = tape.backward(mean)?;
    let ids = bw.flat();
    let grad_vecs: Vec<Vec<f64>> = ids
        .iter()
        .zip(&opt_sizes(w))
        .map(|(&id, &n)| grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
        .collect();
    let grad_slices: Vec<&[f64]> = grad_vecs.iter().map(Vec::as_slice).collect();
    let mut params = w.params_mut();
    let mut param_slices: Vec<&mut [f64]> =
        params.iter_mut().map(|t| t.data_mut()).collect();
    opt.step(&mut param_slices, &grad_slices)?;
    Ok(loss_value)
}

fn opt_sizes(w: &EncoderWeights) -> Vec<usize> {
    w.params().iter().map(|t| t.numel()).collect()
}

/// Exact match (percent) of greedy span predictions over `examples`.
pub fn exact_match_percent(
    w: &EncoderWeights,
    examples: &[EncodedExample],
    max_span_len: usize,
) -> Result<f64> {
    let metrics = evaluate(examples, |ex| {
        let pair = pack_pair(&ex.question, &ex.passage, &w.config)?;
        let out = forward_full(w, &pair)?;
        predict_span(&out.dist, max_span_len)
    })?;
    Ok(metrics.exact_match)
}

/// Sliding mean over `window` consecutive losses; used to judge training
/// health without being distracted by per-batch noise.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || losses.len() < window {
        return Vec::new();
    }
    losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
