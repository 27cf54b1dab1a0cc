//! Finite-difference verification of tape gradients.
//!
//! [`grad_check`] rebuilds the computation from scratch for every probe, so
//! the closure must be deterministic: same parameters in, same scalar out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Above this many elements a parameter is probed at a random sample of
/// coordinates instead of all of them.
pub const GRAD_CHECK_SAMPLE_LIMIT: usize = 10_000;

/// How many coordinates are probed when sampling kicks in.
const SAMPLE_COUNT: usize = 256;

/// Seed for the coordinate sampler, fixed so reruns probe the same entries.
const SAMPLE_SEED: u64 = 0x6772_6164_6368_6b00;

/// Outcome for a single parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    /// Position in the parameter slice passed to [`grad_check`].
    pub index: usize,
    /// Worst relative error over the probed coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates probed.
    pub probed: usize,
}

/// Full report from one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    /// Worst relative error across all parameters.
    pub max_rel_err: f64,
    /// Step used for the central differences.
    pub eps: f64,
    /// Threshold `max_rel_err` was compared against.
    pub threshold: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Errors with a readable summary unless every parameter passed.
    pub fn require_pass(&self) -> Result<()> {
        if self.pass {
            return Ok(());
        }
        let worst = self
            .per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("report has at least one parameter");
        Err(Error::Numerical(format!(
            "gradient check failed: parameter {} has relative error {:.3e} (threshold {:.1e})",
            worst.index, worst.max_rel_err, self.threshold
        )))
    }
}

/// Compares tape gradients of a scalar-valued build against central finite
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, coordinate by coordinate.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. Parameters larger than
/// [`GRAD_CHECK_SAMPLE_LIMIT`] elements are spot-checked at a fixed random
/// subset of coordinates to keep the probe count bounded.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64, threshold: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if params.is_empty() {
        return Err(Error::Param("grad_check needs at least one parameter".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Param(format!("grad_check eps must be positive, got {eps}")));
    }

    let analytic = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let grads = tape.backward(out)?;
        ids.iter().map(|&id| grads.wrt(id, &tape)).collect::<Vec<_>>()
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = probe.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Shape(format!(
                "grad_check build must produce a scalar, got {:?}",
                v.shape()
            )));
        }
        let y = v.data()[0];
        if !y.is_finite() {
            return Err(Error::Numerical(format!("objective evaluated to {y}")));
        }
        Ok(y)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut per_param = Vec::with_capacity(params.len());
    let mut probe: Vec<Tensor> = params.to_vec();

    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = if param.numel() > GRAD_CHECK_SAMPLE_LIMIT {
            let all: Vec<usize> = (0..param.numel()).collect();
            all.choose_multiple(&mut rng, SAMPLE_COUNT).copied().collect()
        } else {
            (0..param.numel()).collect()
        };

        let mut max_rel = 0.0f64;
        for &c in &coords {
            let original = param.data()[c];
            probe[pi].data_mut()[c] = original + eps;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[c] = original - eps;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        per_param.push(ParamCheck { index: pi, max_rel_err: max_rel, probed: coords.len() });
    }

    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        eps,
        threshold,
        pass: max_rel_err < threshold,
    })
}
