//! Training machinery: the span/distillation losses, the Adam optimizer,
//! student fine-tuning, and the Bayesian loss-weight tuner.

mod bo;
mod finetune;
mod losses;
mod optimizer;

pub use bo::{bo_tune, random_search, BoOptions, TrialRecord, TuneTrial};
pub use finetune::{
    exact_match_decomposed, finetune_student, FinetuneOptions, FinetuneRecord, LossBreakdown,
    TeacherTargets,
};
pub use losses::{
    kd_loss, kd_loss_on_tape, kl_divergence, lrs_loss, lrs_loss_on_tape, span_loss_on_tape,
    span_nll, task_loss, total_loss_on_tape, KD_TEACHER_FLOOR,
};
pub use optimizer::Adam;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixing weights for the composite fine-tuning loss
/// `gamma * span + alpha * distillation + beta * layer_reconstruction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    /// The hand-tuned reference setting.
    fn default() -> Self {
        Self { gamma: 0.7, alpha: 1.1, beta: 0.5 }
    }
}

impl LossWeights {
    /// Span loss only — the auxiliary terms switched off. Used as the
    /// ablation baseline when measuring what distillation buys.
    pub fn span_only() -> Self {
        Self { alpha: 0.0, beta: 0.0, ..Self::default() }
    }

    /// Weights must be finite and non-negative. Zero is legal — that is how
    /// ablations switch a term off — but negative weights would reward
    /// moving away from the teacher.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Param(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}
