//! Maps resolved settings onto the synthetic task generator.

pub use deformer_core::synth::Generated;
use deformer_core::synth::{self, TaskSpec};
use deformer_core::Result;

use crate::settings::Resolved;

fn task_spec(rs: &Resolved) -> TaskSpec {
    TaskSpec {
        vocab_keys: rs.vocab_keys,
        vocab_values: rs.vocab_values,
        pairs_per_passage: rs.pairs_per_passage,
        value_len_min: rs.value_len_min,
        value_len_max: rs.value_len_max,
        train_size: rs.train_size,
        tune_size: rs.tune_split_size(),
        dev_size: rs.dev_size,
        seed: rs.data_seed,
        q_max: rs.q_max,
        p_max: rs.p_max,
    }
}

pub fn generate(rs: &Resolved) -> Result<Generated> {
    synth::generate(&task_spec(rs))
}

/// Re-derives every record's invariants; returns how many were checked.
pub fn self_check(g: &Generated, rs: &Resolved) -> Result<usize> {
    synth::self_check(g, &task_spec(rs))
}
