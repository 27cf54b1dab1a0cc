//! Synthetic key→value extractive QA task.
//!
//! Each passage is a shuffled sequence of (key, value-span) pairs; the
//! question is one key from the passage and the answer is its value span.
//! Keys and values draw from disjoint token pools, so a question's key
//! matches exactly one passage position and nothing else. The task is small
//! enough for tiny models to learn yet genuinely requires question–passage
//! interaction, which is what makes decomposition costs observable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QaExample;
use crate::encoder::{build_vocab, Vocab, UNK_ID};
use crate::error::{Error, Result};

/// Shape of the generated task: vocabulary pools, passage composition, and
/// split sizes. `tune_size` is carved off the end of the training pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_keys: usize,
    pub vocab_values: usize,
    pub pairs_per_passage: usize,
    pub value_len_min: usize,
    pub value_len_max: usize,
    pub train_size: usize,
    pub tune_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    /// Packing limits the examples must fit, checked by [`self_check`].
    pub q_max: usize,
    pub p_max: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_passage == 0 {
            return Err(Error::Param("pairs_per_passage must be at least 1".into()));
        }
        if self.vocab_keys < self.pairs_per_passage {
            return Err(Error::Param(format!(
                "{} keys cannot fill {} distinct pairs per passage",
                self.vocab_keys, self.pairs_per_passage
            )));
        }
        if self.vocab_values == 0 {
            return Err(Error::Param("vocab_values must be at least 1".into()));
        }
        if self.value_len_min == 0 || self.value_len_min > self.value_len_max {
            return Err(Error::Param(format!(
                "value span length range {}..={} is invalid",
                self.value_len_min, self.value_len_max
            )));
        }
        if self.pairs_per_passage * (1 + self.value_len_max) > self.p_max {
            return Err(Error::Param(format!(
                "worst-case passage of {} tokens exceeds p_max = {}",
                self.pairs_per_passage * (1 + self.value_len_max),
                self.p_max
            )));
        }
        if self.tune_size == 0 || self.tune_size >= self.train_size {
            return Err(Error::Param(format!(
                "tune split of {} must leave a non-empty training split of {}",
                self.tune_size, self.train_size
            )));
        }
        if self.dev_size == 0 {
            return Err(Error::Param("dev_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// The three dataset splits plus the vocabulary they share.
pub struct Generated {
    pub vocab: Vocab,
    pub train: Vec<QaExample>,
    pub tune: Vec<QaExample>,
    pub dev: Vec<QaExample>,
}

pub fn generate(spec: &TaskSpec) -> Result<Generated> {
    spec.validate()?;
    let keys: Vec<String> = (0..spec.vocab_keys).map(|i| format!("k{i:03}")).collect();
    let values: Vec<String> = (0..spec.vocab_values).map(|i| format!("w{i:03}")).collect();
    let corpus: Vec<String> = keys.iter().chain(values.iter()).cloned().collect();
    let vocab = build_vocab(&corpus);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_size + spec.dev_size;
    let mut examples = Vec::with_capacity(total);
    let mut key_order: Vec<usize> = (0..spec.vocab_keys).collect();

    for i in 0..total {
        // Distinct keys per passage, in random order — the shuffle doubles
        // as the pair ordering.
        key_order.shuffle(&mut rng);
        let chosen = &key_order[..spec.pairs_per_passage];
        let pairs: Vec<(usize, Vec<usize>)> = chosen
            .iter()
            .map(|&ki| {
                let len = rng.gen_range(spec.value_len_min..=spec.value_len_max);
                let value = (0..len).map(|_| rng.gen_range(0..values.len())).collect();
                (ki, value)
            })
            .collect();
        let target = rng.gen_range(0..pairs.len());

        let mut passage = Vec::new();
        let mut answer = (0usize, 0usize);
        for (j, (ki, value)) in pairs.iter().enumerate() {
            passage.push(keys[*ki].clone());
            if j == target {
                answer = (passage.len(), passage.len() + value.len() - 1);
            }
            passage.extend(value.iter().map(|&vi| values[vi].clone()));
        }

        examples.push(QaExample {
            id: format!("ex-{i:05}"),
            question: vec![keys[pairs[target].0].clone()],
            passage,
            answer_start: answer.0,
            answer_end: answer.1,
        });
    }

    let dev = examples.split_off(spec.train_size);
    let tune = examples.split_off(spec.train_size - spec.tune_size);
    Ok(Generated { vocab, train: examples, tune, dev })
}

/// Verifies every generated record against the task's invariants: the
/// question is a single in-vocabulary key occurring exactly once in the
/// passage, and the gold span is precisely the value tokens that follow it.
/// Returns the number of records checked.
pub fn self_check(g: &Generated, spec: &TaskSpec) -> Result<usize> {
    let mut checked = 0usize;
    for (split, examples) in [("train", &g.train), ("tune", &g.tune), ("dev", &g.dev)] {
        for ex in examples.iter() {
            let fail = |what: String| {
                Error::State(format!("generator self-check failed at {split}/{}: {what}", ex.id))
            };
            ex.validate()?;
            if ex.question.len() != 1 {
                return Err(fail(format!("{} question tokens", ex.question.len())));
            }
            if ex.question.len() > spec.q_max || ex.passage.len() > spec.p_max {
                return Err(fail("segment exceeds the packing limits".into()));
            }
            let key = &ex.question[0];
            if !key.starts_with('k') {
                return Err(fail(format!("question token {key:?} is not a key")));
            }
            let hits = ex.passage.iter().filter(|t| *t == key).count();
            if hits != 1 {
                return Err(fail(format!("key {key:?} occurs {hits} times in the passage")));
            }
            let key_pos = ex.passage.iter().position(|t| t == key).expect("hits == 1");
            if ex.answer_start != key_pos + 1 {
                return Err(fail(format!(
                    "span starts at {}, key sits at {key_pos}",
                    ex.answer_start
                )));
            }
            let span_len = ex.answer_end - ex.answer_start + 1;
            if span_len < spec.value_len_min || span_len > spec.value_len_max {
                return Err(fail(format!("span of {span_len} tokens out of range")));
            }
            for t in &ex.passage[ex.answer_start..=ex.answer_end] {
                if !t.starts_with('w') {
                    return Err(fail(format!("span token {t:?} is not a value")));
                }
            }
            let ids = g.vocab.encode(&ex.passage);
            if ids.contains(&UNK_ID) {
                return Err(fail("passage token missing from the vocabulary".into()));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec {
            vocab_keys: 40,
            vocab_values: 40,
            pairs_per_passage: 5,
            value_len_min: 1,
            value_len_max: 2,
            train_size: 60,
            tune_size: 6,
            dev_size: 20,
            seed: 42,
            q_max: 4,
            p_max: 24,
        }
    }

    #[test]
    fn splits_have_the_contracted_sizes() {
        let g = generate(&spec()).unwrap();
        assert_eq!(g.tune.len(), 6);
        assert_eq!(g.train.len(), 54);
        assert_eq!(g.dev.len(), 20);
        assert_eq!(g.vocab.len(), 4 + 40 + 40);
    }

    #[test]
    fn every_record_passes_the_self_check() {
        let s = spec();
        let g = generate(&s).unwrap();
        assert_eq!(self_check(&g, &s).unwrap(), 80);
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let s = spec();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.tune, b.tune);
        assert_eq!(a.dev, b.dev);

        let mut other = spec();
        other.seed = 7;
        let c = generate(&other).unwrap();
        assert_ne!(a.train, c.train, "different seeds should differ");
    }

    #[test]
    fn corrupted_records_fail_the_self_check() {
        let s = spec();
        let mut g = generate(&s).unwrap();
        g.train[0].answer_start = g.train[0].answer_end; // may still be legal…
        g.train[0].question = vec!["w000".into()]; // …but a value as question never is
        assert!(matches!(self_check(&g, &s), Err(Error::State(_))));
    }

    #[test]
    fn impossible_shapes_are_rejected() {
        let mut s = spec();
        s.pairs_per_passage = 9; // 9 * 3 = 27 > p_max 24
        assert!(matches!(generate(&s), Err(Error::Param(_))));
        let mut s = spec();
        s.vocab_keys = 3;
        assert!(matches!(generate(&s), Err(Error::Param(_))));
    }
}
