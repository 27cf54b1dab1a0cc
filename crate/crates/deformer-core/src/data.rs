//! Dataset records, line-delimited IO, and span-extraction metrics.
//!
//! Examples are stored on disk as one JSON object per line with token
//! *strings*; the vocabulary maps them to ids at load time. Answer spans are
//! inclusive token index ranges into the passage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};

/// One question-answering example as stored in a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QaExample {
    pub id: String,
    pub question: Vec<String>,
    pub passage: Vec<String>,
    /// First token of the answer span, indexed into `passage`.
    pub answer_start: usize,
    /// Last token of the answer span, inclusive.
    pub answer_end: usize,
}

/// A [`QaExample`] with tokens mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub question: Vec<u32>,
    pub passage: Vec<u32>,
    pub answer_start: usize,
    pub answer_end: usize,
}

impl QaExample {
    /// Checks the span lies inside the passage and both segments are
    /// non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() || self.passage.is_empty() {
            return Err(Error::Input(format!("example {}: empty segment", self.id)));
        }
        if self.answer_start > self.answer_end || self.answer_end >= self.passage.len() {
            return Err(Error::Input(format!(
                "example {}: span {}..={} outside passage of {} tokens",
                self.id,
                self.answer_start,
                self.answer_end,
                self.passage.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocab) -> EncodedExample {
        EncodedExample {
            id: self.id.clone(),
            question: vocab.encode(&self.question),
            passage: vocab.encode(&self.passage),
            answer_start: self.answer_start,
            answer_end: self.answer_end,
        }
    }
}

/// Reads a line-delimited dataset, validating every record.
pub fn read_jsonl(path: &Path) -> Result<Vec<QaExample>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes examples as one JSON object per line.
pub fn write_jsonl(path: &Path, examples: &[QaExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex)
            .map_err(|e| Error::Format(format!("serializing {}: {e}", ex.id)))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregate metrics over a dataset, as percentages in [0, 100].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub exact_match: f64,
    pub span_f1: f64,
    pub examples: usize,
}

/// Both endpoints correct.
pub fn exact_match(pred: (usize, usize), gold: (usize, usize)) -> bool {
    pred == gold
}

/// Token-overlap F1 between two inclusive spans: harmonic mean of overlap
/// precision and recall, 0 when the spans are disjoint.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let overlap_start = pred.0.max(gold.0);
    let overlap_end = pred.1.min(gold.1);
    if overlap_start > overlap_end {
        return 0.0;
    }
    let overlap = (overlap_end - overlap_start + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Runs `predict` over every example and aggregates metrics. `predict`
/// returns a passage-relative inclusive span.
pub fn evaluate<F>(examples: &[EncodedExample], mut predict: F) -> Result<EvalMetrics>
where
    F: FnMut(&EncodedExample) -> Result<(usize, usize)>,
{
    if examples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let mut em_hits = 0usize;
    let mut f1_sum = 0.0;
    for ex in examples {
        let pred = predict(ex)?;
        let gold = (ex.answer_start, ex.answer_end);
        if exact_match(pred, gold) {
            em_hits += 1;
        }
        f1_sum += span_f1(pred, gold);
    }
    let n = examples.len() as f64;
    Ok(EvalMetrics {
        exact_match: 100.0 * em_hits as f64 / n,
        span_f1: 100.0 * f1_sum / n,
        examples: examples.len(),
    })
}

/// Student score as a percentage of the teacher's (both already in
/// percentage points). Zero teacher score yields an error rather than a
/// division by zero.
pub fn retention_percent(student: f64, teacher: f64) -> Result<f64> {
    if teacher <= 0.0 {
        return Err(Error::Input(format!(
            "retention undefined for teacher score {teacher}"
        )));
    }
    Ok(100.0 * student / teacher)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_f1_half_overlap_equal_lengths() {
        // Spans of 4 tokens overlapping in 2: precision = recall = 1/2.
        assert_eq!(span_f1((0, 3), (2, 5)), 0.5);
    }

    #[test]
    fn span_f1_edges() {
        assert_eq!(span_f1((1, 2), (1, 2)), 1.0);
        assert_eq!(span_f1((0, 1), (5, 6)), 0.0);
        // Single-token prediction inside a 2-token gold span.
        let f1 = span_f1((4, 4), (4, 5));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let examples = vec![EncodedExample {
            id: "e0".into(),
            question: vec![4],
            passage: vec![5, 6, 7],
            answer_start: 1,
            answer_end: 2,
        }];
        let m = evaluate(&examples, |ex| Ok((ex.answer_start, ex.answer_end))).unwrap();
        assert_eq!(m.exact_match, 100.0);
        assert_eq!(m.span_f1, 100.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            evaluate(&[], |_| Ok((0, 0))),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let examples = vec![
            QaExample {
                id: "a".into(),
                question: vec!["k1".into()],
                passage: vec!["k1".into(), "w3".into(), "w4".into()],
                answer_start: 1,
                answer_end: 2,
            },
            QaExample {
                id: "b".into(),
                question: vec!["k2".into()],
                passage: vec!["k2".into(), "w9".into()],
                answer_start: 1,
                answer_end: 1,
            },
        ];
        write_jsonl(&path, &examples).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, examples);
    }

    #[test]
    fn loader_rejects_out_of_range_span() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"x","question":["a"],"passage":["b"],"answer_start":0,"answer_end":5}"#,
        )
        .unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Input(_))));
    }

    #[test]
    fn retention_is_a_ratio_of_percentages() {
        assert_eq!(retention_percent(45.0, 90.0).unwrap(), 50.0);
        assert!(retention_percent(45.0, 0.0).is_err());
    }
}
