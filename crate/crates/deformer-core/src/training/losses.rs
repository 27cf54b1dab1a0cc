//! The three training losses, each as a tape builder (for gradients) with a
//! plain-float twin where one is useful as an oracle.
//!
//! All builders return a node of shape `[1]` so losses can be mixed with
//! `add`/`scale` and fed straight to `backward`.

use super::LossWeights;
use crate::encoder::PredictionDistribution;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Floor applied to teacher probabilities inside the distillation loss so
/// `ln` stays finite when the teacher assigns (numerically) zero mass.
pub const KD_TEACHER_FLOOR: f64 = 1e-12;

/// Average negative log-likelihood of the gold span endpoints:
/// `-(ln p_start + ln p_end) / 2`.
pub fn span_nll(p_start: f64, p_end: f64) -> f64 {
    -(p_start.ln() + p_end.ln()) / 2.0
}

/// Task loss of a prediction against a gold span (slot-relative indices):
/// the mean endpoint negative log-likelihood.
pub fn task_loss(pred: &PredictionDistribution, gold: (usize, usize)) -> Result<f64> {
    let (s, e) = gold;
    if s >= pred.len() || e >= pred.len() {
        return Err(Error::Input(format!(
            "gold span ({s}, {e}) outside {} passage slots",
            pred.len()
        )));
    }
    Ok(span_nll(pred.start[s], pred.end[e]))
}

/// Distillation loss between two prediction distributions:
/// `KL(a || b)` summed over the start and end heads. The supports must
/// match — a disagreement means the distributions describe different
/// passages.
pub fn kd_loss(a: &PredictionDistribution, b: &PredictionDistribution) -> Result<f64> {
    if a.slots != b.slots {
        return Err(Error::Input(format!(
            "prediction supports differ: {:?} vs {:?}",
            a.slots, b.slots
        )));
    }
    Ok(kl_divergence(&a.start, &b.start)? + kl_divergence(&a.end, &b.end)?)
}

/// Representation-similarity loss between two full hidden stacks (layers
/// `0..=n`): squared distances summed over layers `k+1..=n` and the given
/// rows. Plain-value twin of [`lrs_loss_on_tape`].
pub fn lrs_loss(student: &[Tensor], teacher: &[Tensor], k: usize, rows: &[usize]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    if k + 1 > student.len() {
        return Err(Error::Param(format!(
            "split layer {k} out of range for a stack of {} layers",
            student.len().saturating_sub(1)
        )));
    }
    let mut acc = 0.0;
    for (s, t) in student[k + 1..].iter().zip(&teacher[k + 1..]) {
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("layer {:?} vs {:?}", s.shape(), t.shape())));
        }
        for &r in rows {
            if r >= s.rows() {
                return Err(Error::Input(format!("row {r} outside {} rows", s.rows())));
            }
            for (sv, tv) in s.row(r).iter().zip(t.row(r)) {
                let d = sv - tv;
                acc += d * d;
            }
        }
    }
    Ok(acc)
}

/// KL divergence `sum_i p_i (ln p_i - ln q_i)` with `q` floored at
/// [`KD_TEACHER_FLOOR`]. Entries with `p_i = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "kl_divergence over {} vs {} entries",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 {
            return Err(Error::Input(format!("negative probability {pi}")));
        }
        if pi > 0.0 {
            acc += pi * (pi.ln() - qi.max(KD_TEACHER_FLOOR).ln());
        }
    }
    Ok(acc)
}

/// Span loss over start/end probability rows of shape `(1, p)`:
/// `-(ln start[gold_start] + ln end[gold_end]) / 2`.
pub fn span_loss_on_tape(
    tape: &mut Tape,
    start_dist: NodeId,
    end_dist: NodeId,
    gold_start: usize,
    gold_end: usize,
) -> Result<NodeId> {
    let p = tape.value(start_dist).numel();
    if tape.value(end_dist).numel() != p {
        return Err(Error::Shape("start and end distributions differ in length".into()));
    }
    if gold_start >= p || gold_end >= p {
        return Err(Error::Input(format!(
            "gold span ({gold_start}, {gold_end}) outside {p} passage slots"
        )));
    }
    let mut picked = Vec::with_capacity(2);
    for (dist, gold) in [(start_dist, gold_start), (end_dist, gold_end)] {
        let col = tape.transpose(dist)?;
        let row = tape.gather_rows(col, &[gold])?;
        picked.push(tape.ln(row)?);
    }
    let total = tape.add(picked[0], picked[1])?;
    let scaled = tape.scale(total, -0.5)?;
    tape.reshape(scaled, vec![1])
}

/// Distillation loss between one student distribution (on the tape, so
/// gradients flow) and the matching frozen teacher distribution:
/// `KL(student || teacher)` with the teacher floored at
/// [`KD_TEACHER_FLOOR`]. Callers sum this over the start and end heads.
pub fn kd_loss_on_tape(tape: &mut Tape, student: NodeId, teacher: &Tensor) -> Result<NodeId> {
    let s_shape = tape.value(student).shape().to_vec();
    if s_shape != teacher.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            s_shape,
            teacher.shape()
        )));
    }
    let ln_teacher: Vec<f64> = teacher
        .data()
        .iter()
        .map(|&q| q.max(KD_TEACHER_FLOOR).ln())
        .collect();
    let ln_t = tape.leaf(Tensor::from_vec(s_shape, ln_teacher)?);
    let ln_s = tape.ln(student)?;
    let self_term = tape.mul(student, ln_s)?;
    let cross_term = tape.mul(student, ln_t)?;
    let diff = tape.sub(self_term, cross_term)?;
    tape.sum(diff)
}

/// Layer reconstruction loss: for each upper layer, the squared distance
/// between student and teacher representations summed over the selected
/// rows (callers pass the non-pad rows). A raw sum, deliberately not
/// averaged — the mixing weight absorbs scale.
pub fn lrs_loss_on_tape(
    tape: &mut Tape,
    student_layers: &[NodeId],
    teacher_layers: &[Tensor],
    rows: &[usize],
) -> Result<NodeId> {
    if student_layers.len() != teacher_layers.len() {
        return Err(Error::Shape(format!(
            "{} student layers vs {} teacher layers",
            student_layers.len(),
            teacher_layers.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::Input("no rows selected for reconstruction loss".into()));
    }
    let mut acc: Option<NodeId> = None;
    for (&s, t) in student_layers.iter().zip(teacher_layers) {
        let s_rows = tape.gather_rows(s, rows)?;
        let t_leaf = tape.leaf(t.clone());
        let t_rows = tape.gather_rows(t_leaf, rows)?;
        let diff = tape.sub(s_rows, t_rows)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        acc = Some(match acc {
            None => total,
            Some(a) => tape.add(a, total)?,
        });
    }
    match acc {
        Some(node) => Ok(node),
        // No upper layers (split at the top): the loss is identically zero.
        None => Ok(tape.leaf(Tensor::from_vec(vec![1], vec![0.0])?)),
    }
}

/// Weighted combination `gamma * span + alpha * kd + beta * lrs`. The
/// auxiliary terms are optional so the same builder serves plain span
/// training and ablations.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    weights: &LossWeights,
    span: NodeId,
    kd: Option<NodeId>,
    lrs: Option<NodeId>,
) -> Result<NodeId> {
    weights.validate()?;
    let mut total = tape.scale(span, weights.gamma)?;
    if let Some(kd) = kd {
        let term = tape.scale(kd, weights.alpha)?;
        total = tape.add(total, term)?;
    }
    if let Some(lrs) = lrs {
        let term = tape.scale(lrs, weights.beta)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    #[test]
    fn kl_matches_the_frozen_hand_computed_value() {
        // KL([.5,.5] || [.9,.1]) = .5 ln(.5/.9) + .5 ln(.5/.1) = ln(5/3).
        let got = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((got - 0.5108256237659905).abs() < 1e-15, "{got}");
    }

    #[test]
    fn kl_of_a_distribution_with_itself_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_handles_zero_mass_in_the_student() {
        let got = kl_divergence(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_floors_teacher_zeros_instead_of_blowing_up() {
        let got = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(got.is_finite());
        // The floored term dominates: .5 (ln .5 - ln 1e-12).
        let want = 0.5 * (0.5f64.ln() - KD_TEACHER_FLOOR.ln()) + 0.5 * 0.5f64.ln();
        assert!((got - want).abs() < 1e-12);
    }

    proptest! {
        /// Non-negativity for genuine (softmax-produced, strictly positive)
        /// distribution pairs.
        #[test]
        fn kl_is_non_negative_for_positive_distributions(
            raw_p in proptest::collection::vec(0.01f64..1.0, 2..8),
            raw_q_seed in proptest::collection::vec(0.01f64..1.0, 2..8),
        ) {
            let n = raw_p.len().min(raw_q_seed.len());
            let norm = |v: &[f64]| -> Vec<f64> {
                let z: f64 = v.iter().sum();
                v.iter().map(|x| x / z).collect()
            };
            let p = norm(&raw_p[..n]);
            let q = norm(&raw_q_seed[..n]);
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= -1e-14, "kl = {kl}");
        }
    }

    fn uniform_prediction(p: usize) -> PredictionDistribution {
        PredictionDistribution {
            start: vec![1.0 / p as f64; p],
            end: vec![1.0 / p as f64; p],
            slots: (10..10 + p).collect(),
        }
    }

    #[test]
    fn task_loss_is_zero_on_a_point_mass_and_ln_v_on_uniform() {
        let mut point = uniform_prediction(4);
        point.start = vec![0.0, 1.0, 0.0, 0.0];
        point.end = vec![0.0, 0.0, 1.0, 0.0];
        assert_eq!(task_loss(&point, (1, 2)).unwrap(), 0.0);

        let uniform = uniform_prediction(5);
        let got = task_loss(&uniform, (0, 3)).unwrap();
        assert!((got - 5f64.ln()).abs() < 1e-15, "{got}");
    }

    #[test]
    fn task_loss_matches_the_direct_formula_on_random_distributions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = rng.gen_range(2..7usize);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..p).map(|_| rng.gen_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            };
            let dist = PredictionDistribution {
                start: draw(&mut rng),
                end: draw(&mut rng),
                slots: (0..p).collect(),
            };
            let s = rng.gen_range(0..p);
            let e = rng.gen_range(0..p);
            let want = -(dist.start[s].ln() + dist.end[e].ln()) / 2.0;
            assert!((task_loss(&dist, (s, e)).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn task_loss_rejects_gold_outside_the_slots() {
        let d = uniform_prediction(3);
        assert!(matches!(task_loss(&d, (0, 3)), Err(Error::Input(_))));
    }

    #[test]
    fn kd_loss_is_zero_on_identical_predictions_and_rejects_support_mismatch() {
        let a = uniform_prediction(4);
        assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);

        let mut b = uniform_prediction(4);
        b.slots = (20..24).collect();
        assert!(matches!(kd_loss(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn kd_loss_sums_the_start_and_end_divergences() {
        let mut a = uniform_prediction(2);
        a.start = vec![0.5, 0.5];
        a.end = vec![0.5, 0.5];
        let mut b = uniform_prediction(2);
        b.start = vec![0.9, 0.1];
        b.end = vec![0.9, 0.1];
        let got = kd_loss(&a, &b).unwrap();
        assert!((got - 2.0 * 0.5108256237659905).abs() < 1e-12, "{got}");
    }

    #[test]
    fn pure_lrs_counts_one_perturbed_token_as_its_squared_norm() {
        let zeros = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        let student = vec![zeros.clone(), zeros.clone(), zeros.clone()];
        let mut bumped = vec![0.0; 6];
        bumped[2] = 3.0; // row 1, col 0
        bumped[3] = 4.0; // row 1, col 1
        let teacher = vec![zeros.clone(), zeros.clone(), Tensor::matrix(3, 2, bumped).unwrap()];
        // k = 1 in a 2-layer stack: only the final layer counts.
        let got = lrs_loss(&student, &teacher, 1, &[0, 1, 2]).unwrap();
        assert_eq!(got, 25.0);
        // The perturbed row excluded -> zero.
        assert_eq!(lrs_loss(&student, &teacher, 1, &[0, 2]).unwrap(), 0.0);
        // Layers below the split never count.
        let teacher_low = vec![teacher[2].clone(), zeros.clone(), zeros.clone()];
        assert_eq!(lrs_loss(&student, &teacher_low, 1, &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn pure_lrs_rejects_mismatched_stacks() {
        let a = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            lrs_loss(&[a.clone(), a.clone()], &[a.clone(), b], 0, &[0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            lrs_loss(&[a.clone()], &[a.clone(), a.clone()], 0, &[0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn span_loss_matches_plain_arithmetic() {
        let mut tape = Tape::new();
        let start = tape.leaf(Tensor::matrix(1, 4, vec![0.25, 0.25, 0.25, 0.25]).unwrap());
        let end = tape.leaf(Tensor::matrix(1, 4, vec![0.5, 0.2, 0.2, 0.1]).unwrap());
        let loss = span_loss_on_tape(&mut tape, start, end, 1, 0).unwrap();
        let want = span_nll(0.25, 0.5);
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn span_loss_rejects_out_of_range_gold() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::matrix(1, 3, vec![0.3, 0.3, 0.4]).unwrap());
        assert!(matches!(
            span_loss_on_tape(&mut tape, d, d, 3, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn span_loss_gradient_through_softmax_checks_out() {
        // Logits -> softmax -> pick gold -> nll, differentiated w.r.t. the
        // logits; compared against central differences.
        let logits = Tensor::matrix(1, 5, vec![0.3, -0.2, 0.9, 0.1, -0.5]).unwrap();
        let report = grad_check(
            |tape, params| {
                let sm = tape.softmax(params[0], 1)?;
                span_loss_on_tape(tape, sm, sm, 2, 4)
            },
            &[logits],
            1e-5,
            1e-7,
        )
        .unwrap();
        report.require_pass().unwrap();
    }

    #[test]
    fn kd_tape_value_matches_the_pure_function() {
        let student = vec![0.1, 0.6, 0.3];
        let teacher = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::matrix(1, 3, student.clone()).unwrap());
        let node = kd_loss_on_tape(&mut tape, s, &teacher).unwrap();
        let want = kl_divergence(&student, teacher.data()).unwrap();
        assert!((tape.value(node).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn kd_gradient_through_softmax_checks_out() {
        let teacher = Tensor::matrix(1, 4, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let logits = Tensor::matrix(1, 4, vec![0.05, -0.3, 0.6, 0.2]).unwrap();
        let report = grad_check(
            |tape, params| {
                let sm = tape.softmax(params[0], 1)?;
                kd_loss_on_tape(tape, sm, &teacher)
            },
            &[logits],
            1e-5,
            1e-7,
        )
        .unwrap();
        report.require_pass().unwrap();
    }

    #[test]
    fn lrs_sums_squared_distance_over_selected_rows_only() {
        let mut tape = Tape::new();
        let student = tape.leaf(
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap(),
        );
        let teacher = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        // Rows 0 and 1 selected; the wild row 2 must not contribute.
        let node = lrs_loss_on_tape(&mut tape, &[student], &[teacher], &[0, 1]).unwrap();
        let want = (1.0f64 - 1.0).powi(2)
            + (2.0f64 - 1.0).powi(2)
            + (3.0f64 - 1.0).powi(2)
            + (4.0f64 - 1.0).powi(2);
        assert_eq!(tape.value(node).data()[0], want);
    }

    #[test]
    fn lrs_gradient_is_twice_the_difference_on_selected_rows() {
        let student = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let teacher = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        let mut tape = Tape::new();
        let s = tape.param(student.clone());
        let node = lrs_loss_on_tape(&mut tape, &[s], &[teacher], &[0, 2]).unwrap();
        let grads = tape.backward(node).unwrap();
        let g = grads.wrt(s, &tape);
        assert_eq!(g.data(), &[2.0, 4.0, 0.0, 0.0, 10.0, 12.0]);
    }

    #[test]
    fn lrs_with_no_layers_is_zero() {
        let mut tape = Tape::new();
        let node = lrs_loss_on_tape(&mut tape, &[], &[], &[0]).unwrap();
        assert_eq!(tape.value(node).data()[0], 0.0);
    }

    #[test]
    fn total_loss_combines_terms_with_the_given_weights() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: f64| tape.leaf(Tensor::from_vec(vec![1], vec![v]).unwrap());
        let ts = mk(&mut tape, 2.0);
        let kd = mk(&mut tape, 3.0);
        let lrs = mk(&mut tape, 5.0);
        let w = LossWeights { gamma: 0.7, alpha: 1.1, beta: 0.5 };
        let total = total_loss_on_tape(&mut tape, &w, ts, Some(kd), Some(lrs)).unwrap();
        let want = 0.7 * 2.0 + 1.1 * 3.0 + 0.5 * 5.0;
        assert!((tape.value(total).data()[0] - want).abs() < 1e-15);

        let span_only = total_loss_on_tape(&mut tape, &LossWeights::span_only(), ts, Some(kd), Some(lrs))
            .unwrap();
        assert!((tape.value(span_only).data()[0] - 0.7 * 2.0).abs() < 1e-15);
    }
}
