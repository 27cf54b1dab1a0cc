//! Bayesian optimization of the three loss weights.
//!
//! A Gaussian-process surrogate (squared-exponential kernel, hyperparameters
//! fit by marginal-likelihood grid search, observation noise 1e-6 on the
//! standardized scale) models the objective over the unit cube; expected
//! improvement picks each next trial, maximized by coordinate pattern search
//! from the best of 256 seeded random candidates. The first trials are a
//! seeded Latin-hypercube design. Everything is deterministic in the seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::error::{Error, Result};

/// Observation noise added to the kernel diagonal (standardized scale).
const GP_NOISE: f64 = 1e-6;

/// Documented hyperparameter grids for the marginal-likelihood fit, in
/// normalized-input units.
const LENGTH_SCALES: [f64; 8] = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5];
const SIGNAL_VARIANCES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// One successful evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuneTrial {
    pub weights: LossWeights,
    /// The (finite) objective value, larger is better.
    pub objective: f64,
    /// 1-based trial index.
    pub iteration: usize,
}

/// Trial-log entry: objective `None` means the evaluation came back
/// non-finite and was excluded from the surrogate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrialRecord {
    pub iteration: usize,
    pub weights: LossWeights,
    pub objective: Option<f64>,
}

/// Knobs for [`bo_tune`] and [`random_search`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoOptions {
    /// Per-dimension (low, high) for (gamma, alpha, beta).
    pub bounds: [(f64, f64); 3],
    /// Total evaluation budget, including the initial design.
    pub n_iterations: usize,
    /// Space-filling trials before the surrogate takes over.
    pub initial_design: usize,
    /// Random acquisition candidates per iteration.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for BoOptions {
    fn default() -> Self {
        Self {
            bounds: [(0.1, 2.0); 3],
            n_iterations: 50,
            initial_design: 10,
            candidates: 256,
            seed: 0,
        }
    }
}

impl BoOptions {
    fn validate(&self) -> Result<()> {
        for &(lo, hi) in &self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Param(format!("invalid bound ({lo}, {hi})")));
            }
        }
        if self.initial_design == 0 {
            return Err(Error::Param("initial design must have at least one trial".into()));
        }
        if self.n_iterations < self.initial_design {
            return Err(Error::Param(format!(
                "budget of {} iterations is smaller than the {}-trial initial design",
                self.n_iterations, self.initial_design
            )));
        }
        if self.candidates == 0 {
            return Err(Error::Param("need at least one acquisition candidate".into()));
        }
        Ok(())
    }

    fn denormalize(&self, x: [f64; 3]) -> LossWeights {
        let map = |i: usize| self.bounds[i].0 + x[i] * (self.bounds[i].1 - self.bounds[i].0);
        LossWeights { gamma: map(0), alpha: map(1), beta: map(2) }
    }
}

/// Maximizes the objective over the bounded box. Returns the best observed
/// trial plus the full log (failures included). Errors if every trial
/// fails.
pub fn bo_tune(
    mut objective: impl FnMut(&LossWeights) -> f64,
    opts: &BoOptions,
) -> Result<(TuneTrial, Vec<TrialRecord>)> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = Vec::with_capacity(opts.n_iterations);
    let mut xs: Vec<[f64; 3]> = Vec::new(); // successes, normalized
    let mut ys: Vec<f64> = Vec::new();

    let design = latin_hypercube(opts.initial_design, &mut rng);
    for iteration in 1..=opts.n_iterations {
        let x = if iteration <= opts.initial_design {
            design[iteration - 1]
        } else {
            propose(&xs, &ys, opts.candidates, &mut rng)
        };
        let weights = opts.denormalize(x);
        let value = objective(&weights);
        let objective_entry = value.is_finite().then_some(value);
        if objective_entry.is_some() {
            xs.push(x);
            ys.push(value);
        }
        log.push(TrialRecord { iteration, weights, objective: objective_entry });
    }

    best_of(&log).ok_or_else(|| Error::State("every tuning trial failed".into())).map(|b| (b, log))
}

/// Uniform random search over the same box — the paired baseline for
/// judging what the surrogate buys.
pub fn random_search(
    mut objective: impl FnMut(&LossWeights) -> f64,
    opts: &BoOptions,
) -> Result<(TuneTrial, Vec<TrialRecord>)> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = Vec::with_capacity(opts.n_iterations);
    for iteration in 1..=opts.n_iterations {
        let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let weights = opts.denormalize(x);
        let value = objective(&weights);
        log.push(TrialRecord {
            iteration,
            weights,
            objective: value.is_finite().then_some(value),
        });
    }
    best_of(&log).ok_or_else(|| Error::State("every tuning trial failed".into())).map(|b| (b, log))
}

fn best_of(log: &[TrialRecord]) -> Option<TuneTrial> {
    let mut best: Option<TuneTrial> = None;
    for r in log {
        if let Some(v) = r.objective {
            if best.map_or(true, |b| v > b.objective) {
                best = Some(TuneTrial { weights: r.weights, objective: v, iteration: r.iteration });
            }
        }
    }
    best
}

/// Seeded Latin hypercube over the unit cube: each dimension's strata are
/// permuted independently, one sample per stratum.
fn latin_hypercube(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        columns.push(
            strata.iter().map(|&s| (s as f64 + rng.gen::<f64>()) / n as f64).collect(),
        );
    }
    (0..n).map(|i| [columns[0][i], columns[1][i], columns[2][i]]).collect()
}

/// Next trial: fit the surrogate on all successes and maximize expected
/// improvement. Falls back to a uniform draw while fewer than two points
/// are available (a GP through one point says nothing useful).
fn propose(xs: &[[f64; 3]], ys: &[f64], candidates: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if xs.len() < 2 {
        return [rng.gen(), rng.gen(), rng.gen()];
    }
    let gp = Gp::fit(xs, ys);
    let best_y = gp.best_standardized();

    let mut pool: Vec<[f64; 3]> =
        (0..candidates).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    pool.sort_by(|a, b| {
        gp.expected_improvement(*b, best_y)
            .partial_cmp(&gp.expected_improvement(*a, best_y))
            .expect("EI is finite")
    });

    // Refine the most promising candidates with coordinate pattern search.
    let mut best_x = pool[0];
    let mut best_ei = gp.expected_improvement(best_x, best_y);
    for &start in pool.iter().take(4) {
        let (x, ei) = pattern_search(&gp, start, best_y);
        if ei > best_ei {
            best_x = x;
            best_ei = ei;
        }
    }
    best_x
}

/// Coordinate descent on EI with a halving step, clamped to the unit cube.
fn pattern_search(gp: &Gp, start: [f64; 3], best_y: f64) -> ([f64; 3], f64) {
    let mut x = start;
    let mut fx = gp.expected_improvement(x, best_y);
    let mut step = 0.1;
    while step > 1e-3 {
        let mut moved = false;
        for dim in 0..3 {
            for dir in [-1.0, 1.0] {
                let mut cand = x;
                cand[dim] = (cand[dim] + dir * step).clamp(0.0, 1.0);
                let f = gp.expected_improvement(cand, best_y);
                if f > fx {
                    x = cand;
                    fx = f;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Gaussian-process posterior over standardized objective values.
struct Gp {
    xs: Vec<[f64; 3]>,
    /// Cholesky factor of the kernel matrix, lower triangular, row-major.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    length_scale: f64,
    signal_variance: f64,
    y_standardized: Vec<f64>,
}

impl Gp {
    /// Grid-searches the kernel hyperparameters by marginal likelihood and
    /// keeps the best fit. Objective values are standardized internally.
    fn fit(xs: &[[f64; 3]], ys: &[f64]) -> Self {
        let n = ys.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-12);
        let y_std: Vec<f64> = ys.iter().map(|y| (y - mean) / std).collect();

        let mut best: Option<(f64, Gp)> = None;
        for &l in &LENGTH_SCALES {
            for &s2 in &SIGNAL_VARIANCES {
                let Some((chol, alpha)) = factor(xs, &y_std, l, s2) else { continue };
                // Marginal log-likelihood up to the constant term.
                let quad: f64 = y_std.iter().zip(&alpha).map(|(y, a)| y * a).sum();
                let logdet: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum::<f64>() * 2.0;
                let mll = -0.5 * quad - 0.5 * logdet;
                if best.as_ref().map_or(true, |(b, _)| mll > *b) {
                    best = Some((
                        mll,
                        Gp {
                            xs: xs.to_vec(),
                            chol,
                            alpha,
                            length_scale: l,
                            signal_variance: s2,
                            y_standardized: y_std.clone(),
                        },
                    ));
                }
            }
        }
        best.expect("kernel with diagonal noise always factors for some grid point").1
    }

    fn best_standardized(&self) -> f64 {
        self.y_standardized.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn kernel(&self, a: [f64; 3], b: [f64; 3]) -> f64 {
        kernel(a, b, self.length_scale, self.signal_variance)
    }

    /// Posterior mean and standard deviation at a point (standardized
    /// scale).
    fn predict(&self, x: [f64; 3]) -> (f64, f64) {
        let n = self.xs.len();
        let k_star: Vec<f64> = self.xs.iter().map(|&xi| self.kernel(x, xi)).collect();
        let mean: f64 = k_star.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_substitute(&self.chol, &k_star, n);
        let reduction: f64 = v.iter().map(|w| w * w).sum();
        let var = (self.signal_variance + GP_NOISE - reduction).max(1e-18);
        (mean, var.sqrt())
    }

    /// Expected improvement over the best observed value (maximization).
    fn expected_improvement(&self, x: [f64; 3], best_y: f64) -> f64 {
        let (mu, sigma) = self.predict(x);
        if sigma < 1e-12 {
            return (mu - best_y).max(0.0);
        }
        let z = (mu - best_y) / sigma;
        (mu - best_y) * normal_cdf(z) + sigma * normal_pdf(z)
    }
}

fn kernel(a: [f64; 3], b: [f64; 3], length_scale: f64, signal_variance: f64) -> f64 {
    let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    signal_variance * (-d2 / (2.0 * length_scale * length_scale)).exp()
}

/// Builds K + noise·I and returns its Cholesky factor plus `alpha = K⁻¹ y`.
/// `None` if the matrix is not numerically positive definite.
fn factor(xs: &[[f64; 3]], y: &[f64], l: f64, s2: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = kernel(xs[i], xs[j], l, s2);
        }
        k[i * n + i] += GP_NOISE;
    }
    cholesky_in_place(&mut k, n)?;
    let z = forward_substitute(&k, y, n);
    let alpha = backward_substitute(&k, &z, n);
    Some((k, alpha))
}

/// In-place lower-triangular Cholesky; the upper triangle is zeroed.
fn cholesky_in_place(a: &mut [f64], n: usize) -> Option<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Some(())
}

/// Solves `L z = b` for lower-triangular `L`.
fn forward_substitute(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * n + j] * z[j];
        }
        z[i] = s / l[i * n + i];
    }
    z
}

/// Solves `Lᵀ x = z` for lower-triangular `L`.
fn backward_substitute(l: &[f64], z: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for j in i + 1..n {
            s -= l[j * n + i] * x[j];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Abramowitz–Stegun 7.1.26 rational approximation, |error| ≤ 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(w: &LossWeights) -> f64 {
        -((w.gamma - 1.0).powi(2) + (w.alpha - 1.0).powi(2) + (w.beta - 1.0).powi(2))
    }

    fn in_bounds(w: &LossWeights, opts: &BoOptions) -> bool {
        [w.gamma, w.alpha, w.beta]
            .iter()
            .zip(&opts.bounds)
            .all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
    }

    #[test]
    fn erf_matches_reference_values() {
        assert!(erf(0.0).abs() < 1.5e-7);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1.5e-7);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1.5e-7);
        assert!((erf(-1.0) + erf(1.0)).abs() < 1e-15);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1.5e-7);
        assert!((normal_cdf(1.96) - 0.975).abs() < 1e-3);
    }

    #[test]
    fn cholesky_solves_a_known_system() {
        // A = [[4,2],[2,3]], A⁻¹ b with b = (2, 5): x = (-1/2, 2).
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        cholesky_in_place(&mut a, 2).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-15);
        let z = forward_substitute(&a, &[2.0, 5.0], 2);
        let x = backward_substitute(&a, &z, 2);
        assert!((x[0] + 0.5).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12, "{x:?}");
        // log|A| = ln 8.
        let logdet = 2.0 * (a[0].ln() + a[3].ln());
        assert!((logdet - 8f64.ln()).abs() < 1e-12);

        let mut not_pd = vec![1.0, 2.0, 2.0, 1.0];
        assert!(cholesky_in_place(&mut not_pd, 2).is_none());
    }

    #[test]
    fn gp_interpolates_its_training_points() {
        let xs: [[f64; 3]; 5] = [
            [0.1, 0.1, 0.1],
            [0.5, 0.2, 0.8],
            [0.9, 0.9, 0.1],
            [0.3, 0.7, 0.5],
            [0.7, 0.4, 0.3],
        ];
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin() + x[1] - x[2]).collect();
        let gp = Gp::fit(&xs, &ys);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let std =
            (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
        for (x, y) in xs.iter().zip(&ys) {
            let (mu, sigma) = gp.predict(*x);
            let back = mu * std + mean;
            assert!((back - y).abs() < 1e-3, "{back} vs {y}");
            assert!(sigma < 0.1, "posterior too uncertain at a training point: {sigma}");
        }
    }

    #[test]
    fn expected_improvement_is_zero_at_a_dominated_sure_point() {
        let xs = [[0.2, 0.2, 0.2], [0.8, 0.8, 0.8], [0.5, 0.5, 0.5]];
        let ys = [0.0, 1.0, 0.5];
        let gp = Gp::fit(&xs, &ys);
        let best = gp.best_standardized();
        // At the known worst training point the posterior is nearly
        // certain and far below the best: negligible improvement.
        let ei_worst = gp.expected_improvement([0.2, 0.2, 0.2], best);
        let ei_far = gp.expected_improvement([0.0, 0.0, 1.0], best);
        assert!(ei_worst < 1e-3, "{ei_worst}");
        assert!(ei_far > ei_worst);
    }

    #[test]
    fn constant_objective_stays_in_bounds_with_no_failures() {
        let opts = BoOptions { n_iterations: 15, ..Default::default() };
        let (best, log) = bo_tune(|_| 1.0, &opts).unwrap();
        assert_eq!(best.objective, 1.0);
        assert_eq!(log.len(), 15);
        for r in &log {
            assert!(r.objective.is_some());
            assert!(in_bounds(&r.weights, &opts), "{:?}", r.weights);
        }
    }

    #[test]
    fn every_proposal_respects_the_bounds_on_a_real_objective() {
        let opts = BoOptions { n_iterations: 30, seed: 4, ..Default::default() };
        let (_, log) = bo_tune(quadratic, &opts).unwrap();
        for r in &log {
            assert!(in_bounds(&r.weights, &opts), "{:?}", r.weights);
        }
    }

    #[test]
    fn invalid_options_are_rejected() {
        let mut opts = BoOptions::default();
        opts.bounds[1] = (2.0, 0.1);
        assert!(matches!(bo_tune(|_| 0.0, &opts), Err(Error::Param(_))));

        let opts = BoOptions { n_iterations: 5, initial_design: 10, ..Default::default() };
        assert!(matches!(bo_tune(|_| 0.0, &opts), Err(Error::Param(_))));
    }

    #[test]
    fn failures_are_logged_and_skipped_not_fatal() {
        let opts = BoOptions { n_iterations: 25, seed: 7, ..Default::default() };
        let (best, log) = bo_tune(
            |w| if w.alpha > 1.2 { f64::NAN } else { quadratic(w) },
            &opts,
        )
        .unwrap();
        assert!(best.objective.is_finite());
        assert!(best.weights.alpha <= 1.2);
        let failures = log.iter().filter(|r| r.objective.is_none()).count();
        assert!(failures > 0, "the poisoned region was never probed");
        assert!(failures < log.len());
    }

    #[test]
    fn all_failures_is_a_state_error() {
        let opts = BoOptions { n_iterations: 12, ..Default::default() };
        assert!(matches!(bo_tune(|_| f64::NAN, &opts), Err(Error::State(_))));
        assert!(matches!(random_search(|_| f64::NAN, &opts), Err(Error::State(_))));
    }

    #[test]
    fn tuning_is_deterministic_in_the_seed() {
        let opts = BoOptions { n_iterations: 20, seed: 3, ..Default::default() };
        let (a, la) = bo_tune(quadratic, &opts).unwrap();
        let (b, lb) = bo_tune(quadratic, &opts).unwrap();
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.iteration, b.iteration);
        let ws = |l: &[TrialRecord]| {
            l.iter().map(|r| (r.weights.gamma, r.weights.alpha, r.weights.beta)).collect::<Vec<_>>()
        };
        assert_eq!(ws(&la), ws(&lb));

        let (c, _) = bo_tune(quadratic, &BoOptions { seed: 8, ..opts }).unwrap();
        assert!(ws(&la)[19] != (c.weights.gamma, c.weights.alpha, c.weights.beta) || a.objective != c.objective);
    }

    #[test]
    fn finds_the_quadratic_optimum_on_most_seeds() {
        let mut hits = 0;
        for seed in 0..10 {
            let opts = BoOptions { seed, ..Default::default() };
            let (best, _) = bo_tune(quadratic, &opts).unwrap();
            let linf = (best.weights.gamma - 1.0)
                .abs()
                .max((best.weights.alpha - 1.0).abs())
                .max((best.weights.beta - 1.0).abs());
            if linf <= 0.15 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "only {hits}/10 seeds landed within tolerance");
    }

    #[test]
    fn beats_paired_random_search_on_most_seeds() {
        let mut wins = 0;
        for seed in 0..10 {
            let opts = BoOptions { seed, ..Default::default() };
            let (bo_best, _) = bo_tune(quadratic, &opts).unwrap();
            let (rs_best, _) = random_search(quadratic, &opts).unwrap();
            if bo_best.objective >= rs_best.objective {
                wins += 1;
            }
        }
        assert!(wins >= 8, "surrogate won only {wins}/10 paired runs");
    }
}
