//! Gaussian-process surrogate and expected-improvement minimization over the
//! unit cube.
//!
//! The surrogate uses a Matérn 5/2 kernel on standardized losses (zero mean,
//! unit variance, so the signal variance is 1). The length scale is picked
//! from a fixed log-spaced grid by maximum log marginal likelihood, and the
//! acquisition is maximized over seeded random candidates, which keeps every
//! run bit-reproducible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::seeding::substream;

pub const LENGTH_SCALE_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
pub const BASE_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn 5/2 covariance at distance `r`.
pub fn matern52(r: f64, length_scale: f64, signal_variance: f64) -> f64 {
    let s = SQRT5 * r / length_scale;
    signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct GpModel {
    points: Vec<Vec<f64>>,
    targets: DVector<f64>,
    loss_mean: f64,
    loss_scale: f64,
    pub length_scale: f64,
    pub signal_variance: f64,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl GpModel {
    /// Fits the surrogate to `points` (unit-cube coordinates) and their
    /// raw losses.
    pub fn fit(points: &[Vec<f64>], losses: &[f64]) -> Result<Self> {
        if points.len() != losses.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: losses.len(),
            });
        }
        if points.len() < 2 {
            return Err(Error::InvalidOptimizer(
                "the surrogate needs at least two observations".into(),
            ));
        }
        let n = losses.len();
        let loss_mean = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|l| (l - loss_mean).powi(2)).sum::<f64>() / n as f64;
        let loss_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let targets = DVector::from_iterator(n, losses.iter().map(|l| (l - loss_mean) / loss_scale));
        let signal_variance = 1.0;

        let mut best: Option<GpModel> = None;
        for &length_scale in &LENGTH_SCALE_GRID {
            let kernel = DMatrix::from_fn(n, n, |i, j| {
                matern52(distance(&points[i], &points[j]), length_scale, signal_variance)
            });
            let Some((chol, jitter)) = decompose(&kernel) else {
                continue;
            };
            let weights = chol.solve(&targets);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let lml = -0.5 * targets.dot(&weights)
                - log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if best
                .as_ref()
                .is_none_or(|b| lml > b.log_marginal_likelihood)
            {
                best = Some(GpModel {
                    points: points.to_vec(),
                    targets: targets.clone(),
                    loss_mean,
                    loss_scale,
                    length_scale,
                    signal_variance,
                    jitter,
                    log_marginal_likelihood: lml,
                    chol,
                    weights,
                });
            }
        }
        best.ok_or(Error::SingularKernel(MAX_JITTER))
    }

    pub fn standardize(&self, loss: f64) -> f64 {
        (loss - self.loss_mean) / self.loss_scale
    }

    pub fn standardized_targets(&self) -> &[f64] {
        self.targets.as_slice()
    }

    /// Posterior mean and variance at `x`, in standardized loss units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k_star = DVector::from_iterator(
            self.points.len(),
            self.points
                .iter()
                .map(|p| matern52(distance(p, x), self.length_scale, self.signal_variance)),
        );
        let mean = k_star.dot(&self.weights);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Expected improvement below `best_standardized` at `x`.
    pub fn expected_improvement(&self, x: &[f64], best_standardized: f64) -> f64 {
        let (mu, var) = self.predict(x);
        expected_improvement(mu, var.sqrt(), best_standardized)
    }
}

fn decompose(kernel: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = BASE_JITTER;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        let mut k = kernel.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            return Some((chol, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// `EI = (f* − μ)Φ(z) + σφ(z)` with `z = (f* − μ)/σ`; `max(0, f* − μ)` when
/// `σ < 1e-12`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let gain = best - mu;
    if sigma < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let unit = StdNormal::new(0.0, 1.0).expect("unit normal");
    (gain * unit.cdf(z) + sigma * unit.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub n_calls: usize,
    pub n_init: usize,
    pub seed: u64,
    pub n_candidates: usize,
    pub n_local: usize,
    pub local_sigma: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            n_calls: 50,
            n_init: 10,
            seed: 0,
            n_candidates: 2048,
            n_local: 64,
            local_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub point: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeTrace {
    pub evaluations: Vec<Evaluation>,
    pub best_index: usize,
    pub seed: u64,
}

impl MinimizeTrace {
    pub fn best(&self) -> &Evaluation {
        &self.evaluations[self.best_index]
    }
}

/// An aborted run: the error plus whatever was gathered before it.
#[derive(Debug, Error)]
#[error("{error} (after {} completed evaluations)", completed)]
pub struct Aborted<T: std::fmt::Debug> {
    pub error: Error,
    pub completed: usize,
    pub partial: T,
}

fn best_index(evals: &[Evaluation]) -> usize {
    evals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Minimizes `objective` over `[0, 1]^dim` with `n_init` seeded uniform
/// draws followed by GP/EI proposals, for exactly `n_calls` evaluations.
pub fn gp_minimize<F>(
    dim: usize,
    mut objective: F,
    opts: &MinimizeOptions,
) -> std::result::Result<MinimizeTrace, Aborted<Vec<Evaluation>>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let abort = |error: Error, evaluations: Vec<Evaluation>| Aborted {
        error,
        completed: evaluations.len(),
        partial: evaluations,
    };
    if opts.n_init < 2 || opts.n_calls < opts.n_init || dim == 0 {
        return Err(abort(
            Error::InvalidOptimizer(format!(
                "need n_calls >= n_init >= 2 and dim > 0, got n_calls={}, n_init={}, dim={dim}",
                opts.n_calls, opts.n_init
            )),
            Vec::new(),
        ));
    }
    let mut rng = substream(opts.seed, "tuner");
    let perturb = Normal::new(0.0, opts.local_sigma).map_err(|e| {
        abort(Error::InvalidOptimizer(e.to_string()), Vec::new())
    })?;
    let mut evaluations: Vec<Evaluation> = Vec::with_capacity(opts.n_calls);

    for _ in 0..opts.n_init {
        let point: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        match objective(&point) {
            Ok(loss) => evaluations.push(Evaluation { point, loss }),
            Err(e) => return Err(abort(e, evaluations)),
        }
    }

    while evaluations.len() < opts.n_calls {
        let points: Vec<Vec<f64>> = evaluations.iter().map(|e| e.point.clone()).collect();
        let losses: Vec<f64> = evaluations.iter().map(|e| e.loss).collect();
        let model = match GpModel::fit(&points, &losses) {
            Ok(m) => m,
            Err(e) => return Err(abort(e, evaluations)),
        };
        let incumbent = &evaluations[best_index(&evaluations)];
        let best_std = model.standardize(incumbent.loss);

        let mut candidates: Vec<Vec<f64>> = (0..opts.n_candidates)
            .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        candidates.extend((0..opts.n_local).map(|_| {
            incumbent
                .point
                .iter()
                .map(|x| (x + perturb.sample(&mut rng)).clamp(0.0, 1.0))
                .collect()
        }));

        let mut next = 0;
        let mut next_ei = f64::NEG_INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            let ei = model.expected_improvement(c, best_std);
            if ei > next_ei {
                next = i;
                next_ei = ei;
            }
        }
        let point = candidates.swap_remove(next);
        match objective(&point) {
            Ok(loss) => evaluations.push(Evaluation { point, loss }),
            Err(e) => return Err(abort(e, evaluations)),
        }
    }

    Ok(MinimizeTrace {
        best_index: best_index(&evaluations),
        evaluations,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let points = vec![
            vec![0.1, 0.2],
            vec![0.8, 0.3],
            vec![0.5, 0.9],
            vec![0.3, 0.6],
            vec![0.9, 0.9],
        ];
        let losses = points
            .iter()
            .map(|p| (p[0] - 0.4_f64).powi(2) + 2.0 * (p[1] - 0.5_f64).powi(2))
            .collect();
        (points, losses)
    }

    #[test]
    fn matern_shape() {
        assert_eq!(matern52(0.0, 0.3, 1.0), 1.0);
        assert!(matern52(0.1, 0.3, 1.0) > matern52(0.2, 0.3, 1.0));
        // Closed form at r = ℓ: (1 + √5 + 5/3)e^{−√5}.
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        assert!((matern52(0.4, 0.4, 1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn fit_is_deterministic_and_interpolates() {
        let (points, losses) = sample_data();
        let a = GpModel::fit(&points, &losses).unwrap();
        let b = GpModel::fit(&points, &losses).unwrap();
        assert_eq!(a.length_scale, b.length_scale);
        assert_eq!(a.log_marginal_likelihood, b.log_marginal_likelihood);
        for (p, t) in points.iter().zip(a.standardized_targets()) {
            let (mu, var) = a.predict(p);
            assert!((mu - t).abs() < 1e-6, "mean {mu} vs {t}");
            assert!(var < 1e-6);
        }
    }

    #[test]
    fn length_scale_maximizes_likelihood() {
        let (points, losses) = sample_data();
        let chosen = GpModel::fit(&points, &losses).unwrap();
        assert!(LENGTH_SCALE_GRID.contains(&chosen.length_scale));
        // Brute-force the likelihood on each grid value.
        let n = losses.len();
        let y = chosen.standardized_targets().to_vec();
        for &ls in &LENGTH_SCALE_GRID {
            let mut k = DMatrix::from_fn(n, n, |i, j| matern52(distance(&points[i], &points[j]), ls, 1.0));
            for i in 0..n {
                k[(i, i)] += BASE_JITTER;
            }
            let det = k.determinant();
            let inv = k.try_inverse().unwrap();
            let yv = DVector::from_vec(y.clone());
            let lml = -0.5 * (yv.transpose() * &inv * &yv)[(0, 0)]
                - 0.5 * det.ln()
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            assert!(lml <= chosen.log_marginal_likelihood + 1e-6);
        }
    }

    #[test]
    fn midpoint_variance_positive() {
        let model = GpModel::fit(&[vec![0.0], vec![1.0]], &[1.0, 2.0]).unwrap();
        let (_, var) = model.predict(&[0.5]);
        assert!(var > 0.0);
    }

    #[test]
    fn fit_needs_two_points() {
        assert!(GpModel::fit(&[vec![0.5]], &[1.0]).is_err());
    }

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(0.0, 0.0, 1.0), 1.0);
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((expected_improvement(0.5, 1.0, 0.5) - phi0).abs() < 1e-12);
        assert!((phi0 - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn ei_nonnegative_and_monotone_in_sigma() {
        let mut prev = 0.0;
        for s in [0.01, 0.1, 0.5, 1.0, 2.0] {
            let ei = expected_improvement(1.0, s, 0.0);
            assert!(ei >= prev && ei >= 0.0);
            prev = ei;
        }
    }

    fn bowl(p: &[f64]) -> Result<f64> {
        Ok(p.iter().map(|x| (x - 0.3).powi(2)).sum())
    }

    #[test]
    fn minimize_is_deterministic() {
        let opts = MinimizeOptions {
            n_calls: 20,
            seed: 11,
            ..Default::default()
        };
        let a = gp_minimize(4, bowl, &opts).unwrap();
        let b = gp_minimize(4, bowl, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evaluations.len(), 20);
    }

    #[test]
    fn n_calls_equal_n_init_is_random_search() {
        let opts = MinimizeOptions {
            n_calls: 10,
            n_init: 10,
            seed: 4,
            ..Default::default()
        };
        let t = gp_minimize(4, bowl, &opts).unwrap();
        let min = t
            .evaluations
            .iter()
            .map(|e| e.loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(t.best().loss, min);
        assert_eq!(t.evaluations.len(), 10);
    }

    #[test]
    fn objective_errors_abort_with_partial_trace() {
        let mut calls = 0;
        let opts = MinimizeOptions {
            n_calls: 20,
            seed: 1,
            ..Default::default()
        };
        let err = gp_minimize(
            2,
            |p| {
                calls += 1;
                if calls == 13 {
                    Err(Error::EmptyInput)
                } else {
                    bowl(p)
                }
            },
            &opts,
        )
        .unwrap_err();
        assert_eq!(err.completed, 12);
        assert_eq!(err.partial.len(), 12);
        assert!(matches!(err.error, Error::EmptyInput));
    }

    #[test]
    fn rejects_bad_budget() {
        let opts = MinimizeOptions {
            n_calls: 5,
            n_init: 10,
            ..Default::default()
        };
        assert!(gp_minimize(2, bowl, &opts).is_err());
    }
}
