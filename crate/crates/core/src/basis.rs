//! Least-squares regression machinery for conditional expectations.
//!
//! A [`BasisSpec`] maps a path prefix to a low-dimensional state vector and
//! expands it into monomials up to a total degree. Fits standardize the
//! features, drop degenerate columns, always keep an intercept, and solve
//! ridge-regularized normal equations by Cholesky with a condition check.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::paths::PathPrefix;

type StateFn = Arc<dyn Fn(&PathPrefix) -> Vec<f64> + Send + Sync>;

/// Regression basis: a state map plus polynomial degree and ridge scale.
#[derive(Clone)]
pub struct BasisSpec {
    pub degree: usize,
    pub state: StateFn,
    /// Ridge parameter per path; the normal equations get
    /// `ridge_scale * n_paths` added to each non-intercept diagonal entry.
    pub ridge_scale: f64,
    /// t-statistic threshold for the volatility-exposure regressions: the
    /// increment targets keep only coefficients whose t exceeds this value,
    /// so a payoff with no exposure produces Z identically zero instead of
    /// fitted noise. `None` disables pruning.
    pub z_prune_threshold: Option<f64>,
}

impl BasisSpec {
    pub fn new(degree: usize, state: StateFn) -> Result<Self> {
        if degree == 0 {
            return Err(Error::invalid_argument("basis degree must be >= 1"));
        }
        Ok(BasisSpec {
            degree,
            state,
            ridge_scale: 1e-8,
            z_prune_threshold: Some(4.0),
        })
    }

    /// Polynomials in the current path value.
    pub fn polynomial(degree: usize) -> Result<Self> {
        BasisSpec::new(degree, Arc::new(|prefix| prefix.current().to_vec()))
    }

    /// Polynomials in `(X_t, int_0^t X_s ds)` for 1-D ensembles, the state
    /// used by the portfolio scenario.
    pub fn value_and_integral(degree: usize) -> Result<Self> {
        BasisSpec::new(
            degree,
            Arc::new(|prefix| vec![prefix.current()[0], prefix.running_integral(0)]),
        )
    }
}

/// Exponent tuples of all monomials in `state_dim` variables with total
/// degree between 1 and `degree`, in a fixed deterministic order.
pub fn monomial_exponents(state_dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; state_dim];
    fn rec(k: usize, remaining: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == current.len() {
            if current.iter().sum::<usize>() > 0 {
                out.push(current.clone());
            }
            return;
        }
        for e in 0..=remaining {
            current[k] = e;
            rec(k + 1, remaining - e, current, out);
            current[k] = 0;
        }
    }
    rec(0, degree, &mut current, &mut out);
    out
}

fn expand(state: &[f64], exponents: &[Vec<usize>], out: &mut [f64]) {
    for (o, exps) in out.iter_mut().zip(exponents) {
        let mut v = 1.0;
        for (x, &e) in state.iter().zip(exps) {
            for _ in 0..e {
                v *= x;
            }
        }
        *o = v;
    }
}

/// One fitted regression: the standardization recipe and coefficients for
/// each target, reusable on new states (boundary extraction, diagnostics).
#[derive(Debug, Clone)]
pub struct StepFit {
    exponents: Vec<Vec<usize>>,
    /// Indices of the feature columns kept after the degeneracy scan.
    kept: Vec<usize>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// `beta[target]` has the intercept first, then one entry per kept column.
    beta: Vec<Vec<f64>>,
    /// Condition number of the (ridged) normal equations.
    pub condition: f64,
}

impl StepFit {
    pub fn n_targets(&self) -> usize {
        self.beta.len()
    }

    /// Fitted value for `target` at an arbitrary state vector.
    pub fn predict(&self, state: &[f64], target: usize) -> f64 {
        let mut features = vec![0.0; self.exponents.len()];
        expand(state, &self.exponents, &mut features);
        let b = &self.beta[target];
        let mut acc = b[0];
        for (j, &col) in self.kept.iter().enumerate() {
            acc += b[j + 1] * (features[col] - self.means[j]) / self.scales[j];
        }
        acc
    }
}

/// Largest allowed condition number of the normal equations.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Fit all targets on the given states by standardized ridge least squares.
///
/// `step` only labels the error when the system is too ill-conditioned.
/// `prune` optionally pairs a per-target mask with a t threshold: for masked
/// targets, coefficients whose t-statistic falls below the threshold are
/// dropped and the remaining system re-solved; when nothing survives the fit
/// is identically zero. Returns the fit together with in-sample predictions,
/// one row per target.
pub fn fit_step(
    states: &[Vec<f64>],
    targets: &[&[f64]],
    degree: usize,
    ridge_scale: f64,
    step: usize,
    prune: Option<(&[bool], f64)>,
) -> Result<(StepFit, Vec<Vec<f64>>)> {
    let n = states.len();
    if n == 0 {
        return Err(Error::invalid_argument("no states to fit"));
    }
    let state_dim = states[0].len();
    let exponents = monomial_exponents(state_dim, degree);
    let m = exponents.len();

    let mut raw = DMatrix::zeros(n, m);
    let mut row = vec![0.0; m];
    for (p, s) in states.iter().enumerate() {
        expand(s, &exponents, &mut row);
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NumericFailure {
                    context: format!("non-finite regression feature at step {step}"),
                    path: Some(p),
                });
            }
            raw[(p, j)] = v;
        }
    }

    // center, scale, and drop columns with no variation; with every column
    // degenerate (all paths share the step-0 prefix) only the intercept
    // survives and the fit is the plain sample mean
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for j in 0..m {
        let col = raw.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-10 * (1.0 + mean.abs()) {
            kept.push(j);
            means.push(mean);
            scales.push(sd);
        }
    }

    let k = kept.len();
    let mut design = DMatrix::zeros(n, k + 1);
    for p in 0..n {
        design[(p, 0)] = 1.0;
        for (j, &col) in kept.iter().enumerate() {
            design[(p, j + 1)] = (raw[(p, col)] - means[j]) / scales[j];
        }
    }

    let mut gram = design.transpose() * &design;
    let ridge = ridge_scale * n as f64;
    for j in 1..=k {
        gram[(j, j)] += ridge;
    }

    let eigen = gram.clone().symmetric_eigen();
    let max_ev = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_ev = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let condition = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(Error::RegressionFailure { step, cond: condition });
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(Error::RegressionFailure { step, cond: condition })?;
    // diagonal of the inverse Gram, needed for coefficient standard errors
    let gram_inv_diag: Vec<f64> = {
        let inv = chol.solve(&DMatrix::identity(k + 1, k + 1));
        (0..=k).map(|j| inv[(j, j)]).collect()
    };

    let mut beta = Vec::with_capacity(targets.len());
    let mut predictions = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        if target.len() != n {
            return Err(Error::invalid_argument("target length != n_states"));
        }
        if let Some(p) = target.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("non-finite regression target {t} at step {step}"),
                path: Some(p),
            });
        }
        let y = DVector::from_column_slice(target);
        let rhs = design.transpose() * &y;
        let mut b = chol.solve(&rhs);
        let mut fitted = &design * &b;

        let should_prune = prune
            .filter(|(mask, _)| mask.get(t).copied().unwrap_or(false))
            .map(|(_, thr)| thr);
        if let Some(thr) = should_prune {
            let dof = n as f64 - (k + 1) as f64;
            if dof >= 1.0 {
                let rss: f64 = y
                    .iter()
                    .zip(fitted.iter())
                    .map(|(yi, fi)| (yi - fi) * (yi - fi))
                    .sum();
                let sigma2 = rss / dof;
                let significant: Vec<usize> = (0..=k)
                    .filter(|&j| {
                        let se = (sigma2 * gram_inv_diag[j]).max(0.0).sqrt();
                        b[j].abs() > thr * se
                    })
                    .collect();
                if significant.len() <= k {
                    if significant.is_empty() {
                        b.fill(0.0);
                        fitted.fill(0.0);
                    } else {
                        let m = significant.len();
                        let mut sub = DMatrix::zeros(m, m);
                        let mut sub_rhs = DVector::zeros(m);
                        for (a, &ja) in significant.iter().enumerate() {
                            sub_rhs[a] = rhs[ja];
                            for (c, &jc) in significant.iter().enumerate() {
                                sub[(a, c)] = gram[(ja, jc)];
                            }
                        }
                        if let Some(sub_chol) = sub.cholesky() {
                            let sub_b = sub_chol.solve(&sub_rhs);
                            b.fill(0.0);
                            for (a, &ja) in significant.iter().enumerate() {
                                b[ja] = sub_b[a];
                            }
                            fitted = &design * &b;
                        }
                    }
                }
            }
        }

        beta.push(b.iter().cloned().collect());
        predictions.push(fitted.iter().cloned().collect());
    }

    Ok((
        StepFit {
            exponents,
            kept,
            means,
            scales,
            beta,
            condition,
        },
        predictions,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exponent_counts() {
        // one variable: x, x^2, x^3
        assert_eq!(monomial_exponents(1, 3).len(), 3);
        // two variables, total degree <= 3: C(5,2) - 1 = 9
        assert_eq!(monomial_exponents(2, 3).len(), 9);
        assert_eq!(monomial_exponents(3, 2).len(), 9);
    }

    #[test]
    fn expansion_values() {
        let exps = monomial_exponents(2, 2);
        let mut out = vec![0.0; exps.len()];
        expand(&[2.0, 3.0], &exps, &mut out);
        let labelled: Vec<(Vec<usize>, f64)> = exps.into_iter().zip(out).collect();
        assert!(labelled.contains(&(vec![0, 1], 3.0)));
        assert!(labelled.contains(&(vec![0, 2], 9.0)));
        assert!(labelled.contains(&(vec![1, 1], 6.0)));
        assert!(labelled.contains(&(vec![2, 0], 4.0)));
    }

    #[test]
    fn constant_target_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let target = vec![3.25; 200];
        let (fit, preds) = fit_step(&states, &[&target], 3, 1e-8, 0, None).unwrap();
        for &p in &preds[0] {
            assert!((p - 3.25).abs() < 1e-9);
        }
        assert!((fit.predict(&[0.123], 0) - 3.25).abs() < 1e-9);
    }

    #[test]
    fn linear_target_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect();
        let target: Vec<f64> = states.iter().map(|s| 2.0 * s[0] - 1.0).collect();
        let (fit, _) = fit_step(&states, &[&target], 3, 1e-8, 0, None).unwrap();
        for x in [-1.5, 0.0, 0.7] {
            assert!((fit.predict(&[x], 0) - (2.0 * x - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_states_fall_back_to_mean() {
        // all paths share the same state, as at the first grid node
        let states = vec![vec![0.0]; 50];
        let target: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let (fit, preds) = fit_step(&states, &[&target], 3, 1e-8, 0, None).unwrap();
        let mean = 49.0 / 2.0;
        for &p in &preds[0] {
            assert!((p - mean).abs() < 1e-10);
        }
        assert!((fit.predict(&[0.0], 0) - mean).abs() < 1e-10);
    }

    #[test]
    fn multiple_targets_share_one_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let t0: Vec<f64> = states.iter().map(|s| s[0]).collect();
        let t1: Vec<f64> = states.iter().map(|s| s[0] * s[0]).collect();
        let (fit, _) = fit_step(&states, &[&t0, &t1], 3, 1e-8, 0, None).unwrap();
        assert_eq!(fit.n_targets(), 2);
        assert!((fit.predict(&[0.5], 0) - 0.5).abs() < 1e-6);
        assert!((fit.predict(&[0.5], 1) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn duplicated_feature_is_dropped_not_fatal() {
        // a two-coordinate state where both coordinates coincide produces
        // perfectly collinear columns; ridge plus the degeneracy scan must
        // keep the fit solvable
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let x = rng.gen_range(-1.0..1.0);
                vec![x, x]
            })
            .collect();
        let target: Vec<f64> = states.iter().map(|s| s[0]).collect();
        let (fit, _) = fit_step(&states, &[&target], 2, 1e-8, 0, None).unwrap();
        assert!((fit.predict(&[0.3, 0.3], 0) - 0.3).abs() < 1e-4);
    }

    #[test]
    fn pruning_zeroes_noise_and_keeps_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states: Vec<Vec<f64>> = (0..4000).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        // pure noise, uncorrelated with the state
        let noise: Vec<f64> = (0..4000).map(|_| 0.3 * rng.gen_range(-1.0..1.0)).collect();
        let signal: Vec<f64> = states
            .iter()
            .map(|s| 2.0 * s[0] + 0.05 * rng.gen_range(-1.0..1.0))
            .collect();
        let mask = [true, true];
        let (fit, preds) =
            fit_step(&states, &[&noise, &signal], 3, 1e-8, 0, Some((&mask, 4.0))).unwrap();
        for &p in &preds[0] {
            assert_eq!(p, 0.0);
        }
        assert_eq!(fit.predict(&[0.7], 0), 0.0);
        assert!((fit.predict(&[0.7], 1) - 1.4).abs() < 0.01);
    }

    #[test]
    fn unmasked_targets_are_never_pruned() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let states: Vec<Vec<f64>> = (0..4000).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let noise: Vec<f64> = (0..4000).map(|_| 0.3 * rng.gen_range(-1.0..1.0)).collect();
        let mask = [false];
        let (_, preds) = fit_step(&states, &[&noise], 3, 1e-8, 0, Some((&mask, 4.0))).unwrap();
        assert!(preds[0].iter().any(|&p| p != 0.0));
    }

    #[test]
    fn rejects_nonfinite_target() {
        let states = vec![vec![0.1], vec![0.2], vec![0.3]];
        let target = vec![1.0, f64::INFINITY, 2.0];
        match fit_step(&states, &[&target], 1, 1e-8, 7, None) {
            Err(Error::NumericFailure { path, .. }) => assert_eq!(path, Some(1)),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn noisy_regression_tracks_conditional_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states: Vec<Vec<f64>> = (0..20_000).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let target: Vec<f64> = states
            .iter()
            .map(|s| s[0].powi(2) + 0.5 * rng.gen_range(-1.0..1.0))
            .collect();
        let (fit, _) = fit_step(&states, &[&target], 3, 1e-8, 0, None).unwrap();
        for x in [-0.8, -0.2, 0.4, 0.9] {
            assert!((fit.predict(&[x], 0) - x * x).abs() < 0.02, "x {x}");
        }
    }
}
