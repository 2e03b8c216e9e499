//! Deterministic duality utilities: minimization of `g(gamma) + r^2 / (D
//! gamma)` curves, the slope of the resulting value function at `r = 0`, and
//! a finite strong-duality checker.
//!
//! These are the scalar building blocks behind the quadratic dualization of
//! the L2-constrained robust value; they are pure functions, independent of
//! any Monte-Carlo machinery, and are reused as the gamma-minimization kernel
//! by the sensitivity estimators.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A scalar curve `g(gamma)` on `gamma >= 0`, with its derivative at 0 when
/// known (used to cross-check slope estimates).
#[derive(Clone)]
pub struct ScalarCurve {
    g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub derivative_at_zero: Option<f64>,
}

impl ScalarCurve {
    pub fn new(g: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        ScalarCurve {
            g,
            derivative_at_zero: None,
        }
    }

    pub fn with_derivative(mut self, d: f64) -> Self {
        self.derivative_at_zero = Some(d);
        self
    }

    pub fn eval(&self, gamma: f64) -> f64 {
        (self.g)(gamma)
    }
}

/// Result of one dual minimization.
#[derive(Debug, Clone, Copy)]
pub struct DualMin {
    pub value: f64,
    pub gamma_star: f64,
    /// Set when the minimum sits on the first or last grid cell, signalling
    /// that the grid truncates a boundary infimum.
    pub boundary_minimum: bool,
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    for _ in 0..90 {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        }
        if hi - lo < 1e-14 * (1.0 + hi.abs()) {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid_argument("gamma grid is empty"));
    }
    for w in grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::invalid_argument("gamma grid must be ascending"));
        }
    }
    if grid[0] <= 0.0 {
        return Err(Error::invalid_argument("gamma grid must be positive"));
    }
    Ok(())
}

/// Minimize `g(gamma) + r^2 / (divisor * gamma)` over the grid, refined by
/// golden section on the bracketing cells.
pub fn dual_min(g: &ScalarCurve, r: f64, grid: &[f64], divisor: f64) -> Result<DualMin> {
    if !(r >= 0.0) {
        return Err(Error::invalid_argument("radius must be >= 0"));
    }
    if !(divisor > 0.0) {
        return Err(Error::invalid_argument("divisor must be > 0"));
    }
    validate_grid(grid)?;
    let objective = |gamma: f64| g.eval(gamma) + r * r / (divisor * gamma);

    let values: Vec<f64> = grid.iter().map(|&x| objective(x)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_argument("curve is not finite on the grid"));
    }
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let boundary_minimum = best == 0 || best == grid.len() - 1;
    let lo = if best == 0 { grid[0] } else { grid[best - 1] };
    let hi = if best == grid.len() - 1 {
        grid[best]
    } else {
        grid[best + 1]
    };
    let (mut gamma_star, mut value) = golden_section(&objective, lo, hi);
    if values[best] < value {
        gamma_star = grid[best];
        value = values[best];
    }
    Ok(DualMin {
        value,
        gamma_star,
        boundary_minimum,
    })
}

/// Slope estimate of `V(r) = inf_gamma { g(gamma) + r^2 / (divisor gamma) }`
/// at `r = 0`, from finite radii extrapolated linearly to zero.
#[derive(Debug, Clone, Copy)]
pub struct SlopeEstimate {
    pub slope: f64,
    /// `2 sqrt(g'(0) / divisor)`, available when the curve declares its
    /// derivative at zero.
    pub closed_form: Option<f64>,
}

/// Default gamma grid for the slope kernel: wide and log-spaced so the
/// minimizer of small-radius problems is always interior.
fn default_gamma_grid() -> Vec<f64> {
    let n = 241;
    (0..n)
        .map(|i| 10f64.powf(-9.0 + 10.0 * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn slope_at_zero(g: &ScalarCurve, r_ladder: &[f64], divisor: f64) -> Result<SlopeEstimate> {
    if r_ladder.len() < 3 {
        return Err(Error::invalid_argument("radius ladder needs >= 3 points"));
    }
    for w in r_ladder.windows(2) {
        if !(w[0] > w[1]) {
            return Err(Error::invalid_argument("radius ladder must be descending"));
        }
    }
    if *r_ladder.last().unwrap() <= 0.0 {
        return Err(Error::invalid_argument("radius ladder must be positive"));
    }
    // V(0) must come from the curve itself, not from a positive-grid infimum,
    // or the extrapolation inherits a spurious offset
    let v0 = g.eval(0.0);
    if !v0.is_finite() {
        return Err(Error::invalid_argument("curve is not finite at 0"));
    }
    let grid = default_gamma_grid();
    let mut rs = Vec::with_capacity(r_ladder.len());
    let mut us = Vec::with_capacity(r_ladder.len());
    for &r in r_ladder {
        let m = dual_min(g, r, &grid, divisor)?;
        rs.push(r);
        us.push((m.value - v0) / r);
    }
    // least-squares line U(r) = c0 + c1 r, reported at r = 0
    let n = rs.len() as f64;
    let sr: f64 = rs.iter().sum();
    let su: f64 = us.iter().sum();
    let srr: f64 = rs.iter().map(|r| r * r).sum();
    let sru: f64 = rs.iter().zip(&us).map(|(r, u)| r * u).sum();
    let denom = n * srr - sr * sr;
    let slope = if denom.abs() < 1e-300 {
        su / n
    } else {
        (su * srr - sr * sru) / denom
    };
    let closed_form = g
        .derivative_at_zero
        .map(|d| 2.0 * (d.max(0.0) / divisor).sqrt());
    Ok(SlopeEstimate { slope, closed_form })
}

/// Both sides of the finite strong-duality identity
/// `sup_{phi(x) <= r} psi(x) = inf_{lambda > 0} { H(lambda) + lambda r }`,
/// `H(lambda) = sup_x { psi(x) - lambda phi(x) }`.
#[derive(Debug, Clone, Copy)]
pub struct DualityCheck {
    /// `-inf` when no point is feasible.
    pub primal: f64,
    pub dual: f64,
    /// `dual - primal`; nonnegative up to roundoff (weak duality), zero only
    /// under the envelope hypotheses of the strong statement.
    pub gap: f64,
    pub lambda_star: f64,
    pub infeasible: bool,
}

pub fn strong_duality_check(
    psi: &[f64],
    phi: &[f64],
    r: f64,
    lambda_grid: &[f64],
) -> Result<DualityCheck> {
    if psi.is_empty() || psi.len() != phi.len() {
        return Err(Error::invalid_argument(
            "psi and phi must be non-empty and equally long",
        ));
    }
    if let Some(i) = phi.iter().position(|&x| !(x >= 0.0)) {
        return Err(Error::invalid_argument(format!("phi[{i}] is negative")));
    }
    if !(r >= 0.0) {
        return Err(Error::invalid_argument("radius must be >= 0"));
    }
    if lambda_grid.is_empty() {
        return Err(Error::invalid_argument("lambda grid is empty"));
    }
    for w in lambda_grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::invalid_argument("lambda grid must be ascending"));
        }
    }
    if lambda_grid[0] < 0.0 {
        return Err(Error::invalid_argument("lambda grid must be nonnegative"));
    }

    let primal = psi
        .iter()
        .zip(phi)
        .filter(|(_, &f)| f <= r)
        .map(|(&p, _)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let infeasible = primal == f64::NEG_INFINITY;

    let h_plus = |lambda: f64| -> f64 {
        psi.iter()
            .zip(phi)
            .map(|(&p, &f)| p - lambda * f)
            .fold(f64::NEG_INFINITY, f64::max)
            + lambda * r
    };
    let values: Vec<f64> = lambda_grid.iter().map(|&l| h_plus(l)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let lo = if best == 0 {
        lambda_grid[0]
    } else {
        lambda_grid[best - 1]
    };
    let hi = if best == lambda_grid.len() - 1 {
        lambda_grid[best]
    } else {
        lambda_grid[best + 1]
    };
    // the dual objective is convex piecewise-linear in lambda, so the grid
    // bracket is unimodal and golden section converges
    let (mut lambda_star, mut dual) = golden_section(&h_plus, lo, hi);
    if values[best] < dual {
        lambda_star = lambda_grid[best];
        dual = values[best];
    }
    Ok(DualityCheck {
        primal,
        dual,
        gap: dual - primal,
        lambda_star,
        infeasible,
    })
}

/// Zero plus a log-spaced grid covering `[1e-4, 1e4]`, a sensible default
/// for bounded instances; the explicit zero captures infima that sit on the
/// boundary when the constraint never binds.
pub fn default_lambda_grid() -> Vec<f64> {
    let n = 161;
    std::iter::once(0.0)
        .chain((0..n).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / (n - 1) as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curve(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ScalarCurve {
        ScalarCurve::new(Arc::new(f))
    }

    fn coarse_grid() -> Vec<f64> {
        (0..25)
            .map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / 24.0))
            .collect()
    }

    #[test]
    fn dual_min_flat_curve_hits_boundary() {
        let g = curve(|_| 0.0);
        let grid = coarse_grid();
        let m = dual_min(&g, 1.0, &grid, 1.0).unwrap();
        assert!(m.boundary_minimum);
        assert!((m.value - 1.0 / grid.last().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn dual_min_identity_curve() {
        // gamma + 1/gamma has minimum 2 at gamma = 1
        let g = curve(|x| x);
        let m = dual_min(&g, 1.0, &coarse_grid(), 1.0).unwrap();
        assert!((m.value - 2.0).abs() < 1e-6, "value {}", m.value);
        assert!((m.gamma_star - 1.0).abs() < 1e-4);
        assert!(!m.boundary_minimum);
    }

    #[test]
    fn dual_min_zero_radius_returns_grid_infimum() {
        let g = curve(|x| (x - 0.37) * (x - 0.37));
        let m = dual_min(&g, 0.0, &coarse_grid(), 1.0).unwrap();
        assert!(m.value < 1e-6);
        assert!((m.gamma_star - 0.37).abs() < 1e-3);
    }

    #[test]
    fn dual_min_rejects_bad_inputs() {
        let g = curve(|x| x);
        assert!(dual_min(&g, -1.0, &coarse_grid(), 1.0).is_err());
        assert!(dual_min(&g, 1.0, &[], 1.0).is_err());
        assert!(dual_min(&g, 1.0, &[-1.0, 1.0], 1.0).is_err());
        assert!(dual_min(&g, 1.0, &[2.0, 1.0], 1.0).is_err());
        let bad = curve(|x| 1.0 / (x - 0.01234).abs().ln());
        // a curve that is non-finite somewhere on the grid must be rejected
        let nf = curve(|_| f64::NAN);
        assert!(dual_min(&nf, 1.0, &coarse_grid(), 1.0).is_err());
        let _ = bad;
    }

    #[test]
    fn slope_recovers_lemma_value() {
        let g = curve(|x| x + x * x).with_derivative(1.0);
        let est = slope_at_zero(&g, &[1e-2, 1e-3, 1e-4], 1.0).unwrap();
        assert!((est.slope - 2.0).abs() < 1e-2, "slope {}", est.slope);
        assert_eq!(est.closed_form, Some(2.0));
    }

    #[test]
    fn slope_flat_curve_is_zero() {
        let g = curve(|_| 3.5);
        let est = slope_at_zero(&g, &[1e-2, 1e-3, 1e-4], 1.0).unwrap();
        assert!(est.slope.abs() < 1e-6, "slope {}", est.slope);
    }

    #[test]
    fn slope_scales_with_derivative() {
        for (ell, expect) in [(0.25, 1.0), (1.0, 2.0), (4.0, 4.0)] {
            let g = curve(move |x| ell * x);
            let est = slope_at_zero(&g, &[1e-2, 1e-3, 1e-4], 1.0).unwrap();
            assert!(
                (est.slope - expect).abs() < 1e-2,
                "ell {ell}: slope {} vs {expect}",
                est.slope
            );
        }
    }

    #[test]
    fn slope_divisor_four_normalization() {
        let g = curve(|x| x);
        let est = slope_at_zero(&g, &[1e-2, 1e-3, 1e-4], 4.0).unwrap();
        assert!((est.slope - 1.0).abs() < 1e-2, "slope {}", est.slope);
    }

    #[test]
    fn slope_rejects_short_or_unsorted_ladders() {
        let g = curve(|x| x);
        assert!(slope_at_zero(&g, &[1e-2, 1e-3], 1.0).is_err());
        assert!(slope_at_zero(&g, &[1e-4, 1e-3, 1e-2], 1.0).is_err());
    }

    #[test]
    fn duality_single_feasible_point() {
        let check = strong_duality_check(&[2.5], &[0.0], 1.0, &default_lambda_grid()).unwrap();
        assert_eq!(check.primal, 2.5);
        assert!(check.gap.abs() < 1e-9);
    }

    #[test]
    fn duality_three_point_instance() {
        // primal: best psi with phi <= 1 is 2; the dual closes the gap on
        // lambda in [1/3, 1]
        let check = strong_duality_check(
            &[1.0, 2.0, 3.0],
            &[0.0, 1.0, 4.0],
            1.0,
            &default_lambda_grid(),
        )
        .unwrap();
        assert_eq!(check.primal, 2.0);
        assert!(check.gap.abs() <= 1e-9, "gap {}", check.gap);
        assert!(check.lambda_star >= 1.0 / 3.0 - 1e-6 && check.lambda_star <= 1.0 + 1e-6);
    }

    #[test]
    fn duality_gap_can_be_positive_off_hypotheses() {
        // a non-concave discrete instance: the dual stays above the primal
        let check =
            strong_duality_check(&[0.0, 10.0], &[0.0, 1.0], 0.5, &default_lambda_grid()).unwrap();
        assert_eq!(check.primal, 0.0);
        assert!(check.gap >= -1e-12);
        assert!(check.gap > 1.0, "expected a strict gap, got {}", check.gap);
    }

    #[test]
    fn duality_infeasible_instance() {
        let check =
            strong_duality_check(&[1.0, 2.0], &[3.0, 4.0], 0.5, &default_lambda_grid()).unwrap();
        assert!(check.infeasible);
        assert_eq!(check.primal, f64::NEG_INFINITY);
    }

    #[test]
    fn weak_duality_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let grid = default_lambda_grid();
        for trial in 0..1000 {
            let n = rng.gen_range(1..8);
            let psi: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let r = rng.gen_range(0.0..5.0);
            let check = strong_duality_check(&psi, &phi, r, &grid).unwrap();
            if !check.infeasible {
                assert!(check.gap >= -1e-12, "trial {trial}: gap {}", check.gap);
            }
        }
    }

    #[test]
    fn dual_min_improves_under_refinement() {
        let g = curve(|x| (x - 0.5).powi(2) + 0.1 * x);
        let coarse: Vec<f64> = (1..6).map(|i| i as f64 * 0.3).collect();
        let fine: Vec<f64> = (1..60).map(|i| i as f64 * 0.025).collect();
        let vc = dual_min(&g, 0.3, &coarse, 1.0).unwrap().value;
        let vf = dual_min(&g, 0.3, &fine, 1.0).unwrap().value;
        assert!(vf <= vc + 1e-12);
    }
}
