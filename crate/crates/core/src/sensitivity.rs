//! First-order sensitivities of robustified values in the drift-deviation
//! radius: closed-form estimators for plain, controlled, stopped, and mixed
//! problems, a finite-difference oracle on common random numbers, the
//! quadratic-penalty dual curve for the L2 case, and the first-order
//! expansion of the optimal control.
//!
//! All closed-form estimators share one backbone: solve the problem once,
//! read the optimally-controlled coefficients `(k*, lambda*)` off the driver
//! derivatives at the solution, then evaluate a weighted `|Z|` integral. Two
//! numerically distinct evaluations of that integral exist — the pathwise
//! reweighted form `E[ E(-lambda*) sum_i K*_i |Z_i| dt ]` and the per-term
//! exponential-weight form of [`solve_linear_bsde_weights`] — and each report
//! carries the second as a cross-check.

use std::sync::Arc;

use crate::basis::BasisSpec;
use crate::bsde::{
    solve_bsde, solve_linear_bsde_weights, BsdeSolution, ScalarTrack, TerminalSpec,
};
use crate::error::{Error, Result};
use crate::generators::{
    hamiltonian, optimal_coefficients, quadratic_robustify, robustify, ControlledCoefficients,
    GeneratorSpec, OptimalCoefficientTrack, PathwiseSolution, KINK_TOL,
};
use crate::paths::{mean_with_se, PathEnsemble};
use crate::rbsde::{solve_rbsde, ObstacleSpec};
use crate::bsde::IntegrabilityTag;

/// How a sensitivity value was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    FiniteDifference,
    DualCurve,
}

/// Which deviation ball the sensitivity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Linf,
    L2,
}

/// Per-term breakdown attached to every sensitivity report.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// `|Z|` mass per quarter of the horizon: mean over paths of
    /// `sum_{i in band} |Z_i| dt`.
    pub z_mass_bands: Vec<f64>,
    /// Mean discount factor `K*` over all nodes.
    pub discount_mass: f64,
    /// Fraction of paths already stopped by the end of each quarter.
    pub stopped_fraction: Vec<f64>,
    /// Fraction of `(path, step)` nodes with `|Z|` below the kink tolerance.
    pub kink_fraction: f64,
    /// Set when a negative inner L2 estimate was clipped to zero.
    pub clipped_negative: bool,
    /// Alternative evaluation of the same integral through per-term
    /// exponential weights, with its standard error.
    pub cross_check: Option<(f64, f64)>,
}

/// A first-order sensitivity estimate.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub value: f64,
    pub std_error: f64,
    pub method: Method,
    /// Radius the estimate was computed at; 0 for closed forms.
    pub radius: f64,
    pub diagnostics: Diagnostics,
}

const N_BANDS: usize = 4;

fn z_mass_bands(sol: &dyn PathwiseSolution, dt: f64) -> Vec<f64> {
    let n = sol.n_steps();
    let n_paths = sol.n_paths();
    let mut bands = vec![0.0; N_BANDS];
    for p in 0..n_paths {
        for i in 0..n {
            let norm = z_norm(sol.z(p, i));
            bands[i * N_BANDS / n] += norm * dt;
        }
    }
    for b in &mut bands {
        *b /= n_paths as f64;
    }
    bands
}

fn stopped_fraction_bands(stop: &[usize], n: usize) -> Vec<f64> {
    let mut bands = vec![0.0; N_BANDS];
    for (b, band) in bands.iter_mut().enumerate() {
        let cutoff = (b + 1) * n / N_BANDS;
        *band = stop.iter().filter(|&&h| h < cutoff).count() as f64 / stop.len() as f64;
    }
    bands
}

fn kink_fraction(sol: &dyn PathwiseSolution) -> f64 {
    let n = sol.n_steps();
    let n_paths = sol.n_paths();
    let mut kinks = 0usize;
    for p in 0..n_paths {
        for i in 0..n {
            if z_norm(sol.z(p, i)) < KINK_TOL {
                kinks += 1;
            }
        }
    }
    kinks as f64 / (n_paths * n) as f64
}

/// Euclidean norm with the kink convention: values below [`KINK_TOL`] count
/// as exactly zero.
fn z_norm(z: &[f64]) -> f64 {
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < KINK_TOL {
        0.0
    } else {
        n
    }
}

/// Coefficient tracks for the linearized problem along a solution:
/// `a = d_y f(Y, Z)`, `b = d_z f(Y, Z)`, `c = |Z|` (or `|Z|^2`).
fn linearized_tracks(
    track: &OptimalCoefficientTrack,
    sol: &dyn PathwiseSolution,
    ens: &PathEnsemble,
    squared: bool,
) -> (ScalarTrack, crate::paths::DriftTrack, ScalarTrack) {
    let n = ens.grid().n_steps();
    let n_paths = ens.n_paths();
    let mut a = Vec::with_capacity(n_paths * n);
    let mut c = Vec::with_capacity(n_paths * n);
    for p in 0..n_paths {
        for i in 0..n {
            a.push(-track.k_at(p, i));
            let norm = z_norm(sol.z(p, i));
            c.push(if squared { norm * norm } else { norm });
        }
    }
    (
        ScalarTrack::from_vec(n_paths, n, a).expect("track shape"),
        track.lambda.negated(),
        ScalarTrack::from_vec(n_paths, n, c).expect("track shape"),
    )
}

/// Pathwise reweighted norm `E[ E_stop(-lambda*) sum_{i<stop} K*_i c_i dt ]`,
/// the expectation of the discounted `|Z|` integral under the optimally
/// controlled measure, with the density taken at the stopping index.
fn weighted_stopped_norm(
    track: &OptimalCoefficientTrack,
    sol: &dyn PathwiseSolution,
    ens: &PathEnsemble,
    stop: Option<&[usize]>,
    squared: bool,
) -> Result<(f64, f64)> {
    let n = ens.grid().n_steps();
    let n_paths = ens.n_paths();
    let d = ens.dim();
    let dt = ens.grid().dt();
    let per_path: Vec<f64> = (0..n_paths)
        .map(|p| {
            let last = stop.map_or(n, |s| s[p]);
            let mut exponent = 0.0f64;
            let mut acc = 0.0;
            for i in 0..last {
                let norm = z_norm(sol.z(p, i));
                let c = if squared { norm * norm } else { norm };
                acc += track.discount_at(p, i) * c * dt;
                let lam = track.lambda.at(p, i);
                let dx = ens.increment(p, i);
                let mut dot = 0.0;
                let mut nsq = 0.0;
                for k in 0..d {
                    dot += lam[k] * dx[k];
                    nsq += lam[k] * lam[k];
                }
                // density of the lambda*-drift measure: E(-lambda*)
                exponent += -dot - 0.5 * nsq * dt;
            }
            exponent.exp() * acc
        })
        .collect();
    if let Some(p) = per_path.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericFailure {
            context: "non-finite reweighted sensitivity sample".into(),
            path: Some(p),
        });
    }
    Ok(mean_with_se(&per_path))
}

fn check_coefficient_bounds(
    coeffs: &ControlledCoefficients,
    track: &OptimalCoefficientTrack,
    ens: &PathEnsemble,
) -> Result<()> {
    if let Some(bound) = coeffs.lambda_bound {
        let max = track.lambda.max_norm();
        if max > bound + 1e-9 {
            return Err(Error::AssumptionViolation(format!(
                "optimal drift norm {max} exceeds the declared bound {bound}"
            )));
        }
    }
    if let Some(bound) = coeffs.k_bound {
        let n = ens.grid().n_steps();
        for p in 0..ens.n_paths() {
            for i in 0..n {
                let k = track.k_at(p, i).abs();
                if k > bound + 1e-9 {
                    return Err(Error::AssumptionViolation(format!(
                        "optimal discount rate {k} exceeds the declared bound {bound}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn sqrt_with_delta_se(inner: f64, inner_se: f64) -> (f64, f64, bool) {
    if inner > 0.0 {
        let v = inner.sqrt();
        (v, inner_se / (2.0 * v), false)
    } else {
        // clipped at the boundary; the delta method degenerates, so report
        // the square-root scale of the inner error instead
        (0.0, inner_se.max(0.0).sqrt(), inner < 0.0)
    }
}

/// Sensitivity of the plain robustified BSDE value in the radius, at 0:
/// the exponentially weighted `|Z|` integral along the unperturbed solution.
pub fn sensitivity_linf_bsde(
    f: &GeneratorSpec,
    xi: &TerminalSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SensitivityReport> {
    let sol = solve_bsde(f, xi, ens, basis)?;
    let track = optimal_coefficients(f, ens, &sol)?;
    let (a, b, c) = linearized_tracks(&track, &sol, ens, false);
    let (value, se) = solve_linear_bsde_weights(&a, &b, &c, ens, None)?;
    let dt = ens.grid().dt();
    Ok(SensitivityReport {
        value,
        std_error: se,
        method: Method::ClosedForm,
        radius: 0.0,
        diagnostics: Diagnostics {
            z_mass_bands: z_mass_bands(&sol, dt),
            discount_mass: discount_mass(&track, ens),
            stopped_fraction: vec![0.0; N_BANDS],
            kink_fraction: kink_fraction(&sol),
            clipped_negative: false,
            cross_check: Some(weighted_stopped_norm(&track, &sol, ens, None, false)?),
        },
    })
}

fn discount_mass(track: &OptimalCoefficientTrack, ens: &PathEnsemble) -> f64 {
    let n = ens.grid().n_steps();
    let n_paths = ens.n_paths();
    let mut acc = 0.0;
    for p in 0..n_paths {
        for i in 0..=n {
            acc += track.discount_at(p, i);
        }
    }
    acc / (n_paths * (n + 1)) as f64
}

/// Shared core of the controlled and mixed estimators. `stop = None` runs the
/// integral to the horizon; the mixed variants pass the hitting indices. The
/// arithmetic per path is identical in both cases, so a never-binding
/// obstacle reproduces the unstopped estimate bit for bit.
fn controlled_sensitivity(
    coeffs: &ControlledCoefficients,
    sol: &dyn PathwiseSolution,
    f: &GeneratorSpec,
    ens: &PathEnsemble,
    stop: Option<&[usize]>,
    mode: NormMode,
) -> Result<SensitivityReport> {
    let track = optimal_coefficients(f, ens, sol)?;
    check_coefficient_bounds(coeffs, &track, ens)?;
    let squared = mode == NormMode::L2;
    let (inner, inner_se) = weighted_stopped_norm(&track, sol, ens, stop, squared)?;
    let (a, b, c) = linearized_tracks(&track, sol, ens, squared);
    let cross = solve_linear_bsde_weights(&a, &b, &c, ens, stop)?;
    let (value, std_error, clipped) = match mode {
        NormMode::Linf => (inner, inner_se, false),
        NormMode::L2 => sqrt_with_delta_se(inner, inner_se),
    };
    let n = ens.grid().n_steps();
    let stopped = match stop {
        Some(s) => stopped_fraction_bands(s, n),
        None => vec![0.0; N_BANDS],
    };
    Ok(SensitivityReport {
        value,
        std_error,
        method: Method::ClosedForm,
        radius: 0.0,
        diagnostics: Diagnostics {
            z_mass_bands: z_mass_bands(sol, ens.grid().dt()),
            discount_mass: discount_mass(&track, ens),
            stopped_fraction: stopped,
            kink_fraction: kink_fraction(sol),
            clipped_negative: clipped,
            cross_check: Some(cross),
        },
    })
}

/// L-infinity-ball sensitivity of the controlled problem: the discounted
/// `|Z|` integral under the optimally controlled measure.
pub fn sensitivity_linf_control(
    coeffs: &ControlledCoefficients,
    xi: &TerminalSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SensitivityReport> {
    let f = hamiltonian(coeffs)?;
    let sol = solve_bsde(&f, xi, ens, basis)?;
    controlled_sensitivity(coeffs, &sol, &f, ens, None, NormMode::Linf)
}

/// L2-ball sensitivity of the controlled problem: the square root of the
/// discounted `|Z|^2` integral under the optimally controlled measure.
pub fn sensitivity_l2_control(
    coeffs: &ControlledCoefficients,
    xi: &TerminalSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SensitivityReport> {
    let f = hamiltonian(coeffs)?;
    let sol = solve_bsde(&f, xi, ens, basis)?;
    controlled_sensitivity(coeffs, &sol, &f, ens, None, NormMode::L2)
}

/// Mixed control-and-stopping sensitivity, L-infinity ball: the weighted
/// integral is truncated at each path's first obstacle contact.
pub fn sensitivity_mixed_linf(
    coeffs: &ControlledCoefficients,
    obstacle: &ObstacleSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SensitivityReport> {
    let f = hamiltonian(coeffs)?;
    let sol = solve_rbsde(&f, obstacle, ens, basis)?;
    let hit = sol.hit.clone();
    controlled_sensitivity(coeffs, &sol, &f, ens, Some(&hit), NormMode::Linf)
}

/// Mixed control-and-stopping sensitivity, L2 ball.
pub fn sensitivity_mixed_l2(
    coeffs: &ControlledCoefficients,
    obstacle: &ObstacleSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SensitivityReport> {
    let f = hamiltonian(coeffs)?;
    let sol = solve_rbsde(&f, obstacle, ens, basis)?;
    let hit = sol.hit.clone();
    controlled_sensitivity(coeffs, &sol, &f, ens, Some(&hit), NormMode::L2)
}

/// Pure optimal-stopping sensitivity: the mixed estimator with the trivial
/// one-action coefficients (`k = l = 0`, `lambda = 0`), sharing its code path
/// exactly. The obstacle must carry an integrability declaration.
pub fn sensitivity_stopping(
    obstacle: &ObstacleSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
    mode: NormMode,
) -> Result<SensitivityReport> {
    if obstacle.integrability == IntegrabilityTag::Unspecified {
        return Err(Error::AssumptionViolation(
            "stopping sensitivity requires a declared integrability tag on the obstacle".into(),
        ));
    }
    let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0; ens.dim()]);
    match mode {
        NormMode::Linf => sensitivity_mixed_linf(&coeffs, obstacle, ens, basis),
        NormMode::L2 => sensitivity_mixed_l2(&coeffs, obstacle, ens, basis),
    }
}

/// A robustifiable problem: plain BSDE, controlled BSDE through its
/// Hamiltonian, or controlled-and-stopped through the reflected solver.
#[derive(Clone)]
pub enum ProblemSpec {
    Bsde {
        f: GeneratorSpec,
        xi: TerminalSpec,
    },
    Control {
        coeffs: ControlledCoefficients,
        xi: TerminalSpec,
    },
    Mixed {
        coeffs: ControlledCoefficients,
        obstacle: ObstacleSpec,
    },
}

impl ProblemSpec {
    fn base_generator(&self) -> Result<GeneratorSpec> {
        match self {
            ProblemSpec::Bsde { f, .. } => Ok(f.clone()),
            ProblemSpec::Control { coeffs, .. } | ProblemSpec::Mixed { coeffs, .. } => {
                hamiltonian(coeffs)
            }
        }
    }

    /// Solve the problem with the given (possibly perturbed) generator and
    /// return `(Y0, SE)`.
    fn solve_value(
        &self,
        f: &GeneratorSpec,
        ens: &PathEnsemble,
        basis: &BasisSpec,
    ) -> Result<(f64, f64)> {
        match self {
            ProblemSpec::Bsde { xi, .. } | ProblemSpec::Control { xi, .. } => {
                let sol = solve_bsde(f, xi, ens, basis)?;
                Ok((sol.y0, sol.y0_se))
            }
            ProblemSpec::Mixed { obstacle, .. } => {
                let sol = solve_rbsde(f, obstacle, ens, basis)?;
                Ok((sol.y0, sol.y0_se))
            }
        }
    }
}

/// Finite-difference slope of the robustified value at a positive radius.
#[derive(Debug, Clone, Copy)]
pub struct FdSlope {
    /// Robustified value at the probe radius.
    pub value_r: f64,
    /// Unperturbed value on the same ensemble.
    pub value_0: f64,
    /// `(V(r) - V(0)) / r`.
    pub slope: f64,
}

/// Difference-quotient oracle for the closed-form sensitivities: solves the
/// `r`-perturbed and unperturbed problems on the same ensemble (common random
/// numbers) and returns the quotient. Requires `r > 0`.
pub fn robust_value_fd(
    problem: &ProblemSpec,
    r: f64,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<FdSlope> {
    if !(r > 0.0) {
        return Err(Error::invalid_argument(format!(
            "finite-difference radius must be > 0, got {r}"
        )));
    }
    let f = problem.base_generator()?;
    let fr = robustify(&f, r)?;
    let (value_0, _) = problem.solve_value(&f, ens, basis)?;
    let (value_r, _) = problem.solve_value(&fr, ens, basis)?;
    Ok(FdSlope {
        value_r,
        value_0,
        slope: (value_r - value_0) / r,
    })
}

/// Richardson extrapolation of the finite-difference slope from `{r, r/2}`:
/// `2 slope(r/2) - slope(r)` cancels the first-order bias.
pub fn richardson_slope(
    problem: &ProblemSpec,
    r: f64,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<f64> {
    let coarse = robust_value_fd(problem, r, ens, basis)?;
    let fine = robust_value_fd(problem, r / 2.0, ens, basis)?;
    Ok(2.0 * fine.slope - coarse.slope)
}

/// Dual minimum of the quadratic-penalty curve at one radius.
#[derive(Debug, Clone, Copy)]
pub struct DualPoint {
    pub r: f64,
    pub value: f64,
    pub gamma_star: f64,
}

/// Quadratic-penalty curve `G(gamma)` with its zero extension, the secant
/// slope at 0, and the dual minima `inf_gamma { G + r^2 / (4 gamma) }` per
/// requested radius.
#[derive(Debug, Clone)]
pub struct DualCurve {
    pub gammas: Vec<f64>,
    pub g_values: Vec<f64>,
    pub g_se: Vec<f64>,
    /// Unperturbed value, the continuous extension of `G` at `gamma = 0`.
    pub g_at_zero: f64,
    /// Secant estimate of `G'(0)` from the two smallest grid points.
    pub secant_slope: f64,
    /// `sqrt(max(G'(0), 0))`, the implied L2 sensitivity.
    pub implied_sensitivity: f64,
    pub minima: Vec<DualPoint>,
    /// Set when `G` decreases between consecutive grid points by more than
    /// three combined standard errors.
    pub monotone_warning: bool,
}

/// Default penalty grid: 25 log-spaced points on `[1e-3, 10]`.
pub fn default_dual_gamma_grid() -> Vec<f64> {
    let n = 25;
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            10f64.powf(-3.0 + 4.0 * t)
        })
        .collect()
}

/// Evaluate the dual curve of a problem on common random numbers.
///
/// Each grid point solves the problem with the quadratically penalized
/// generator on the same ensemble. The dual minimum per radius combines the
/// grid scan with a local quadratic (parabola-vertex) refinement on the
/// bracketing triple.
pub fn dual_curve(
    problem: &ProblemSpec,
    gamma_grid: Option<&[f64]>,
    radii: &[f64],
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<DualCurve> {
    let default_grid;
    let gammas: &[f64] = match gamma_grid {
        Some(g) => g,
        None => {
            default_grid = default_dual_gamma_grid();
            &default_grid
        }
    };
    if gammas.len() < 2 {
        return Err(Error::invalid_argument("gamma grid needs at least 2 points"));
    }
    if gammas.windows(2).any(|w| w[0] >= w[1]) || gammas[0] <= 0.0 {
        return Err(Error::invalid_argument(
            "gamma grid must be positive and strictly ascending",
        ));
    }
    let f = problem.base_generator()?;
    let (g_at_zero, _) = problem.solve_value(&f, ens, basis)?;
    let mut g_values = Vec::with_capacity(gammas.len());
    let mut g_se = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let fg = quadratic_robustify(&f, gamma)?;
        match problem.solve_value(&fg, ens, basis) {
            Ok((g, se)) => {
                g_values.push(g);
                g_se.push(se);
            }
            // the explicit scheme is known to degrade as gamma grows; a
            // blown-up grid point is recorded as +inf so the small-gamma
            // anchor and the dual minima stay usable
            Err(Error::NumericFailure { .. }) => {
                g_values.push(f64::INFINITY);
                g_se.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }

    let secant_slope = (g_values[1] - g_values[0]) / (gammas[1] - gammas[0]);
    let implied_sensitivity = secant_slope.max(0.0).sqrt();

    let monotone_warning = (1..gammas.len()).any(|j| {
        let tol = 3.0 * (g_se[j] * g_se[j] + g_se[j - 1] * g_se[j - 1]).sqrt();
        g_values[j] < g_values[j - 1] - tol
    });

    let minima = radii
        .iter()
        .map(|&r| {
            if r == 0.0 {
                // the penalty term vanishes; the infimum is the gamma -> 0 limit
                return DualPoint {
                    r,
                    value: g_at_zero,
                    gamma_star: 0.0,
                };
            }
            let objective =
                |j: usize| g_values[j] + r * r / (4.0 * gammas[j]);
            let mut best = 0;
            for j in 1..gammas.len() {
                if objective(j) < objective(best) {
                    best = j;
                }
            }
            let (mut value, mut gamma_star) = (objective(best), gammas[best]);
            if best > 0
                && best + 1 < gammas.len()
                && objective(best - 1).is_finite()
                && objective(best + 1).is_finite()
            {
                // parabola vertex through the bracketing triple
                let (x0, x1, x2) = (gammas[best - 1], gammas[best], gammas[best + 1]);
                let (y0, y1, y2) = (objective(best - 1), objective(best), objective(best + 1));
                let d01 = (y1 - y0) / (x1 - x0);
                let d12 = (y2 - y1) / (x2 - x1);
                let curvature = (d12 - d01) / (x2 - x0);
                if curvature > 0.0 {
                    let vertex = 0.5 * (x0 + x1 - d01 / curvature);
                    if vertex > x0 && vertex < x2 {
                        let fitted = y0
                            + d01 * (vertex - x0)
                            + curvature * (vertex - x0) * (vertex - x1);
                        if fitted < value {
                            value = fitted;
                            gamma_star = vertex;
                        }
                    }
                }
            }
            DualPoint {
                r,
                value,
                gamma_star,
            }
        })
        .collect();

    Ok(DualCurve {
        gammas: gammas.to_vec(),
        g_values,
        g_se,
        g_at_zero,
        secant_slope,
        implied_sensitivity,
        minima,
        monotone_warning,
    })
}

/// First-order decomposition of the robust optimal control: the control read
/// directly off the `r`-perturbed solution against its expansion around the
/// unperturbed one.
#[derive(Debug, Clone)]
pub struct ControlExpansion {
    pub r: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub action_dim: usize,
    /// `alpha*(Y^r, Z^r)` at index `(p * n_steps + i) * action_dim + m`.
    pub direct: Vec<f64>,
    /// `alpha* + r (d_y alpha*) U + r (d_z alpha*) . V`, same layout.
    pub first_order: Vec<f64>,
    /// Root-mean-square gap between the two, over all `(path, step)` nodes.
    pub rms_gap: f64,
}

/// Argmin of the controlled objective with its `(y, z)` derivatives at one
/// point, from either the softmin smoothing or user-supplied closed forms.
fn argmin_with_derivatives(
    coeffs: &ControlledCoefficients,
    ctx: &crate::paths::StepCtx,
    y: f64,
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if coeffs.softmin_temperature.is_some() {
        let sa = coeffs.smooth_argmin(ctx, y, z)?;
        return Ok((sa.alpha, sa.d_y, sa.d_z));
    }
    match (&coeffs.argmin, &coeffs.argmin_dy, &coeffs.argmin_dz) {
        (Some(am), Some(dy), Some(dz)) => Ok((am(ctx, y, z), dy(ctx, y, z), dz(ctx, y, z))),
        _ => Err(Error::invalid_argument(
            "control expansion needs a softmin temperature or an analytic argmin \
             with derivatives",
        )),
    }
}

/// Compare the robust optimal control against its first-order expansion.
///
/// The correction processes `(U, V)` solve the linear BSDE whose driver is
/// the linearization of the robustified Hamiltonian at the unperturbed
/// solution, `d_y f . u + d_z f . v + |Z|`, with zero terminal condition; the
/// first-order control is `alpha* + r (d_y alpha*) U + r (d_z alpha*) . V`.
/// At `r = 0` the two sides coincide exactly.
pub fn control_expansion(
    coeffs: &ControlledCoefficients,
    xi: &TerminalSpec,
    r: f64,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<ControlExpansion> {
    if !(r >= 0.0) {
        return Err(Error::invalid_argument(format!(
            "expansion radius must be >= 0, got {r}"
        )));
    }
    let f = hamiltonian(coeffs)?;
    let sol0 = solve_bsde(&f, xi, ens, basis)?;
    let n = ens.grid().n_steps();
    let n_paths = ens.n_paths();
    let d = ens.dim();

    // base control and its derivatives at the unperturbed solution
    let mut alpha0 = Vec::new();
    let mut alpha_dy = Vec::new();
    let mut alpha_dz = Vec::new();
    let mut action_dim = 0;
    for p in 0..n_paths {
        for i in 0..n {
            let ctx = ens.ctx(p, i);
            let (a, dy, dz) = argmin_with_derivatives(coeffs, &ctx, sol0.y(p, i), sol0.z(p, i))?;
            action_dim = a.len();
            alpha0.extend_from_slice(&a);
            alpha_dy.extend_from_slice(&dy);
            alpha_dz.extend_from_slice(&dz);
        }
    }

    // correction processes (U, V) from the linearized driver with zero
    // terminal condition
    let track = optimal_coefficients(&f, ens, &sol0)?;
    let mut k_data = Vec::with_capacity(n_paths * n);
    let mut lam_data = Vec::with_capacity(n_paths * n * d);
    let mut c_data = Vec::with_capacity(n_paths * n);
    for p in 0..n_paths {
        for i in 0..n {
            k_data.push(track.k_at(p, i));
            lam_data.extend_from_slice(track.lambda.at(p, i));
            c_data.push(z_norm(sol0.z(p, i)));
        }
    }
    let k_arc = Arc::new(k_data);
    let lam_arc = Arc::new(lam_data);
    let c_arc = Arc::new(c_data);
    let (ke, le, ce) = (k_arc.clone(), lam_arc.clone(), c_arc.clone());
    let (ky, ld) = (k_arc.clone(), lam_arc.clone());
    let correction_driver = GeneratorSpec::from_parts(
        Arc::new(move |ctx, u, v: &[f64]| {
            let base = ctx.path * n + ctx.step;
            let mut dot = 0.0;
            for j in 0..d {
                dot += le[base * d + j] * v[j];
            }
            -ke[base] * u - dot + ce[base]
        }),
        Arc::new(move |ctx, _, _| -ky[ctx.path * n + ctx.step]),
        Arc::new(move |ctx, _, _, out| {
            let base = ctx.path * n + ctx.step;
            for j in 0..d {
                out[j] = -ld[base * d + j];
            }
        }),
    );
    let correction = solve_bsde(&correction_driver, &TerminalSpec::constant(0.0), ens, basis)?;

    // perturbed solution on the same ensemble
    let sol_r = if r == 0.0 {
        None
    } else {
        Some(solve_bsde(&robustify(&f, r)?, xi, ens, basis)?)
    };
    let perturbed: &BsdeSolution = sol_r.as_ref().unwrap_or(&sol0);

    let mut direct = Vec::with_capacity(n_paths * n * action_dim);
    let mut first_order = Vec::with_capacity(n_paths * n * action_dim);
    let mut gap_sq = 0.0;
    for p in 0..n_paths {
        for i in 0..n {
            let ctx = ens.ctx(p, i);
            let (a_direct, _, _) =
                argmin_with_derivatives(coeffs, &ctx, perturbed.y(p, i), perturbed.z(p, i))?;
            let base = (p * n + i) * action_dim;
            let u = correction.y(p, i);
            let v = correction.z(p, i);
            for m in 0..action_dim {
                let mut first = alpha0[base + m] + r * alpha_dy[base + m] * u;
                for j in 0..d {
                    first += r * alpha_dz[(base + m) * d + j] * v[j];
                }
                let dval = a_direct[m];
                gap_sq += (dval - first) * (dval - first);
                direct.push(dval);
                first_order.push(first);
            }
        }
    }
    let rms_gap = (gap_sq / (n_paths * n * action_dim) as f64).sqrt();

    Ok(ControlExpansion {
        r,
        n_paths,
        n_steps: n,
        action_dim,
        direct,
        first_order,
        rms_gap,
    })
}

/// Flip a supremum problem into the equivalent infimum problem: the supremum
/// value over `(f, xi)` is the negative of the infimum value over
/// `(f_hat, -xi)` with `f_hat(y, z) = -f(-y, -z)`.
pub fn flip_direction(f: &GeneratorSpec, xi: &TerminalSpec) -> (GeneratorSpec, TerminalSpec) {
    let payoff = xi.payoff.clone();
    let flipped_xi = TerminalSpec::new(
        Arc::new(move |ctx: &crate::paths::StepCtx| -payoff(ctx)),
        xi.integrability,
    );
    (f.negated_arguments(), flipped_xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{make_grid, simulate_brownian, StepCtx};

    fn ensemble(n_steps: usize, n_paths: usize, seed: u64) -> PathEnsemble {
        let g = make_grid(1.0, n_steps).unwrap();
        simulate_brownian(&g, 1, n_paths, seed).unwrap()
    }

    #[test]
    fn constant_terminal_has_zero_sensitivity_exactly() {
        let ens = ensemble(10, 2048, 5);
        let basis = BasisSpec::polynomial(3).unwrap();
        let rep = sensitivity_linf_bsde(
            &GeneratorSpec::zero(),
            &TerminalSpec::constant(2.0),
            &ens,
            &basis,
        )
        .unwrap();
        assert_eq!(rep.value, 0.0);
        assert_eq!(rep.std_error, 0.0);
        assert_eq!(rep.diagnostics.kink_fraction, 1.0);
        assert_eq!(rep.method, Method::ClosedForm);
        assert_eq!(rep.radius, 0.0);
    }

    #[test]
    fn martingale_terminal_sensitivity_near_one() {
        let ens = ensemble(25, 1 << 14, 7);
        let basis = BasisSpec::polynomial(3).unwrap();
        let rep = sensitivity_linf_bsde(
            &GeneratorSpec::zero(),
            &TerminalSpec::terminal_value(),
            &ens,
            &basis,
        )
        .unwrap();
        assert!((rep.value - 1.0).abs() < 0.02, "value {}", rep.value);
        let (cv, cse) = rep.diagnostics.cross_check.unwrap();
        let tol = 3.0 * (cse * cse + rep.std_error * rep.std_error).sqrt();
        assert!((cv - rep.value).abs() < tol.max(0.02), "cross {cv} vs {}", rep.value);
    }

    #[test]
    fn linear_driver_sensitivity_matches_exponential() {
        // f(y) = -a y, xi = X_T: Z_t = e^{-a(T-t)}, weight e^{-a t}, so the
        // sensitivity is int_0^1 e^{-a t} e^{-a(1-t)} dt = e^{-a}
        let a = 0.5;
        let ens = ensemble(50, 1 << 14, 11);
        let basis = BasisSpec::polynomial(3).unwrap();
        let rep = sensitivity_linf_bsde(
            &GeneratorSpec::linear(-a, vec![0.0]),
            &TerminalSpec::terminal_value(),
            &ens,
            &basis,
        )
        .unwrap();
        let expect = (-a as f64).exp();
        assert!(
            (rep.value - expect).abs() < 0.02 * expect,
            "value {} vs {expect}",
            rep.value
        );
    }

    #[test]
    fn trivial_control_matches_plain_bsde() {
        let ens = ensemble(25, 1 << 13, 13);
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]);
        let xi = TerminalSpec::terminal_value();
        let control = sensitivity_linf_control(&coeffs, &xi, &ens, &basis).unwrap();
        let plain =
            sensitivity_linf_bsde(&GeneratorSpec::zero(), &xi, &ens, &basis).unwrap();
        let tol = 3.0
            * (control.std_error * control.std_error + plain.std_error * plain.std_error)
                .sqrt();
        assert!(
            (control.value - plain.value).abs() <= tol.max(0.02),
            "control {} plain {}",
            control.value,
            plain.value
        );
    }

    #[test]
    fn constant_drift_control_sensitivity_near_one() {
        // lambda = b constant: the measure shift leaves |Z| = 1 unchanged
        let ens = ensemble(25, 1 << 14, 17);
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.4]);
        let rep =
            sensitivity_linf_control(&coeffs, &TerminalSpec::terminal_value(), &ens, &basis)
                .unwrap();
        assert!((rep.value - 1.0).abs() < 0.03, "value {}", rep.value);
    }

    #[test]
    fn terminal_scaling_doubles_linf_sensitivity() {
        let ens = ensemble(25, 1 << 13, 19);
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]);
        let xi1 = TerminalSpec::terminal_value();
        let xi2 = TerminalSpec::new(
            Arc::new(|ctx: &StepCtx| 2.0 * ctx.prefix.current()[0]),
            IntegrabilityTag::SquareIntegrable,
        );
        let a = sensitivity_linf_control(&coeffs, &xi1, &ens, &basis).unwrap();
        let b = sensitivity_linf_control(&coeffs, &xi2, &ens, &basis).unwrap();
        let tol = 3.0 * (4.0 * a.std_error * a.std_error + b.std_error * b.std_error).sqrt();
        assert!(
            (b.value - 2.0 * a.value).abs() <= tol.max(0.03),
            "a {} b {}",
            a.value,
            b.value
        );
    }

    #[test]
    fn l2_control_closed_forms() {
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]);
        let xi = TerminalSpec::terminal_value();
        // T = 1: sqrt(E int |1|^2) = 1
        let ens1 = ensemble(25, 1 << 14, 23);
        let r1 = sensitivity_l2_control(&coeffs, &xi, &ens1, &basis).unwrap();
        assert!((r1.value - 1.0).abs() < 0.02, "T=1 value {}", r1.value);
        // T = 4: sqrt(T) = 2
        let g4 = make_grid(4.0, 50).unwrap();
        let ens4 = simulate_brownian(&g4, 1, 1 << 14, 23).unwrap();
        let r4 = sensitivity_l2_control(&coeffs, &xi, &ens4, &basis).unwrap();
        assert!((r4.value - 2.0).abs() < 0.04, "T=4 value {}", r4.value);
    }

    #[test]
    fn l2_constant_terminal_is_zero() {
        let ens = ensemble(10, 2048, 29);
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]);
        let rep =
            sensitivity_l2_control(&coeffs, &TerminalSpec::constant(1.5), &ens, &basis).unwrap();
        assert_eq!(rep.value, 0.0);
        assert!(!rep.diagnostics.clipped_negative);
    }

    #[test]
    fn flat_obstacle_mixed_sensitivity_is_zero() {
        let ens = ensemble(20, 2048, 31);
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]);
        let obstacle = ObstacleSpec::flat(1.0);
        let linf = sensitivity_mixed_linf(&coeffs, &obstacle, &ens, &basis).unwrap();
        let l2 = sensitivity_mixed_l2(&coeffs, &obstacle, &ens, &basis).unwrap();
        assert_eq!(linf.value, 0.0);
        assert_eq!(l2.value, 0.0);
        assert_eq!(linf.diagnostics.stopped_fraction, vec![1.0; 4]);
    }

    #[test]
    fn never_binding_obstacle_matches_control_bitwise() {
        let ens = ensemble(15, 1024, 37);
        let basis = BasisSpec::polynomial(3).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.2]);
        let xi = TerminalSpec::terminal_value();
        let control = sensitivity_linf_control(&coeffs, &xi, &ens, &basis).unwrap();
        // obstacle far above the solution everywhere, terminal matched
        let obstacle = ObstacleSpec::new(
            Arc::new(|ctx: &StepCtx| ctx.prefix.current()[0] + 50.0),
            IntegrabilityTag::SquareIntegrable,
        )
        .with_terminal(Arc::new(|ctx: &StepCtx| ctx.prefix.current()[0]));
        let mixed = sensitivity_mixed_linf(&coeffs, &obstacle, &ens, &basis).unwrap();
        assert_eq!(mixed.value, control.value);
        assert_eq!(mixed.std_error, control.std_error);
        let l2c = sensitivity_l2_control(&coeffs, &xi, &ens, &basis).unwrap();
        let l2m = sensitivity_mixed_l2(&coeffs, &obstacle, &ens, &basis).unwrap();
        assert_eq!(l2m.value, l2c.value);
    }

    #[test]
    fn stopping_delegates_to_mixed_bitwise() {
        let ens = ensemble(20, 1024, 41);
        let basis = BasisSpec::polynomial(3).unwrap();
        let obstacle = ObstacleSpec::markovian(
            Arc::new(|t: f64, x: f64| -(0.5 * (1.0 - t)).exp() * (1.0 - x).max(0.0)),
            IntegrabilityTag::SquareIntegrable,
        );
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]);
        let direct = sensitivity_stopping(&obstacle, &ens, &basis, NormMode::Linf).unwrap();
        let mixed = sensitivity_mixed_linf(&coeffs, &obstacle, &ens, &basis).unwrap();
        assert_eq!(direct.value, mixed.value);
        assert_eq!(direct.std_error, mixed.std_error);
    }

    #[test]
    fn stopping_requires_integrability_tag() {
        let ens = ensemble(5, 64, 43);
        let basis = BasisSpec::polynomial(2).unwrap();
        let obstacle = ObstacleSpec::new(
            Arc::new(|ctx: &StepCtx| ctx.prefix.current()[0]),
            IntegrabilityTag::Unspecified,
        );
        match sensitivity_stopping(&obstacle, &ens, &basis, NormMode::Linf) {
            Err(Error::AssumptionViolation(_)) => {}
            other => panic!("expected assumption violation, got {other:?}"),
        }
    }

    #[test]
    fn drift_bound_violation_detected() {
        let ens = ensemble(10, 256, 47);
        let basis = BasisSpec::polynomial(2).unwrap();
        let mut coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.8]);
        coeffs.lambda_bound = Some(0.1);
        match sensitivity_linf_control(&coeffs, &TerminalSpec::terminal_value(), &ens, &basis) {
            Err(Error::AssumptionViolation(_)) => {}
            other => panic!("expected assumption violation, got {other:?}"),
        }
    }

    #[test]
    fn fd_oracle_rejects_zero_radius() {
        let ens = ensemble(5, 64, 53);
        let basis = BasisSpec::polynomial(2).unwrap();
        let problem = ProblemSpec::Bsde {
            f: GeneratorSpec::zero(),
            xi: TerminalSpec::terminal_value(),
        };
        assert!(robust_value_fd(&problem, 0.0, &ens, &basis).is_err());
        assert!(robust_value_fd(&problem, -0.1, &ens, &basis).is_err());
    }

    #[test]
    fn fd_oracle_slope_near_closed_form() {
        let ens = ensemble(25, 1 << 14, 59);
        let basis = BasisSpec::polynomial(3).unwrap();
        let problem = ProblemSpec::Bsde {
            f: GeneratorSpec::zero(),
            xi: TerminalSpec::terminal_value(),
        };
        let fd = robust_value_fd(&problem, 0.05, &ens, &basis).unwrap();
        assert!((fd.slope - 1.0).abs() < 0.05, "slope {}", fd.slope);
        let rich = richardson_slope(&problem, 0.05, &ens, &basis).unwrap();
        assert!(
            (rich - 1.0).abs() <= (fd.slope - 1.0).abs() + 1e-3,
            "richardson {rich} vs raw {}",
            fd.slope
        );
    }

    #[test]
    fn dual_curve_martingale_benchmark() {
        let ens = ensemble(25, 1 << 13, 61);
        let basis = BasisSpec::polynomial(3).unwrap();
        let problem = ProblemSpec::Control {
            coeffs: ControlledCoefficients::singleton(0.0, 0.0, vec![0.0]),
            xi: TerminalSpec::terminal_value(),
        };
        let curve = dual_curve(&problem, None, &[0.0, 0.1], &ens, &basis).unwrap();
        // G(gamma) = Y0 + gamma T here, so the secant slope is ||Z||^2 = 1
        assert!(
            (curve.secant_slope - 1.0).abs() < 0.05,
            "secant {}",
            curve.secant_slope
        );
        assert!(
            (curve.implied_sensitivity - 1.0).abs() < 0.03,
            "implied {}",
            curve.implied_sensitivity
        );
        assert_eq!(curve.minima[0].value, curve.g_at_zero);
        assert_eq!(curve.minima[0].gamma_star, 0.0);
        assert!(curve.minima[1].value >= curve.g_at_zero - 3.0 * curve.g_se[0].max(1e-3));
        // the explicit scheme degrades at large gamma, so monotonicity is
        // only asserted on the small-gamma range where it is stable
        let small: Vec<f64> = (0..10)
            .map(|i| 1e-3 * 10f64.powf(2.0 * i as f64 / 9.0))
            .collect();
        let stable = dual_curve(&problem, Some(&small), &[0.1], &ens, &basis).unwrap();
        assert!(!stable.monotone_warning, "G should be nondecreasing on small gamma");
    }

    #[test]
    fn dual_curve_rejects_bad_grid() {
        let ens = ensemble(5, 64, 67);
        let basis = BasisSpec::polynomial(2).unwrap();
        let problem = ProblemSpec::Bsde {
            f: GeneratorSpec::zero(),
            xi: TerminalSpec::terminal_value(),
        };
        assert!(dual_curve(&problem, Some(&[0.5]), &[0.1], &ens, &basis).is_err());
        assert!(dual_curve(&problem, Some(&[0.5, 0.2]), &[0.1], &ens, &basis).is_err());
        assert!(dual_curve(&problem, Some(&[0.0, 0.2]), &[0.1], &ens, &basis).is_err());
    }

    #[test]
    fn singleton_expansion_has_no_correction() {
        let ens = ensemble(10, 512, 71);
        let basis = BasisSpec::polynomial(2).unwrap();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.3]);
        let exp = control_expansion(&coeffs, &TerminalSpec::terminal_value(), 0.1, &ens, &basis)
            .unwrap();
        // the single action cannot move, so both sides are the constant action
        for (d, f) in exp.direct.iter().zip(&exp.first_order) {
            assert_eq!(*d, 0.0);
            assert_eq!(*f, 0.0);
        }
        assert_eq!(exp.rms_gap, 0.0);
    }

    #[test]
    fn expansion_at_zero_radius_is_exact() {
        let ens = ensemble(15, 1024, 73);
        let basis = BasisSpec::polynomial(3).unwrap();
        let mut coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        coeffs.softmin_temperature = Some(0.05);
        let exp = control_expansion(&coeffs, &TerminalSpec::terminal_value(), 0.0, &ens, &basis)
            .unwrap();
        assert_eq!(exp.direct, exp.first_order);
        assert_eq!(exp.rms_gap, 0.0);
    }

    #[test]
    fn expansion_requires_derivatives() {
        let ens = ensemble(5, 64, 79);
        let basis = BasisSpec::polynomial(2).unwrap();
        let coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        match control_expansion(&coeffs, &TerminalSpec::terminal_value(), 0.1, &ens, &basis) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected invalid argument, got {other:?}"),
        }
    }

    #[test]
    fn flip_direction_round_trip() {
        let ens = ensemble(20, 4096, 83);
        let basis = BasisSpec::polynomial(3).unwrap();
        // sup value of the zero-driver problem equals -inf of the flipped one
        let f = GeneratorSpec::zero();
        let xi = TerminalSpec::new(
            Arc::new(|ctx: &StepCtx| ctx.prefix.current()[0].abs()),
            IntegrabilityTag::SquareIntegrable,
        );
        let (fh, xih) = flip_direction(&f, &xi);
        let direct = solve_bsde(&f, &xi, &ens, &basis).unwrap();
        let flipped = solve_bsde(&fh, &xih, &ens, &basis).unwrap();
        assert!(
            (direct.y0 + flipped.y0).abs() < 1e-9,
            "direct {} flipped {}",
            direct.y0,
            flipped.y0
        );
    }
}
