//! Backward-Euler regression solver for BSDE(f, xi), its random-terminal
//! variant, and closed-form evaluation of linear BSDEs through exponential
//! weights.
//!
//! The scheme is the classic least-squares Monte-Carlo recursion: the
//! terminal layer is exact, then per step the conditional expectations of
//! `Y_{i+1}` and `Y_{i+1} dX_i` are fitted on a polynomial basis and the
//! driver is applied explicitly with an optional handful of fixed-point
//! sweeps for stiff drivers.

use std::sync::Arc;

use rayon::prelude::*;

use crate::basis::{fit_step, BasisSpec, StepFit};
use crate::error::{Error, Result};
use crate::generators::{GeneratorSpec, PathwiseSolution};
use crate::paths::{mean_with_se, DriftTrack, PathEnsemble, StepCtx};

/// Declared integrability of a terminal payoff or obstacle, consumed by the
/// sensitivity estimators whose theorems need boundedness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntegrabilityTag {
    Bounded(f64),
    SquareIntegrable,
    Unspecified,
}

type PayoffFn = Arc<dyn Fn(&StepCtx) -> f64 + Send + Sync>;

/// Terminal condition `xi`, a functional of the full path.
#[derive(Clone)]
pub struct TerminalSpec {
    pub payoff: PayoffFn,
    pub integrability: IntegrabilityTag,
}

impl TerminalSpec {
    pub fn new(payoff: PayoffFn, integrability: IntegrabilityTag) -> Self {
        TerminalSpec {
            payoff,
            integrability,
        }
    }

    pub fn constant(c: f64) -> Self {
        TerminalSpec {
            payoff: Arc::new(move |_| c),
            integrability: IntegrabilityTag::Bounded(c.abs()),
        }
    }

    /// `xi = X_T` (first coordinate).
    pub fn terminal_value() -> Self {
        TerminalSpec {
            payoff: Arc::new(|ctx| ctx.prefix.current()[0]),
            integrability: IntegrabilityTag::SquareIntegrable,
        }
    }
}

/// Tuning knobs for the backward recursion.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Additional fixed-point sweeps of `y = E[Y_{i+1}] + dt f(y, z)` after
    /// the first substitution; useful for stiff drivers.
    pub extra_picard_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            extra_picard_sweeps: 0,
        }
    }
}

/// Solved BSDE: per-path, per-node `Y` and `Z`, the time-0 estimate, and the
/// per-step regression fits (kept for boundary extraction and diagnostics).
pub struct BsdeSolution {
    n_steps: usize,
    dim: usize,
    n_paths: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    pub y0: f64,
    pub y0_se: f64,
    pub fits: Vec<Option<StepFit>>,
    /// Steps where no regression could be fitted (all paths already stopped)
    /// and a plain mean was used instead.
    pub degenerate_steps: Vec<usize>,
}

impl BsdeSolution {
    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.y[p * (self.n_steps + 1) + i]
    }

    pub fn z(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * (self.n_steps + 1) + i) * self.dim;
        &self.z[base..base + self.dim]
    }
}

impl PathwiseSolution for BsdeSolution {
    fn y(&self, p: usize, i: usize) -> f64 {
        BsdeSolution::y(self, p, i)
    }
    fn z(&self, p: usize, i: usize) -> &[f64] {
        BsdeSolution::z(self, p, i)
    }
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Solve BSDE(f, xi) on the ensemble with the default options.
pub fn solve_bsde(
    f: &GeneratorSpec,
    xi: &TerminalSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<BsdeSolution> {
    solve_bsde_with(f, xi, ens, basis, SolverOptions::default())
}

pub fn solve_bsde_with(
    f: &GeneratorSpec,
    xi: &TerminalSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
    opts: SolverOptions,
) -> Result<BsdeSolution> {
    let n = ens.grid().n_steps();
    let terminal: Vec<f64> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| (xi.payoff)(&ens.ctx(p, n)))
        .collect();
    let tau = vec![n; ens.n_paths()];
    solve_backward(f, &terminal, &tau, ens, basis, opts)
}

/// Solve the BSDE frozen after a per-path terminal index `tau`: for
/// `i >= tau[p]` the path carries `value_at_tau[p]` with `Z = 0`, and each
/// regression uses only the still-running paths.
pub fn solve_bsde_random_terminal(
    f: &GeneratorSpec,
    value_at_tau: &[f64],
    tau: &[usize],
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<BsdeSolution> {
    let n = ens.grid().n_steps();
    if tau.len() != ens.n_paths() || value_at_tau.len() != ens.n_paths() {
        return Err(Error::invalid_argument(
            "tau and value_at_tau must have one entry per path",
        ));
    }
    if let Some(p) = tau.iter().position(|&t| t > n) {
        return Err(Error::invalid_argument(format!(
            "tau[{p}] exceeds the grid"
        )));
    }
    solve_backward(f, value_at_tau, tau, ens, basis, SolverOptions::default())
}

fn solve_backward(
    f: &GeneratorSpec,
    value_at_tau: &[f64],
    tau: &[usize],
    ens: &PathEnsemble,
    basis: &BasisSpec,
    opts: SolverOptions,
) -> Result<BsdeSolution> {
    let n = ens.grid().n_steps();
    let d = ens.dim();
    let n_paths = ens.n_paths();
    let dt = ens.grid().dt();

    let mut y = vec![0.0; n_paths * (n + 1)];
    let mut z = vec![0.0; n_paths * (n + 1) * d];
    let mut fits: Vec<Option<StepFit>> = (0..n).map(|_| None).collect();
    let mut degenerate_steps = Vec::new();

    for (p, (&v, &t)) in value_at_tau.iter().zip(tau).enumerate() {
        if !v.is_finite() {
            return Err(Error::NumericFailure {
                context: "non-finite terminal value".into(),
                path: Some(p),
            });
        }
        // frozen from tau onward; terminal layer is exact by construction
        for i in t..=n {
            y[p * (n + 1) + i] = v;
        }
    }

    for i in (0..n).rev() {
        let alive: Vec<usize> = (0..n_paths).filter(|&p| tau[p] > i).collect();
        if alive.is_empty() {
            degenerate_steps.push(i);
            continue;
        }
        let states: Vec<Vec<f64>> = alive
            .par_iter()
            .map(|&p| (basis.state)(&ens.prefix(p, i)))
            .collect();
        let next_y: Vec<f64> = alive.iter().map(|&p| y[p * (n + 1) + i + 1]).collect();
        let mut targets: Vec<Vec<f64>> = Vec::with_capacity(1 + d);
        targets.push(next_y);
        for k in 0..d {
            targets.push(
                alive
                    .iter()
                    .map(|&p| y[p * (n + 1) + i + 1] * ens.increment(p, i)[k])
                    .collect(),
            );
        }
        let target_refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
        // prune noise-only increment regressions; the value target is never pruned
        let mut prune_mask = vec![true; 1 + d];
        prune_mask[0] = false;
        let prune = basis.z_prune_threshold.map(|thr| (prune_mask.as_slice(), thr));
        let (fit, preds) =
            fit_step(&states, &target_refs, basis.degree, basis.ridge_scale, i, prune)?;
        fits[i] = Some(fit);

        let updates: Vec<(f64, Vec<f64>)> = alive
            .par_iter()
            .enumerate()
            .map(|(idx, &p)| {
                let mut zi = vec![0.0; d];
                for k in 0..d {
                    zi[k] = preds[1 + k][idx] / dt;
                }
                let ctx = ens.ctx(p, i);
                let ytilde = preds[0][idx];
                let mut yi = ytilde + dt * f.evaluate(&ctx, ytilde, &zi);
                for _ in 0..opts.extra_picard_sweeps {
                    yi = ytilde + dt * f.evaluate(&ctx, yi, &zi);
                }
                (yi, zi)
            })
            .collect();
        for (&p, (yi, zi)) in alive.iter().zip(updates) {
            if !yi.is_finite() || zi.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFailure {
                    context: format!("non-finite solver state at step {i}"),
                    path: Some(p),
                });
            }
            y[p * (n + 1) + i] = yi;
            z[(p * (n + 1) + i) * d..(p * (n + 1) + i + 1) * d].copy_from_slice(&zi);
        }
    }

    let y0_col: Vec<f64> = (0..n_paths).map(|p| y[p * (n + 1)]).collect();
    let y0 = mean_with_se(&y0_col).0;
    // the Monte-Carlo error of y0 comes from averaging the next layer, so its
    // dispersion is the honest error scale (the step-0 fits are degenerate)
    let y1_col: Vec<f64> = (0..n_paths).map(|p| y[p * (n + 1) + 1]).collect();
    let y0_se = mean_with_se(&y1_col).1;

    Ok(BsdeSolution {
        n_steps: n,
        dim: d,
        n_paths,
        y,
        z,
        y0,
        y0_se,
        fits,
        degenerate_steps,
    })
}

/// Per-path, per-step scalar process.
#[derive(Debug, Clone)]
pub struct ScalarTrack {
    n_steps: usize,
    data: Vec<f64>,
}

impl ScalarTrack {
    pub fn from_vec(n_paths: usize, n_steps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_paths * n_steps {
            return Err(Error::invalid_argument("scalar track length mismatch"));
        }
        Ok(ScalarTrack { n_steps, data })
    }

    pub fn constant(v: f64, n_paths: usize, n_steps: usize) -> Self {
        ScalarTrack {
            n_steps,
            data: vec![v; n_paths * n_steps],
        }
    }

    pub fn at(&self, p: usize, i: usize) -> f64 {
        self.data[p * self.n_steps + i]
    }

    pub fn n_paths(&self) -> usize {
        self.data.len() / self.n_steps
    }
}

/// Time-0 value of the linear BSDE with coefficient tracks `(a, b, c)`:
/// the driver is `a u + b . v + c`, the terminal condition zero, and the
/// solution is the expectation of the exponentially weighted running cost,
///
/// `U_0 = E[ sum_i Gamma_i c_i dt ]`,
/// `Gamma_i = exp(sum_{j<i} a_j dt) * E(sum_{j<i} b_j . dX_j)`,
///
/// summed up to the per-path `stop` index (default: the full horizon). The
/// Doleans-Dade factor in `Gamma` turns the `b . v` coupling into the drift
/// change under which the weighted cost is a plain expectation.
pub fn solve_linear_bsde_weights(
    a_track: &ScalarTrack,
    b_track: &DriftTrack,
    c_track: &ScalarTrack,
    ens: &PathEnsemble,
    stop: Option<&[usize]>,
) -> Result<(f64, f64)> {
    let n = ens.grid().n_steps();
    let n_paths = ens.n_paths();
    let d = ens.dim();
    let dt = ens.grid().dt();
    if a_track.n_paths() != n_paths
        || a_track.n_steps != n
        || c_track.n_paths() != n_paths
        || c_track.n_steps != n
    {
        return Err(Error::invalid_argument("track shape mismatch"));
    }
    if let Some(s) = stop {
        if s.len() != n_paths {
            return Err(Error::invalid_argument("stop length != n_paths"));
        }
        if let Some(p) = s.iter().position(|&i| i > n) {
            return Err(Error::invalid_argument(format!("stop[{p}] exceeds the grid")));
        }
    }

    let per_path: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let last = stop.map_or(n, |s| s[p]);
            let mut log_gamma = 0.0f64;
            let mut acc = 0.0;
            for i in 0..last {
                let a = a_track.at(p, i);
                let b = b_track.at(p, i);
                let c = c_track.at(p, i);
                if !a.is_finite() || !c.is_finite() || b.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericFailure {
                        context: format!("non-finite coefficient track at step {i}"),
                        path: Some(p),
                    });
                }
                let gamma = log_gamma.exp();
                if !gamma.is_finite() {
                    return Err(Error::NumericFailure {
                        context: format!("non-finite exponential weight at step {i}"),
                        path: Some(p),
                    });
                }
                acc += gamma * c * dt;
                let dx = ens.increment(p, i);
                let mut dot = 0.0;
                let mut nsq = 0.0;
                for k in 0..d {
                    dot += b[k] * dx[k];
                    nsq += b[k] * b[k];
                }
                log_gamma += a * dt + dot - 0.5 * nsq * dt;
            }
            Ok(acc)
        })
        .collect();
    let values = per_path.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(mean_with_se(&values))
}
