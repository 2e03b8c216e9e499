//! End-to-end benchmark configurations: the stochastic-volatility portfolio
//! problem and Markovian optimal-stopping instances with an independent
//! binomial-tree oracle.

use std::sync::Arc;
use std::time::Instant;

use crate::basis::BasisSpec;
use crate::bsde::{solve_bsde_with, IntegrabilityTag, SolverOptions, TerminalSpec};
use crate::error::{Error, Result};
use crate::generators::{GeneratorSpec, KINK_TOL};
use crate::paths::{make_grid, mean_with_se, simulate_brownian, StepCtx};
use crate::rbsde::{solve_rbsde, ObstacleSpec, RbsdeSolution};
use crate::sensitivity::{sensitivity_stopping, NormMode, SensitivityReport};

/// Exponent floor guarding the correlation limits where the effective risk
/// aversion collapses.
pub const BETA_FLOOR: f64 = 1e-6;

/// Portfolio problem configuration: exponential-utility hedging of a
/// path-dependent liability under a stochastic opportunity set.
#[derive(Debug, Clone)]
pub struct PortfolioConfig {
    /// Risk aversion, > 0.
    pub eta: f64,
    /// Correlation between the traded and the driving factor, in (-1, 1).
    pub rho: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
    /// When false the liability is zero (terminal 1), the closed-form
    /// reduction case.
    pub with_liability: bool,
}

impl PortfolioConfig {
    pub fn new(eta: f64, rho: f64) -> Self {
        PortfolioConfig {
            eta,
            rho,
            horizon: 1.0,
            n_steps: 50,
            n_paths: 1 << 14,
            seed: 2024,
            basis_degree: 3,
            with_liability: true,
        }
    }

    /// Effective risk aversion `eta (1 - rho^2)`, floored away from zero.
    pub fn beta(&self) -> f64 {
        (self.eta * (1.0 - self.rho * self.rho)).max(BETA_FLOOR)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid_argument(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::invalid_argument(format!(
                "rho must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(Error::invalid_argument(
                "n_steps and n_paths must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Result of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    /// Initial value of the transformed problem.
    pub y0: f64,
    pub y0_se: f64,
    /// Utility value `-Y0^{eta/beta}` (portfolio only, else equals `y0`).
    pub v0: f64,
    /// L-infinity drift sensitivity with standard error.
    pub s_inf: (f64, f64),
    /// L2 drift sensitivity with standard error.
    pub s_2: (f64, f64),
    /// Independent oracle value when one exists for the scenario.
    pub oracle: Option<f64>,
    pub runtime_ms: u128,
}

/// Solve the portfolio scenario.
///
/// The utility problem reduces to the BSDE with driver
/// `f(y) = -(beta / 2 eta) theta^2 y` and terminal `e^{beta xi}`, where
/// `theta_t = tanh(W^1_t)` is the market price of risk and
/// `xi = (int_0^T W^1 dt)^+` the liability. The optimally controlled drift
/// vanishes, so the sensitivities are plain discounted `|Z|` integrals with
/// discount `exp(-int (beta / 2 eta) theta^2)`.
pub fn portfolio_scenario(cfg: &PortfolioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let start = Instant::now();
    let beta = cfg.beta();
    let half_ratio = beta / (2.0 * cfg.eta);
    let grid = make_grid(cfg.horizon, cfg.n_steps)?;
    let ens = simulate_brownian(&grid, 1, cfg.n_paths, cfg.seed)?;

    let f = GeneratorSpec::from_parts(
        Arc::new(move |ctx: &StepCtx, y, _: &[f64]| {
            let theta = ctx.prefix.current()[0].tanh();
            -half_ratio * theta * theta * y
        }),
        Arc::new(move |ctx: &StepCtx, _, _: &[f64]| {
            let theta = ctx.prefix.current()[0].tanh();
            -half_ratio * theta * theta
        }),
        Arc::new(|_, _, _, out| out.fill(0.0)),
    );
    let with_liability = cfg.with_liability;
    let xi = TerminalSpec::new(
        Arc::new(move |ctx: &StepCtx| {
            if with_liability {
                (beta * ctx.prefix.running_integral(0).max(0.0)).exp()
            } else {
                1.0
            }
        }),
        IntegrabilityTag::SquareIntegrable,
    );
    // degree-3 regression on the 2-D state (W^1, int W^1 ds); the driver is
    // stiff in y at large eta, hence the extra fixed-point sweeps
    let basis = BasisSpec::value_and_integral(cfg.basis_degree)?;
    let opts = SolverOptions {
        extra_picard_sweeps: 3,
    };
    let sol = solve_bsde_with(&f, &xi, &ens, &basis, opts)?;
    if !(sol.y0 > 0.0) {
        return Err(Error::AssumptionViolation(format!(
            "portfolio value transform needs Y0 > 0, got {}",
            sol.y0
        )));
    }

    // discount K*_i = exp(-int (beta/2eta) theta^2); the controlled drift is
    // zero, so no reweighting enters the sensitivities
    let dt = grid.dt();
    let n = cfg.n_steps;
    let per_path: Vec<(f64, f64)> = (0..cfg.n_paths)
        .map(|p| {
            let mut acc = 0.0f64;
            let mut lin = 0.0;
            let mut sq = 0.0;
            for i in 0..n {
                let theta = ens.value(p, i)[0].tanh();
                let discount = (-acc).exp();
                let z = sol.z(p, i)[0].abs();
                let z = if z < KINK_TOL { 0.0 } else { z };
                lin += discount * z * dt;
                sq += discount * z * z * dt;
                acc += half_ratio * theta * theta * dt;
            }
            (lin, sq)
        })
        .collect();
    let lin: Vec<f64> = per_path.iter().map(|x| x.0).collect();
    let sq: Vec<f64> = per_path.iter().map(|x| x.1).collect();
    let s_inf = mean_with_se(&lin);
    let (m2, m2_se) = mean_with_se(&sq);
    let s_2 = if m2 > 0.0 {
        let v = m2.sqrt();
        (v, m2_se / (2.0 * v))
    } else {
        (0.0, m2_se.max(0.0).sqrt())
    };

    let v0 = -sol.y0.powf(cfg.eta / beta);
    Ok(ScenarioResult {
        y0: sol.y0,
        y0_se: sol.y0_se,
        v0,
        s_inf,
        s_2,
        oracle: None,
        runtime_ms: start.elapsed().as_millis(),
    })
}

/// Stopping benchmark instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoppingKind {
    /// Put-style Markov obstacle with a genuine exercise boundary.
    MarkovPut,
    /// Constant obstacle: immediate stopping, all sensitivities zero.
    Flat,
    /// Obstacle far above the continuation value: reduces to the plain BSDE.
    NeverBinding,
}

/// Parameters of a stopping benchmark run.
#[derive(Debug, Clone)]
pub struct StoppingParams {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
    /// Tree oracle resolution (time steps), at least 2000 by default.
    pub tree_steps: usize,
    /// Put strike for the Markov instance.
    pub strike: f64,
    /// Discount-style rate in the Markov obstacle's time profile.
    pub rate: f64,
    /// Level of the flat obstacle.
    pub level: f64,
}

impl Default for StoppingParams {
    fn default() -> Self {
        StoppingParams {
            horizon: 1.0,
            n_steps: 50,
            n_paths: 1 << 15,
            seed: 4242,
            // the put continuation value has strong curvature near the
            // exercise boundary; degree 5 keeps the policy bias small
            basis_degree: 5,
            tree_steps: 2000,
            // strike below the start point so the problem opens in the
            // continuation region and a genuine boundary develops
            strike: 0.3,
            rate: 0.5,
            level: 1.0,
        }
    }
}

/// Stopping benchmark output: the scenario result plus the exercise-boundary
/// probes used to compare against the tree oracle.
#[derive(Debug, Clone)]
pub struct StoppingBenchmark {
    /// `result.y0` is the stopped-payoff (policy) estimate of the value,
    /// the standard low-bias estimator for regression-based stopping.
    pub result: ScenarioResult,
    /// Raw regression value at time 0, biased low by the per-step projection
    /// of noisy continuation estimates; kept for diagnostics.
    pub regression_y0: f64,
    /// First-contact indices per path.
    pub hit: Vec<usize>,
    /// Monte-Carlo exercise boundary (largest stopped state) at the probed
    /// times, `None` when no path stops near that time.
    pub mc_boundary: Vec<Option<f64>>,
    /// Oracle exercise boundary at the probed times.
    pub oracle_boundary: Vec<Option<f64>>,
    /// Probe times as fractions of the horizon.
    pub probe_fractions: Vec<f64>,
}

/// Markov put obstacle `xi(t, x) = -e^{rate (T - t)} (strike - x)^+`.
///
/// The negative sign makes stopping rewarding for the infimum problem and the
/// growing time profile creates a genuine exercise boundary; the terminal
/// value is the plain put payoff.
pub fn markov_put_obstacle(horizon: f64, strike: f64, rate: f64) -> ObstacleSpec {
    ObstacleSpec::markovian(
        Arc::new(move |t: f64, x: f64| -(rate * (horizon - t)).exp() * (strike - x).max(0.0)),
        IntegrabilityTag::SquareIntegrable,
    )
}

/// Dense random-walk dynamic program for `inf_tau E[g(tau, X_tau)]` with the
/// same Markov obstacle, on `tree_steps` time steps. Returns the value at
/// `(0, 0)` and the exercise boundary (largest exercised node value) at the
/// probed time fractions.
fn tree_oracle(
    g: &dyn Fn(f64, f64) -> f64,
    horizon: f64,
    tree_steps: usize,
    probe_fractions: &[f64],
) -> (f64, Vec<Option<f64>>) {
    let n = tree_steps;
    let dt = horizon / n as f64;
    let dx = dt.sqrt();
    // value at the terminal layer: node j in 0..=n maps to x = (2j - n) dx
    let mut value: Vec<f64> = (0..=n)
        .map(|j| g(horizon, (2.0 * j as f64 - n as f64) * dx))
        .collect();
    let mut probe_rows: Vec<(usize, f64)> = probe_fractions
        .iter()
        .map(|&fr| (((fr * n as f64).round() as usize).min(n), fr))
        .collect();
    probe_rows.sort_by(|a, b| b.0.cmp(&a.0));
    let mut boundaries = vec![None; probe_fractions.len()];

    let record = |i: usize, layer: &[f64], boundaries: &mut Vec<Option<f64>>| {
        for (slot, &(row, fr)) in probe_rows.iter().enumerate() {
            if row == i {
                let t = i as f64 * dt;
                let mut best: Option<f64> = None;
                for (j, &v) in layer.iter().enumerate() {
                    let x = (2.0 * j as f64 - i as f64) * dx;
                    let obstacle = g(t, x);
                    // exercised where the value equals the obstacle and the
                    // obstacle is active (strictly negative put region)
                    if obstacle < 0.0 && (v - obstacle).abs() <= 1e-12 * obstacle.abs().max(1.0)
                    {
                        best = Some(best.map_or(x, |b: f64| b.max(x)));
                    }
                }
                let idx = probe_fractions
                    .iter()
                    .position(|&f| f == fr)
                    .expect("probe present");
                boundaries[idx] = best;
                let _ = slot;
            }
        }
    };
    record(n, &value, &mut boundaries);

    for i in (0..n).rev() {
        let t = i as f64 * dt;
        let mut next = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let x = (2.0 * j as f64 - i as f64) * dx;
            let cont = 0.5 * (value[j] + value[j + 1]);
            next.push(cont.min(g(t, x)));
        }
        value = next;
        record(i, &value, &mut boundaries);
    }
    (value[0], boundaries)
}

/// Run one stopping benchmark instance: the reflected solver with the
/// stopping sensitivities, and (for the Markov instance) the tree oracle
/// value plus exercise-boundary probes.
pub fn stopping_benchmark(
    kind: StoppingKind,
    params: &StoppingParams,
) -> Result<StoppingBenchmark> {
    if params.n_steps == 0 || params.n_paths == 0 {
        return Err(Error::invalid_argument(
            "n_steps and n_paths must be at least 1",
        ));
    }
    if kind == StoppingKind::MarkovPut && params.tree_steps < 2000 {
        return Err(Error::invalid_argument(
            "tree oracle needs at least 2000 steps",
        ));
    }
    let start = Instant::now();
    let grid = make_grid(params.horizon, params.n_steps)?;
    let ens = simulate_brownian(&grid, 1, params.n_paths, params.seed)?;
    let basis = BasisSpec::polynomial(params.basis_degree)?;
    let f = GeneratorSpec::zero();
    let probe_fractions = vec![0.25, 0.5, 0.75];

    let obstacle = match kind {
        StoppingKind::MarkovPut => {
            markov_put_obstacle(params.horizon, params.strike, params.rate)
        }
        StoppingKind::Flat => ObstacleSpec::flat(params.level),
        StoppingKind::NeverBinding => {
            // strictly above any continuation value of the zero-driver
            // problem with the put terminal, so reflection never binds
            let horizon = params.horizon;
            let strike = params.strike;
            ObstacleSpec::new(
                Arc::new(move |ctx: &StepCtx| {
                    if ctx.t >= horizon {
                        -(strike - ctx.prefix.current()[0]).max(0.0)
                    } else {
                        1.0
                    }
                }),
                IntegrabilityTag::SquareIntegrable,
            )
        }
    };

    let sol: RbsdeSolution = solve_rbsde(&f, &obstacle, &ens, &basis)?;
    let s_inf_rep: SensitivityReport =
        sensitivity_stopping(&obstacle, &ens, &basis, NormMode::Linf)?;
    let s_2_rep: SensitivityReport = sensitivity_stopping(&obstacle, &ens, &basis, NormMode::L2)?;

    let (oracle, oracle_boundary) = match kind {
        StoppingKind::MarkovPut => {
            let (horizon, strike, rate) = (params.horizon, params.strike, params.rate);
            let g = move |t: f64, x: f64| -(rate * (horizon - t)).exp() * (strike - x).max(0.0);
            let (v, b) = tree_oracle(&g, horizon, params.tree_steps, &probe_fractions);
            (Some(v), b)
        }
        StoppingKind::Flat => (Some(params.level), vec![None; probe_fractions.len()]),
        StoppingKind::NeverBinding => (None, vec![None; probe_fractions.len()]),
    };

    // Monte-Carlo boundary: largest state among paths first stopping at the
    // probed node (strictly inside the horizon)
    let mc_boundary: Vec<Option<f64>> = probe_fractions
        .iter()
        .map(|&fr| {
            let node = ((fr * params.n_steps as f64).round() as usize).min(params.n_steps);
            let mut best: Option<f64> = None;
            for (p, &h) in sol.hit.iter().enumerate() {
                // only contacts where the obstacle is active count as
                // exercises; where it vanishes, stopping is indifferent
                if h == node && node < params.n_steps && sol.obstacle(p, node) < 0.0 {
                    let x = ens.value(p, node)[0];
                    best = Some(best.map_or(x, |b: f64| b.max(x)));
                }
            }
            best
        })
        .collect();

    // value of the computed stopping policy: the obstacle at the first
    // contact, averaged over paths; unbiased for the (suboptimal) policy and
    // far less biased than the regressed time-0 value
    let policy: Vec<f64> = (0..params.n_paths)
        .map(|p| sol.obstacle(p, sol.hit[p]))
        .collect();
    let (policy_value, policy_se) = mean_with_se(&policy);

    let result = ScenarioResult {
        y0: policy_value,
        y0_se: policy_se,
        v0: policy_value,
        s_inf: (s_inf_rep.value, s_inf_rep.std_error),
        s_2: (s_2_rep.value, s_2_rep.std_error),
        oracle,
        runtime_ms: start.elapsed().as_millis(),
    };
    Ok(StoppingBenchmark {
        result,
        regression_y0: sol.y0,
        hit: sol.hit,
        mc_boundary,
        oracle_boundary,
        probe_fractions,
    })
}
