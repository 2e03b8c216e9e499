//! Experiment configuration and batch execution backing the command line.
//!
//! A config is a single JSON document selecting a problem kind, coefficient
//! built-ins with parameter maps, grid/ensemble/basis settings, an estimator
//! list, and an optional sweep axis. Execution produces one [`ResultRow`] per
//! sweep cell and estimator; rows are ordered by sweep coordinate and are
//! byte-stable for a fixed config and seed (the `runtime_ms` column excepted).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::basis::BasisSpec;
use crate::bsde::{solve_bsde, TerminalSpec};
use crate::error::{Error, Result};
use crate::generators::{hamiltonian, ControlledCoefficients, GeneratorSpec};
use crate::paths::{make_grid, simulate_brownian, PathEnsemble};
use crate::rbsde::{solve_rbsde, ObstacleSpec};
use crate::scenarios::{
    markov_put_obstacle, portfolio_scenario, stopping_benchmark, PortfolioConfig, StoppingKind,
    StoppingParams,
};
use crate::sensitivity::{
    dual_curve, richardson_slope, sensitivity_l2_control, sensitivity_linf_bsde,
    sensitivity_linf_control, sensitivity_mixed_l2, sensitivity_mixed_linf, Method, ProblemSpec,
    SensitivityReport,
};

/// Problem kinds the batch runner understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Bsde,
    Control,
    Stopping,
    Mixed,
    Portfolio,
    DualCurve,
    FdOracle,
}

impl ProblemKind {
    fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Bsde => "bsde",
            ProblemKind::Control => "control",
            ProblemKind::Stopping => "stopping",
            ProblemKind::Mixed => "mixed",
            ProblemKind::Portfolio => "portfolio",
            ProblemKind::DualCurve => "dual_curve",
            ProblemKind::FdOracle => "fd_oracle",
        }
    }

    /// Estimator names admissible for this kind.
    pub fn allowed_estimators(self) -> &'static [&'static str] {
        match self {
            ProblemKind::Bsde => &["y0", "s_inf"],
            ProblemKind::Control | ProblemKind::Mixed | ProblemKind::Stopping => {
                &["y0", "s_inf", "s_2"]
            }
            ProblemKind::Portfolio => &["y0", "v0", "s_inf", "s_2"],
            ProblemKind::DualCurve => &["dual_value"],
            ProblemKind::FdOracle => &["closed_form", "finite_difference"],
        }
    }

    /// Sweep axis names admissible for this kind (empty: no sweep allowed).
    fn allowed_axes(self) -> &'static [&'static str] {
        match self {
            ProblemKind::Portfolio => &["eta"],
            ProblemKind::DualCurve => &["gamma"],
            ProblemKind::FdOracle => &["r"],
            _ => &[],
        }
    }
}

/// Time grid settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

fn default_dim() -> usize {
    1
}

/// Brownian ensemble settings. The seed is mandatory; its absence is a
/// validation diagnostic rather than a silent default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub seed: Option<u64>,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

/// Regression state functionals selectable from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    #[default]
    Polynomial,
    ValueAndIntegral,
}

/// Regression basis settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisConfig {
    pub degree: usize,
    #[serde(default)]
    pub state: StateKind,
}

impl BasisConfig {
    fn build(&self) -> Result<BasisSpec> {
        match self.state {
            StateKind::Polynomial => BasisSpec::polynomial(self.degree),
            StateKind::ValueAndIntegral => BasisSpec::value_and_integral(self.degree),
        }
    }
}

/// A named built-in plus its parameter map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl NamedSpec {
    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| {
                Error::Config(format!("parameter '{key}' of '{}' must be a number", self.name))
            }),
        }
    }

    fn f64_vec(&self, key: &str, default: Vec<f64>) -> Result<Vec<f64>> {
        match self.params.get(key) {
            None => Ok(default),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        Error::Config(format!(
                            "parameter '{key}' of '{}' must be an array of numbers",
                            self.name
                        ))
                    })
                })
                .collect(),
            Some(_) => Err(Error::Config(format!(
                "parameter '{key}' of '{}' must be an array of numbers",
                self.name
            ))),
        }
    }
}

/// One sweep axis with its cell coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: String,
    pub values: Vec<f64>,
}

/// Portfolio-specific settings; `eta` is ignored when an `eta` sweep is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioSection {
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub rho: f64,
    #[serde(default = "default_true")]
    pub with_liability: bool,
}

fn default_eta() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Stopping-specific settings with the benchmark defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingSection {
    pub kind: String,
    pub strike: Option<f64>,
    pub rate: Option<f64>,
    pub level: Option<f64>,
    pub tree_steps: Option<usize>,
}

/// The full experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub problem: ProblemKind,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub basis: BasisConfig,
    #[serde(default)]
    pub generator: Option<NamedSpec>,
    #[serde(default)]
    pub terminal: Option<NamedSpec>,
    #[serde(default)]
    pub obstacle: Option<NamedSpec>,
    #[serde(default)]
    pub coefficients: Option<NamedSpec>,
    pub estimators: Vec<String>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub portfolio: Option<PortfolioSection>,
    #[serde(default)]
    pub stopping: Option<StoppingSection>,
    /// Radii passed to the dual minimum scan (`dual_curve` only).
    #[serde(default)]
    pub radii: Vec<f64>,
}

const GENERATOR_BUILTINS: &[&str] = &["zero", "linear"];
const TERMINAL_BUILTINS: &[&str] = &["constant", "terminal_value"];
const OBSTACLE_BUILTINS: &[&str] = &["flat", "markov_put"];
const COEFFICIENT_BUILTINS: &[&str] = &["singleton", "interval_drift"];
const STOPPING_KINDS: &[&str] = &["markov_put", "flat", "never_binding"];

impl ExperimentConfig {
    /// Parse a config document from disk.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Parse a config document from its JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))
    }

    /// Schema and referential checks; returns the full diagnostics listing,
    /// empty when the config is runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut diags = Vec::new();
        if self.experiment_id.is_empty() {
            diags.push("experiment_id must be non-empty".into());
        }
        if self.ensemble.seed.is_none() {
            diags.push("ensemble.seed is mandatory".into());
        }
        if self.grid.n_steps == 0 {
            diags.push("grid.n_steps must be at least 1".into());
        }
        if !(self.grid.horizon > 0.0) {
            diags.push("grid.horizon must be positive".into());
        }
        if self.ensemble.n_paths == 0 {
            diags.push("ensemble.n_paths must be at least 1".into());
        }
        if self.ensemble.dim == 0 {
            diags.push("ensemble.dim must be at least 1".into());
        }
        if self.estimators.is_empty() {
            diags.push("estimators must be non-empty".into());
        }
        let allowed = self.problem.allowed_estimators();
        for e in &self.estimators {
            if !allowed.contains(&e.as_str()) {
                diags.push(format!(
                    "unknown estimator '{e}' for problem '{}' (allowed: {})",
                    self.problem.as_str(),
                    allowed.join(", ")
                ));
            }
        }
        let mut seen = Vec::new();
        for e in &self.estimators {
            if seen.contains(&e) {
                diags.push(format!("duplicate estimator '{e}'"));
            }
            seen.push(e);
        }
        if let Some(sweep) = &self.sweep {
            let axes = self.problem.allowed_axes();
            if !axes.contains(&sweep.axis.as_str()) {
                diags.push(format!(
                    "sweep axis '{}' not supported for problem '{}'",
                    sweep.axis,
                    self.problem.as_str()
                ));
            }
            if sweep.values.is_empty() {
                diags.push("sweep.values must be non-empty".into());
            }
        }
        self.validate_builtins(&mut diags);
        diags
    }

    fn validate_builtins(&self, diags: &mut Vec<String>) {
        let check = |spec: &Option<NamedSpec>,
                     field: &str,
                     builtins: &[&str],
                     required: bool,
                     diags: &mut Vec<String>| {
            match spec {
                Some(s) if !builtins.contains(&s.name.as_str()) => diags.push(format!(
                    "unknown {field} built-in '{}' (available: {})",
                    s.name,
                    builtins.join(", ")
                )),
                None if required => diags.push(format!(
                    "problem '{}' requires a {field} built-in",
                    self.problem.as_str()
                )),
                _ => {}
            }
        };
        match self.problem {
            ProblemKind::Bsde | ProblemKind::DualCurve | ProblemKind::FdOracle => {
                check(&self.generator, "generator", GENERATOR_BUILTINS, true, diags);
                check(&self.terminal, "terminal", TERMINAL_BUILTINS, true, diags);
                if self.problem == ProblemKind::FdOracle
                    && self.sweep.as_ref().is_none_or(|s| s.values.is_empty())
                {
                    diags.push("fd_oracle requires a non-empty 'r' sweep".into());
                } else if self.problem == ProblemKind::FdOracle {
                    if let Some(s) = &self.sweep {
                        if s.values.iter().any(|&r| !(r > 0.0)) {
                            diags.push("fd_oracle radii must be positive".into());
                        }
                    }
                }
                if self.problem == ProblemKind::DualCurve {
                    if let Some(s) = &self.sweep {
                        let bad = s.values.first().is_some_and(|&g| g <= 0.0)
                            || s.values.windows(2).any(|w| w[0] >= w[1]);
                        if bad {
                            diags.push(
                                "dual_curve gamma sweep must be positive and strictly ascending"
                                    .into(),
                            );
                        }
                    } else {
                        diags.push("dual_curve requires a 'gamma' sweep".into());
                    }
                }
            }
            ProblemKind::Control => {
                check(
                    &self.coefficients,
                    "coefficients",
                    COEFFICIENT_BUILTINS,
                    true,
                    diags,
                );
                check(&self.terminal, "terminal", TERMINAL_BUILTINS, true, diags);
            }
            ProblemKind::Mixed => {
                check(
                    &self.coefficients,
                    "coefficients",
                    COEFFICIENT_BUILTINS,
                    true,
                    diags,
                );
                check(&self.obstacle, "obstacle", OBSTACLE_BUILTINS, true, diags);
            }
            ProblemKind::Stopping => match &self.stopping {
                None => diags.push("problem 'stopping' requires a stopping section".into()),
                Some(s) if !STOPPING_KINDS.contains(&s.kind.as_str()) => diags.push(format!(
                    "unknown stopping kind '{}' (available: {})",
                    s.kind,
                    STOPPING_KINDS.join(", ")
                )),
                _ => {}
            },
            ProblemKind::Portfolio => {
                if self.portfolio.is_none() {
                    diags.push("problem 'portfolio' requires a portfolio section".into());
                }
            }
        }
    }

    fn seed(&self) -> u64 {
        self.ensemble.seed.expect("validated")
    }
}

/// One output row: a sweep cell and estimator with its value or error.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub sweep_axis: String,
    pub sweep_value: Option<f64>,
    pub estimator: String,
    pub value: Option<f64>,
    pub std_error: Option<f64>,
    pub method: String,
    /// Relative gap to the closed form, populated on finite-difference rows.
    pub rel_gap: Option<f64>,
    pub error: Option<String>,
    pub runtime_ms: u128,
    pub seed: u64,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::ClosedForm => "closed_form",
        Method::FiniteDifference => "finite_difference",
        Method::DualCurve => "dual_curve",
    }
}

fn build_generator(spec: &NamedSpec, dim: usize) -> Result<GeneratorSpec> {
    match spec.name.as_str() {
        "zero" => Ok(GeneratorSpec::zero()),
        "linear" => {
            let a = spec.f64("a", 0.0)?;
            let b = spec.f64_vec("b", vec![0.0; dim])?;
            if b.len() != dim {
                return Err(Error::Config(format!(
                    "generator 'linear' expects b of length {dim}, got {}",
                    b.len()
                )));
            }
            Ok(GeneratorSpec::linear(a, b))
        }
        other => Err(Error::Config(format!("unknown generator '{other}'"))),
    }
}

fn build_terminal(spec: &NamedSpec) -> Result<TerminalSpec> {
    match spec.name.as_str() {
        "constant" => Ok(TerminalSpec::constant(spec.f64("value", 1.0)?)),
        "terminal_value" => Ok(TerminalSpec::terminal_value()),
        other => Err(Error::Config(format!("unknown terminal '{other}'"))),
    }
}

fn build_obstacle(spec: &NamedSpec, horizon: f64) -> Result<ObstacleSpec> {
    match spec.name.as_str() {
        "flat" => Ok(ObstacleSpec::flat(spec.f64("level", 0.0)?)),
        "markov_put" => Ok(markov_put_obstacle(
            horizon,
            spec.f64("strike", 0.3)?,
            spec.f64("rate", 0.5)?,
        )),
        other => Err(Error::Config(format!("unknown obstacle '{other}'"))),
    }
}

fn build_coefficients(spec: &NamedSpec, dim: usize) -> Result<ControlledCoefficients> {
    match spec.name.as_str() {
        "singleton" => {
            let k = spec.f64("k", 0.0)?;
            let l = spec.f64("l", 0.0)?;
            let lambda = spec.f64_vec("lambda", vec![0.0; dim])?;
            if lambda.len() != dim {
                return Err(Error::Config(format!(
                    "coefficients 'singleton' expects lambda of length {dim}, got {}",
                    lambda.len()
                )));
            }
            Ok(ControlledCoefficients::singleton(k, l, lambda))
        }
        "interval_drift" => {
            if dim != 1 {
                return Err(Error::Config(
                    "coefficients 'interval_drift' is one-dimensional".into(),
                ));
            }
            let lo = spec.f64("lo", -1.0)?;
            let hi = spec.f64("hi", 1.0)?;
            Ok(ControlledCoefficients::interval_drift(lo, hi))
        }
        other => Err(Error::Config(format!("unknown coefficients '{other}'"))),
    }
}

struct RowSink<'a> {
    cfg: &'a ExperimentConfig,
    axis: String,
    rows: Vec<ResultRow>,
}

impl<'a> RowSink<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        let axis = cfg
            .sweep
            .as_ref()
            .map_or_else(|| "none".to_string(), |s| s.axis.clone());
        RowSink {
            cfg,
            axis,
            rows: Vec::new(),
        }
    }

    fn push_value(
        &mut self,
        sweep_value: Option<f64>,
        estimator: &str,
        value: f64,
        std_error: Option<f64>,
        method: &str,
        rel_gap: Option<f64>,
        runtime_ms: u128,
    ) {
        if !value.is_finite() {
            self.push_error(
                sweep_value,
                estimator,
                &Error::NumericFailure {
                    context: "non-finite estimate".into(),
                    path: None,
                },
                runtime_ms,
            );
            return;
        }
        self.rows.push(ResultRow {
            experiment_id: self.cfg.experiment_id.clone(),
            sweep_axis: self.axis.clone(),
            sweep_value,
            estimator: estimator.into(),
            value: Some(value),
            std_error,
            method: method.into(),
            rel_gap,
            error: None,
            runtime_ms,
            seed: self.cfg.seed(),
        });
    }

    fn push_error(
        &mut self,
        sweep_value: Option<f64>,
        estimator: &str,
        err: &Error,
        runtime_ms: u128,
    ) {
        self.rows.push(ResultRow {
            experiment_id: self.cfg.experiment_id.clone(),
            sweep_axis: self.axis.clone(),
            sweep_value,
            estimator: estimator.into(),
            value: None,
            std_error: None,
            method: "error".into(),
            rel_gap: None,
            error: Some(err.name().into()),
            runtime_ms,
            seed: self.cfg.seed(),
        });
    }

    fn push_report(
        &mut self,
        sweep_value: Option<f64>,
        estimator: &str,
        report: &Result<SensitivityReport>,
        runtime_ms: u128,
    ) {
        match report {
            Ok(r) => self.push_value(
                sweep_value,
                estimator,
                r.value,
                Some(r.std_error),
                method_name(r.method),
                None,
                runtime_ms,
            ),
            Err(e) => self.push_error(sweep_value, estimator, e, runtime_ms),
        }
    }
}

/// Execute every sweep cell of a validated config.
///
/// Cell-level numeric failures become error rows rather than aborting the
/// run; structural problems (unreadable built-ins and the like) abort with
/// `Error::Config`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let diags = cfg.validate();
    if !diags.is_empty() {
        return Err(Error::Config(diags.join("; ")));
    }
    match cfg.problem {
        ProblemKind::Bsde => run_bsde(cfg),
        ProblemKind::Control => run_control(cfg),
        ProblemKind::Mixed => run_mixed(cfg),
        ProblemKind::Stopping => run_stopping(cfg),
        ProblemKind::Portfolio => run_portfolio(cfg),
        ProblemKind::DualCurve => run_dual_curve(cfg),
        ProblemKind::FdOracle => run_fd_oracle(cfg),
    }
}

fn make_ensemble(cfg: &ExperimentConfig) -> Result<(PathEnsemble, BasisSpec)> {
    let grid = make_grid(cfg.grid.horizon, cfg.grid.n_steps)?;
    let ens = simulate_brownian(&grid, cfg.ensemble.dim, cfg.ensemble.n_paths, cfg.seed())?;
    let basis = cfg.basis.build()?;
    Ok((ens, basis))
}

fn run_bsde(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (ens, basis) = make_ensemble(cfg)?;
    let f = build_generator(cfg.generator.as_ref().expect("validated"), ens.dim())?;
    let xi = build_terminal(cfg.terminal.as_ref().expect("validated"))?;
    let mut sink = RowSink::new(cfg);
    for est in &cfg.estimators {
        let start = Instant::now();
        match est.as_str() {
            "y0" => match solve_bsde(&f, &xi, &ens, &basis) {
                Ok(sol) => sink.push_value(
                    None,
                    est,
                    sol.y0,
                    Some(sol.y0_se),
                    "regression",
                    None,
                    start.elapsed().as_millis(),
                ),
                Err(e) => sink.push_error(None, est, &e, start.elapsed().as_millis()),
            },
            "s_inf" => {
                let report = sensitivity_linf_bsde(&f, &xi, &ens, &basis);
                sink.push_report(None, est, &report, start.elapsed().as_millis());
            }
            _ => unreachable!("validated"),
        }
    }
    Ok(sink.rows)
}

fn run_control(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (ens, basis) = make_ensemble(cfg)?;
    let coeffs = build_coefficients(cfg.coefficients.as_ref().expect("validated"), ens.dim())?;
    let xi = build_terminal(cfg.terminal.as_ref().expect("validated"))?;
    let mut sink = RowSink::new(cfg);
    for est in &cfg.estimators {
        let start = Instant::now();
        match est.as_str() {
            "y0" => {
                let y0 = hamiltonian(&coeffs).and_then(|f| solve_bsde(&f, &xi, &ens, &basis));
                match y0 {
                    Ok(sol) => sink.push_value(
                        None,
                        est,
                        sol.y0,
                        Some(sol.y0_se),
                        "regression",
                        None,
                        start.elapsed().as_millis(),
                    ),
                    Err(e) => sink.push_error(None, est, &e, start.elapsed().as_millis()),
                }
            }
            "s_inf" => {
                let report = sensitivity_linf_control(&coeffs, &xi, &ens, &basis);
                sink.push_report(None, est, &report, start.elapsed().as_millis());
            }
            "s_2" => {
                let report = sensitivity_l2_control(&coeffs, &xi, &ens, &basis);
                sink.push_report(None, est, &report, start.elapsed().as_millis());
            }
            _ => unreachable!("validated"),
        }
    }
    Ok(sink.rows)
}

fn run_mixed(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (ens, basis) = make_ensemble(cfg)?;
    let coeffs = build_coefficients(cfg.coefficients.as_ref().expect("validated"), ens.dim())?;
    let obstacle = build_obstacle(cfg.obstacle.as_ref().expect("validated"), cfg.grid.horizon)?;
    let mut sink = RowSink::new(cfg);
    for est in &cfg.estimators {
        let start = Instant::now();
        match est.as_str() {
            "y0" => {
                let y0 = hamiltonian(&coeffs).and_then(|f| solve_rbsde(&f, &obstacle, &ens, &basis));
                match y0 {
                    Ok(sol) => sink.push_value(
                        None,
                        est,
                        sol.y0,
                        Some(sol.y0_se),
                        "regression",
                        None,
                        start.elapsed().as_millis(),
                    ),
                    Err(e) => sink.push_error(None, est, &e, start.elapsed().as_millis()),
                }
            }
            "s_inf" => {
                let report = sensitivity_mixed_linf(&coeffs, &obstacle, &ens, &basis);
                sink.push_report(None, est, &report, start.elapsed().as_millis());
            }
            "s_2" => {
                let report = sensitivity_mixed_l2(&coeffs, &obstacle, &ens, &basis);
                sink.push_report(None, est, &report, start.elapsed().as_millis());
            }
            _ => unreachable!("validated"),
        }
    }
    Ok(sink.rows)
}

fn run_stopping(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let section = cfg.stopping.as_ref().expect("validated");
    let kind = match section.kind.as_str() {
        "markov_put" => StoppingKind::MarkovPut,
        "flat" => StoppingKind::Flat,
        "never_binding" => StoppingKind::NeverBinding,
        _ => unreachable!("validated"),
    };
    let defaults = StoppingParams::default();
    let params = StoppingParams {
        horizon: cfg.grid.horizon,
        n_steps: cfg.grid.n_steps,
        n_paths: cfg.ensemble.n_paths,
        seed: cfg.seed(),
        basis_degree: cfg.basis.degree,
        tree_steps: section.tree_steps.unwrap_or(defaults.tree_steps),
        strike: section.strike.unwrap_or(defaults.strike),
        rate: section.rate.unwrap_or(defaults.rate),
        level: section.level.unwrap_or(defaults.level),
    };
    let start = Instant::now();
    let mut sink = RowSink::new(cfg);
    match stopping_benchmark(kind, &params) {
        Ok(bench) => {
            let ms = start.elapsed().as_millis();
            for est in &cfg.estimators {
                match est.as_str() {
                    "y0" => sink.push_value(
                        None,
                        est,
                        bench.result.y0,
                        Some(bench.result.y0_se),
                        "regression",
                        None,
                        ms,
                    ),
                    "s_inf" => {
                        let (v, se) = bench.result.s_inf;
                        sink.push_value(None, est, v, Some(se), "closed_form", None, ms);
                    }
                    "s_2" => {
                        let (v, se) = bench.result.s_2;
                        sink.push_value(None, est, v, Some(se), "closed_form", None, ms);
                    }
                    _ => unreachable!("validated"),
                }
            }
        }
        Err(e) => {
            let ms = start.elapsed().as_millis();
            for est in &cfg.estimators {
                sink.push_error(None, est, &e, ms);
            }
        }
    }
    Ok(sink.rows)
}

fn run_portfolio(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let section = cfg.portfolio.as_ref().expect("validated");
    let etas: Vec<f64> = match &cfg.sweep {
        Some(s) => s.values.clone(),
        None => vec![section.eta],
    };
    let mut sink = RowSink::new(cfg);
    for &eta in &etas {
        let pcfg = PortfolioConfig {
            eta,
            rho: section.rho,
            horizon: cfg.grid.horizon,
            n_steps: cfg.grid.n_steps,
            n_paths: cfg.ensemble.n_paths,
            seed: cfg.seed(),
            basis_degree: cfg.basis.degree,
            with_liability: section.with_liability,
        };
        let sweep_value = cfg.sweep.as_ref().map(|_| eta);
        let start = Instant::now();
        match portfolio_scenario(&pcfg) {
            Ok(res) => {
                let ms = start.elapsed().as_millis();
                for est in &cfg.estimators {
                    match est.as_str() {
                        "y0" => sink.push_value(
                            sweep_value,
                            est,
                            res.y0,
                            Some(res.y0_se),
                            "regression",
                            None,
                            ms,
                        ),
                        "v0" => {
                            sink.push_value(sweep_value, est, res.v0, None, "regression", None, ms)
                        }
                        "s_inf" => {
                            let (v, se) = res.s_inf;
                            sink.push_value(sweep_value, est, v, Some(se), "closed_form", None, ms);
                        }
                        "s_2" => {
                            let (v, se) = res.s_2;
                            sink.push_value(sweep_value, est, v, Some(se), "closed_form", None, ms);
                        }
                        _ => unreachable!("validated"),
                    }
                }
            }
            Err(e) => {
                let ms = start.elapsed().as_millis();
                for est in &cfg.estimators {
                    sink.push_error(sweep_value, est, &e, ms);
                }
            }
        }
    }
    Ok(sink.rows)
}

fn run_dual_curve(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (ens, basis) = make_ensemble(cfg)?;
    let f = build_generator(cfg.generator.as_ref().expect("validated"), ens.dim())?;
    let xi = build_terminal(cfg.terminal.as_ref().expect("validated"))?;
    let problem = ProblemSpec::Bsde { f, xi };
    let gammas = cfg.sweep.as_ref().expect("validated").values.clone();
    let start = Instant::now();
    let mut sink = RowSink::new(cfg);
    match dual_curve(&problem, Some(&gammas), &cfg.radii, &ens, &basis) {
        Ok(curve) => {
            let ms = start.elapsed().as_millis();
            for (i, &gamma) in gammas.iter().enumerate() {
                sink.push_value(
                    Some(gamma),
                    "dual_value",
                    curve.g_values[i],
                    Some(curve.g_se[i]),
                    "dual_curve",
                    None,
                    ms,
                );
            }
        }
        Err(e) => {
            let ms = start.elapsed().as_millis();
            for &gamma in &gammas {
                sink.push_error(Some(gamma), "dual_value", &e, ms);
            }
        }
    }
    Ok(sink.rows)
}

fn run_fd_oracle(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (ens, basis) = make_ensemble(cfg)?;
    let f = build_generator(cfg.generator.as_ref().expect("validated"), ens.dim())?;
    let xi = build_terminal(cfg.terminal.as_ref().expect("validated"))?;
    let radii = cfg.sweep.as_ref().expect("validated").values.clone();

    let start = Instant::now();
    let closed = sensitivity_linf_bsde(&f, &xi, &ens, &basis);
    let closed_ms = start.elapsed().as_millis();
    let problem = ProblemSpec::Bsde { f, xi };

    let mut sink = RowSink::new(cfg);
    for &r in &radii {
        for est in &cfg.estimators {
            match est.as_str() {
                "closed_form" => match &closed {
                    Ok(rep) => sink.push_value(
                        Some(r),
                        est,
                        rep.value,
                        Some(rep.std_error),
                        method_name(rep.method),
                        None,
                        closed_ms,
                    ),
                    Err(e) => sink.push_error(Some(r), est, e, closed_ms),
                },
                "finite_difference" => {
                    let start = Instant::now();
                    match richardson_slope(&problem, r, &ens, &basis) {
                        Ok(slope) => {
                            let rel_gap = closed.as_ref().ok().map(|rep| {
                                (slope - rep.value).abs() / rep.value.abs().max(f64::EPSILON)
                            });
                            sink.push_value(
                                Some(r),
                                est,
                                slope,
                                None,
                                "finite_difference",
                                rel_gap,
                                start.elapsed().as_millis(),
                            );
                        }
                        Err(e) => sink.push_error(Some(r), est, &e, start.elapsed().as_millis()),
                    }
                }
                _ => unreachable!("validated"),
            }
        }
    }
    Ok(sink.rows)
}

/// Format a float with 17 significant digits, enough to round-trip an `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV header shared by every experiment.
pub const CSV_HEADER: &str =
    "experiment_id,sweep_axis,sweep_value,estimator,value,std_error,method,rel_gap,error,runtime_ms,seed";

/// Render rows as an RFC 4180 CSV document with a header line.
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push_str("\r\n");
    let opt = |v: &Option<f64>| v.map_or_else(String::new, format_float);
    for r in rows {
        let fields = [
            csv_field(&r.experiment_id),
            csv_field(&r.sweep_axis),
            opt(&r.sweep_value),
            csv_field(&r.estimator),
            opt(&r.value),
            opt(&r.std_error),
            csv_field(&r.method),
            opt(&r.rel_gap),
            csv_field(r.error.as_deref().unwrap_or("")),
            r.runtime_ms.to_string(),
            r.seed.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push_str("\r\n");
    }
    out
}

/// Paths produced for one run: the CSV, the run manifest, and the optional
/// JSON mirror.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub csv: std::path::PathBuf,
    pub manifest: std::path::PathBuf,
    pub json: Option<std::path::PathBuf>,
}

/// Write the CSV, the run manifest (config hash, seed, package version), and
/// optionally a JSON mirror of the rows, into `out_dir`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    config_text: &str,
    rows: &[ResultRow],
    out_dir: &Path,
    json_mirror: bool,
) -> Result<OutputPaths> {
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("{}.csv", cfg.experiment_id));
    fs::write(&csv_path, rows_to_csv(rows))?;

    let manifest_path = out_dir.join(format!("{}.manifest.json", cfg.experiment_id));
    let manifest = serde_json::json!({
        "experiment_id": cfg.experiment_id,
        "config_sha256": hex::encode(Sha256::digest(config_text.as_bytes())),
        "seed": cfg.seed(),
        "package": {
            "name": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
        },
    });
    let manifest_body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
    fs::write(&manifest_path, manifest_body)?;

    let json_path = if json_mirror {
        let p = out_dir.join(format!("{}.json", cfg.experiment_id));
        let body = serde_json::to_string_pretty(rows)
            .map_err(|e| Error::Config(format!("serialize rows: {e}")))?;
        fs::write(&p, body)?;
        Some(p)
    } else {
        None
    };
    Ok(OutputPaths {
        csv: csv_path,
        manifest: manifest_path,
        json: json_path,
    })
}
