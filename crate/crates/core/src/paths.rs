//! Brownian ensemble simulation and measure-change weights.
//!
//! All Monte-Carlo machinery downstream consumes a [`PathEnsemble`]: a seeded,
//! bit-reproducible collection of discrete Brownian paths on a uniform grid.
//! Drift changes of measure are handled through discrete Doléans-Dade
//! exponentials with left-endpoint Itô sums.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Uniform time grid on `[0, T]` with `n_steps + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Step width `T / n_steps`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_i = i * dt`, for `i` in `0..=n_steps`.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|i| self.node(i))
    }
}

/// Build a uniform grid; `horizon` must be positive and `n_steps >= 1`.
pub fn make_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::invalid_argument(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    if n_steps == 0 {
        return Err(Error::invalid_argument("n_steps must be at least 1"));
    }
    Ok(TimeGrid { horizon, n_steps })
}

/// Read-only view of one path up to (and including) a grid node.
///
/// Coefficients, obstacles and terminal payoffs receive this view so that
/// non-Markovian functionals (running integrals, running maxima) stay
/// expressible on the discrete prefix.
#[derive(Clone, Copy)]
pub struct PathPrefix<'a> {
    values: &'a [f64],
    dim: usize,
    dt: f64,
}

impl<'a> PathPrefix<'a> {
    /// Index of the last node included in the prefix.
    pub fn step(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Path value at node `j <= step()`.
    pub fn value(&self, j: usize) -> &'a [f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// Path value at the prefix end.
    pub fn current(&self) -> &'a [f64] {
        self.value(self.step())
    }

    /// Left-endpoint Riemann sum of coordinate `coord` over the prefix,
    /// i.e. `sum_{j < step} X_j[coord] * dt`.
    pub fn running_integral(&self, coord: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.step() {
            acc += self.value(j)[coord] * self.dt;
        }
        acc
    }

    pub fn running_max(&self, coord: usize) -> f64 {
        (0..=self.step())
            .map(|j| self.value(j)[coord])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-path, per-step evaluation context handed to generators and coefficients.
pub struct StepCtx<'a> {
    pub path: usize,
    pub step: usize,
    pub t: f64,
    pub prefix: PathPrefix<'a>,
}

/// Seeded ensemble of `n_paths` discrete `d`-dimensional Brownian paths.
///
/// Per-path RNG streams make the ensemble independent of thread scheduling:
/// path `p` always consumes stream `p` of a counter-based generator.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    /// `X[p][i][k]`, flattened; `X[p][0] = 0`.
    values: Vec<f64>,
    /// `dX[p][i][k]`, flattened.
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn value(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * (self.grid.n_steps + 1) + i) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn increment(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.grid.n_steps + i) * self.dim;
        &self.increments[base..base + self.dim]
    }

    /// Prefix of path `p` up to node `i`.
    pub fn prefix(&self, p: usize, i: usize) -> PathPrefix<'_> {
        let base = p * (self.grid.n_steps + 1) * self.dim;
        PathPrefix {
            values: &self.values[base..base + (i + 1) * self.dim],
            dim: self.dim,
            dt: self.grid.dt(),
        }
    }

    /// Full path `p` as a prefix ending at `T`.
    pub fn full_path(&self, p: usize) -> PathPrefix<'_> {
        self.prefix(p, self.grid.n_steps)
    }

    pub fn ctx(&self, p: usize, i: usize) -> StepCtx<'_> {
        StepCtx {
            path: p,
            step: i,
            t: self.grid.node(i),
            prefix: self.prefix(p, i),
        }
    }
}

/// Simulate a Brownian ensemble under the Wiener measure.
///
/// Identical `(seed, grid, dim, n_paths)` produce bit-identical ensembles,
/// regardless of the rayon worker count.
pub fn simulate_brownian(
    grid: &TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if dim == 0 {
        return Err(Error::invalid_argument("dim must be at least 1"));
    }
    if n_paths == 0 {
        return Err(Error::invalid_argument("n_paths must be at least 1"));
    }
    let n = grid.n_steps;
    let sqrt_dt = grid.dt().sqrt();
    let mut increments = vec![0.0; n_paths * n * dim];
    let mut values = vec![0.0; n_paths * (n + 1) * dim];

    increments
        .par_chunks_mut(n * dim)
        .zip(values.par_chunks_mut((n + 1) * dim))
        .enumerate()
        .for_each(|(p, (inc, val))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for i in 0..n {
                for k in 0..dim {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    let d = g * sqrt_dt;
                    inc[i * dim + k] = d;
                    // left-to-right telescoping keeps X[n] == sum of increments
                    val[(i + 1) * dim + k] = val[i * dim + k] + d;
                }
            }
        });

    Ok(PathEnsemble {
        grid: grid.clone(),
        dim,
        n_paths,
        seed,
        values,
        increments,
    })
}

/// Per-path, per-step drift process `beta[p][i] in R^d`.
#[derive(Debug, Clone)]
pub struct DriftTrack {
    dim: usize,
    n_paths: usize,
    n_steps: usize,
    data: Vec<f64>,
}

impl DriftTrack {
    pub fn from_vec(dim: usize, n_paths: usize, n_steps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * n_paths * n_steps {
            return Err(Error::invalid_argument("drift track length mismatch"));
        }
        Ok(DriftTrack {
            dim,
            n_paths,
            n_steps,
            data,
        })
    }

    pub fn constant(b: &[f64], n_paths: usize, n_steps: usize) -> Self {
        let dim = b.len();
        let mut data = Vec::with_capacity(dim * n_paths * n_steps);
        for _ in 0..n_paths * n_steps {
            data.extend_from_slice(b);
        }
        DriftTrack {
            dim,
            n_paths,
            n_steps,
            data,
        }
    }

    pub fn zero(dim: usize, n_paths: usize, n_steps: usize) -> Self {
        DriftTrack {
            dim,
            n_paths,
            n_steps,
            data: vec![0.0; dim * n_paths * n_steps],
        }
    }

    pub fn at(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.n_steps + i) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn negated(&self) -> Self {
        DriftTrack {
            dim: self.dim,
            n_paths: self.n_paths,
            n_steps: self.n_steps,
            data: self.data.iter().map(|x| -x).collect(),
        }
    }

    /// Largest Euclidean norm over all `(p, i)`.
    pub fn max_norm(&self) -> f64 {
        let d = self.dim;
        self.data
            .chunks(d)
            .map(|b| b.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Per-path positive weights of a drift change of measure.
#[derive(Debug, Clone)]
pub struct MeasureWeights {
    pub weights: Vec<f64>,
    pub description: String,
}

/// Discrete Doléans-Dade exponential of `beta` over grid span `[i, j]`:
/// `exp(sum_k beta_k . dX_k - 1/2 sum_k |beta_k|^2 dt)`, left-endpoint sums.
pub fn stochastic_exponential(
    beta: &DriftTrack,
    ens: &PathEnsemble,
    span: (usize, usize),
) -> Result<Vec<f64>> {
    let (lo, hi) = span;
    let n = ens.grid.n_steps;
    if lo > hi || hi > n {
        return Err(Error::invalid_argument(format!(
            "span ({lo}, {hi}) out of range for {n} steps"
        )));
    }
    if beta.dim != ens.dim || beta.n_paths != ens.n_paths || beta.n_steps < hi {
        return Err(Error::invalid_argument("drift track does not cover span"));
    }
    let dt = ens.grid.dt();
    let out: Vec<f64> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut exponent = 0.0;
            for i in lo..hi {
                let b = beta.at(p, i);
                let dx = ens.increment(p, i);
                let mut dot = 0.0;
                let mut nsq = 0.0;
                for k in 0..ens.dim {
                    dot += b[k] * dx[k];
                    nsq += b[k] * b[k];
                }
                exponent += dot - 0.5 * nsq * dt;
            }
            exponent.exp()
        })
        .collect();
    Ok(out)
}

/// Mean and standard error of `sum / n`, computed over fixed-size blocks in
/// index order so the result is independent of the worker count.
pub fn mean_with_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let block = 4096;
    let partials: Vec<(f64, f64)> = samples
        .par_chunks(block)
        .map(|c| {
            let (mut s, mut s2) = (0.0, 0.0);
            for &x in c {
                s += x;
                s2 += x * x;
            }
            (s, s2)
        })
        .collect();
    let (sum, sum2) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), &(s, s2)| (a + s, b + s2));
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    let se = if n > 1.0 { (var / n).sqrt() } else { 0.0 };
    (mean, se)
}

/// `E^beta[payoff] = E^0[ E(-int beta . dX) payoff ]` with its standard error.
pub fn expectation_under(
    beta: &DriftTrack,
    ens: &PathEnsemble,
    payoff: &[f64],
) -> Result<(f64, f64)> {
    if payoff.len() != ens.n_paths {
        return Err(Error::invalid_argument("payoff length != n_paths"));
    }
    if let Some(p) = payoff.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericFailure {
            context: "non-finite payoff".into(),
            path: Some(p),
        });
    }
    let weights = stochastic_exponential(&beta.negated(), ens, (0, ens.grid.n_steps))?;
    let weighted: Vec<f64> = weights
        .iter()
        .zip(payoff)
        .map(|(w, x)| w * x)
        .collect();
    Ok(mean_with_se(&weighted))
}
