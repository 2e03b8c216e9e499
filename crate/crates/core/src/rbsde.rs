//! Reflected BSDE solver with an upper obstacle: the solution satisfies
//! `Y <= xi`, a nondecreasing compensator `K` pushes `Y` down onto the
//! obstacle, and the first contact index is the discrete optimal stopping
//! rule.
//!
//! The recursion mirrors the plain solver exactly: the continuation value is
//! the regression estimate plus the driver step, then projected onto the
//! obstacle. When the obstacle never binds the two solvers produce
//! bit-identical `Y`, which downstream reductions rely on.

use std::sync::Arc;

use rayon::prelude::*;

use crate::basis::{fit_step, BasisSpec, StepFit};
use crate::bsde::{IntegrabilityTag, SolverOptions};
use crate::error::{Error, Result};
use crate::generators::{GeneratorSpec, PathwiseSolution};
use crate::paths::{mean_with_se, PathEnsemble, StepCtx};

type ObstacleFn = Arc<dyn Fn(&StepCtx) -> f64 + Send + Sync>;

/// Upper obstacle process, evaluated per grid node on the path prefix.
#[derive(Clone)]
pub struct ObstacleSpec {
    pub value: ObstacleFn,
    /// Terminal payoff when it differs from the obstacle limit; the terminal
    /// layer may sit strictly below the running obstacle.
    pub terminal: Option<ObstacleFn>,
    pub integrability: IntegrabilityTag,
}

impl ObstacleSpec {
    pub fn new(value: ObstacleFn, integrability: IntegrabilityTag) -> Self {
        ObstacleSpec {
            value,
            terminal: None,
            integrability,
        }
    }

    pub fn with_terminal(mut self, terminal: ObstacleFn) -> Self {
        self.terminal = Some(terminal);
        self
    }

    pub fn flat(c: f64) -> Self {
        ObstacleSpec {
            value: Arc::new(move |_| c),
            terminal: None,
            integrability: IntegrabilityTag::Bounded(c.abs()),
        }
    }

    /// Markovian obstacle `g(t, x)` of the current 1-D value.
    pub fn markovian(
        g: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
        integrability: IntegrabilityTag,
    ) -> Self {
        ObstacleSpec {
            value: Arc::new(move |ctx| g(ctx.t, ctx.prefix.current()[0])),
            terminal: None,
            integrability,
        }
    }

    fn terminal_value(&self, ctx: &StepCtx) -> f64 {
        match &self.terminal {
            Some(t) => t(ctx),
            None => (self.value)(ctx),
        }
    }
}

/// Solved reflected BSDE.
pub struct RbsdeSolution {
    n_steps: usize,
    dim: usize,
    n_paths: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// Cumulative compensator per node: `K[p][i]` sums the projection
    /// residuals of nodes `j < i`, so `K[p][0] = 0`.
    k: Vec<f64>,
    /// Obstacle values per node (terminal override applied at `n`).
    obstacle: Vec<f64>,
    /// First node where the obstacle gap falls below the hit tolerance.
    pub hit: Vec<usize>,
    /// Per-node tolerance used for hit detection.
    pub hit_tol: Vec<f64>,
    pub y0: f64,
    pub y0_se: f64,
    pub fits: Vec<Option<StepFit>>,
}

impl RbsdeSolution {
    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.y[p * (self.n_steps + 1) + i]
    }

    pub fn z(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * (self.n_steps + 1) + i) * self.dim;
        &self.z[base..base + self.dim]
    }

    pub fn k(&self, p: usize, i: usize) -> f64 {
        self.k[p * (self.n_steps + 1) + i]
    }

    pub fn obstacle(&self, p: usize, i: usize) -> f64 {
        self.obstacle[p * (self.n_steps + 1) + i]
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

impl PathwiseSolution for RbsdeSolution {
    fn y(&self, p: usize, i: usize) -> f64 {
        RbsdeSolution::y(self, p, i)
    }
    fn z(&self, p: usize, i: usize) -> &[f64] {
        RbsdeSolution::z(self, p, i)
    }
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn n_steps(&self) -> usize {
        self.n_steps
    }
}

pub fn solve_rbsde(
    f: &GeneratorSpec,
    obstacle: &ObstacleSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<RbsdeSolution> {
    solve_rbsde_with(f, obstacle, ens, basis, SolverOptions::default())
}

pub fn solve_rbsde_with(
    f: &GeneratorSpec,
    obstacle: &ObstacleSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
    opts: SolverOptions,
) -> Result<RbsdeSolution> {
    let n = ens.grid().n_steps();
    let d = ens.dim();
    let n_paths = ens.n_paths();
    let dt = ens.grid().dt();

    let mut y = vec![0.0; n_paths * (n + 1)];
    let mut z = vec![0.0; n_paths * (n + 1) * d];
    // projection residual per node; folded into the cumulative K at the end
    let mut dk = vec![0.0; n_paths * (n + 1)];
    let mut fits: Vec<Option<StepFit>> = (0..n).map(|_| None).collect();

    let obs: Vec<f64> = (0..n_paths * (n + 1))
        .into_par_iter()
        .map(|idx| {
            let (p, i) = (idx / (n + 1), idx % (n + 1));
            let ctx = ens.ctx(p, i);
            if i == n {
                obstacle.terminal_value(&ctx)
            } else {
                (obstacle.value)(&ctx)
            }
        })
        .collect();
    if let Some(idx) = obs.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericFailure {
            context: "non-finite obstacle value".into(),
            path: Some(idx / (n + 1)),
        });
    }

    for p in 0..n_paths {
        y[p * (n + 1) + n] = obs[p * (n + 1) + n];
    }

    for i in (0..n).rev() {
        let states: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| (basis.state)(&ens.prefix(p, i)))
            .collect();
        let next_y: Vec<f64> = (0..n_paths).map(|p| y[p * (n + 1) + i + 1]).collect();
        let mut targets: Vec<Vec<f64>> = Vec::with_capacity(1 + d);
        targets.push(next_y);
        for k in 0..d {
            targets.push(
                (0..n_paths)
                    .map(|p| y[p * (n + 1) + i + 1] * ens.increment(p, i)[k])
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

        let updates: Vec<(f64, f64, Vec<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut zi = vec![0.0; d];
                for k in 0..d {
                    zi[k] = preds[1 + k][p] / dt;
                }
                let ctx = ens.ctx(p, i);
                let ytilde = preds[0][p];
                let mut cont = ytilde + dt * f.evaluate(&ctx, ytilde, &zi);
                for _ in 0..opts.extra_picard_sweeps {
                    cont = ytilde + dt * f.evaluate(&ctx, cont, &zi);
                }
                let xi = obs[p * (n + 1) + i];
                let yi = cont.min(xi);
                (yi, cont - yi, zi)
            })
            .collect();
        for (p, (yi, dki, zi)) in updates.into_iter().enumerate() {
            if !yi.is_finite() || zi.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFailure {
                    context: format!("non-finite solver state at step {i}"),
                    path: Some(p),
                });
            }
            y[p * (n + 1) + i] = yi;
            dk[p * (n + 1) + i] = dki;
            z[(p * (n + 1) + i) * d..(p * (n + 1) + i + 1) * d].copy_from_slice(&zi);
        }
    }

    // hit tolerance blends a floor with the cross-sectional noise scale of
    // the obstacle gap, so detection survives regression noise
    let mut hit_tol = vec![0.0; n + 1];
    for (i, tol) in hit_tol.iter_mut().enumerate() {
        let gaps: Vec<f64> = (0..n_paths)
            .map(|p| obs[p * (n + 1) + i] - y[p * (n + 1) + i])
            .collect();
        let (_, se) = mean_with_se(&gaps);
        let std = se * (n_paths as f64).sqrt();
        *tol = 1e-8 + 1e-3 * std;
    }
    let hit: Vec<usize> = (0..n_paths)
        .map(|p| {
            (0..=n)
                .find(|&i| obs[p * (n + 1) + i] - y[p * (n + 1) + i] <= hit_tol[i])
                .unwrap_or(n)
        })
        .collect();

    let mut k = vec![0.0; n_paths * (n + 1)];
    for p in 0..n_paths {
        for i in 1..=n {
            k[p * (n + 1) + i] = k[p * (n + 1) + i - 1] + dk[p * (n + 1) + i - 1];
        }
    }

    let y0_col: Vec<f64> = (0..n_paths).map(|p| y[p * (n + 1)]).collect();
    let y0 = mean_with_se(&y0_col).0;
    let y1_col: Vec<f64> = (0..n_paths).map(|p| y[p * (n + 1) + 1]).collect();
    let y0_se = mean_with_se(&y1_col).1;

    Ok(RbsdeSolution {
        n_steps: n,
        dim: d,
        n_paths,
        y,
        z,
        k,
        obstacle: obs,
        hit,
        hit_tol,
        y0,
        y0_se,
        fits,
    })
}

/// Per-path first contact indices and their empirical distribution over grid
/// nodes.
pub fn hitting_time(sol: &RbsdeSolution) -> (&[usize], Vec<usize>) {
    let mut counts = vec![0usize; sol.n_steps + 1];
    for &h in &sol.hit {
        counts[h] += 1;
    }
    (&sol.hit, counts)
}
