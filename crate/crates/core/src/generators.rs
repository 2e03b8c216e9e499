//! BSDE drivers: plain generators with derivatives, controlled-coefficient
//! Hamiltonians, and the robustified drivers `f + r|z|` and `f + gamma|z|^2`.
//!
//! Every generator is a pure function of `(t, path prefix, y, z)`; evaluations
//! carry no hidden state so they can run concurrently across paths.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::{DriftTrack, PathEnsemble, StepCtx};

type ScalarFn = Arc<dyn Fn(&StepCtx, f64, &[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&StepCtx, f64, &[f64], &mut [f64]) + Send + Sync>;

/// A BSDE driver `f(t, omega, y, z)` with its partial derivatives.
#[derive(Clone)]
pub struct GeneratorSpec {
    eval: ScalarFn,
    dy: ScalarFn,
    dz: GradFn,
    /// Declared Lipschitz bound in `(y, z)`, metadata only.
    pub lipschitz_bound: Option<f64>,
    /// True when the driver has a kink at `z = 0` (subgradient taken as 0).
    pub kink_at_zero: bool,
}

impl GeneratorSpec {
    pub fn from_parts(eval: ScalarFn, dy: ScalarFn, dz: GradFn) -> Self {
        GeneratorSpec {
            eval,
            dy,
            dz,
            lipschitz_bound: None,
            kink_at_zero: false,
        }
    }

    /// The trivial driver `f = 0`.
    pub fn zero() -> Self {
        GeneratorSpec {
            eval: Arc::new(|_, _, _| 0.0),
            dy: Arc::new(|_, _, _| 0.0),
            dz: Arc::new(|_, _, _, out| out.fill(0.0)),
            lipschitz_bound: Some(0.0),
            kink_at_zero: false,
        }
    }

    /// Linear driver `f(y, z) = a y + b . z`.
    pub fn linear(a: f64, b: Vec<f64>) -> Self {
        let b_eval = b.clone();
        let b_grad = b.clone();
        let lip = (a * a + b.iter().map(|x| x * x).sum::<f64>()).sqrt();
        GeneratorSpec {
            eval: Arc::new(move |_, y, z| {
                a * y + b_eval.iter().zip(z).map(|(bk, zk)| bk * zk).sum::<f64>()
            }),
            dy: Arc::new(move |_, _, _| a),
            dz: Arc::new(move |_, _, _, out| out.copy_from_slice(&b_grad)),
            lipschitz_bound: Some(lip),
            kink_at_zero: false,
        }
    }

    pub fn evaluate(&self, ctx: &StepCtx, y: f64, z: &[f64]) -> f64 {
        (self.eval)(ctx, y, z)
    }

    pub fn d_y(&self, ctx: &StepCtx, y: f64, z: &[f64]) -> f64 {
        (self.dy)(ctx, y, z)
    }

    pub fn d_z(&self, ctx: &StepCtx, y: f64, z: &[f64], out: &mut [f64]) {
        (self.dz)(ctx, y, z, out)
    }

    pub fn d_z_vec(&self, ctx: &StepCtx, y: f64, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.d_z(ctx, y, z, &mut out);
        out
    }

    /// Flip the optimization direction: a supremum problem over `(f, xi)` is
    /// the negated infimum problem over `(f_hat, -xi)` with
    /// `f_hat(y, z) = -f(-y, -z)`.
    pub fn negated_arguments(&self) -> Self {
        let eval = self.eval.clone();
        let dy = self.dy.clone();
        let dz = self.dz.clone();
        GeneratorSpec {
            eval: Arc::new(move |ctx, y, z| {
                let nz: Vec<f64> = z.iter().map(|x| -x).collect();
                -eval(ctx, -y, &nz)
            }),
            dy: Arc::new(move |ctx, y, z| {
                let nz: Vec<f64> = z.iter().map(|x| -x).collect();
                dy(ctx, -y, &nz)
            }),
            dz: Arc::new(move |ctx, y, z, out| {
                let nz: Vec<f64> = z.iter().map(|x| -x).collect();
                dz(ctx, -y, &nz, out);
            }),
            lipschitz_bound: self.lipschitz_bound,
            kink_at_zero: self.kink_at_zero,
        }
    }
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Steps where `|z|` falls below this threshold contribute zero to `|z|`
/// gradients and to `|Z|` integrands, matching the subgradient convention.
pub const KINK_TOL: f64 = 1e-12;

/// Worst-case-drift robustification: `F^r(y, z) = f(y, z) + r |z|`.
pub fn robustify(f: &GeneratorSpec, r: f64) -> Result<GeneratorSpec> {
    if !(r >= 0.0) {
        return Err(Error::invalid_argument(format!("radius must be >= 0, got {r}")));
    }
    if r == 0.0 {
        return Ok(f.clone());
    }
    let eval = f.eval.clone();
    let dy = f.dy.clone();
    let dz = f.dz.clone();
    Ok(GeneratorSpec {
        eval: Arc::new(move |ctx, y, z| eval(ctx, y, z) + r * norm(z)),
        dy,
        dz: Arc::new(move |ctx, y, z, out| {
            dz(ctx, y, z, out);
            let n = norm(z);
            if n >= KINK_TOL {
                for (o, zk) in out.iter_mut().zip(z) {
                    *o += r * zk / n;
                }
            }
        }),
        lipschitz_bound: f.lipschitz_bound.map(|l| l + r),
        kink_at_zero: true,
    })
}

/// Quadratic robustification: `F_hat^gamma(y, z) = f(y, z) + gamma |z|^2`.
pub fn quadratic_robustify(f: &GeneratorSpec, gamma: f64) -> Result<GeneratorSpec> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid_argument(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(f.clone());
    }
    let eval = f.eval.clone();
    let dy = f.dy.clone();
    let dz = f.dz.clone();
    Ok(GeneratorSpec {
        eval: Arc::new(move |ctx, y, z| {
            eval(ctx, y, z) + gamma * z.iter().map(|x| x * x).sum::<f64>()
        }),
        dy,
        dz: Arc::new(move |ctx, y, z, out| {
            dz(ctx, y, z, out);
            for (o, zk) in out.iter_mut().zip(z) {
                *o += 2.0 * gamma * zk;
            }
        }),
        lipschitz_bound: None,
        kink_at_zero: f.kink_at_zero,
    })
}

/// Admissible action set for a controlled problem.
#[derive(Clone)]
pub enum ActionSet {
    Finite(Vec<Vec<f64>>),
    /// Axis-aligned box, minimized by grid search at `resolution` points per
    /// axis when no analytic minimizer is supplied.
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: usize,
    },
}

impl ActionSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        ActionSet::Box {
            lo: vec![lo],
            hi: vec![hi],
            resolution: 101,
        }
    }

    /// Enumerate the actions minimization runs over: the listed points for a
    /// finite set, the cartesian grid for a box.
    fn enumerate(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            ActionSet::Finite(actions) => {
                if actions.is_empty() {
                    return Err(Error::invalid_argument("action set is empty"));
                }
                Ok(actions.clone())
            }
            ActionSet::Box { lo, hi, resolution } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::invalid_argument("malformed box action set"));
                }
                if *resolution < 2 {
                    return Err(Error::invalid_argument(
                        "box action set needs resolution >= 2",
                    ));
                }
                let dim = lo.len();
                let mut grid = vec![Vec::new()];
                for k in 0..dim {
                    let mut next = Vec::with_capacity(grid.len() * resolution);
                    for base in &grid {
                        for j in 0..*resolution {
                            let x = lo[k]
                                + (hi[k] - lo[k]) * j as f64 / (*resolution - 1) as f64;
                            let mut a = base.clone();
                            a.push(x);
                            next.push(a);
                        }
                    }
                    grid = next;
                }
                Ok(grid)
            }
        }
    }
}

type CoeffScalar = Arc<dyn Fn(&StepCtx, &[f64]) -> f64 + Send + Sync>;
type CoeffVector = Arc<dyn Fn(&StepCtx, &[f64], &mut [f64]) + Send + Sync>;
type ArgminFn = Arc<dyn Fn(&StepCtx, f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Coefficients of a controlled problem: discount rate `k`, running reward
/// `l`, drift `lambda`, over an action set.
#[derive(Clone)]
pub struct ControlledCoefficients {
    pub actions: ActionSet,
    pub discount_rate: CoeffScalar,
    pub running_reward: CoeffScalar,
    pub drift: CoeffVector,
    /// State dimension (length of `z` and of drift values).
    pub dim: usize,
    /// Optional analytic minimizer of `l - k y - lambda . z`, with its
    /// derivatives in `y` and `z` when the control expansion is wanted.
    pub argmin: Option<ArgminFn>,
    pub argmin_dy: Option<ArgminFn>,
    /// Jacobian rows concatenated: entry `m * dim + j` is `d alpha_m / d z_j`.
    pub argmin_dz: Option<ArgminFn>,
    /// When set, the hard minimum is replaced by a softmin at this
    /// temperature, which smooths the Hamiltonian and its argmin.
    pub softmin_temperature: Option<f64>,
    /// Declared bounds on `|k|` and `|lambda|`, scanned by the sensitivity
    /// estimators.
    pub k_bound: Option<f64>,
    pub lambda_bound: Option<f64>,
}

impl ControlledCoefficients {
    /// A degenerate one-action problem: `f(y, z) = l - k y - lambda . z` with
    /// constant coefficients.
    pub fn singleton(k: f64, l: f64, lambda: Vec<f64>) -> Self {
        let dim = lambda.len();
        let action = vec![0.0];
        ControlledCoefficients {
            actions: ActionSet::Finite(vec![action.clone()]),
            discount_rate: Arc::new(move |_, _| k),
            running_reward: Arc::new(move |_, _| l),
            drift: Arc::new(move |_, _, out| out.copy_from_slice(&lambda)),
            dim,
            argmin: Some(Arc::new(move |_, _, _| action.clone())),
            // the single action never moves, so its derivatives vanish
            argmin_dy: Some(Arc::new(|_, _, _| vec![0.0])),
            argmin_dz: Some(Arc::new(move |_, _, _| vec![0.0; dim])),
            softmin_temperature: None,
            k_bound: Some(k.abs()),
            lambda_bound: None,
        }
    }

    /// 1-D drift control `lambda(a) = a` over `[lo, hi]`, `k = l = 0`.
    pub fn interval_drift(lo: f64, hi: f64) -> Self {
        ControlledCoefficients {
            actions: ActionSet::interval(lo, hi),
            discount_rate: Arc::new(|_, _| 0.0),
            running_reward: Arc::new(|_, _| 0.0),
            drift: Arc::new(|_, a, out| out.copy_from_slice(a)),
            dim: 1,
            argmin: None,
            argmin_dy: None,
            argmin_dz: None,
            softmin_temperature: None,
            k_bound: Some(0.0),
            lambda_bound: Some(lo.abs().max(hi.abs())),
        }
    }

    fn objective(&self, ctx: &StepCtx, a: &[f64], y: f64, z: &[f64]) -> f64 {
        let mut lam = vec![0.0; self.dim];
        (self.drift)(ctx, a, &mut lam);
        (self.running_reward)(ctx, a)
            - (self.discount_rate)(ctx, a) * y
            - lam.iter().zip(z).map(|(l, zk)| l * zk).sum::<f64>()
    }

    /// Index of the minimizing action among `actions`, lowest index on ties.
    fn argmin_index(
        &self,
        ctx: &StepCtx,
        actions: &[Vec<f64>],
        y: f64,
        z: &[f64],
        scratch: &mut [f64],
    ) -> usize {
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for (idx, a) in actions.iter().enumerate() {
            (self.drift)(ctx, a, scratch);
            let v = (self.running_reward)(ctx, a)
                - (self.discount_rate)(ctx, a) * y
                - scratch.iter().zip(z).map(|(l, zk)| l * zk).sum::<f64>();
            if v < best_val {
                best_val = v;
                best = idx;
            }
        }
        best
    }

    /// Hard argmin over the enumerated actions, lowest index on ties, unless
    /// an analytic minimizer was supplied.
    pub fn argmin_action(&self, ctx: &StepCtx, y: f64, z: &[f64]) -> Result<Vec<f64>> {
        if let Some(am) = &self.argmin {
            return Ok(am(ctx, y, z));
        }
        let actions = self.actions.enumerate()?;
        let mut scratch = vec![0.0; self.dim];
        let best = self.argmin_index(ctx, &actions, y, z, &mut scratch);
        Ok(actions[best].clone())
    }

    /// Softmin argmin with its derivatives in `y` and `z`, available when a
    /// smoothing temperature is set.
    pub fn smooth_argmin(&self, ctx: &StepCtx, y: f64, z: &[f64]) -> Result<SmoothArgmin> {
        let tau = self.softmin_temperature.ok_or_else(|| {
            Error::InvalidState("smooth_argmin requires a softmin temperature".into())
        })?;
        let actions = self.actions.enumerate()?;
        let stats = self.softmin_stats(ctx, &actions, tau, y, z);
        Ok(stats.argmin(&actions, tau, self.dim))
    }

    fn softmin_stats(
        &self,
        ctx: &StepCtx,
        actions: &[Vec<f64>],
        tau: f64,
        y: f64,
        z: &[f64],
    ) -> SoftminStats {
        let vals: Vec<f64> = actions
            .iter()
            .map(|a| self.objective(ctx, a, y, z))
            .collect();
        let m = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = vals.iter().map(|v| (-(v - m) / tau).exp()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let value = m - tau * (total / actions.len() as f64).ln()
            - tau * (actions.len() as f64).ln();
        // the two log terms recombine to m - tau ln(sum); kept split to avoid
        // overflow when the action count is large
        let mut ks = Vec::with_capacity(actions.len());
        let mut lams = Vec::with_capacity(actions.len());
        for a in actions {
            ks.push((self.discount_rate)(ctx, a));
            let mut lam = vec![0.0; self.dim];
            (self.drift)(ctx, a, &mut lam);
            lams.push(lam);
        }
        SoftminStats {
            value,
            weights,
            ks,
            lams,
        }
    }
}

struct SoftminStats {
    value: f64,
    weights: Vec<f64>,
    ks: Vec<f64>,
    lams: Vec<Vec<f64>>,
}

impl SoftminStats {
    fn mean_k(&self) -> f64 {
        self.weights.iter().zip(&self.ks).map(|(w, k)| w * k).sum()
    }

    fn mean_lam(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (w, lam) in self.weights.iter().zip(&self.lams) {
            for (o, l) in out.iter_mut().zip(lam) {
                *o += w * l;
            }
        }
        out
    }

    fn argmin(&self, actions: &[Vec<f64>], tau: f64, dim: usize) -> SmoothArgmin {
        let a_dim = actions[0].len();
        let mut alpha = vec![0.0; a_dim];
        for (w, a) in self.weights.iter().zip(actions) {
            for (o, x) in alpha.iter_mut().zip(a) {
                *o += w * x;
            }
        }
        // the objective derivatives are d_y = -k_a, d_z_j = -lambda_a[j], so
        // the weight derivatives produce covariances divided by tau
        let mean_k = self.mean_k();
        let mean_lam = self.mean_lam(dim);
        let mut d_y = vec![0.0; a_dim];
        let mut d_z = vec![0.0; a_dim * dim];
        for ((w, a), (k, lam)) in self
            .weights
            .iter()
            .zip(actions)
            .zip(self.ks.iter().zip(&self.lams))
        {
            for m in 0..a_dim {
                let da = a[m] - alpha[m];
                d_y[m] += w * da * (k - mean_k) / tau;
                for j in 0..dim {
                    d_z[m * dim + j] += w * da * (lam[j] - mean_lam[j]) / tau;
                }
            }
        }
        SmoothArgmin { alpha, d_y, d_z }
    }
}

/// Softmin argmin value with its `y` and `z` derivatives.
#[derive(Debug, Clone)]
pub struct SmoothArgmin {
    pub alpha: Vec<f64>,
    /// `d alpha_m / d y`.
    pub d_y: Vec<f64>,
    /// `d alpha_m / d z_j` at index `m * dim + j`.
    pub d_z: Vec<f64>,
}

/// Build the Hamiltonian driver `f(y, z) = inf_a { l - k y - lambda . z }`.
///
/// With an analytic minimizer the infimum is evaluated there; otherwise the
/// enumerated action set is searched. With a softmin temperature the hard
/// minimum is smoothed. The derivatives come from the envelope theorem:
/// `d_y f = -k(alpha*)`, `d_z f = -lambda(alpha*)`.
pub fn hamiltonian(coeffs: &ControlledCoefficients) -> Result<GeneratorSpec> {
    let actions = coeffs.actions.enumerate()?;
    let dim = coeffs.dim;

    if let Some(tau) = coeffs.softmin_temperature {
        if !(tau > 0.0) {
            return Err(Error::invalid_argument("softmin temperature must be > 0"));
        }
        let c_eval = coeffs.clone();
        let c_dy = coeffs.clone();
        let c_dz = coeffs.clone();
        let a_eval = actions.clone();
        let a_dy = actions.clone();
        let a_dz = actions;
        return Ok(GeneratorSpec {
            eval: Arc::new(move |ctx, y, z| c_eval.softmin_stats(ctx, &a_eval, tau, y, z).value),
            dy: Arc::new(move |ctx, y, z| -c_dy.softmin_stats(ctx, &a_dy, tau, y, z).mean_k()),
            dz: Arc::new(move |ctx, y, z, out| {
                let lam = c_dz.softmin_stats(ctx, &a_dz, tau, y, z).mean_lam(dim);
                for (o, l) in out.iter_mut().zip(&lam) {
                    *o = -l;
                }
            }),
            lipschitz_bound: None,
            kink_at_zero: false,
        });
    }

    let c_eval = coeffs.clone();
    let c_dy = coeffs.clone();
    let c_dz = coeffs.clone();
    let a_eval = Arc::new(actions);
    let a_dy = a_eval.clone();
    let a_dz = a_eval.clone();
    let kink = matches!(coeffs.actions, ActionSet::Box { .. })
        || matches!(&coeffs.actions, ActionSet::Finite(a) if a.len() > 1);
    Ok(GeneratorSpec {
        eval: Arc::new(move |ctx, y, z| {
            let mut scratch = vec![0.0; dim];
            let owned;
            let a: &[f64] = match &c_eval.argmin {
                Some(am) => {
                    owned = am(ctx, y, z);
                    &owned
                }
                None => &a_eval[c_eval.argmin_index(ctx, &a_eval, y, z, &mut scratch)],
            };
            c_eval.objective(ctx, a, y, z)
        }),
        dy: Arc::new(move |ctx, y, z| {
            let mut scratch = vec![0.0; dim];
            let owned;
            let a: &[f64] = match &c_dy.argmin {
                Some(am) => {
                    owned = am(ctx, y, z);
                    &owned
                }
                None => &a_dy[c_dy.argmin_index(ctx, &a_dy, y, z, &mut scratch)],
            };
            -(c_dy.discount_rate)(ctx, a)
        }),
        dz: Arc::new(move |ctx, y, z, out| {
            let mut scratch = vec![0.0; dim];
            let owned;
            let a: &[f64] = match &c_dz.argmin {
                Some(am) => {
                    owned = am(ctx, y, z);
                    &owned
                }
                None => &a_dz[c_dz.argmin_index(ctx, &a_dz, y, z, &mut scratch)],
            };
            (c_dz.drift)(ctx, a, out);
            for o in out.iter_mut() {
                *o = -*o;
            }
        }),
        lipschitz_bound: None,
        kink_at_zero: kink,
    })
}

/// Read-only view of a solved (reflected or plain) BSDE, just enough for
/// coefficient extraction and sensitivity weighting.
pub trait PathwiseSolution {
    fn y(&self, p: usize, i: usize) -> f64;
    fn z(&self, p: usize, i: usize) -> &[f64];
    fn n_paths(&self) -> usize;
    fn n_steps(&self) -> usize;
}

/// Optimally-controlled drift, discount rate, and discount factor along a
/// solution: `lambda* = -d_z f(Y, Z)`, `k* = -d_y f(Y, Z)`,
/// `K*_i = exp(-sum_{j<i} k*_j dt)`.
#[derive(Debug, Clone)]
pub struct OptimalCoefficientTrack {
    pub lambda: DriftTrack,
    k: Vec<f64>,
    discount: Vec<f64>,
    n_steps: usize,
}

impl OptimalCoefficientTrack {
    /// `k*[p][i]`, per step `i < n_steps`.
    pub fn k_at(&self, p: usize, i: usize) -> f64 {
        self.k[p * self.n_steps + i]
    }

    /// `K*[p][i]`, per node `i <= n_steps`; `K*[p][0] = 1`.
    pub fn discount_at(&self, p: usize, i: usize) -> f64 {
        self.discount[p * (self.n_steps + 1) + i]
    }
}

pub fn optimal_coefficients(
    f: &GeneratorSpec,
    ens: &PathEnsemble,
    sol: &dyn PathwiseSolution,
) -> Result<OptimalCoefficientTrack> {
    let n = ens.grid().n_steps();
    let n_paths = ens.n_paths();
    let dim = ens.dim();
    if sol.n_paths() != n_paths || sol.n_steps() != n {
        return Err(Error::InvalidState(
            "solution does not match the ensemble".into(),
        ));
    }
    let dt = ens.grid().dt();
    let mut k = vec![0.0; n_paths * n];
    let mut lam = vec![0.0; n_paths * n * dim];
    let mut discount = vec![0.0; n_paths * (n + 1)];
    for p in 0..n_paths {
        discount[p * (n + 1)] = 1.0;
        let mut acc = 0.0;
        for i in 0..n {
            let ctx = ens.ctx(p, i);
            let y = sol.y(p, i);
            let z = sol.z(p, i);
            if !y.is_finite() || z.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidState(format!(
                    "solution has non-finite values at path {p}, step {i}"
                )));
            }
            let ks = -f.d_y(&ctx, y, z);
            k[p * n + i] = ks;
            f.d_z(&ctx, y, z, &mut lam[(p * n + i) * dim..(p * n + i + 1) * dim]);
            for x in &mut lam[(p * n + i) * dim..(p * n + i + 1) * dim] {
                *x = -*x;
            }
            acc += ks * dt;
            discount[p * (n + 1) + i + 1] = (-acc).exp();
        }
    }
    Ok(OptimalCoefficientTrack {
        lambda: DriftTrack::from_vec(dim, n_paths, n, lam)?,
        k,
        discount,
        n_steps: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{make_grid, simulate_brownian};

    fn tiny_ensemble(dim: usize) -> PathEnsemble {
        let g = make_grid(1.0, 4).unwrap();
        simulate_brownian(&g, dim, 2, 99).unwrap()
    }

    struct FakeSolution {
        y: Vec<f64>,
        z: Vec<f64>,
        dim: usize,
        n_steps: usize,
    }

    impl FakeSolution {
        fn constant(y: f64, z: &[f64], n_paths: usize, n_steps: usize) -> Self {
            let dim = z.len();
            FakeSolution {
                y: vec![y; n_paths * (n_steps + 1)],
                z: z.repeat(n_paths * (n_steps + 1)),
                dim,
                n_steps,
            }
        }
    }

    impl PathwiseSolution for FakeSolution {
        fn y(&self, p: usize, i: usize) -> f64 {
            self.y[p * (self.n_steps + 1) + i]
        }
        fn z(&self, p: usize, i: usize) -> &[f64] {
            let base = (p * (self.n_steps + 1) + i) * self.dim;
            &self.z[base..base + self.dim]
        }
        fn n_paths(&self) -> usize {
            self.y.len() / (self.n_steps + 1)
        }
        fn n_steps(&self) -> usize {
            self.n_steps
        }
    }

    #[test]
    fn linear_generator_values() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(0, 1);
        let f = GeneratorSpec::linear(-0.5, vec![1.0, 2.0]);
        assert_eq!(f.evaluate(&ctx, 2.0, &[1.0, 1.0]), -1.0 + 3.0);
        assert_eq!(f.d_y(&ctx, 0.0, &[0.0, 0.0]), -0.5);
        assert_eq!(f.d_z_vec(&ctx, 0.0, &[0.0, 0.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn robustify_identity_at_zero() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(0, 0);
        let f = GeneratorSpec::linear(0.3, vec![0.1, 0.2]);
        let g = robustify(&f, 0.0).unwrap();
        let z = [0.4, -0.7];
        assert_eq!(f.evaluate(&ctx, 1.2, &z), g.evaluate(&ctx, 1.2, &z));
    }

    #[test]
    fn robustify_adds_norm() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(0, 0);
        let g = robustify(&GeneratorSpec::zero(), 1.0).unwrap();
        assert_eq!(g.evaluate(&ctx, 0.0, &[3.0, 4.0]), 5.0);
    }

    #[test]
    fn robustify_subgradient_at_kink() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(0, 0);
        let g = robustify(&GeneratorSpec::zero(), 2.0).unwrap();
        assert_eq!(g.evaluate(&ctx, 0.0, &[0.0, 0.0]), 0.0);
        assert_eq!(g.d_z_vec(&ctx, 0.0, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert!(g.kink_at_zero);
    }

    #[test]
    fn robustify_rejects_negative_radius() {
        assert!(robustify(&GeneratorSpec::zero(), -0.1).is_err());
    }

    #[test]
    fn robustify_monotone_in_radius() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(0, 2);
        let f = GeneratorSpec::linear(0.2, vec![0.5, -0.3]);
        let z = [0.7, 0.1];
        let mut prev = f64::NEG_INFINITY;
        for r in [0.0, 0.1, 0.5, 1.0, 2.0] {
            let v = robustify(&f, r).unwrap().evaluate(&ctx, 0.3, &z);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn quadratic_robustify_values() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(0, 0);
        let g = quadratic_robustify(&GeneratorSpec::zero(), 0.5).unwrap();
        assert_eq!(g.evaluate(&ctx, 0.0, &[1.0, 1.0]), 1.0);
        let ens1 = tiny_ensemble(1);
        let ctx1 = ens1.ctx(0, 0);
        let g1 = quadratic_robustify(&GeneratorSpec::zero(), 1.0).unwrap();
        assert_eq!(g1.d_z_vec(&ctx1, 0.0, &[2.0]), vec![4.0]);
        assert!(quadratic_robustify(&GeneratorSpec::zero(), -1.0).is_err());
    }

    #[test]
    fn derivative_consistency_central_differences() {
        let ens = tiny_ensemble(2);
        let ctx = ens.ctx(1, 3);
        let f = robustify(&GeneratorSpec::linear(-0.4, vec![0.3, 0.6]), 0.7).unwrap();
        let h = 1e-5;
        let probes = [(0.5, [0.8, -0.4]), (-1.2, [0.2, 0.9]), (0.0, [1.5, 1.5])];
        for (y, z) in probes {
            let fd_y = (f.evaluate(&ctx, y + h, &z) - f.evaluate(&ctx, y - h, &z)) / (2.0 * h);
            let dy = f.d_y(&ctx, y, &z);
            assert!((fd_y - dy).abs() <= 1e-4 * dy.abs().max(1.0));
            let dz = f.d_z_vec(&ctx, y, &z);
            for k in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[k] += h;
                zm[k] -= h;
                let fd = (f.evaluate(&ctx, y, &zp) - f.evaluate(&ctx, y, &zm)) / (2.0 * h);
                assert!((fd - dz[k]).abs() <= 1e-4 * dz[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn hamiltonian_singleton_is_linear() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 1);
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.8]);
        let f = hamiltonian(&coeffs).unwrap();
        assert_eq!(f.evaluate(&ctx, 5.0, &[2.0]), -1.6);
        assert_eq!(f.d_z_vec(&ctx, 5.0, &[2.0]), vec![-0.8]);
        assert_eq!(f.d_y(&ctx, 5.0, &[2.0]), 0.0);
    }

    #[test]
    fn hamiltonian_interval_is_negative_abs() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 1);
        let coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        let f = hamiltonian(&coeffs).unwrap();
        for z in [-2.0, -0.5, 0.3, 1.7] {
            assert!((f.evaluate(&ctx, 0.0, &[z]) - (-z.abs())).abs() < 1e-12);
        }
        // envelope derivative is -sign(z)
        assert_eq!(f.d_z_vec(&ctx, 0.0, &[0.5]), vec![-1.0]);
        assert_eq!(f.d_z_vec(&ctx, 0.0, &[-0.5]), vec![1.0]);
        assert!(f.kink_at_zero);
    }

    #[test]
    fn hamiltonian_two_point_enumeration() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 0);
        let coeffs = ControlledCoefficients {
            actions: ActionSet::Finite(vec![vec![-1.0], vec![1.0]]),
            discount_rate: Arc::new(|_, _| 0.0),
            running_reward: Arc::new(|_, a| a[0] * a[0]),
            drift: Arc::new(|_, a, out| out.copy_from_slice(a)),
            dim: 1,
            argmin: None,
            argmin_dy: None,
            argmin_dz: None,
            softmin_temperature: None,
            k_bound: Some(0.0),
            lambda_bound: Some(1.0),
        };
        let f = hamiltonian(&coeffs).unwrap();
        // min over a in {-1, 1} of a^2 - a z at z = 0.1: min(1.1, 0.9)
        assert!((f.evaluate(&ctx, 7.0, &[0.1]) - 0.9).abs() < 1e-15);
        let a = coeffs.argmin_action(&ctx, 7.0, &[0.1]).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn hamiltonian_rejects_empty_set() {
        let coeffs = ControlledCoefficients {
            actions: ActionSet::Finite(vec![]),
            ..ControlledCoefficients::singleton(0.0, 0.0, vec![0.0])
        };
        assert!(hamiltonian(&coeffs).is_err());
    }

    #[test]
    fn hamiltonian_dominated_by_every_action() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(1, 2);
        let coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        let f = hamiltonian(&coeffs).unwrap();
        let (y, z) = (0.4, [0.9]);
        let fv = f.evaluate(&ctx, y, &z);
        for j in 0..21 {
            let a = [-1.0 + 0.1 * j as f64];
            let probe = coeffs.objective(&ctx, &a, y, &z);
            assert!(fv <= probe + 1e-12);
        }
    }

    #[test]
    fn softmin_approaches_hard_min() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 1);
        let mut coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        coeffs.softmin_temperature = Some(1e-4);
        let soft = hamiltonian(&coeffs).unwrap();
        for z in [-1.3, 0.4, 2.0] {
            assert!((soft.evaluate(&ctx, 0.0, &[z]) - (-z.abs())).abs() < 1e-2);
        }
    }

    #[test]
    fn softmin_argmin_derivatives_match_finite_differences() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 1);
        let mut coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        coeffs.softmin_temperature = Some(0.25);
        let h = 1e-5;
        for z in [0.15, -0.35, 0.6] {
            let sa = coeffs.smooth_argmin(&ctx, 0.0, &[z]).unwrap();
            let ap = coeffs.smooth_argmin(&ctx, 0.0, &[z + h]).unwrap().alpha[0];
            let am = coeffs.smooth_argmin(&ctx, 0.0, &[z - h]).unwrap().alpha[0];
            let fd = (ap - am) / (2.0 * h);
            assert!(
                (fd - sa.d_z[0]).abs() < 1e-4 * fd.abs().max(1.0),
                "z {z}: fd {fd} analytic {}",
                sa.d_z[0]
            );
            // k is identically 0 here, so alpha cannot depend on y
            assert!(sa.d_y[0].abs() < 1e-14);
        }
    }

    #[test]
    fn softmin_generator_derivatives_match_finite_differences() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 1);
        let mut coeffs = ControlledCoefficients::interval_drift(-1.0, 1.0);
        coeffs.softmin_temperature = Some(0.2);
        coeffs.discount_rate = Arc::new(|_, a| 0.3 * (1.0 + a[0] * a[0]));
        let f = hamiltonian(&coeffs).unwrap();
        let h = 1e-5;
        for (y, z) in [(0.2, 0.4), (-0.5, -0.8), (1.0, 0.05)] {
            let fd_y = (f.evaluate(&ctx, y + h, &[z]) - f.evaluate(&ctx, y - h, &[z])) / (2.0 * h);
            assert!((fd_y - f.d_y(&ctx, y, &[z])).abs() < 1e-4 * fd_y.abs().max(1.0));
            let fd_z = (f.evaluate(&ctx, y, &[z + h]) - f.evaluate(&ctx, y, &[z - h])) / (2.0 * h);
            assert!((fd_z - f.d_z_vec(&ctx, y, &[z])[0]).abs() < 1e-4 * fd_z.abs().max(1.0));
        }
    }

    #[test]
    fn negated_arguments_flips_direction() {
        let ens = tiny_ensemble(1);
        let ctx = ens.ctx(0, 1);
        let f = GeneratorSpec::linear(0.3, vec![-0.7]);
        let g = f.negated_arguments();
        let (y, z) = (0.8, [1.1]);
        assert!((g.evaluate(&ctx, y, &z) + f.evaluate(&ctx, -y, &[-z[0]])).abs() < 1e-15);
        // linear drivers are odd in (y, z), so the flip is the identity here
        assert!((g.evaluate(&ctx, y, &z) - f.evaluate(&ctx, y, &z)).abs() < 1e-15);
    }

    #[test]
    fn coefficients_from_constant_drift_driver() {
        let ens = tiny_ensemble(1);
        let f = GeneratorSpec::linear(0.0, vec![-0.6]);
        let sol = FakeSolution::constant(1.0, &[0.5], 2, 4);
        let track = optimal_coefficients(&f, &ens, &sol).unwrap();
        for p in 0..2 {
            for i in 0..4 {
                assert_eq!(track.lambda.at(p, i), &[0.6]);
                assert_eq!(track.k_at(p, i), 0.0);
            }
            for i in 0..=4 {
                assert_eq!(track.discount_at(p, i), 1.0);
            }
        }
    }

    #[test]
    fn coefficients_from_linear_y_driver() {
        let ens = tiny_ensemble(1);
        let a = 0.5;
        let f = GeneratorSpec::linear(-a, vec![0.0]);
        let sol = FakeSolution::constant(1.0, &[0.0], 2, 4);
        let track = optimal_coefficients(&f, &ens, &sol).unwrap();
        for i in 0..=4 {
            let t = ens.grid().node(i);
            assert!((track.discount_at(0, i) - (-a * t).exp()).abs() < 1e-15);
        }
        assert_eq!(track.k_at(1, 2), a);
    }

    #[test]
    fn coefficients_from_interval_hamiltonian() {
        let ens = tiny_ensemble(1);
        let f = hamiltonian(&ControlledCoefficients::interval_drift(-1.0, 1.0)).unwrap();
        let sol = FakeSolution::constant(0.0, &[0.7], 2, 4);
        let track = optimal_coefficients(&f, &ens, &sol).unwrap();
        // Z > 0 everywhere, so the minimizing drift sits at the top of the box
        for p in 0..2 {
            for i in 0..4 {
                assert_eq!(track.lambda.at(p, i), &[1.0]);
            }
        }
    }
}
