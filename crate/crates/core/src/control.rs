//! Stochastic maximum principle for mean-field forward Volterra control
//!
//! State `Y(t) = φ(t) + ∫₀ᵗ κ(t,s,Y(s),EY(s),u(s)) ds + ∫₀ᵗ ν(t,s,Y(s),EY(s),u(s)) dB_s`,
//! cost `J(u) = E∫₀ᵇ g(t,Y(t),EY(t),u(t)) dt`, and the adjoint backward equation
//!
//! `X(t) = g_y(t) + E g_ȳ(t) + ∫ₜᵇ [κ_y(s,t)ᵀX(s) + ν_y(s,t)ᵀℵ(s,t)] ds
//!         + E∫ₜᵇ [κ_ȳ(s,t)ᵀX(s) + ν_ȳ(s,t)ᵀℵ(s,t)] ds − ∫ₜᵇ ℵ(t,s) dB_s`
//!
//! whose pair gives the gradient field
//! `G(t) = g_u(t) + E[∫ₜᵇ κ_u(s,t)ᵀX(s) + ν_u(s,t)ᵀℵ(s,t) ds | 𝓕_t]`.
//!
//! Derivatives of κ, ν at `(s,t)` are taken at the row-time state `(Y(t), EY(t), u(t))`.
//! On the grid every `∫ₜᵇ` runs over nodes strictly after `t`, which is the exact
//! discrete dual of the left-point forward scheme.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backward::{solve_bsvie_cascade, BackwardGeneratorSpec, CascadeReport, FreeTermSpec, GenArgs, Generator, SolverConfig};
use crate::error::{Error, Result};
use crate::forward::{solve_forward_direct, CoefCtx, Coefficient, ForwardSolution, ForwardSpec, FreeFn};
use crate::kernels::{BackwardEnvelopes, ForwardEnvelopes, Triangle};
use crate::stochastic::{empirical_mean, BrownianEnsemble, DiscreteProcessPair, NodeFeatures, RegressionBasis, TimeGrid};
use crate::Kernel;

/// `κ` or `ν` (and their Jacobians): `(ctx, y, ȳ, u, out)`.
pub type ControlCoefFn = Arc<dyn Fn(&CoefCtx, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Running cost `g(t, y, ȳ, u)`.
pub type CostFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// Gradient of the running cost in one argument: `(t, y, ȳ, u, out)`.
pub type CostGradFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Relative central-difference step used to synthesize missing derivatives.
pub const FD_STEP: f64 = 1e-5;

/// Convex admissible control set with its Euclidean projection.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissibleSet {
    Unbounded,
    /// Same interval `[lo, hi]` in every component.
    Box { lo: f64, hi: f64 },
    Ball { center: Vec<f64>, radius: f64 },
}

impl AdmissibleSet {
    pub fn validate(&self, du: usize) -> Result<()> {
        match self {
            Self::Unbounded => Ok(()),
            Self::Box { lo, hi } if lo <= hi && !lo.is_nan() && !hi.is_nan() => Ok(()),
            Self::Box { lo, hi } => Err(Error::Config(format!("empty box [{lo}, {hi}]"))),
            Self::Ball { center, radius } => {
                if center.len() != du {
                    Err(Error::Shape(format!("ball center has {} components, controls have {du}", center.len())))
                } else if !(*radius >= 0.0) || !radius.is_finite() {
                    Err(Error::Config(format!("ball radius {radius} must be finite and nonnegative")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Projects one control vector in place.
    pub fn project(&self, u: &mut [f64]) {
        match self {
            Self::Unbounded => {}
            Self::Box { lo, hi } => u.iter_mut().for_each(|v| *v = v.clamp(*lo, *hi)),
            Self::Ball { center, radius } => {
                let dist = u.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
                // Rescaled points land within a few ulps of the sphere; the
                // slack keeps the projection exactly idempotent.
                if dist > *radius * (1.0 + 8.0 * f64::EPSILON) {
                    let f = radius / dist;
                    for (a, c) in u.iter_mut().zip(center) {
                        *a = c + f * (*a - c);
                    }
                }
            }
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        let mut p = u.to_vec();
        self.project(&mut p);
        p == u
    }
}

/// Controlled mean-field Volterra problem.
///
/// Jacobian layouts are row-major: `κ_y`, `κ_ȳ` are `d × d`, `κ_u` is
/// `d × du`, `ν_y`, `ν_ȳ` are `(d·m) × d` and `ν_u` is `(d·m) × du`, where
/// row `a·m + b` of a `ν` Jacobian is the derivative of `ν_ab`.
/// Missing derivatives are synthesized by central differences.
#[derive(Clone)]
pub struct ControlProblemSpec {
    pub d: usize,
    pub m: usize,
    pub du: usize,
    pub b: f64,
    pub phi: FreeFn,
    pub kappa: ControlCoefFn,
    /// `None` for a driftless-noise problem.
    pub nu: Option<ControlCoefFn>,
    pub cost: CostFn,
    pub kappa_y: Option<ControlCoefFn>,
    pub kappa_ybar: Option<ControlCoefFn>,
    pub kappa_u: Option<ControlCoefFn>,
    pub nu_y: Option<ControlCoefFn>,
    pub nu_ybar: Option<ControlCoefFn>,
    pub nu_u: Option<ControlCoefFn>,
    pub g_y: Option<CostGradFn>,
    pub g_ybar: Option<CostGradFn>,
    pub g_u: Option<CostGradFn>,
    pub set: AdmissibleSet,
    /// Lipschitz envelopes of `(κ, ν)` in `(y, ȳ)`, which also bound their derivatives.
    pub envelopes: ForwardEnvelopes<f64>,
    /// Deterministic per-node controls when true, per-particle otherwise.
    pub open_loop: bool,
}

impl ControlProblemSpec {
    /// `κ = u`, `ν = σ`, `g = ½(q·y² + r·u²)`, `φ ≡ y₀`, `U = ℝ`.
    pub fn lq(y0: f64, sigma: f64, b: f64, q: f64, r: f64) -> Result<Self> {
        if !(b > 0.0) || !(q >= 0.0) || !(r >= 0.0) {
            return Err(Error::Config("LQ problem needs b > 0 and nonnegative weights".into()));
        }
        let zero1: ControlCoefFn = Arc::new(|_, _, _, _, out: &mut [f64]| out[0] = 0.0);
        let one: ControlCoefFn = Arc::new(|_, _, _, _, out: &mut [f64]| out[0] = 1.0);
        Ok(Self {
            d: 1,
            m: 1,
            du: 1,
            b,
            phi: ForwardSpec::constant_free_term(vec![y0]),
            kappa: Arc::new(|_, _, _, u: &[f64], out: &mut [f64]| out[0] = u[0]),
            nu: (sigma != 0.0).then(|| Arc::new(move |_: &CoefCtx, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = sigma) as ControlCoefFn),
            cost: Arc::new(move |_, y: &[f64], _, u: &[f64]| 0.5 * (q * y[0] * y[0] + r * u[0] * u[0])),
            kappa_y: Some(zero1.clone()),
            kappa_ybar: Some(zero1.clone()),
            kappa_u: Some(one),
            nu_y: Some(zero1.clone()),
            nu_ybar: Some(zero1.clone()),
            nu_u: Some(zero1),
            g_y: Some(Arc::new(move |_, y: &[f64], _, _, out: &mut [f64]| out[0] = q * y[0])),
            g_ybar: Some(Arc::new(|_, _, _, _, out: &mut [f64]| out[0] = 0.0)),
            g_u: Some(Arc::new(move |_, _, _, u: &[f64], out: &mut [f64]| out[0] = r * u[0])),
            set: AdmissibleSet::Unbounded,
            envelopes: ForwardEnvelopes::zero(b),
            open_loop: true,
        })
    }

    /// Scalar linear-quadratic mean-field problem with coefficients drawn from `seed`:
    ///
    /// `κ = a·y + ā·ȳ + c·u`, `ν = σ₀ + e·y + ē·ȳ + f·u`,
    /// `g = ½q(y − ρȳ)² + ½r·u² + ℓ·y`.
    ///
    pub fn random_linear(seed: u64, b: f64) -> Result<Self> {
        if !(b > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let (a, abar, c) = (draw(-0.5, 0.5), draw(-0.5, 0.5), draw(0.5, 1.0));
        let (sigma0, e, ebar, f) = (draw(0.2, 0.4), draw(-0.2, 0.2), draw(-0.2, 0.2), draw(-0.2, 0.2));
        let (q, rho, r, ell) = (draw(0.5, 1.5), draw(0.0, 0.5), draw(0.5, 1.0), draw(-0.5, 0.5));
        Ok(Self {
            d: 1,
            m: 1,
            du: 1,
            b,
            phi: ForwardSpec::constant_free_term(vec![1.0]),
            kappa: Arc::new(move |_, y: &[f64], yb: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = a * y[0] + abar * yb[0] + c * u[0]
            }),
            nu: Some(Arc::new(move |_, y: &[f64], yb: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = sigma0 + e * y[0] + ebar * yb[0] + f * u[0]
            })),
            cost: Arc::new(move |_, y: &[f64], yb: &[f64], u: &[f64]| {
                0.5 * q * (y[0] - rho * yb[0]).powi(2) + 0.5 * r * u[0] * u[0] + ell * y[0]
            }),
            kappa_y: Some(constant_jacobian(a)),
            kappa_ybar: Some(constant_jacobian(abar)),
            kappa_u: Some(constant_jacobian(c)),
            nu_y: Some(constant_jacobian(e)),
            nu_ybar: Some(constant_jacobian(ebar)),
            nu_u: Some(constant_jacobian(f)),
            g_y: Some(Arc::new(move |_, y: &[f64], yb: &[f64], _, out: &mut [f64]| out[0] = q * (y[0] - rho * yb[0]) + ell)),
            g_ybar: Some(Arc::new(move |_, y: &[f64], yb: &[f64], _, out: &mut [f64]| out[0] = -q * rho * (y[0] - rho * yb[0]))),
            g_u: Some(Arc::new(move |_, _, _, u: &[f64], out: &mut [f64]| out[0] = r * u[0])),
            set: AdmissibleSet::Unbounded,
            envelopes: ForwardEnvelopes {
                k1: Kernel::constant(a.abs() + abar.abs(), Triangle::Lower, b)?,
                k2: Kernel::constant(e.abs() + ebar.abs(), Triangle::Lower, b)?,
            },
            open_loop: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.du == 0 {
            return Err(Error::Config("state, noise and control dimensions must be positive".into()));
        }
        self.set.validate(self.du)?;
        self.envelopes.check()
    }

    /// All nine derivatives, synthesized where not supplied.
    pub fn derivatives(&self) -> Derivatives {
        let (d, m) = (self.d, self.m);
        let coef = |given: &Option<ControlCoefFn>, f: &ControlCoefFn, rows: usize, arg: Arg| -> ControlCoefFn {
            given.clone().unwrap_or_else(|| fd_coef(f.clone(), rows, arg))
        };
        let cost = |given: &Option<CostGradFn>, arg: Arg| -> CostGradFn { given.clone().unwrap_or_else(|| fd_cost(self.cost.clone(), arg)) };
        let nu = self.nu.as_ref().map(|nu| {
            [
                coef(&self.nu_y, nu, d * m, Arg::Y),
                coef(&self.nu_ybar, nu, d * m, Arg::YBar),
                coef(&self.nu_u, nu, d * m, Arg::U),
            ]
        });
        Derivatives {
            kappa_y: coef(&self.kappa_y, &self.kappa, d, Arg::Y),
            kappa_ybar: coef(&self.kappa_ybar, &self.kappa, d, Arg::YBar),
            kappa_u: coef(&self.kappa_u, &self.kappa, d, Arg::U),
            nu,
            g_y: cost(&self.g_y, Arg::Y),
            g_ybar: cost(&self.g_ybar, Arg::YBar),
            g_u: cost(&self.g_u, Arg::U),
        }
    }

    /// Envelopes of the adjoint generator: the transposed state envelopes in
    /// both the pathwise and the mean-field slots, no dependence on `ℵ(t,s)`.
    pub fn adjoint_envelopes(&self) -> BackwardEnvelopes<f64> {
        let k1 = self.envelopes.k1.transposed();
        let k2 = self.envelopes.k2.transposed();
        let z = Kernel::zero(Triangle::Upper, self.b);
        BackwardEnvelopes { lx1: k1.clone(), lz1: z.clone(), lxi1: k2.clone(), lx2: k1, lz2: z, lxi2: k2 }
    }
}

fn constant_jacobian(v: f64) -> ControlCoefFn {
    Arc::new(move |_, _, _, _, out: &mut [f64]| out[0] = v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arg {
    Y,
    YBar,
    U,
}

fn arg_of<'a>(y: &'a [f64], yb: &'a [f64], u: &'a [f64], arg: Arg) -> &'a [f64] {
    match arg {
        Arg::Y => y,
        Arg::YBar => yb,
        Arg::U => u,
    }
}

fn with_arg<R>(y: &[f64], yb: &[f64], u: &[f64], arg: Arg, v: &[f64], f: impl FnOnce(&[f64], &[f64], &[f64]) -> R) -> R {
    match arg {
        Arg::Y => f(v, yb, u),
        Arg::YBar => f(y, v, u),
        Arg::U => f(y, yb, v),
    }
}

/// Runs `f` on a zeroed scratch buffer, on the stack when short.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut stack = [0.0; 32];
    if len <= stack.len() {
        f(&mut stack[..len])
    } else {
        f(&mut vec![0.0; len])
    }
}

fn fd_step(x: f64) -> f64 {
    FD_STEP * x.abs().max(1.0)
}

fn fd_coef(f: ControlCoefFn, rows: usize, arg: Arg) -> ControlCoefFn {
    Arc::new(move |ctx, y, yb, u, out: &mut [f64]| {
        let base = arg_of(y, yb, u, arg);
        let cols = base.len();
        with_scratch(cols + 2 * rows, |buf| {
            let (v, rest) = buf.split_at_mut(cols);
            let (plus, minus) = rest.split_at_mut(rows);
            v.copy_from_slice(base);
            for c in 0..cols {
                let x0 = v[c];
                let h = fd_step(x0);
                v[c] = x0 + h;
                with_arg(y, yb, u, arg, v, |a, b, w| f(ctx, a, b, w, plus));
                v[c] = x0 - h;
                with_arg(y, yb, u, arg, v, |a, b, w| f(ctx, a, b, w, minus));
                v[c] = x0;
                for r in 0..rows {
                    out[r * cols + c] = (plus[r] - minus[r]) / (2.0 * h);
                }
            }
        })
    })
}

fn fd_cost(g: CostFn, arg: Arg) -> CostGradFn {
    Arc::new(move |t, y, yb, u, out: &mut [f64]| {
        let base = arg_of(y, yb, u, arg);
        with_scratch(base.len(), |v| {
            v.copy_from_slice(base);
            for c in 0..v.len() {
                let x0 = v[c];
                let h = fd_step(x0);
                v[c] = x0 + h;
                let p = with_arg(y, yb, u, arg, v, |a, b, w| g(t, a, b, w));
                v[c] = x0 - h;
                let q = with_arg(y, yb, u, arg, v, |a, b, w| g(t, a, b, w));
                v[c] = x0;
                out[c] = (p - q) / (2.0 * h);
            }
        })
    })
}

/// Resolved derivatives of a [`ControlProblemSpec`].
#[derive(Clone)]
pub struct Derivatives {
    pub kappa_y: ControlCoefFn,
    pub kappa_ybar: ControlCoefFn,
    pub kappa_u: ControlCoefFn,
    /// `[ν_y, ν_ȳ, ν_u]`, absent when the problem has no diffusion.
    pub nu: Option<[ControlCoefFn; 3]>,
    pub g_y: CostGradFn,
    pub g_ybar: CostGradFn,
    pub g_u: CostGradFn,
}

/// Largest relative deviation between supplied derivatives and central
/// differences over random points and node pairs.
pub fn derivative_spot_check(spec: &ControlProblemSpec, grid: &TimeGrid, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m, du, n) = (spec.d, spec.m, spec.du, grid.n());
    let mut worst = 0.0f64;
    let mut compare = |a: &[f64], b: &[f64]| {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs() / (y.abs() + 1e-6));
        }
    };
    let coef_pairs: Vec<(&Option<ControlCoefFn>, Option<&ControlCoefFn>, usize, Arg)> = vec![
        (&spec.kappa_y, Some(&spec.kappa), d, Arg::Y),
        (&spec.kappa_ybar, Some(&spec.kappa), d, Arg::YBar),
        (&spec.kappa_u, Some(&spec.kappa), d, Arg::U),
        (&spec.nu_y, spec.nu.as_ref(), d * m, Arg::Y),
        (&spec.nu_ybar, spec.nu.as_ref(), d * m, Arg::YBar),
        (&spec.nu_u, spec.nu.as_ref(), d * m, Arg::U),
    ];
    for _ in 0..samples {
        if n < 1 {
            break;
        }
        let i = rng.gen_range(1..=n);
        let k = rng.gen_range(0..i);
        let ctx = CoefCtx { i, k, t: grid.t(i), s: grid.t(k), particle: 0 };
        let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (y, yb, u) = (draw(d), draw(d), draw(du));
        for (given, f, rows, arg) in &coef_pairs {
            if let (Some(given), Some(f)) = (given, f) {
                let cols = match arg {
                    Arg::U => du,
                    _ => d,
                };
                let mut a = vec![0.0; rows * cols];
                let mut b = vec![0.0; rows * cols];
                given(&ctx, &y, &yb, &u, &mut a);
                fd_coef((*f).clone(), *rows, *arg)(&ctx, &y, &yb, &u, &mut b);
                compare(&a, &b);
            }
        }
        for (given, arg, len) in [(&spec.g_y, Arg::Y, d), (&spec.g_ybar, Arg::YBar, d), (&spec.g_u, Arg::U, du)] {
            if let Some(given) = given {
                let mut a = vec![0.0; len];
                let mut b = vec![0.0; len];
                given(ctx.s, &y, &yb, &u, &mut a);
                fd_cost(spec.cost.clone(), arg)(ctx.s, &y, &yb, &u, &mut b);
                compare(&a, &b);
            }
        }
    }
    worst
}

/// Control values on nodes `0..n` (the control at `t_n` never enters the scheme).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlIterate {
    du: usize,
    nodes: usize,
    /// 1 for open-loop controls.
    np: usize,
    values: Vec<f64>,
    /// Step sizes of accepted descent steps.
    pub steps: Vec<f64>,
    /// Cost after each accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
}

impl ControlIterate {
    /// Deterministic controls, node-major `nodes × du`.
    pub fn open_loop(du: usize, values: Vec<f64>) -> Result<Self> {
        if du == 0 || values.len() % du != 0 {
            return Err(Error::Shape(format!("{} control values do not split into vectors of length {du}", values.len())));
        }
        let nodes = values.len() / du;
        Ok(Self { du, nodes, np: 1, values, steps: Vec::new(), costs: Vec::new() })
    }

    /// Per-particle controls, node-major `nodes × N × du`.
    pub fn adapted(du: usize, nodes: usize, np: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes * np * du {
            return Err(Error::Shape(format!("adapted controls need {} values, got {}", nodes * np * du, values.len())));
        }
        Ok(Self { du, nodes, np, values, steps: Vec::new(), costs: Vec::new() })
    }

    pub fn constant(du: usize, nodes: usize, c: f64) -> Self {
        Self { du, nodes, np: 1, values: vec![c; nodes * du], steps: Vec::new(), costs: Vec::new() }
    }

    /// Deterministic controls `u(t_k) = f(t_k)`.
    pub fn from_fn(grid: &TimeGrid, du: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let n = grid.n();
        let mut values = vec![0.0; n * du];
        for (k, out) in values.chunks_exact_mut(du).enumerate() {
            f(grid.t(k), out);
        }
        Self { du, nodes: n, np: 1, values, steps: Vec::new(), costs: Vec::new() }
    }

    pub fn du(&self) -> usize {
        self.du
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn is_open_loop(&self) -> bool {
        self.np == 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Control of particle `p` at node `k`.
    pub fn at(&self, k: usize, p: usize) -> &[f64] {
        let o = if self.np == 1 { k * self.du } else { (k * self.np + p) * self.du };
        &self.values[o..o + self.du]
    }

    pub fn is_admissible(&self, set: &AdmissibleSet) -> bool {
        self.values.chunks_exact(self.du).all(|u| set.contains(u))
    }

    pub fn project(&mut self, set: &AdmissibleSet) {
        self.values.chunks_exact_mut(self.du).for_each(|u| set.project(u));
    }

    /// `self + h·dir` with a deterministic node-major direction.
    pub fn shifted(&self, dir: &[f64], h: f64) -> Self {
        let mut out = self.clone();
        let w = self.np * self.du;
        for (k, block) in out.values.chunks_exact_mut(w).enumerate() {
            for u in block.chunks_exact_mut(self.du) {
                for (a, v) in u.iter_mut().enumerate() {
                    *v += h * dir[k * self.du + a];
                }
            }
        }
        out
    }

    fn check(&self, spec: &ControlProblemSpec, grid: &TimeGrid, np: usize) -> Result<()> {
        if self.du != spec.du || self.nodes != grid.n() {
            return Err(Error::Shape(format!(
                "controls are {} nodes × {} components, problem needs {} × {}",
                self.nodes,
                self.du,
                grid.n(),
                spec.du
            )));
        }
        if self.np != 1 && self.np != np {
            return Err(Error::Shape(format!("adapted controls have {} particles, ensemble has {np}", self.np)));
        }
        if spec.open_loop && self.np != 1 {
            return Err(Error::Config("open-loop problem given per-particle controls".into()));
        }
        Ok(())
    }
}

fn control_coefficient(f: ControlCoefFn, u: Arc<ControlIterate>) -> Coefficient {
    Coefficient::new(Arc::new(move |ctx: &CoefCtx, y: &[f64], yb: &[f64], out: &mut [f64]| {
        f(ctx, y, yb, u.at(ctx.k, ctx.particle), out)
    }))
}

/// Controlled trajectories `Y^u` on the ensemble.
pub fn solve_state(spec: &ControlProblemSpec, u: &ControlIterate, ens: &BrownianEnsemble) -> Result<ForwardSolution> {
    spec.validate()?;
    u.check(spec, ens.grid(), ens.n_particles())?;
    let u = Arc::new(u.clone());
    let fspec = ForwardSpec {
        d: spec.d,
        m: spec.m,
        phi: spec.phi.clone(),
        drift: control_coefficient(spec.kappa.clone(), u.clone()),
        diffusion: spec.nu.clone().map_or_else(Coefficient::zero, |nu| control_coefficient(nu, u)),
        envelopes: spec.envelopes.clone(),
        zero_at_zero: false,
    };
    solve_forward_direct(&fspec, ens)
}

/// Per-particle running-cost integrals `Σ_{k<n} Δ_k g(t_k, Y_k, Ȳ_k, u_k)`.
fn pathwise_costs(spec: &ControlProblemSpec, u: &ControlIterate, sol: &ForwardSolution) -> Vec<f64> {
    let grid = sol.grid();
    let (d, np) = (spec.d, sol.n_particles());
    (0..np)
        .into_par_iter()
        .map(|p| {
            (0..grid.n())
                .map(|k| grid.dt(k) * (spec.cost)(grid.t(k), &sol.y(k)[p * d..(p + 1) * d], sol.mean(k), u.at(k, p)))
                .sum()
        })
        .collect()
}

/// Particle-averaged left-point quadrature of the running cost.
pub fn evaluate_cost(spec: &ControlProblemSpec, u: &ControlIterate, sol: &ForwardSolution) -> f64 {
    let costs = pathwise_costs(spec, u, sol);
    costs.iter().sum::<f64>() / costs.len() as f64
}

/// Cost with its Monte Carlo standard error.
pub fn evaluate_cost_with_noise(spec: &ControlProblemSpec, u: &ControlIterate, sol: &ForwardSolution) -> (f64, f64) {
    let costs = pathwise_costs(spec, u, sol);
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// State, mean and control of particle `p` at node `k`.
struct Frozen {
    state: Arc<ForwardSolution>,
    u: Arc<ControlIterate>,
    d: usize,
}

impl Frozen {
    fn y(&self, k: usize, p: usize) -> &[f64] {
        &self.state.y(k)[p * self.d..(p + 1) * self.d]
    }
}

/// `out[c] += w · Σ_r jac[r·cols + c] · v[r]`.
fn add_transpose_product(jac: &[f64], v: &[f64], cols: usize, w: f64, out: &mut [f64]) {
    for (r, vr) in v.iter().enumerate() {
        let row = &jac[r * cols..(r + 1) * cols];
        for (o, j) in out.iter_mut().zip(row) {
            *o += w * j * vr;
        }
    }
}

/// Adjoint generator for row `t_i`, column `t_j > t_i`.
struct AdjointGenerator {
    derivs: Derivatives,
    frozen: Frozen,
}

impl Generator for AdjointGenerator {
    fn eval(&self, a: &GenArgs, out: &mut [f64]) {
        out.fill(0.0);
        if a.j <= a.i {
            return;
        }
        let (d, dm) = (a.d, a.d * a.m);
        // Forward coefficient at (t_j, t_i): row j, column i.
        let ctx0 = CoefCtx { i: a.j, k: a.i, t: a.s, s: a.t, particle: 0 };
        let ybar = self.frozen.state.mean(a.i);
        let mut jac = vec![0.0; dm.max(d) * d];
        let mut mean = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for p in 0..a.n_particles {
            let ctx = CoefCtx { particle: p, ..ctx0 };
            let (y, u) = (self.frozen.y(a.i, p), self.frozen.u.at(a.i, p));
            let x = &a.x[p * d..(p + 1) * d];
            let o = &mut out[p * d..(p + 1) * d];
            (self.derivs.kappa_y)(&ctx, y, ybar, u, &mut jac[..d * d]);
            add_transpose_product(&jac[..d * d], x, d, 1.0, o);
            tmp.fill(0.0);
            (self.derivs.kappa_ybar)(&ctx, y, ybar, u, &mut jac[..d * d]);
            add_transpose_product(&jac[..d * d], x, d, 1.0, &mut tmp);
            if let Some([nu_y, nu_ybar, _]) = &self.derivs.nu {
                let xi = &a.xi[p * dm..(p + 1) * dm];
                nu_y(&ctx, y, ybar, u, &mut jac[..dm * d]);
                add_transpose_product(&jac[..dm * d], xi, d, 1.0, o);
                nu_ybar(&ctx, y, ybar, u, &mut jac[..dm * d]);
                add_transpose_product(&jac[..dm * d], xi, d, 1.0, &mut tmp);
            }
            for (mv, t) in mean.iter_mut().zip(&tmp) {
                *mv += t;
            }
        }
        let inv = 1.0 / a.n_particles as f64;
        for row in out.chunks_exact_mut(d) {
            for (o, mv) in row.iter_mut().zip(&mean) {
                *o += mv * inv;
            }
        }
    }
}

/// Adjoint backward problem frozen along `(Y, EY, u)`.
///
/// The free term `g_y(t) + E g_ȳ(t)` is adapted; the generator is linear in
/// `(X(s), ℵ(s,t))` and vanishes on the diagonal.
pub fn assemble_adjoint(
    spec: &ControlProblemSpec,
    state: &ForwardSolution,
    u: &ControlIterate,
    ens: &BrownianEnsemble,
) -> Result<(BackwardGeneratorSpec, FreeTermSpec)> {
    spec.validate()?;
    u.check(spec, ens.grid(), ens.n_particles())?;
    let grid = ens.grid();
    let (n, np, d) = (grid.n(), ens.n_particles(), spec.d);
    let derivs = spec.derivatives();
    let mut values = vec![0.0; (n + 1) * np * d];
    values.par_chunks_mut(np * d).enumerate().for_each(|(i, node)| {
        let ui = |p: usize| if i < n { u.at(i, p).to_vec() } else { u.at(n - 1, p).to_vec() };
        let ybar = state.mean(i);
        let mut gb = vec![0.0; d];
        let mut mean = vec![0.0; d];
        for (p, out) in node.chunks_exact_mut(d).enumerate() {
            let (y, up) = (&state.y(i)[p * d..(p + 1) * d], ui(p));
            (derivs.g_y)(grid.t(i), y, ybar, &up, out);
            (derivs.g_ybar)(grid.t(i), y, ybar, &up, &mut gb);
            for (m, g) in mean.iter_mut().zip(&gb) {
                *m += g / np as f64;
            }
        }
        for out in node.chunks_exact_mut(d) {
            for (o, m) in out.iter_mut().zip(&mean) {
                *o += m;
            }
        }
    });
    let ft = FreeTermSpec::from_values(d, np, values, (0..=n).collect())?;
    let gen = AdjointGenerator { derivs, frozen: Frozen { state: Arc::new(state.clone()), u: Arc::new(u.clone()), d } };
    let spec = BackwardGeneratorSpec::new(Arc::new(gen), spec.adjoint_envelopes(), true);
    Ok((spec, ft))
}

/// Regression basis for the adjoint: polynomials of total degree `degree` in
/// `B(t_j)`, the state `Y(t_j)` and the running integral `∫₀^{t_j} B ds`.
///
/// The Volterra state is path dependent, so `B(t_j)` alone leaves a
/// conditioning bias in the adjoint and in the duality pairing.
pub fn adjoint_basis(state: &ForwardSolution, ens: Arc<BrownianEnsemble>, degree: usize) -> Result<Arc<RegressionBasis>> {
    let grid = ens.grid().clone();
    let (n, np, d, m) = (grid.n(), ens.n_particles(), state.d(), ens.m());
    if state.n_particles() != np || state.grid().n() != n {
        return Err(Error::Shape("state and ensemble disagree".into()));
    }
    let nf = d + m;
    let mut values = vec![0.0; (n + 1) * np * nf];
    let mut running = vec![0.0; np * m];
    for j in 0..=n {
        if j > 0 {
            for (r, b) in running.iter_mut().zip(ens.path_at(j - 1)) {
                *r += grid.dt(j - 1) * b;
            }
        }
        let y = state.y(j);
        for p in 0..np {
            let o = (j * np + p) * nf;
            values[o..o + d].copy_from_slice(&y[p * d..(p + 1) * d]);
            values[o + d..o + nf].copy_from_slice(&running[p * m..(p + 1) * m]);
        }
    }
    let features = Arc::new(NodeFeatures::new(nf, np, values)?);
    Ok(Arc::new(RegressionBasis::new(ens, degree, Some(features))?))
}

/// Solves the adjoint equation by the block cascade on [`adjoint_basis`].
///
/// The grid must be aligned to the contraction partition of
/// [`ControlProblemSpec::adjoint_envelopes`].
pub fn solve_adjoint(
    spec: &ControlProblemSpec,
    state: &ForwardSolution,
    u: &ControlIterate,
    ens: &Arc<BrownianEnsemble>,
    degree: usize,
    cfg: &SolverConfig,
) -> Result<(DiscreteProcessPair, CascadeReport)> {
    let (gen, ft) = assemble_adjoint(spec, state, u, ens)?;
    solve_bsvie_cascade(&gen, &ft, adjoint_basis(state, ens.clone(), degree)?, cfg)
}

/// Per-particle sums `Σ_{i>k} Δ_i [κ_u(t_i,t_k)ᵀX(t_i) + ν_u(t_i,t_k)ᵀℵ(t_i,t_k)]`,
/// node-major `n × N × du`.
fn adjoint_sums(spec: &ControlProblemSpec, state: &ForwardSolution, adjoint: &DiscreteProcessPair, u: &ControlIterate) -> Vec<f64> {
    let grid = adjoint.grid();
    let (n, np, d, m, du) = (grid.n(), adjoint.n_particles(), spec.d, spec.m, spec.du);
    let dm = d * m;
    let derivs = spec.derivatives();
    let mut sums = vec![0.0; n * np * du];
    sums.par_chunks_mut(np * du).enumerate().for_each(|(k, node)| {
        let ybar = state.mean(k);
        let mut jac = vec![0.0; dm.max(d) * du];
        let mut aleph = vec![0.0; np * dm];
        for i in k + 1..n {
            let w = grid.dt(i);
            let x = adjoint.x(i);
            if derivs.nu.is_some() {
                adjoint.aleph_values(i, k, &mut aleph);
            }
            for (p, out) in node.chunks_exact_mut(du).enumerate() {
                let ctx = CoefCtx { i, k, t: grid.t(i), s: grid.t(k), particle: p };
                let (y, up) = (&state.y(k)[p * d..(p + 1) * d], u.at(k, p));
                (derivs.kappa_u)(&ctx, y, ybar, up, &mut jac[..d * du]);
                add_transpose_product(&jac[..d * du], &x[p * d..(p + 1) * d], du, w, out);
                if let Some([_, _, nu_u]) = &derivs.nu {
                    nu_u(&ctx, y, ybar, up, &mut jac[..dm * du]);
                    add_transpose_product(&jac[..dm * du], &aleph[p * dm..(p + 1) * dm], du, w, out);
                }
            }
        }
    });
    sums
}

/// Gradient field `G` per node `0..n` and particle.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    du: usize,
    nodes: usize,
    np: usize,
    values: Vec<f64>,
}

impl GradientField {
    /// Node-major values `nodes × N × du`.
    pub fn from_values(du: usize, nodes: usize, np: usize, values: Vec<f64>) -> Result<Self> {
        if du == 0 || np == 0 || values.len() != nodes * np * du {
            return Err(Error::Shape(format!("gradient needs {} values, got {}", nodes * np * du, values.len())));
        }
        Ok(Self { du, nodes, np, values })
    }

    pub fn du(&self) -> usize {
        self.du
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn at(&self, k: usize, p: usize) -> &[f64] {
        let o = (k * self.np + p) * self.du;
        &self.values[o..o + self.du]
    }

    /// Particle mean at node `k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        empirical_mean(&self.values[k * self.np * self.du..(k + 1) * self.np * self.du], self.du)
    }

    /// Node-major means, the gradient seen by open-loop controls.
    pub fn means(&self) -> Vec<f64> {
        (0..self.nodes).flat_map(|k| self.mean(k)).collect()
    }
}

/// `G(t_k) = g_u + Ê_k[Σ_{i>k} Δ_i (κ_uᵀX + ν_uᵀℵ)]` per particle.
pub fn gradient_field(
    spec: &ControlProblemSpec,
    state: &ForwardSolution,
    adjoint: &DiscreteProcessPair,
    u: &ControlIterate,
) -> Result<GradientField> {
    let grid = adjoint.grid();
    u.check(spec, grid, adjoint.n_particles())?;
    if adjoint.d() != spec.d || state.n_particles() != adjoint.n_particles() {
        return Err(Error::Shape("adjoint, state and problem disagree".into()));
    }
    let (n, np, d, du) = (grid.n(), adjoint.n_particles(), spec.d, spec.du);
    let sums = adjoint_sums(spec, state, adjoint, u);
    let g_u = spec.derivatives().g_u;
    let basis = adjoint.basis();
    let mut values = vec![0.0; n * np * du];
    values.par_chunks_mut(np * du).enumerate().for_each(|(k, node)| {
        node.copy_from_slice(&basis.cond_expect(k, &sums[k * np * du..(k + 1) * np * du], du));
        let ybar = state.mean(k);
        let mut gu = vec![0.0; du];
        for (p, out) in node.chunks_exact_mut(du).enumerate() {
            g_u(grid.t(k), &state.y(k)[p * d..(p + 1) * d], ybar, u.at(k, p), &mut gu);
            for (o, g) in out.iter_mut().zip(&gu) {
                *o += g;
            }
        }
    });
    Ok(GradientField { du, nodes: n, np, values })
}

/// Stationarity residual `‖u − Π_U(u − G)‖` in `L²(dt ⊗ dP)`.
///
/// Open-loop controls use the particle mean of `G` at each node.
pub fn vi_residual(g: &GradientField, u: &ControlIterate, set: &AdmissibleSet, grid: &TimeGrid) -> f64 {
    let du = u.du();
    let mut total = 0.0;
    let mut r = vec![0.0; du];
    for k in 0..g.nodes {
        let mut node = 0.0;
        let particles: Vec<(Vec<f64>, &[f64])> = if u.is_open_loop() {
            vec![(g.mean(k), u.at(k, 0))]
        } else {
            (0..g.np).map(|p| (g.at(k, p).to_vec(), u.at(k, p))).collect()
        };
        for (gk, uk) in &particles {
            for a in 0..du {
                r[a] = uk[a] - gk[a];
            }
            set.project(&mut r);
            node += uk.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total += grid.dt(k) * node / particles.len() as f64;
    }
    total.sqrt()
}

/// Adjoint directional derivative `Σ_k Δ_k E⟨G(t_k), v_k⟩` for a node-major direction.
pub fn gradient_pairing(g: &GradientField, dir: &[f64], grid: &TimeGrid) -> f64 {
    (0..g.nodes)
        .map(|k| grid.dt(k) * g.mean(k).iter().zip(&dir[k * g.du..(k + 1) * g.du]).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Central differences `[J(u + h·v) − J(u − h·v)] / 2h` on the same ensemble.
pub fn fd_gradient_oracle(
    spec: &ControlProblemSpec,
    u: &ControlIterate,
    ens: &BrownianEnsemble,
    h: f64,
    directions: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("difference step {h} must be positive")));
    }
    directions
        .iter()
        .map(|v| {
            if v.len() != u.nodes() * u.du() {
                return Err(Error::Shape(format!("direction has {} values, controls {}", v.len(), u.nodes() * u.du())));
            }
            let (up, um) = (u.shifted(v, h), u.shifted(v, -h));
            let jp = evaluate_cost(spec, &up, &solve_state(spec, &up, ens)?);
            let jm = evaluate_cost(spec, &um, &solve_state(spec, &um, ens)?);
            Ok((jp - jm) / (2.0 * h))
        })
        .collect()
}

/// Node-major directions with entries uniform on `[0, 1]`.
///
/// Nonnegative entries keep the directional derivatives away from zero, so a
/// relative error against them is meaningful.
pub fn random_directions(nodes: usize, du: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..nodes * du).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

/// Both evaluations of `E∫⟨φ̄, X⟩` for a direction `v − u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// `E∫⟨Y₁, g_y⟩ + ⟨EY₁, g_ȳ⟩` from the variational process.
    pub lhs: f64,
    /// `E∫⟨v − u, κ_uᵀX + ν_uᵀℵ⟩` from the adjoint pair.
    pub rhs: f64,
    pub gap: f64,
}

impl DualityReport {
    pub fn relative_gap(&self) -> f64 {
        let scale = self.lhs.abs().max(self.rhs.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.gap / scale
        }
    }
}

fn linearized_coefficient(jac_y: ControlCoefFn, jac_ybar: ControlCoefFn, jac_u: ControlCoefFn, rows: usize, du: usize, frozen: Arc<Frozen>, delta: Arc<ControlIterate>) -> Coefficient {
    Coefficient::new(Arc::new(move |ctx: &CoefCtx, y1: &[f64], y1bar: &[f64], out: &mut [f64]| {
        let d = y1.len();
        let (y, ybar, u) = (frozen.y(ctx.k, ctx.particle), frozen.state.mean(ctx.k), frozen.u.at(ctx.k, ctx.particle));
        out.fill(0.0);
        with_scratch(rows * d.max(du), |jac| {
            for (f, v, cols) in [(&jac_y, y1, d), (&jac_ybar, y1bar, d), (&jac_u, delta.at(ctx.k, ctx.particle), du)] {
                f(ctx, y, ybar, u, &mut jac[..rows * cols]);
                for (r, o) in out.iter_mut().enumerate() {
                    *o += (0..cols).map(|c| jac[r * cols + c] * v[c]).sum::<f64>();
                }
            }
        });
    }))
}

/// Variational process `Y₁` for the direction `δ = v − u`.
pub fn solve_variational(
    spec: &ControlProblemSpec,
    state: &ForwardSolution,
    u: &ControlIterate,
    delta: &ControlIterate,
    ens: &BrownianEnsemble,
) -> Result<ForwardSolution> {
    let derivs = spec.derivatives();
    let frozen = Arc::new(Frozen { state: Arc::new(state.clone()), u: Arc::new(u.clone()), d: spec.d });
    let delta = Arc::new(delta.clone());
    let drift = linearized_coefficient(
        derivs.kappa_y.clone(),
        derivs.kappa_ybar.clone(),
        derivs.kappa_u.clone(),
        spec.d,
        spec.du,
        frozen.clone(),
        delta.clone(),
    );
    let diffusion = match &derivs.nu {
        Some([ny, nyb, nu]) => linearized_coefficient(ny.clone(), nyb.clone(), nu.clone(), spec.d * spec.m, spec.du, frozen, delta),
        None => Coefficient::zero(),
    };
    let fspec = ForwardSpec {
        d: spec.d,
        m: spec.m,
        phi: ForwardSpec::constant_free_term(vec![0.0; spec.d]),
        drift,
        diffusion,
        envelopes: spec.envelopes.clone(),
        zero_at_zero: false,
    };
    solve_forward_direct(&fspec, ens)
}

/// Duality between the variational process and the adjoint pair for `v − u`.
pub fn duality_check(
    spec: &ControlProblemSpec,
    state: &ForwardSolution,
    adjoint: &DiscreteProcessPair,
    u: &ControlIterate,
    v: &ControlIterate,
    ens: &BrownianEnsemble,
) -> Result<DualityReport> {
    let grid = ens.grid();
    u.check(spec, grid, ens.n_particles())?;
    v.check(spec, grid, ens.n_particles())?;
    if u.np != v.np {
        return Err(Error::Shape("u and v must both be open-loop or both adapted".into()));
    }
    let mut delta = v.clone();
    for (dv, uv) in delta.values.iter_mut().zip(&u.values) {
        *dv -= uv;
    }
    let (n, np, d, du) = (grid.n(), ens.n_particles(), spec.d, spec.du);
    let y1 = solve_variational(spec, state, u, &delta, ens)?;
    let derivs = spec.derivatives();
    // Per-node terms are collected and summed in order: a parallel `sum`
    // would associate differently with the thread count.
    let lhs_terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (ybar, y1bar) = (state.mean(k), y1.mean(k));
            let (mut gy, mut gyb) = (vec![0.0; d], vec![0.0; d]);
            let mut acc = 0.0;
            for p in 0..np {
                let y = &state.y(k)[p * d..(p + 1) * d];
                (derivs.g_y)(grid.t(k), y, ybar, u.at(k, p), &mut gy);
                (derivs.g_ybar)(grid.t(k), y, ybar, u.at(k, p), &mut gyb);
                let z = &y1.y(k)[p * d..(p + 1) * d];
                acc += (0..d).map(|a| z[a] * gy[a] + y1bar[a] * gyb[a]).sum::<f64>();
            }
            grid.dt(k) * acc / np as f64
        })
        .collect();
    let lhs: f64 = lhs_terms.iter().sum();
    let sums = adjoint_sums(spec, state, adjoint, u);
    let rhs: f64 = (0..n)
        .map(|k| {
            let acc: f64 = (0..np)
                .map(|p| {
                    let s = &sums[(k * np + p) * du..(k * np + p + 1) * du];
                    s.iter().zip(delta.at(k, p)).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum();
            grid.dt(k) * acc / np as f64
        })
        .sum();
    Ok(DualityReport { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Settings of [`projected_gradient_descent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConfig {
    pub max_steps: usize,
    pub lr: f64,
    /// Stop once the stationarity residual falls to this value.
    pub tol: f64,
    /// Relative cost increase tolerated before a step counts as an increase.
    pub increase_tol: f64,
    /// Consecutive rejected steps that raise [`Error::Stall`].
    pub max_increases: usize,
    /// Polynomial degree of the adjoint regression basis.
    pub degree: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self { max_steps: 200, lr: 0.5, tol: 1e-3, increase_tol: 1e-12, max_increases: 5, degree: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOutcome {
    pub iterate: ControlIterate,
    /// True when no step had to be rejected.
    pub monotone: bool,
    pub residuals: Vec<f64>,
    pub final_gradient: GradientField,
}

/// `u ← Π_U(u − lr·G)` on a fixed ensemble, halving `lr` whenever a step raises the cost.
pub fn projected_gradient_descent(
    spec: &ControlProblemSpec,
    u0: &ControlIterate,
    ens: &Arc<BrownianEnsemble>,
    dcfg: &DescentConfig,
    cfg: &SolverConfig,
) -> Result<DescentOutcome> {
    if !(dcfg.lr > 0.0) || dcfg.max_increases == 0 {
        return Err(Error::Config("descent needs a positive rate and a positive stall limit".into()));
    }
    if !u0.is_admissible(&spec.set) {
        return Err(Error::Domain("initial control is not admissible".into()));
    }
    let grid = ens.grid().clone();
    let mut u = u0.clone();
    let mut state = solve_state(spec, &u, ens)?;
    let mut cost = evaluate_cost(spec, &u, &state);
    u.costs = vec![cost];
    let mut lr = dcfg.lr;
    let mut monotone = true;
    let mut residuals = Vec::new();
    let mut increases = 0;
    let mut rejected = Vec::new();
    loop {
        let (adj, _) = solve_adjoint(spec, &state, &u, ens, dcfg.degree, cfg)?;
        let g = gradient_field(spec, &state, &adj, &u)?;
        let res = vi_residual(&g, &u, &spec.set, &grid);
        residuals.push(res);
        if res <= dcfg.tol || u.steps.len() >= dcfg.max_steps {
            return Ok(DescentOutcome { iterate: u, monotone, residuals, final_gradient: g });
        }
        loop {
            let mut next = u.clone();
            let dir = if u.is_open_loop() { g.means() } else { g.values.clone() };
            for (v, gv) in next.values.iter_mut().zip(&dir) {
                *v -= lr * gv;
            }
            next.project(&spec.set);
            let next_state = solve_state(spec, &next, ens)?;
            let next_cost = evaluate_cost(spec, &next, &next_state);
            if next_cost <= cost + dcfg.increase_tol * cost.abs().max(1.0) {
                next.steps.push(lr);
                next.costs.push(next_cost);
                u = next;
                state = next_state;
                cost = next_cost;
                increases = 0;
                break;
            }
            monotone = false;
            increases += 1;
            rejected.push(next_cost);
            if increases >= dcfg.max_increases {
                let mut costs = u.costs.clone();
                costs.extend(&rejected);
                return Err(Error::Stall { costs });
            }
            lr *= 0.5;
        }
    }
}

/// Cost changes under random admissible perturbations of `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub base_cost: f64,
    /// Monte Carlo standard error of the base cost.
    pub noise: f64,
    /// `J(Π(u + ε·v)) − J(u)` per direction.
    pub deltas: Vec<f64>,
}

impl PerturbationReport {
    /// True when no perturbation lowers the cost by more than `2·noise`.
    pub fn passes(&self) -> bool {
        self.deltas.iter().all(|d| *d >= -2.0 * self.noise)
    }
}

pub fn perturbation_test(
    spec: &ControlProblemSpec,
    u: &ControlIterate,
    ens: &BrownianEnsemble,
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<PerturbationReport> {
    let state = solve_state(spec, u, ens)?;
    let (base_cost, noise) = evaluate_cost_with_noise(spec, u, &state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(count);
    for _ in 0..count {
        let dir: Vec<f64> = (0..u.nodes() * u.du()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = u.shifted(&dir, eps);
        w.project(&spec.set);
        deltas.push(evaluate_cost(spec, &w, &solve_state(spec, &w, ens)?) - base_cost);
    }
    Ok(PerturbationReport { base_cost, noise, deltas })
}
