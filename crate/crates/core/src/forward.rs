//! Particle solver for singular mean-field forward Volterra equations
//!
//! `Y(t) = φ(t) + ∫₀ᵗ Φ(t,s,Y(s),E Y(s)) ds + ∫₀ᵗ Ψ(t,s,Y(s),E Y(s)) dB_s`
//!
//! using an explicit left-point scheme with product-integration weights for
//! coefficients declared as `kernel × regular part`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{ForwardEnvelopes, Triangle};
use crate::stochastic::{empirical_mean, BrownianEnsemble, TimeGrid};
use crate::Kernel;

/// Overflow guard on any state component.
pub const OVERFLOW: f64 = 1e12;

/// Particles advanced together by one task of the forward scheme.
const PARTICLE_BLOCK: usize = 256;

/// Evaluation point of a coefficient: row node `i` (time `t`), column node `k` (time `s`).
#[derive(Debug, Clone, Copy)]
pub struct CoefCtx {
    pub i: usize,
    pub k: usize,
    pub t: f64,
    pub s: f64,
    pub particle: usize,
}

pub type CoefFn = Arc<dyn Fn(&CoefCtx, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type FreeFn = Arc<dyn Fn(&BrownianEnsemble, usize, usize, &mut [f64]) + Send + Sync>;

/// Drift or diffusion coefficient, optionally factored as `k(t,s)·f(…)`.
#[derive(Clone)]
pub struct Coefficient {
    pub kernel: Option<Kernel>,
    pub f: CoefFn,
    zero: bool,
}

impl Coefficient {
    pub fn new(f: CoefFn) -> Self {
        Self { kernel: None, f, zero: false }
    }

    /// `k(t,s)·f(…)`; `k` must live on the lower triangle.
    pub fn factored(kernel: Kernel, f: CoefFn) -> Result<Self> {
        if kernel.domain() != Triangle::Lower {
            return Err(Error::Config("forward kernels live on the lower triangle".into()));
        }
        Ok(Self { kernel: Some(kernel), f, zero: false })
    }

    pub fn zero() -> Self {
        Self { kernel: None, f: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)), zero: true }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// True when both sides evaluate the same closure with the same kernel,
    /// so their difference vanishes identically.
    pub fn same_as(&self, other: &Self) -> bool {
        (self.zero && other.zero) || (Arc::ptr_eq(&self.f, &other.f) && self.kernel == other.kernel)
    }

    /// Full coefficient value including the kernel factor.
    pub fn value(&self, ctx: &CoefCtx, y: &[f64], ybar: &[f64], out: &mut [f64]) {
        (self.f)(ctx, y, ybar, out);
        if let Some(k) = &self.kernel {
            let kv = k.eval(ctx.t, ctx.s).unwrap_or(f64::INFINITY);
            out.iter_mut().for_each(|v| *v *= kv);
        }
    }

    /// Quadrature weight of column `k` in row `i`: `∫_cell k(t_i,s)ds` or `Δ_k`.
    fn weight(&self, grid: &TimeGrid, i: usize, k: usize) -> f64 {
        match &self.kernel {
            Some(kern) => kern.cell_integral(grid.t(i), grid.t(k), grid.t(k + 1)),
            None => grid.dt(k),
        }
    }
}

/// Coefficients and envelopes of a forward equation.
#[derive(Clone)]
pub struct ForwardSpec {
    pub d: usize,
    pub m: usize,
    pub phi: FreeFn,
    pub drift: Coefficient,
    /// Output is `d × m`, row-major.
    pub diffusion: Coefficient,
    pub envelopes: ForwardEnvelopes<f64>,
    pub zero_at_zero: bool,
}

impl ForwardSpec {
    /// Deterministic constant free term.
    pub fn constant_free_term(y0: Vec<f64>) -> FreeFn {
        Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&y0))
    }

    /// `d = m = 1`, `Φ = a·ȳ`, `Ψ = σ`, `φ ≡ y₀`.
    pub fn linear_mean_field(a: f64, sigma: f64, y0: f64, b: f64) -> Result<Self> {
        let drift = Coefficient::new(Arc::new(move |_, _, ybar: &[f64], out: &mut [f64]| out[0] = a * ybar[0]));
        let diffusion = if sigma == 0.0 {
            Coefficient::zero()
        } else {
            Coefficient::new(Arc::new(move |_, _, _, out: &mut [f64]| out[0] = sigma))
        };
        Ok(Self {
            d: 1,
            m: 1,
            phi: Self::constant_free_term(vec![y0]),
            drift,
            diffusion,
            envelopes: ForwardEnvelopes { k1: Kernel::constant(a.abs(), Triangle::Lower, b)?, k2: Kernel::zero(Triangle::Lower, b) },
            zero_at_zero: sigma == 0.0,
        })
    }

    /// `d = m = 1`, `Φ = 0`, `Ψ = σ`, `φ ≡ 0`.
    pub fn constant_diffusion(sigma: f64, b: f64) -> Result<Self> {
        let mut spec = Self::linear_mean_field(0.0, sigma, 0.0, b)?;
        spec.drift = Coefficient::zero();
        Ok(spec)
    }

    /// `d = m = 1`, `Φ = scale·(t−s)^{γ−1}·a·ȳ`, `φ ≡ y₀`.
    pub fn fractional_drift(gamma: f64, scale: f64, a: f64, y0: f64, b: f64) -> Result<Self> {
        let kern = Kernel::fractional(gamma, scale, Triangle::Lower, b)?;
        let drift = Coefficient::factored(kern.clone(), Arc::new(move |_, _, ybar: &[f64], out: &mut [f64]| out[0] = a * ybar[0]))?;
        Ok(Self {
            d: 1,
            m: 1,
            phi: Self::constant_free_term(vec![y0]),
            drift,
            diffusion: Coefficient::zero(),
            envelopes: ForwardEnvelopes { k1: kern.scaled(a.abs())?, k2: Kernel::zero(Triangle::Lower, b) },
            zero_at_zero: true,
        })
    }
}

/// Trajectories `Y` (node-major, `N × d` per node) with cached means.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSolution {
    grid: TimeGrid,
    d: usize,
    np: usize,
    y: Vec<f64>,
    mean: Vec<f64>,
}

impl ForwardSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_particles(&self) -> usize {
        self.np
    }

    /// Particle-major values of `Y(t_i)`.
    pub fn y(&self, i: usize) -> &[f64] {
        let w = self.np * self.d;
        &self.y[i * w..(i + 1) * w]
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.mean[i * self.d..(i + 1) * self.d]
    }

    /// Per-component sample variance of `Y(t_i)` (denominator `N − 1`).
    pub fn variance(&self, i: usize) -> Vec<f64> {
        let mean = self.mean(i);
        let mut var = vec![0.0; self.d];
        for row in self.y(i).chunks_exact(self.d) {
            for a in 0..self.d {
                var[a] += (row[a] - mean[a]).powi(2);
            }
        }
        var.iter().map(|v| v / (self.np as f64 - 1.0)).collect()
    }

    /// All node values, node-major.
    pub fn raw(&self) -> &[f64] {
        &self.y
    }
}

fn weights(c: &Coefficient, grid: &TimeGrid) -> Vec<f64> {
    let n = grid.n();
    let mut w = vec![0.0; (n + 1) * n];
    for i in 0..=n {
        for k in 0..i {
            w[i * n + k] = c.weight(grid, i, k);
        }
    }
    w
}

/// Diffusion multiplier: cell-averaged kernel value, or 1 when unfactored.
fn diffusion_factors(c: &Coefficient, grid: &TimeGrid) -> Vec<f64> {
    let n = grid.n();
    let mut w = vec![1.0; (n + 1) * n];
    if c.kernel.is_some() {
        for i in 0..=n {
            for k in 0..i {
                w[i * n + k] = c.weight(grid, i, k) / grid.dt(k);
            }
        }
    }
    w
}

/// Replaces `φ` by `φ̃ = φ + ∫Φ(·,s,0,0)ds + ∫Ψ(·,s,0,0)dB_s` evaluated pathwise on `ens`,
/// and the coefficients by their zero-centered versions.
///
/// The returned free term is tied to `ens`.
pub fn shift_free_term_forward(spec: &ForwardSpec, ens: &BrownianEnsemble) -> Result<ForwardSpec> {
    if spec.zero_at_zero {
        return Ok(spec.clone());
    }
    let grid = ens.grid();
    let (n, np, d, m) = (grid.n(), ens.n_particles(), spec.d, spec.m);
    let wd = weights(&spec.drift, grid);
    let wg = diffusion_factors(&spec.diffusion, grid);
    let zeros = vec![0.0; d];
    let mut values = vec![0.0; (n + 1) * np * d];
    values.par_chunks_mut(np * d).enumerate().for_each(|(i, node)| {
        let mut fb = vec![0.0; d];
        let mut gb = vec![0.0; d * m];
        for (p, out) in node.chunks_exact_mut(d).enumerate() {
            (spec.phi)(ens, i, p, out);
        }
        for k in 0..i {
            for (p, out) in node.chunks_exact_mut(d).enumerate() {
                let ctx = CoefCtx { i, k, t: grid.t(i), s: grid.t(k), particle: p };
                if !spec.drift.is_zero() {
                    (spec.drift.f)(&ctx, &zeros, &zeros, &mut fb);
                    for a in 0..d {
                        out[a] += wd[i * n + k] * fb[a];
                    }
                }
                if !spec.diffusion.is_zero() {
                    (spec.diffusion.f)(&ctx, &zeros, &zeros, &mut gb);
                    let db = ens.increment(k, p);
                    for a in 0..d {
                        out[a] += wg[i * n + k] * (0..m).map(|b| gb[a * m + b] * db[b]).sum::<f64>();
                    }
                }
            }
        }
    });
    let values = Arc::new(values);
    let phi: FreeFn = Arc::new(move |_, i, p, out: &mut [f64]| {
        let o = (i * np + p) * d;
        out.copy_from_slice(&values[o..o + d]);
    });
    let center = |c: &Coefficient, dim: usize| -> Coefficient {
        if c.is_zero() {
            return c.clone();
        }
        let f = c.f.clone();
        let zeros = vec![0.0; d];
        Coefficient {
            kernel: c.kernel.clone(),
            f: Arc::new(move |ctx, y, ybar, out: &mut [f64]| {
                let mut stack = [0.0; 16];
                let mut heap = Vec::new();
                let base: &mut [f64] = if dim <= stack.len() {
                    &mut stack[..dim]
                } else {
                    heap.resize(dim, 0.0);
                    &mut heap
                };
                f(ctx, &zeros, &zeros, base);
                f(ctx, y, ybar, out);
                for (o, b) in out.iter_mut().zip(base.iter()) {
                    *o -= b;
                }
            }),
            zero: false,
        }
    };
    Ok(ForwardSpec {
        d,
        m,
        phi,
        drift: center(&spec.drift, d),
        diffusion: center(&spec.diffusion, d * m),
        envelopes: spec.envelopes.clone(),
        zero_at_zero: true,
    })
}

/// Largest ratio `|Φ(x)−Φ(y)| / (K(t,s)·(|x−y|+|x̄−ȳ|))` over random samples.
///
/// Values above 1 mean the declared envelope is violated.
pub fn lipschitz_spot_check(spec: &ForwardSpec, grid: &TimeGrid, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n();
    let (d, m) = (spec.d, spec.m);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        if n < 1 {
            break;
        }
        let i = rng.gen_range(1..=n);
        let k = rng.gen_range(0..i);
        let ctx = CoefCtx { i, k, t: grid.t(i), s: grid.t(k), particle: 0 };
        let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (x, xb, y, yb) = (draw(d), draw(d), draw(d), draw(d));
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            + xb.iter().zip(&yb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        for (coef, env, dim) in [(&spec.drift, &spec.envelopes.k1, d), (&spec.diffusion, &spec.envelopes.k2, d * m)] {
            if coef.is_zero() {
                continue;
            }
            let mut u = vec![0.0; dim];
            let mut v = vec![0.0; dim];
            coef.value(&ctx, &x, &xb, &mut u);
            coef.value(&ctx, &y, &yb, &mut v);
            let diff = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let bound = env.eval(ctx.t, ctx.s).unwrap_or(0.0) * dist;
            if diff > 0.0 {
                worst = worst.max(if bound > 0.0 { diff / bound } else { f64::INFINITY });
            }
        }
    }
    worst
}

/// Explicit left-point particle scheme.
///
/// The empirical mean of level `k` is formed before any level `k' > k` is advanced.
pub fn solve_forward(spec: &ForwardSpec, ens: &BrownianEnsemble) -> Result<ForwardSolution> {
    if !spec.zero_at_zero {
        return Err(Error::Config("forward spec is not centered; shift its free term first".into()));
    }
    solve_forward_direct(spec, ens)
}

/// The scheme of [`solve_forward`] applied to the coefficients as given.
///
/// For the left-point scheme this equals shifting the free term and solving
/// the centered problem, without the extra pass and the doubled coefficient
/// evaluations.
pub fn solve_forward_direct(spec: &ForwardSpec, ens: &BrownianEnsemble) -> Result<ForwardSolution> {
    if spec.m != ens.m() {
        return Err(Error::Shape(format!("spec noise dimension {} vs ensemble {}", spec.m, ens.m())));
    }
    spec.envelopes.check()?;
    let grid = ens.grid();
    debug_assert!(lipschitz_spot_check(spec, grid, 16, 7) <= 1.0 + 1e-9, "declared forward envelopes violated");
    let (n, np, d, m) = (grid.n(), ens.n_particles(), spec.d, spec.m);
    let wd = weights(&spec.drift, grid);
    let wg = diffusion_factors(&spec.diffusion, grid);
    let w = np * d;
    let mut y = vec![0.0; (n + 1) * w];
    let mut mean = vec![0.0; (n + 1) * d];
    for i in 0..=n {
        let (done, rest) = y.split_at_mut(i * w);
        let row = &mut rest[..w];
        let means = &mean[..i * d];
        let done = &*done;
        // Particle blocks with the column loop outside keep the reads of
        // earlier levels contiguous.
        row.par_chunks_mut(PARTICLE_BLOCK * d).enumerate().for_each(|(blk, chunk)| {
            let p0 = blk * PARTICLE_BLOCK;
            let mut fb = vec![0.0; d];
            let mut gb = vec![0.0; d * m];
            for (q, out) in chunk.chunks_exact_mut(d).enumerate() {
                (spec.phi)(ens, i, p0 + q, out);
            }
            for k in 0..i {
                let yb = &means[k * d..(k + 1) * d];
                let (wk, om) = (wd[i * n + k], wg[i * n + k]);
                for (q, out) in chunk.chunks_exact_mut(d).enumerate() {
                    let p = p0 + q;
                    let yk = &done[k * w + p * d..k * w + (p + 1) * d];
                    let ctx = CoefCtx { i, k, t: grid.t(i), s: grid.t(k), particle: p };
                    if !spec.drift.is_zero() {
                        (spec.drift.f)(&ctx, yk, yb, &mut fb);
                        for a in 0..d {
                            out[a] += wk * fb[a];
                        }
                    }
                    if !spec.diffusion.is_zero() {
                        (spec.diffusion.f)(&ctx, yk, yb, &mut gb);
                        let db = ens.increment(k, p);
                        for a in 0..d {
                            out[a] += om * (0..m).map(|b| gb[a * m + b] * db[b]).sum::<f64>();
                        }
                    }
                }
            }
        });
        if let Some(v) = row.iter().find(|v| !v.is_finite() || v.abs() > OVERFLOW) {
            return Err(Error::Divergence { node: i, value: *v });
        }
        mean[i * d..(i + 1) * d].copy_from_slice(&empirical_mean(row, d));
    }
    Ok(ForwardSolution { grid: grid.clone(), d, np, y, mean })
}

/// Outcome of one stability comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub delta: f64,
    /// `‖Y_A − Y_B‖` in `L²(Ω × [0,b])`.
    pub distance: f64,
    /// Free-term difference plus coefficient differences along `Y_B`.
    pub rhs: f64,
    pub ratio: f64,
}

/// Compares the solutions of two specs on common random numbers.
///
/// The right-hand side is the one of the centered (free-term shifted)
/// problems; the solutions themselves come from the equivalent direct scheme.
pub fn forward_stability_experiment(a: &ForwardSpec, b: &ForwardSpec, ens: &BrownianEnsemble) -> Result<StabilityReport> {
    let ya = solve_forward_direct(a, ens)?;
    let yb = solve_forward_direct(b, ens)?;
    compare_forward(a, &ya, b, &yb, &mut None, ens)
}

/// Stability report of two solved problems. Coefficients shared by both
/// sides contribute nothing and are skipped; when all are shared the
/// zero-point terms of the shift cancel and the raw free terms are compared.
/// `a_centered` caches the shifted form of `a` across a ladder.
fn compare_forward(
    a: &ForwardSpec,
    ya: &ForwardSolution,
    b: &ForwardSpec,
    yb: &ForwardSolution,
    a_centered: &mut Option<ForwardSpec>,
    ens: &BrownianEnsemble,
) -> Result<StabilityReport> {
    // Decided before shifting, since centering wraps every coefficient in a
    // fresh closure.
    let (same_drift, same_diffusion) = (a.drift.same_as(&b.drift), a.diffusion.same_as(&b.diffusion));
    let (a, b) = if same_drift && same_diffusion {
        (a.clone(), b.clone())
    } else {
        if a_centered.is_none() {
            *a_centered = Some(shift_free_term_forward(a, ens)?);
        }
        (a_centered.clone().expect("set above"), shift_free_term_forward(b, ens)?)
    };
    let grid = ens.grid();
    let (n, np, d, m) = (grid.n(), ens.n_particles(), a.d, a.m);
    let (wda, wdb) = (weights(&a.drift, grid), weights(&b.drift, grid));
    let (wga, wgb) = (diffusion_factors(&a.diffusion, grid), diffusion_factors(&b.diffusion, grid));
    let mut dist = 0.0;
    let mut free = 0.0;
    let mut drift = 0.0;
    let mut diff = 0.0;
    for i in 0..n {
        let dt = grid.dt(i);
        let parts: Vec<(f64, f64, f64, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut pa = vec![0.0; d];
                let mut pb = vec![0.0; d];
                (a.phi)(ens, i, p, &mut pa);
                (b.phi)(ens, i, p, &mut pb);
                let mut dr = vec![0.0; d];
                let mut dg = vec![0.0; d];
                let (mut fa, mut fb) = (vec![0.0; d], vec![0.0; d]);
                let (mut ga, mut gb) = (vec![0.0; d * m], vec![0.0; d * m]);
                for k in 0..i {
                    if same_drift && same_diffusion {
                        break;
                    }
                    let yk = &yb.y(k)[p * d..(p + 1) * d];
                    let ctx = CoefCtx { i, k, t: grid.t(i), s: grid.t(k), particle: p };
                    if !same_drift {
                        (a.drift.f)(&ctx, yk, yb.mean(k), &mut fa);
                        (b.drift.f)(&ctx, yk, yb.mean(k), &mut fb);
                        for c in 0..d {
                            dr[c] += wda[i * n + k] * fa[c] - wdb[i * n + k] * fb[c];
                        }
                    }
                    if !same_diffusion {
                        (a.diffusion.f)(&ctx, yk, yb.mean(k), &mut ga);
                        (b.diffusion.f)(&ctx, yk, yb.mean(k), &mut gb);
                        let db = ens.increment(k, p);
                        for c in 0..d {
                            dg[c] += (0..m)
                                .map(|q| (wga[i * n + k] * ga[c * m + q] - wgb[i * n + k] * gb[c * m + q]) * db[q])
                                .sum::<f64>();
                        }
                    }
                }
                let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
                let dy: f64 = ya.y(i)[p * d..(p + 1) * d].iter().zip(&yb.y(i)[p * d..(p + 1) * d]).map(|(u, v)| (u - v).powi(2)).sum();
                let dphi: f64 = pa.iter().zip(&pb).map(|(u, v)| (u - v).powi(2)).sum();
                (dy, dphi, sq(&dr), sq(&dg))
            })
            .collect();
        for (dy, dphi, dr, dg) in parts {
            dist += dy * dt;
            free += dphi * dt;
            drift += dr * dt;
            diff += dg * dt;
        }
    }
    let npf = np as f64;
    let distance = (dist / npf).sqrt();
    let rhs = (free / npf).sqrt() + (drift / npf).sqrt() + (diff / npf).sqrt();
    let ratio = if rhs > 0.0 { distance / rhs } else { 0.0 };
    Ok(StabilityReport { delta: 0.0, distance, rhs, ratio })
}

/// Runs [`forward_stability_experiment`] over a perturbation ladder.
pub fn forward_stability_ladder<F>(make: F, deltas: &[f64], ens: &BrownianEnsemble) -> Result<Vec<StabilityReport>>
where
    F: Fn(f64) -> Result<(ForwardSpec, ForwardSpec)>,
{
    deltas
        .iter()
        .map(|&delta| {
            let (a, b) = make(delta)?;
            let mut r = forward_stability_experiment(&a, &b, ens)?;
            r.delta = delta;
            Ok(r)
        })
        .collect()
}

/// Ladder against one fixed base problem, which is solved once.
///
/// `perturb(δ)` builds the second problem; reports match
/// [`forward_stability_ladder`] with `make(δ) = (base, perturb(δ))`.
pub fn forward_stability_ladder_from<F>(base: &ForwardSpec, perturb: F, deltas: &[f64], ens: &BrownianEnsemble) -> Result<Vec<StabilityReport>>
where
    F: Fn(f64) -> Result<ForwardSpec>,
{
    let ya = solve_forward_direct(base, ens)?;
    let mut centered = None;
    deltas
        .iter()
        .map(|&delta| {
            let moved = perturb(delta)?;
            let yb = solve_forward_direct(&moved, ens)?;
            let mut r = compare_forward(base, &ya, &moved, &yb, &mut centered, ens)?;
            r.delta = delta;
            Ok(r)
        })
        .collect()
}

/// `max(distance/δ) / min(distance/δ)` over a ladder; 1 means exactly linear.
pub fn linearity_spread(reports: &[StabilityReport]) -> f64 {
    let slopes: Vec<f64> = reports.iter().map(|r| r.distance / r.delta).collect();
    let max = slopes.iter().cloned().fold(f64::MIN, f64::max);
    let min = slopes.iter().cloned().fold(f64::MAX, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}
