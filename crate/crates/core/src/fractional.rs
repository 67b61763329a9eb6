//! Caputo fractional mean-field backward equations of order `γ ∈ (½, 1)`
//! recast as singular backward Volterra equations, with Gamma and
//! Mittag-Leffler oracles.
//!
//! The mild form `x(t) = ξ + Γ(γ)⁻¹∫ₜᵇ (s−t)^{γ−1}[ρ(s,…) − Ax(s)] ds − Γ(γ)⁻¹∫ₜᵇ (s−t)^{γ−1} z(t,s) dB_s`
//! becomes a backward Volterra equation with `ℵ(t,s) = Γ(γ)⁻¹(s−t)^{γ−1} z(t,s)`
//! for `s > t` and `ℵ(s,t) = z(s,t)`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::backward::{
    solve_bsvie_cascade, BackwardGeneratorSpec, CascadeReport, FreeTermSpec, GenArgs, Generator, SolverConfig,
};
use crate::error::{Error, Result};
use crate::kernels::{BackwardEnvelopes, KernelEnvelopeSet, Triangle};
use crate::stochastic::{BrownianEnsemble, DiscreteProcessPair, NodeFeatures, RegressionBasis, TimeGrid};
use crate::Kernel;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("ln Γ needs a finite positive argument, got {x}")));
    }
    Ok(ln_gamma_pos(x))
}

fn ln_gamma_pos(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma_pos(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (k, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `Γ(x)` for `x > 0`; exact at positive integers up to 20.
pub fn gamma_fn(x: f64) -> Result<f64> {
    let lg = ln_gamma(x)?;
    if x.fract() == 0.0 && x <= 21.0 {
        return Ok((1..x as u64).map(|k| k as f64).product());
    }
    Ok(lg.exp())
}

/// `E_γ(x) = Σ_k x^k / Γ(γk + 1)` for `γ ∈ (0, 1]` and `|x| ≤ 10`.
pub fn mittag_leffler(gamma: f64, x: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!("Mittag-Leffler order must lie in (0, 1], got {gamma}")));
    }
    if !(x.abs() <= 10.0) {
        return Err(Error::Domain(format!("Mittag-Leffler series is used for |x| ≤ 10, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let lx = x.abs().ln();
    let mut sum = 1.0;
    let mut peaked = false;
    let mut prev = 1.0f64;
    for k in 1..10_000usize {
        let kf = k as f64;
        let mag = (kf * lx - ln_gamma_pos(gamma * kf + 1.0)).exp();
        let term = if x < 0.0 && k % 2 == 1 { -mag } else { mag };
        sum += term;
        peaked |= mag < prev;
        prev = mag;
        if peaked && mag < 1e-14 * sum.abs().max(1.0) {
            return Ok(sum);
        }
    }
    Err(Error::Domain(format!("Mittag-Leffler series did not converge at x = {x}")))
}

/// Arguments of `ρ` for one particle at row `t` and column `s`.
#[derive(Debug, Clone, Copy)]
pub struct RhoArgs<'a> {
    pub t: f64,
    pub s: f64,
    pub particle: usize,
    pub x: &'a [f64],
    /// Original `z(t,s)`.
    pub z_ts: &'a [f64],
    /// `z(s,t)`.
    pub z_st: &'a [f64],
    pub x_bar: &'a [f64],
    pub z_ts_bar: &'a [f64],
    pub z_st_bar: &'a [f64],
}

pub type RhoFn = Arc<dyn Fn(&RhoArgs, &mut [f64]) + Send + Sync>;
/// Terminal value `ξ` of one particle.
pub type TerminalFn = Arc<dyn Fn(&BrownianEnsemble, usize, &mut [f64]) + Send + Sync>;

/// Lipschitz constants of `ρ` in each argument.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RhoLipschitz {
    pub x: f64,
    pub z: f64,
    pub xi: f64,
    pub x_bar: f64,
    pub z_bar: f64,
    pub xi_bar: f64,
    /// When set, every envelope uses `max` of the constants above, and
    /// `L_x1 = L_x2 = (L + ‖A‖)·k`.
    pub uniform: bool,
}

impl RhoLipschitz {
    pub fn uniform(l: f64) -> Self {
        Self { x: l, z: l, xi: l, x_bar: l, z_bar: l, xi_bar: l, uniform: true }
    }

    fn max(&self) -> f64 {
        [self.x, self.z, self.xi, self.x_bar, self.z_bar, self.xi_bar].into_iter().fold(0.0, f64::max)
    }
}

/// Caputo fractional mean-field backward equation on `[0, b]`.
#[derive(Clone)]
pub struct FractionalSpec {
    pub gamma: f64,
    pub d: usize,
    /// Row-major `d × d` matrix `A`.
    pub a: Vec<f64>,
    /// `None` means `ρ ≡ 0`.
    pub rho: Option<RhoFn>,
    pub lipschitz: RhoLipschitz,
    /// Asserts `ρ(·,0,…,0) = 0`.
    pub rho_zero_at_zero: bool,
    pub xi: TerminalFn,
    pub b: f64,
}

impl FractionalSpec {
    /// `ρ = a·x̄`, `A = 0`, scalar state.
    pub fn mean_field(gamma: f64, a: f64, xi: TerminalFn, b: f64) -> Self {
        let rho: RhoFn = Arc::new(move |r: &RhoArgs, out: &mut [f64]| out[0] = a * r.x_bar[0]);
        Self {
            gamma,
            d: 1,
            a: vec![0.0],
            rho: Some(rho),
            lipschitz: RhoLipschitz { x_bar: a.abs(), ..RhoLipschitz::default() },
            rho_zero_at_zero: true,
            xi,
            b,
        }
    }

    /// `ρ ≡ 0`, `A = 0`: the pure conditional-expectation problem.
    pub fn driftless(gamma: f64, d: usize, xi: TerminalFn, b: f64) -> Self {
        Self {
            gamma,
            d,
            a: vec![0.0; d * d],
            rho: None,
            lipschitz: RhoLipschitz::default(),
            rho_zero_at_zero: true,
            xi,
            b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.5) {
            return Err(Error::Admissibility(format!("order γ = {} needs 2γ − 1 > 0", self.gamma)));
        }
        if !(self.gamma < 1.0) {
            return Err(Error::Domain(format!("order γ = {} must be below 1", self.gamma)));
        }
        if !(self.b > 0.0) || self.d == 0 || self.a.len() != self.d * self.d {
            return Err(Error::Config("fractional problem needs b > 0, d ≥ 1 and a d × d matrix".into()));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("matrix A has non-finite entries".into()));
        }
        Ok(())
    }

    /// `(s−t)^{γ−1}/Γ(γ)` on the upper triangle.
    pub fn kernel(&self) -> Result<Kernel> {
        Kernel::fractional(self.gamma, 1.0 / gamma_fn(self.gamma)?, Triangle::Upper, self.b)
    }

    fn a_norm(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn is_linear_zero(&self) -> bool {
        self.rho.is_none() && self.a.iter().all(|v| *v == 0.0)
    }

    /// Envelopes of the transformed generator.
    pub fn envelopes(&self) -> Result<BackwardEnvelopes<f64>> {
        let k = self.kernel()?;
        let c = |v: f64| Kernel::constant(v, Triangle::Upper, self.b);
        let l = &self.lipschitz;
        let a = self.a_norm();
        if l.uniform {
            let lm = l.max();
            return Ok(BackwardEnvelopes {
                lx1: k.scaled(lm + a)?,
                lx2: k.scaled(lm + a)?,
                lz1: c(lm)?,
                lz2: c(lm)?,
                lxi1: k.scaled(lm)?,
                lxi2: k.scaled(lm)?,
            });
        }
        Ok(BackwardEnvelopes {
            lx1: k.scaled(l.x + a)?,
            lx2: k.scaled(l.x_bar)?,
            lz1: c(l.z)?,
            lz2: c(l.z_bar)?,
            lxi1: k.scaled(l.xi)?,
            lxi2: k.scaled(l.xi_bar)?,
        })
    }
}

/// `ℵ(t_i,t_j) = scale · z(t_i,t_j)` with the cell-averaged kernel `w_ij / Δ_j`.
pub fn aleph_scale(kernel: &Kernel, grid: &TimeGrid, i: usize, j: usize) -> f64 {
    kernel.cell_integral(grid.t(i), grid.t(j), grid.t(j + 1)) / grid.dt(j)
}

struct FractionalGenerator {
    kernel: Kernel,
    d: usize,
    a: Vec<f64>,
    rho: Option<RhoFn>,
}

impl Generator for FractionalGenerator {
    fn eval(&self, g: &GenArgs, out: &mut [f64]) {
        let (d, dm) = (self.d, g.d * g.m);
        let w = self.kernel.cell_integral(g.t, g.s, g.s_next);
        let inv = if w > 0.0 { (g.s_next - g.s) / w } else { 0.0 };
        let z_bar: Vec<f64> = g.z_bar.iter().map(|v| v * inv).collect();
        let mut zbuf = vec![0.0; dm];
        for p in 0..g.n_particles {
            let x = &g.x[p * d..(p + 1) * d];
            let o = &mut out[p * d..(p + 1) * d];
            match &self.rho {
                Some(rho) => {
                    for (zb, v) in zbuf.iter_mut().zip(&g.z[p * dm..(p + 1) * dm]) {
                        *zb = v * inv;
                    }
                    let args = RhoArgs {
                        t: g.t,
                        s: g.s,
                        particle: p,
                        x,
                        z_ts: &zbuf,
                        z_st: &g.xi[p * dm..(p + 1) * dm],
                        x_bar: g.x_bar,
                        z_ts_bar: &z_bar,
                        z_st_bar: g.xi_bar,
                    };
                    rho(&args, o);
                }
                None => o.fill(0.0),
            }
            for r in 0..d {
                let ax: f64 = (0..d).map(|c| self.a[r * d + c] * x[c]).sum();
                o[r] -= ax;
            }
        }
    }
}

/// Transformed generator, free term `Ψ ≡ ξ` and envelopes.
pub fn to_bsvie(
    fs: &FractionalSpec,
    ens: &BrownianEnsemble,
) -> Result<(BackwardGeneratorSpec, FreeTermSpec, KernelEnvelopeSet<f64>)> {
    fs.validate()?;
    if (ens.grid().horizon() - fs.b).abs() > 1e-12 * fs.b {
        return Err(Error::Config("ensemble horizon differs from the fractional horizon".into()));
    }
    let envelopes = fs.envelopes()?;
    let xi = fs.xi.clone();
    let ft = FreeTermSpec::from_fn(ens, fs.d, false, move |e, _, p, out| xi(e, p, out))?;
    let kernel = fs.kernel()?;
    let gen = if fs.is_linear_zero() {
        BackwardGeneratorSpec::zero(fs.b)
    } else {
        let g = FractionalGenerator { kernel: kernel.clone(), d: fs.d, a: fs.a.clone(), rho: fs.rho.clone() };
        BackwardGeneratorSpec::new(Arc::new(g), envelopes.clone(), fs.rho_zero_at_zero).with_factor(kernel)?
    };
    Ok((gen, ft, KernelEnvelopeSet::Backward(envelopes)))
}

/// Replaces the upper-triangle `ℵ(t_i,t_j)` (`j ≥ i`) of `pair` by `z(t_i,t_j) = ℵ / scale`.
pub fn inverse_rescale(pair: &mut DiscreteProcessPair, kernel: &Kernel) -> Result<()> {
    rescale_upper(pair, kernel, true)
}

/// Replaces the upper-triangle `z(t_i,t_j)` of `pair` by `ℵ = scale · z`.
pub fn forward_rescale(pair: &mut DiscreteProcessPair, kernel: &Kernel) -> Result<()> {
    rescale_upper(pair, kernel, false)
}

fn rescale_upper(pair: &mut DiscreteProcessPair, kernel: &Kernel, inverse: bool) -> Result<()> {
    let grid = pair.grid().clone();
    let n = grid.n();
    let dm = pair.d() * pair.m();
    for i in 0..n {
        for j in i..n {
            let s = aleph_scale(kernel, &grid, i, j);
            let f = if inverse { 1.0 / s } else { s };
            let kj = pair.basis().k(j);
            let c: Vec<f64> = pair.aleph_coef(i, j)[..kj * dm].iter().map(|v| v * f).collect();
            pair.set_aleph_coef(i, j, &c)?;
        }
    }
    Ok(())
}

/// Solves the fractional problem by cascade and returns `(x, z)` in the
/// original variables.
pub fn solve_fractional(
    fs: &FractionalSpec,
    basis: Arc<RegressionBasis>,
    cfg: &SolverConfig,
) -> Result<(DiscreteProcessPair, CascadeReport)> {
    let (gen, ft, _) = to_bsvie(fs, basis.ensemble())?;
    let (mut sol, report) = solve_bsvie_cascade(&gen, &ft, basis, cfg)?;
    inverse_rescale(&mut sol, &fs.kernel()?)?;
    Ok((sol, report))
}

/// Mean trajectory `E_γ(a(b − t)^γ)` of the mean-field example with `Eξ = 1`.
pub fn mean_field_oracle(gamma: f64, a: f64, b: f64, t: f64) -> Result<f64> {
    mittag_leffler(gamma, a * (b - t).powf(gamma))
}

/// Outcome of [`ito_variance_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceCheck {
    /// Empirical variance of `Σ_j ℵ(0,t_j) ΔB_j` with the recovered `ℵ`.
    pub empirical: f64,
    /// `Σ_j E|ℵ(0,t_j)|² Δ_j` from the regression Gram matrices.
    pub isometry: f64,
    /// `σ² b^{2γ−1} / ((2γ−1) Γ(γ)²)`.
    pub oracle: f64,
    /// Mean of the recovered `z(0,t_j)`, which should equal `σ`.
    pub z_mean: f64,
}

/// Itô-isometry check of the transformed equation.
///
/// With `ρ ≡ 0`, `A = 0` and `ξ = 1 + Σ_j σ (w_0j/Δ_j) ΔB_j`, the exact
/// transformed density is `ℵ(0,s) = σ (s)^{γ−1}/Γ(γ)`, so the variance of
/// `∫ ℵ(0,s) dB_s` is the kernel's squared norm times `σ²`. The running
/// integral is supplied to the regression as a node feature.
pub fn ito_variance_check(gamma: f64, sigma: f64, b: f64, n: usize, n_particles: usize, seed: u64) -> Result<VarianceCheck> {
    let grid = TimeGrid::uniform(n, b)?;
    let ens = Arc::new(BrownianEnsemble::generate_sized(&grid, n_particles, 1, seed));
    let probe = FractionalSpec::driftless(gamma, 1, Arc::new(|_: &BrownianEnsemble, _: usize, o: &mut [f64]| o[0] = 0.0), b);
    probe.validate()?;
    let kernel = probe.kernel()?;
    let weights: Vec<f64> = (0..n).map(|j| sigma * aleph_scale(&kernel, &grid, 0, j)).collect();
    let running: Vec<Vec<f64>> = (0..n_particles)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(n + 1);
            out.push(0.0);
            for (j, w) in weights.iter().enumerate() {
                acc += w * ens.increment(j, p)[0];
                out.push(acc);
            }
            out
        })
        .collect();
    let mut feat = vec![0.0; (n + 1) * n_particles];
    for (p, path) in running.iter().enumerate() {
        for (j, v) in path.iter().enumerate() {
            feat[j * n_particles + p] = *v;
        }
    }
    let running = Arc::new(running);
    let xi_paths = running.clone();
    let xi: TerminalFn = Arc::new(move |_: &BrownianEnsemble, p: usize, o: &mut [f64]| o[0] = 1.0 + xi_paths[p][n]);
    let fs = FractionalSpec { xi, ..probe };
    let features = Arc::new(NodeFeatures::new(1, n_particles, feat)?);
    let basis = Arc::new(RegressionBasis::new(ens.clone(), 1, Some(features))?);
    let (sol, _) = solve_fractional(&fs, basis, &SolverConfig::default())?;
    let mut z = vec![0.0; n_particles];
    let mut total = vec![0.0; n_particles];
    let mut isometry = 0.0;
    let mut z_mean = 0.0;
    for j in 0..n {
        let scale = aleph_scale(&kernel, &grid, 0, j);
        sol.aleph_values(0, j, &mut z);
        let inc = ens.increments_at(j);
        for p in 0..n_particles {
            total[p] += scale * z[p] * inc[p];
        }
        isometry += scale * scale * sol.aleph_second_moment(0, j) * grid.dt(j);
        z_mean += sol.aleph_mean(0, j)[0] / n as f64;
    }
    let mean = total.iter().sum::<f64>() / n_particles as f64;
    let empirical = total.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_particles - 1) as f64;
    let g = gamma_fn(gamma)?;
    let oracle = sigma * sigma * b.powf(2.0 * gamma - 1.0) / ((2.0 * gamma - 1.0) * g * g);
    Ok(VarianceCheck { empirical, isometry, oracle, z_mean })
}
