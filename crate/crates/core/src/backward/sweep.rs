//! Row recursions shared by every backward solver.

use rayon::prelude::*;

use super::generator::{BackwardGeneratorSpec, FreeTermSpec, GenArgs};
use super::SolverConfig;
use crate::error::{Error, Result};
use crate::stochastic::DiscreteProcessPair;

/// Inner fixed-point statistics of a sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InnerStats {
    /// Largest iteration count of the inner `z` fixed point.
    pub iterations: usize,
    /// Largest measured ratio of successive inner corrections.
    pub factor: f64,
}

impl InnerStats {
    pub(crate) fn merge(self, o: Self) -> Self {
        Self { iterations: self.iterations.max(o.iterations), factor: self.factor.max(o.factor) }
    }
}

/// Result of one row sweep.
pub(crate) struct RowOut {
    pub value: Vec<f64>,
    pub coefs: Vec<(usize, Vec<f64>)>,
    pub stats: InnerStats,
}

/// Backward recursion of row `i` over columns `j_lo ≤ j < j_hi`.
///
/// Starting from `Λ(j_hi) = free`, each step sets
/// `ℵ(t_i,t_j) = martingale coefficient of Λ(j+1)` and
/// `Λ(j) = Ê_j Λ(j+1) + w_ij · P(t_i, t_j, X(t_j), ℵ(t_i,t_j), ℵ(t_j,t_i), means)`
/// with `X(t_j)` and `ℵ(t_j,t_i)` read from `frozen`. Returns `Λ(j_lo)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn row_sweep(
    gen: &BackwardGeneratorSpec,
    frozen: &DiscreteProcessPair,
    i: usize,
    j_lo: usize,
    j_hi: usize,
    free: &[f64],
    free_measurable_at: usize,
    cfg: &SolverConfig,
) -> Result<RowOut> {
    let basis = frozen.basis();
    let grid = frozen.grid();
    let (d, m, np) = (frozen.d(), frozen.m(), frozen.n_particles());
    let dm = d * m;
    let split = free_measurable_at <= j_lo;
    let mut lam = if split { vec![0.0; np * d] } else { free.to_vec() };
    let mut coefs = Vec::with_capacity(j_hi.saturating_sub(j_lo));
    let mut stats = InnerStats::default();
    let mut z = vec![0.0; np * dm];
    let mut xi = vec![0.0; np * dm];
    let mut f = vec![0.0; np * d];
    for j in (j_lo..j_hi).rev() {
        let (mut zc, cond) = basis.martingale_coeff(j, &lam, d);
        if gen.is_zero() {
            lam = cond;
            coefs.push((j, zc));
            continue;
        }
        let w = gen.weight(grid, i, j);
        let (xi_row, xi_col) = if j == i { (i, i) } else { (j, i) };
        frozen.aleph_values(xi_row, xi_col, &mut xi);
        let xi_bar = frozen.aleph_mean(xi_row, xi_col).to_vec();
        let eval = |zc: &[f64], z: &mut Vec<f64>, f: &mut Vec<f64>| {
            basis.predict(j, zc, dm, z);
            let z_bar = basis.coef_mean(j, zc, dm);
            let args = GenArgs {
                i,
                j,
                t: grid.t(i),
                s: grid.t(j),
                s_next: grid.t(j + 1),
                d,
                m,
                n_particles: np,
                x: frozen.x(j),
                z,
                xi: &xi,
                x_bar: frozen.x_mean(j),
                z_bar: &z_bar,
                xi_bar: &xi_bar,
            };
            gen.generator.eval(&args, f);
        };
        eval(&zc, &mut z, &mut f);
        if gen.depends_on_z() {
            let mut iters = 1;
            let mut last = f64::NAN;
            loop {
                let target: Vec<f64> = lam.iter().zip(&f).map(|(l, v)| l + w * v).collect();
                let cond_t = basis.cond_expect(j, &target, d);
                let next = basis.martingale_coeff_centered(j, &target, &cond_t, d);
                let scale = 1.0 + zc.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let change = next.iter().zip(&zc).fold(0.0f64, |a, (u, v)| a.max((u - v).abs())) / scale;
                if last.is_finite() && last > 0.0 {
                    stats.factor = stats.factor.max(change / last);
                }
                last = change;
                zc = next;
                eval(&zc, &mut z, &mut f);
                if change <= cfg.inner_tol {
                    break;
                }
                iters += 1;
                if iters > cfg.inner_cap {
                    return Err(Error::NoConvergence { row: i, col: j, iterations: cfg.inner_cap });
                }
            }
            stats.iterations = stats.iterations.max(iters);
        }
        lam = cond.iter().zip(&f).map(|(c, v)| c + w * v).collect();
        coefs.push((j, zc));
    }
    if split {
        for (l, v) in lam.iter_mut().zip(free) {
            *l += v;
        }
    }
    Ok(RowOut { value: lam, coefs, stats })
}

/// Lower-triangle coefficients of row `i` at columns `j_stop ≤ j < i`.
///
/// Conditions `X(t_i)` successively back to `t_{j_stop}` and takes the
/// martingale coefficient of each one-step increment.
pub(crate) fn extend_row(pair: &DiscreteProcessPair, i: usize, j_stop: usize) -> Vec<(usize, Vec<f64>)> {
    let basis = pair.basis();
    let d = pair.d();
    let mut v = pair.x(i).to_vec();
    let mut out = Vec::with_capacity(i.saturating_sub(j_stop));
    for j in (j_stop..i).rev() {
        let (coef, cond) = basis.martingale_coeff(j, &v, d);
        out.push((j, coef));
        v = cond;
    }
    out
}

/// Fills `ℵ(t_i, t_j)` for `j_stop ≤ j < i` and every row in `rows` from the
/// martingale representation of `X(t_i)`.
pub fn extend_m_solution(pair: &mut DiscreteProcessPair, rows: std::ops::Range<usize>, j_stop: usize) -> Result<()> {
    let results: Vec<(usize, Vec<(usize, Vec<f64>)>)> =
        rows.into_par_iter().map(|i| (i, extend_row(pair, i, j_stop.min(i)))).collect();
    for (i, coefs) in results {
        for (j, c) in coefs {
            pair.set_aleph_coef(i, j, &c)?;
        }
    }
    Ok(())
}

/// Solves the parametrized family for each `t_i` in `rows` over `τ ∈ [t_i, b]`.
///
/// The generator must ignore `X(s)` and `ℵ(s,t)`. The returned pair holds
/// `X(t_i) = λ(t_i,t_i)` and `μ(t_i,t_j) = ℵ(t_i,t_j)` for `j ≥ i`.
pub fn solve_param_bsde_family(
    gen_z: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    rows: std::ops::Range<usize>,
    pair: &mut DiscreteProcessPair,
    cfg: &SolverConfig,
) -> Result<InnerStats> {
    if !gen_z.ignores_frozen() {
        return Err(Error::Config("the parametrized family takes a generator of (t, s, z, z̄) only".into()));
    }
    let n = pair.nodes() - 1;
    let frozen = &*pair;
    let results: Vec<(usize, RowOut)> = rows
        .into_par_iter()
        .map(|i| row_sweep(gen_z, frozen, i, i, n, ft.row(i), ft.measurable_at(i), cfg).map(|r| (i, r)))
        .collect::<Result<_>>()?;
    let mut stats = InnerStats::default();
    for (i, r) in results {
        pair.set_x(i, &r.value)?;
        for (j, c) in r.coefs {
            pair.set_aleph_coef(i, j, &c)?;
        }
        stats = stats.merge(r.stats);
    }
    Ok(stats)
}

/// Special BSVIE with a generator of `(t, s, ℵ(t,s), Eℵ(t,s))`: the diagonal of
/// the parametrized family followed by the lower-triangle extension.
pub fn solve_bsvie_simple(
    gen_z: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    pair: &mut DiscreteProcessPair,
    cfg: &SolverConfig,
) -> Result<InnerStats> {
    let nn = pair.nodes();
    let stats = solve_param_bsde_family(gen_z, ft, 0..nn, pair, cfg)?;
    extend_m_solution(pair, 0..nn, 0)?;
    Ok(stats)
}

/// Cross-rectangle solve for rows `r ≤ i < δ` and columns `δ ≤ j < end`.
///
/// `known` must hold `X(t_j)` and `ℵ(t_j, t_i)` for the block columns. Writes
/// `ℵ(t_i, t_j)` into `known` and returns the `𝓕_{t_δ}`-measurable free terms
/// `Ψ_δ(t_i)` (particle-major, one entry per row).
#[allow(clippy::too_many_arguments)]
pub fn solve_fredholm_block(
    gen: &BackwardGeneratorSpec,
    known: &mut DiscreteProcessPair,
    ft: &FreeTermSpec,
    r: usize,
    delta: usize,
    end: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<Vec<f64>>, InnerStats)> {
    if !(r <= delta && delta <= end && end < known.nodes()) {
        return Err(Error::Config(format!("invalid Fredholm block rows [{r}, {delta}) columns [{delta}, {end})")));
    }
    let frozen = &*known;
    let results: Vec<(usize, RowOut)> = (r..delta)
        .into_par_iter()
        .map(|i| row_sweep(gen, frozen, i, delta, end, ft.row(i), ft.measurable_at(i), cfg).map(|o| (i, o)))
        .collect::<Result<_>>()?;
    let mut psi = Vec::with_capacity(delta - r);
    let mut stats = InnerStats::default();
    for (i, o) in results {
        for (j, c) in o.coefs {
            known.set_aleph_coef(i, j, &c)?;
        }
        stats = stats.merge(o.stats);
        psi.push(o.value);
    }
    Ok((psi, stats))
}

/// Moves `P(t,s,0,…,0)` into the free term: `Ψ̃(t_i) = Ψ(t_i) + Σ_{j≥i} w_ij P(t_i,t_j,0,…)`.
pub fn shift_free_term_backward(
    gen: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    pair_shape: &DiscreteProcessPair,
) -> Result<(BackwardGeneratorSpec, FreeTermSpec)> {
    if gen.zero_at_zero {
        return Ok((gen.clone(), ft.clone()));
    }
    let grid = pair_shape.grid();
    let (d, m, np) = (pair_shape.d(), pair_shape.m(), pair_shape.n_particles());
    let n = grid.n();
    let zx = vec![0.0; np * d];
    let zz = vec![0.0; np * d * m];
    let zb = vec![0.0; d];
    let zzb = vec![0.0; d * m];
    let mut out = ft.clone();
    let rows: Vec<Vec<f64>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut acc = ft.row(i).to_vec();
            let mut f = vec![0.0; np * d];
            for j in i..n {
                let args = GenArgs {
                    i,
                    j,
                    t: grid.t(i),
                    s: grid.t(j),
                    s_next: grid.t(j + 1),
                    d,
                    m,
                    n_particles: np,
                    x: &zx,
                    z: &zz,
                    xi: &zz,
                    x_bar: &zb,
                    z_bar: &zzb,
                    xi_bar: &zzb,
                };
                gen.generator.eval(&args, &mut f);
                let w = gen.weight(grid, i, j);
                for (a, v) in acc.iter_mut().zip(&f) {
                    *a += w * v;
                }
            }
            acc
        })
        .collect();
    for (i, row) in rows.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::FreeTerm(format!("∫ P(t,s,0,…) ds is not finite at t_{i}")));
        }
        out.set_row(i, row, n);
    }
    let mut g = gen.clone();
    g.generator = std::sync::Arc::new(Centered { inner: gen.generator.clone() });
    g.zero_at_zero = true;
    Ok((g, out))
}

struct Centered {
    inner: std::sync::Arc<dyn super::generator::Generator>,
}

impl super::generator::Generator for Centered {
    fn eval(&self, a: &GenArgs, out: &mut [f64]) {
        let np = a.n_particles;
        let zx = vec![0.0; np * a.d];
        let zz = vec![0.0; np * a.d * a.m];
        let zb = vec![0.0; a.d];
        let zzb = vec![0.0; a.d * a.m];
        let zero = GenArgs { x: &zx, z: &zz, xi: &zz, x_bar: &zb, z_bar: &zzb, xi_bar: &zzb, ..*a };
        let mut base = vec![0.0; out.len()];
        self.inner.eval(&zero, &mut base);
        self.inner.eval(a, out);
        for (o, b) in out.iter_mut().zip(&base) {
            *o -= b;
        }
    }
}

/// Per-node M-condition residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct MConditionReport {
    /// `‖X(t_i) − E X(t_i) − Σ_{j<i} ℵ(t_i,t_j)ΔB_j‖ / ‖X(t_i)‖`, zero when `X(t_i) ≡ 0`.
    pub per_node: Vec<f64>,
    pub max: f64,
}

/// Checks `X(t) = E X(t) + ∫₀ᵗ ℵ(t,s) dB_s` on the grid.
pub fn verify_m_condition(sol: &DiscreteProcessPair) -> MConditionReport {
    let (d, m, np) = (sol.d(), sol.m(), sol.n_particles());
    let ens = sol.basis().ensemble().clone();
    let per_node: Vec<f64> = (0..sol.nodes())
        .into_par_iter()
        .map(|i| {
            let x = sol.x(i);
            let mean = sol.x_mean(i);
            let mut resid: Vec<f64> = x.chunks_exact(d).flat_map(|r| r.iter().zip(mean).map(|(a, b)| a - b)).collect();
            let mut al = vec![0.0; np * d * m];
            for j in 0..i {
                sol.aleph_values(i, j, &mut al);
                let inc = ens.increments_at(j);
                for p in 0..np {
                    for a in 0..d {
                        let mut s = 0.0;
                        for b in 0..m {
                            s += al[(p * d + a) * m + b] * inc[p * m + b];
                        }
                        resid[p * d + a] -= s;
                    }
                }
            }
            let num: f64 = resid.iter().map(|v| v * v).sum();
            let den: f64 = x.iter().map(|v| v * v).sum();
            if den > 0.0 {
                (num / den).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let max = per_node.iter().cloned().fold(0.0, f64::max);
    MConditionReport { per_node, max }
}
