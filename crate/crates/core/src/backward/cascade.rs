//! Picard map, block cascade and the experiments built on them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::generator::{BackwardGeneratorSpec, FreeTermSpec, GenArgs};
use super::sweep::{extend_m_solution, extend_row, row_sweep, shift_free_term_backward, solve_fredholm_block};
use super::sweep::{verify_m_condition, InnerStats, RowOut};
use super::SolverConfig;
use crate::error::{Error, Result};
use crate::forward::StabilityReport;
use crate::kernels::{contraction_partition, KernelEnvelopeSet};
use crate::stochastic::{empirical_mean, m2_distance, m2_norm_range, DiscreteProcessPair, RegressionBasis};
use crate::Partition;

/// Residuals below this are treated as exact convergence when measuring ratios.
const RATIO_FLOOR: f64 = 1e-12;

/// Diagnostics of a cascade solve. Blocks are indexed left to right.
#[derive(Debug, Clone)]
pub struct CascadeReport {
    pub partition: Partition,
    /// Grid node of every partition point.
    pub block_nodes: Vec<usize>,
    /// Picard passes per block.
    pub iterations: Vec<usize>,
    /// Relative M²-residual of every Picard pass per block.
    pub residuals: Vec<Vec<f64>>,
    /// Largest ratio of successive Picard residuals per block (0 with fewer than two passes).
    pub contraction_ratios: Vec<f64>,
    /// Per left block boundary `δ > 0`: `(δ, E Ψ_δ(t_i))` for every row `i < δ`, flattened `i·d + c`.
    pub psi_delta_means: Vec<(usize, Vec<f64>)>,
    pub inner: InnerStats,
    /// Largest normalized M-condition residual of the returned solution.
    pub m_residual: f64,
    /// True when a nonzero `P(t,s,0,…)` was moved into the free term.
    pub shifted: bool,
}

/// Log of [`solve_bsvie_global_picard`].
#[derive(Debug, Clone, PartialEq)]
pub struct PicardLog {
    pub residuals: Vec<f64>,
    /// Composite envelope bound over the whole interval.
    pub bound: f64,
    /// Cells a certified partition would need; above 1 convergence is not guaranteed.
    pub cells_needed: usize,
    pub inner: InnerStats,
}

/// One contraction measurement `‖Θa − Θb‖ / ‖a − b‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionSample {
    pub ratio: f64,
    /// `sqrt(K_max / N)`.
    pub noise: f64,
}

/// Last row of a block whose columns end at node `hi`.
fn row_end(hi: usize, n: usize) -> usize {
    if hi == n {
        n + 1
    } else {
        hi
    }
}

fn check_shapes(ft: &FreeTermSpec, basis: &RegressionBasis) -> Result<()> {
    let nn = basis.ensemble().grid().n() + 1;
    if ft.nodes() != nn || ft.n_particles() != basis.n_particles() {
        return Err(Error::Shape(format!(
            "free term is {} nodes × {} particles, ensemble is {} × {}",
            ft.nodes(),
            ft.n_particles(),
            nn,
            basis.n_particles()
        )));
    }
    Ok(())
}

/// One application of Θ on the block with columns `[lo, hi)`.
///
/// `X(s)` and `ℵ(s,t)` are frozen at `prev`; the simple equation in
/// `(X, ℵ(t,·))` is solved row by row and the lower triangle is re-extended
/// inside the block. Rows outside the block are copied from `prev`.
pub fn picard_map_theta(
    prev: &DiscreteProcessPair,
    gen: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    lo: usize,
    hi: usize,
    cfg: &SolverConfig,
) -> Result<(DiscreteProcessPair, InnerStats)> {
    let n = prev.nodes() - 1;
    if !(lo < hi && hi <= n) {
        return Err(Error::Config(format!("invalid block [{lo}, {hi}] on a grid with {n} cells")));
    }
    let rows = lo..row_end(hi, n);
    let results: Vec<(usize, RowOut)> = rows
        .clone()
        .into_par_iter()
        .map(|i| row_sweep(gen, prev, i, i, hi, ft.row(i), ft.measurable_at(i), cfg).map(|r| (i, r)))
        .collect::<Result<_>>()?;
    let mut next = prev.clone();
    let mut stats = InnerStats::default();
    for (i, r) in results {
        next.set_x(i, &r.value)?;
        for (j, c) in r.coefs {
            next.set_aleph_coef(i, j, &c)?;
        }
        stats = stats.merge(r.stats);
    }
    let lower: Vec<(usize, Vec<(usize, Vec<f64>)>)> =
        rows.into_par_iter().map(|i| (i, extend_row(&next, i, lo.min(i)))).collect();
    for (i, coefs) in lower {
        for (j, c) in coefs {
            next.set_aleph_coef(i, j, &c)?;
        }
    }
    Ok((next, stats))
}

fn relative_residual(next: &DiscreteProcessPair, prev: &DiscreteProcessPair, lo: usize, hi: usize) -> f64 {
    let dist = m2_distance(next, prev, lo, hi);
    let norm = m2_norm_range(next, lo, hi);
    if norm > 0.0 {
        dist / norm
    } else {
        dist
    }
}

fn max_ratio(residuals: &[f64]) -> f64 {
    residuals
        .windows(2)
        .filter(|w| w[0] > RATIO_FLOOR && w[1] > RATIO_FLOOR)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max)
}

/// Iterates Θ on one block. Returns the residual history.
fn iterate_block(
    sol: &mut DiscreteProcessPair,
    gen: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    lo: usize,
    hi: usize,
    cfg: &SolverConfig,
    stats: &mut InnerStats,
) -> std::result::Result<Vec<f64>, Vec<f64>> {
    let one_pass = gen.ignores_frozen();
    let mut residuals = Vec::new();
    for _ in 0..cfg.max_iter {
        let (next, st) = match picard_map_theta(sol, gen, ft, lo, hi, cfg) {
            Ok(v) => v,
            Err(_) => return Err(residuals),
        };
        *stats = stats.merge(st);
        let r = relative_residual(&next, sol, lo, hi);
        residuals.push(r);
        *sol = next;
        if one_pass || r < cfg.tol {
            return Ok(residuals);
        }
        if !r.is_finite() || r > 1e8 {
            return Err(residuals);
        }
    }
    Err(residuals)
}

/// Block cascade on the contraction partition of the generator envelopes.
///
/// Blocks are processed right to left. On each block the Θ map is iterated,
/// the lower triangle of the block rows is extended to node 0, and the cross
/// rectangle to its left is solved as a Fredholm problem whose value at the
/// block boundary becomes the free term of the remaining rows.
pub fn solve_bsvie_cascade(
    gen: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    basis: Arc<RegressionBasis>,
    cfg: &SolverConfig,
) -> Result<(DiscreteProcessPair, CascadeReport)> {
    cfg.validate()?;
    check_shapes(ft, &basis)?;
    let mut sol = DiscreteProcessPair::zeros(basis, ft.d());
    let grid = sol.grid().clone();
    let n = grid.n();
    let partition = contraction_partition(
        &KernelEnvelopeSet::Backward(gen.envelopes.clone()),
        cfg.threshold,
        cfg.c,
        grid.horizon(),
    )?;
    let block_nodes = grid.partition_indices(&partition)?;
    let shifted = !gen.zero_at_zero;
    let (gen, mut free) = shift_free_term_backward(gen, ft, &sol)?;
    let blocks = block_nodes.len() - 1;
    let mut iterations = vec![0; blocks];
    let mut residuals = vec![Vec::new(); blocks];
    let mut ratios = vec![0.0; blocks];
    let mut psi_delta_means = Vec::new();
    let mut inner = InnerStats::default();
    for k in (0..blocks).rev() {
        let (lo, hi) = (block_nodes[k], block_nodes[k + 1]);
        let res = iterate_block(&mut sol, &gen, &free, lo, hi, cfg, &mut inner).map_err(|r| Error::Cascade {
            block: k,
            start: grid.t(lo),
            end: grid.t(hi),
            residuals: r,
        })?;
        iterations[k] = res.len();
        ratios[k] = max_ratio(&res);
        residuals[k] = res;
        extend_m_solution(&mut sol, lo..row_end(hi, n), 0)?;
        if lo > 0 {
            let (psi, st) = solve_fredholm_block(&gen, &mut sol, &free, 0, lo, hi, cfg)?;
            inner = inner.merge(st);
            let d = free.d();
            let mut means = Vec::with_capacity(lo * d);
            for (i, row) in psi.iter().enumerate() {
                means.extend(empirical_mean(row, d));
                free.set_row(i, row, lo);
            }
            psi_delta_means.push((lo, means));
        }
    }
    psi_delta_means.reverse();
    let m_residual = verify_m_condition(&sol).max;
    let report = CascadeReport {
        partition,
        block_nodes,
        iterations,
        residuals,
        contraction_ratios: ratios,
        psi_delta_means,
        inner,
        m_residual,
        shifted,
    };
    Ok((sol, report))
}

/// Θ iterated on the whole interval as a single block.
pub fn solve_bsvie_global_picard(
    gen: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    basis: Arc<RegressionBasis>,
    cfg: &SolverConfig,
) -> Result<(DiscreteProcessPair, PicardLog)> {
    cfg.validate()?;
    check_shapes(ft, &basis)?;
    if !gen.zero_at_zero {
        return Err(Error::Config("global Picard needs a centered generator; shift the free term first".into()));
    }
    let mut sol = DiscreteProcessPair::zeros(basis, ft.d());
    let b = sol.grid().horizon();
    let n = sol.grid().n();
    let env = KernelEnvelopeSet::Backward(gen.envelopes.clone());
    let bound = env.composite(0.0, b, cfg.c)?;
    let cells_needed = contraction_partition(&env, cfg.threshold, cfg.c, b)?.cells();
    let mut inner = InnerStats::default();
    let residuals =
        iterate_block(&mut sol, gen, ft, 0, n, cfg, &mut inner).map_err(|residuals| Error::Picard { residuals })?;
    extend_m_solution(&mut sol, 0..n + 1, 0)?;
    Ok((sol, PicardLog { residuals, bound, cells_needed, inner }))
}

/// Random bounded pair that agrees with `template` outside rows `[lo, hi)`.
///
/// Inside the block `X(t_i) = a_i + c_i·B(t_i)` and every `ℵ(t_i, t_j)` with
/// `lo ≤ j` is a random constant, all drawn uniformly from `[−scale, scale]`.
pub fn random_pair(template: &DiscreteProcessPair, lo: usize, hi: usize, scale: f64, seed: u64) -> Result<DiscreteProcessPair> {
    let mut out = template.clone();
    let n = out.nodes() - 1;
    let (np, d, m) = (out.n_particles(), out.d(), out.m());
    let ens = out.basis().ensemble().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in lo..row_end(hi, n) {
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-scale..=scale)).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-scale..=scale)).collect();
        let mut x = vec![0.0; np * d];
        for p in 0..np {
            let b = ens.b(i, p);
            for q in 0..d {
                x[p * d + q] = a[q] + c[q] * b[q % m];
            }
        }
        out.set_x(i, &x)?;
        for j in lo..n {
            let v: Vec<f64> = (0..d * m).map(|_| rng.gen_range(-scale..=scale)).collect();
            out.set_aleph_constant(i, j, &v)?;
        }
    }
    Ok(out)
}

/// Measures `‖Θa − Θb‖ / ‖a − b‖` on the block `[lo, hi)` over random pairs.
///
/// `ft` must be the free term the block sees (for cascade blocks other than
/// the last, the boundary free term).
#[allow(clippy::too_many_arguments)]
pub fn measure_contraction(
    gen: &BackwardGeneratorSpec,
    ft: &FreeTermSpec,
    template: &DiscreteProcessPair,
    lo: usize,
    hi: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<Vec<ContractionSample>> {
    let noise = template.basis().noise_level();
    (0..samples)
        .map(|s| {
            let a = random_pair(template, lo, hi, 1.0, seed.wrapping_add(2 * s as u64))?;
            let b = random_pair(template, lo, hi, 1.0, seed.wrapping_add(2 * s as u64 + 1))?;
            let (ta, _) = picard_map_theta(&a, gen, ft, lo, hi, cfg)?;
            let (tb, _) = picard_map_theta(&b, gen, ft, lo, hi, cfg)?;
            let den = m2_distance(&a, &b, lo, hi);
            let ratio = if den > 0.0 { m2_distance(&ta, &tb, lo, hi) / den } else { 0.0 };
            Ok(ContractionSample { ratio, noise })
        })
        .collect()
}

/// `E Σ_i Δ_i |Σ_{j≥i} w_ij (P_A − P_B)(t_i, t_j, along sol)|²`.
fn generator_gap(a: &BackwardGeneratorSpec, b: &BackwardGeneratorSpec, sol: &DiscreteProcessPair) -> f64 {
    let grid = sol.grid();
    let n = grid.n();
    let (d, m, np) = (sol.d(), sol.m(), sol.n_particles());
    let dm = d * m;
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; np * d];
            let (mut z, mut xi) = (vec![0.0; np * dm], vec![0.0; np * dm]);
            let (mut fa, mut fb) = (vec![0.0; np * d], vec![0.0; np * d]);
            for j in i..n {
                sol.aleph_values(i, j, &mut z);
                let (r, c) = if j == i { (i, i) } else { (j, i) };
                sol.aleph_values(r, c, &mut xi);
                let args = GenArgs {
                    i,
                    j,
                    t: grid.t(i),
                    s: grid.t(j),
                    s_next: grid.t(j + 1),
                    d,
                    m,
                    n_particles: np,
                    x: sol.x(j),
                    z: &z,
                    xi: &xi,
                    x_bar: sol.x_mean(j),
                    z_bar: sol.aleph_mean(i, j),
                    xi_bar: sol.aleph_mean(r, c),
                };
                a.generator.eval(&args, &mut fa);
                b.generator.eval(&args, &mut fb);
                let (wa, wb) = (a.weight(grid, i, j), b.weight(grid, i, j));
                for ((s, u), v) in acc.iter_mut().zip(&fa).zip(&fb) {
                    *s += wa * u - wb * v;
                }
            }
            acc.iter().map(|v| v * v).sum::<f64>() / np as f64 * grid.dt(i)
        })
        .collect();
    rows.iter().sum()
}

/// Solves both problems by cascade on common random numbers and compares the
/// M²-distance of the solutions with the free-term difference plus the
/// generator difference along the second solution.
pub fn bsvie_stability_experiment(
    gen_a: &BackwardGeneratorSpec,
    ft_a: &FreeTermSpec,
    gen_b: &BackwardGeneratorSpec,
    ft_b: &FreeTermSpec,
    basis: Arc<RegressionBasis>,
    cfg: &SolverConfig,
) -> Result<StabilityReport> {
    let (sa, _) = solve_bsvie_cascade(gen_a, ft_a, basis.clone(), cfg)?;
    let (sb, _) = solve_bsvie_cascade(gen_b, ft_b, basis, cfg)?;
    Ok(compare_backward(gen_a, ft_a, &sa, gen_b, ft_b, &sb))
}

fn compare_backward(
    gen_a: &BackwardGeneratorSpec,
    ft_a: &FreeTermSpec,
    sa: &DiscreteProcessPair,
    gen_b: &BackwardGeneratorSpec,
    ft_b: &FreeTermSpec,
    sb: &DiscreteProcessPair,
) -> StabilityReport {
    let grid = sa.grid();
    let n = grid.n();
    let distance = m2_distance(sa, sb, 0, n);
    let mut free = 0.0;
    for i in 0..n {
        let sq: f64 = ft_a.row(i).iter().zip(ft_b.row(i)).map(|(u, v)| (u - v) * (u - v)).sum();
        free += sq / ft_a.n_particles() as f64 * grid.dt(i);
    }
    // A shared generator contributes nothing; skip the O(n²N) pass.
    let gap = if gen_a.same_as(gen_b) { 0.0 } else { generator_gap(gen_a, gen_b, sb) };
    let rhs = free.sqrt() + gap.sqrt();
    let ratio = if rhs > 0.0 { distance / rhs } else { 0.0 };
    StabilityReport { delta: 0.0, distance, rhs, ratio }
}

/// Runs [`bsvie_stability_experiment`] over a perturbation ladder.
pub fn bsvie_stability_ladder<F>(
    make: F,
    deltas: &[f64],
    basis: Arc<RegressionBasis>,
    cfg: &SolverConfig,
) -> Result<Vec<StabilityReport>>
where
    F: Fn(f64) -> Result<(BackwardGeneratorSpec, FreeTermSpec, BackwardGeneratorSpec, FreeTermSpec)>,
{
    deltas
        .iter()
        .map(|&delta| {
            let (ga, fa, gb, fb) = make(delta)?;
            let mut r = bsvie_stability_experiment(&ga, &fa, &gb, &fb, basis.clone(), cfg)?;
            r.delta = delta;
            Ok(r)
        })
        .collect()
}

/// Ladder against one fixed base problem, which is solved once;
/// `perturb(δ)` builds the second generator and free term.
pub fn bsvie_stability_ladder_from<F>(
    gen_a: &BackwardGeneratorSpec,
    ft_a: &FreeTermSpec,
    perturb: F,
    deltas: &[f64],
    basis: Arc<RegressionBasis>,
    cfg: &SolverConfig,
) -> Result<Vec<StabilityReport>>
where
    F: Fn(f64) -> Result<(BackwardGeneratorSpec, FreeTermSpec)>,
{
    let (sa, _) = solve_bsvie_cascade(gen_a, ft_a, basis.clone(), cfg)?;
    deltas
        .iter()
        .map(|&delta| {
            let (gb, fb) = perturb(delta)?;
            let (sb, _) = solve_bsvie_cascade(&gb, &fb, basis.clone(), cfg)?;
            let mut r = compare_backward(gen_a, ft_a, &sa, &gb, &fb, &sb);
            r.delta = delta;
            Ok(r)
        })
        .collect()
}
