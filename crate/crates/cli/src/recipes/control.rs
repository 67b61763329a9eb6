use std::sync::Arc;

use mfsvie::backward::SolverConfig;
use mfsvie::control::{
    duality_check, evaluate_cost, fd_gradient_oracle, gradient_field, gradient_pairing, perturbation_test,
    projected_gradient_descent, random_directions, solve_adjoint, solve_state, vi_residual, ControlIterate,
    ControlProblemSpec, DescentConfig, GradientField,
};
use mfsvie::kernels::KernelEnvelopeSet;
use mfsvie::stochastic::{BrownianEnsemble, TimeGrid};
use nalgebra::{DMatrix, DVector};

use super::{choice, ensemble, float, grid_for, grid_params, int, space_params, tol};
use crate::config::{ExperimentConfig, Kind, ParamSpec, Section};
use crate::output::{Cell, RunOutputs, Table};

fn problem_params(problem: bool, sigma: f64) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    if problem {
        v.push(choice("problem", Section::Params, &["lq", "random-linear"], "lq", "control problem"));
        v.push(int("problem_seed", Section::Params, 0, i64::MAX, 7, "coefficient seed of random-linear"));
    }
    v.extend([
        float("y0", Section::Params, Kind::closed(-100.0, 100.0), 1.0, "initial state of lq"),
        float("sigma", Section::Params, Kind::closed(-10.0, 10.0), sigma, "diffusion of lq"),
        float("q", Section::Params, Kind::closed(0.0, 100.0), 1.0, "state weight of lq"),
        float("r", Section::Params, Kind::closed(0.0, 100.0), 1.0, "control weight of lq"),
    ]);
    v
}

fn problem(cfg: &ExperimentConfig) -> anyhow::Result<ControlProblemSpec> {
    let b = cfg.f64("b");
    let is_lq = cfg.recipe == "lq" || cfg.str("problem") == "lq";
    Ok(if is_lq {
        ControlProblemSpec::lq(cfg.f64("y0"), cfg.f64("sigma"), b, cfg.f64("q"), cfg.f64("r"))?
    } else {
        ControlProblemSpec::random_linear(cfg.u64("problem_seed"), b)?
    })
}

fn setup(cfg: &ExperimentConfig) -> anyhow::Result<(ControlProblemSpec, Arc<BrownianEnsemble>, TimeGrid)> {
    let spec = problem(cfg)?;
    let grid = grid_for(cfg, Some(&KernelEnvelopeSet::Backward(spec.adjoint_envelopes())))?;
    let ens = ensemble(cfg, &grid);
    Ok((spec, ens, grid))
}

/// `fd_G(t_k) = ∂J/∂u_k / Δ_k` on every `stride`-th node, from indicator directions.
fn fd_column(spec: &ControlProblemSpec, u: &ControlIterate, ens: &BrownianEnsemble, h: f64, stride: usize) -> anyhow::Result<Vec<Option<f64>>> {
    let grid = ens.grid();
    let n = grid.n();
    let picked: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
    let dirs: Vec<Vec<f64>> = picked.iter().map(|&k| (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).collect();
    let fd = fd_gradient_oracle(spec, u, ens, h, &dirs)?;
    let mut col = vec![None; n];
    for (k, v) in picked.into_iter().zip(fd) {
        col[k] = Some(v / grid.dt(k));
    }
    Ok(col)
}

fn gradient_table(grid: &TimeGrid, u: &ControlIterate, g: &GradientField, fd: &[Option<f64>]) -> Table {
    let mut t = Table::new(&["t", "u", "G", "fd_G"]);
    for k in 0..grid.n() {
        t.push(vec![grid.t(k).into(), u.at(k, 0)[0].into(), g.mean(k)[0].into(), fd[k].into()]);
    }
    t
}

fn control_common(n: i64, particles: i64) -> Vec<ParamSpec> {
    let mut v = grid_params(n, true);
    v.extend(space_params(particles, Some(2)));
    v
}

pub fn grad_params() -> Vec<ParamSpec> {
    let mut v = control_common(100, 10_000);
    v.extend(problem_params(true, 0.0));
    v.extend([
        int("directions", Section::Params, 1, 10_000, 10, "random directions for the finite-difference check"),
        float("fd_h", Section::Params, Kind::positive(), 1e-3, "central-difference step"),
        int("fd_stride", Section::Params, 1, 100_000, 10, "finite-difference column on every k-th node"),
        tol("lq_tol", 0.03, "pointwise error of G against q·y0·(b − t) for lq"),
        tol("fd_tol", 0.05, "relative error of adjoint against finite-difference derivatives"),
        tol("duality_tol", 0.05, "relative duality gap"),
    ]);
    v
}

pub fn grad(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let (spec, ens, grid) = setup(cfg)?;
    let n = grid.n();
    let lq = cfg.str("problem") == "lq";
    let u = if lq { ControlIterate::constant(1, n, 0.0) } else { ControlIterate::from_fn(&grid, 1, |t, o| o[0] = 0.3 * (3.0 * t).sin()) };
    let sc = SolverConfig::default();
    let state = solve_state(&spec, &u, &ens)?;
    let (adj, _) = solve_adjoint(&spec, &state, &u, &ens, cfg.usize("p"), &sc)?;
    let g = gradient_field(&spec, &state, &adj, &u)?;
    let h = cfg.f64("fd_h");
    let fd = fd_column(&spec, &u, &ens, h, cfg.usize("fd_stride"))?;
    out.table(None, &gradient_table(&grid, &u, &g, &fd))?;

    let dirs = random_directions(n, 1, cfg.usize("directions"), cfg.seed().wrapping_add(1));
    let fds = fd_gradient_oracle(&spec, &u, &ens, h, &dirs)?;
    let mut t = Table::new(&["direction", "adjoint", "fd", "rel_error"]);
    let mut worst: f64 = 0.0;
    for (i, (v, f)) in dirs.iter().zip(&fds).enumerate() {
        let a = gradient_pairing(&g, v, &grid);
        let rel = (a - f).abs() / (f.abs() + 1e-8);
        worst = worst.max(rel);
        t.push(vec![i.into(), a.into(), (*f).into(), rel.into()]);
    }
    out.table(Some("directions"), &t)?;
    out.check("fd_relative_error", worst, cfg.f64("fd_tol"));

    if lq {
        let (q, y0, b) = (cfg.f64("q"), cfg.f64("y0"), cfg.f64("b"));
        let err = (0..n).map(|k| (g.mean(k)[0] - q * y0 * (b - grid.t(k))).abs()).fold(0.0, f64::max);
        out.check("lq_gradient", err, cfg.f64("lq_tol"));
    }
    let v = u.shifted(&vec![1.0; n], 1.0);
    let dual = duality_check(&spec, &state, &adj, &u, &v, &ens)?;
    out.table(Some("duality"), &duality_table(dual.lhs, dual.rhs, dual.gap, dual.relative_gap()))?;
    out.check("duality_gap", dual.relative_gap(), cfg.f64("duality_tol"));
    Ok(())
}

fn duality_table(lhs: f64, rhs: f64, gap: f64, rel: f64) -> Table {
    let mut t = Table::new(&["lhs", "rhs", "gap", "relative_gap"]);
    t.push(vec![lhs.into(), rhs.into(), gap.into(), rel.into()]);
    t
}

fn descent_params() -> Vec<ParamSpec> {
    vec![
        int("steps", Section::Params, 1, 100_000, 200, "maximum accepted descent steps"),
        float("lr", Section::Params, Kind::positive(), 0.5, "initial step size"),
        float("descent_tol", Section::Params, Kind::positive(), 1e-3, "stop when the VI residual falls below this"),
    ]
}

fn descend(cfg: &ExperimentConfig, spec: &ControlProblemSpec, ens: &Arc<BrownianEnsemble>) -> anyhow::Result<mfsvie::control::DescentOutcome> {
    let dcfg = DescentConfig {
        max_steps: cfg.usize("steps"),
        lr: cfg.f64("lr"),
        tol: cfg.f64("descent_tol"),
        degree: cfg.usize("p"),
        ..DescentConfig::default()
    };
    let u0 = ControlIterate::constant(1, ens.grid().n(), 0.0);
    Ok(projected_gradient_descent(spec, &u0, ens, &dcfg, &SolverConfig::default())?)
}

fn descent_table(o: &mfsvie::control::DescentOutcome) -> Table {
    let mut t = Table::new(&["step", "cost", "vi_residual", "lr"]);
    for (k, c) in o.iterate.costs.iter().enumerate() {
        let lr = if k == 0 { Cell::Empty } else { Cell::from(o.iterate.steps[k - 1]) };
        t.push(vec![k.into(), (*c).into(), o.residuals.get(k).copied().into(), lr]);
    }
    t
}

pub fn mp_params() -> Vec<ParamSpec> {
    let mut v = control_common(100, 2_000);
    v.extend(problem_params(true, 0.3));
    v.extend(descent_params());
    v.extend([
        float("fd_h", Section::Params, Kind::positive(), 1e-3, "central-difference step"),
        int("fd_stride", Section::Params, 1, 100_000, 10, "finite-difference column on every k-th node"),
        int("perturbations", Section::Params, 1, 10_000, 20, "random admissible perturbations"),
        float("perturbation_eps", Section::Params, Kind::positive(), 0.05, "size of each perturbation"),
        tol("vi_tol", 0.02, "VI residual at the computed optimum"),
        tol("duality_tol", 0.05, "relative duality gap"),
    ]);
    v
}

pub fn mp_verify(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let (spec, ens, grid) = setup(cfg)?;
    let o = descend(cfg, &spec, &ens)?;
    let u = &o.iterate;
    let fd = fd_column(&spec, u, &ens, cfg.f64("fd_h"), cfg.usize("fd_stride"))?;
    out.table(None, &gradient_table(&grid, u, &o.final_gradient, &fd))?;
    out.table(Some("descent"), &descent_table(&o))?;

    let res = vi_residual(&o.final_gradient, u, &spec.set, &grid);
    out.check("vi_residual", res, cfg.f64("vi_tol"));

    let state = solve_state(&spec, u, &ens)?;
    let (adj, _) = solve_adjoint(&spec, &state, u, &ens, cfg.usize("p"), &SolverConfig::default())?;
    let v = u.shifted(&vec![1.0; grid.n()], 1.0);
    let dual = duality_check(&spec, &state, &adj, u, &v, &ens)?;
    out.table(Some("duality"), &duality_table(dual.lhs, dual.rhs, dual.gap, dual.relative_gap()))?;
    out.check("duality_gap", dual.relative_gap(), cfg.f64("duality_tol"));

    let rep = perturbation_test(&spec, u, &ens, cfg.usize("perturbations"), cfg.f64("perturbation_eps"), cfg.seed().wrapping_add(2))?;
    let mut t = Table::new(&["perturbation", "cost_change", "allowance"]);
    for (i, d) in rep.deltas.iter().enumerate() {
        t.push(vec![i.into(), (*d).into(), (-2.0 * rep.noise).into()]);
    }
    out.table(Some("perturbations"), &t)?;
    // Worst decrease measured in units of the allowed noise.
    let worst = rep.deltas.iter().fold(f64::INFINITY, |m, d| m.min(*d));
    out.check("perturbation_decrease", -worst, 2.0 * rep.noise);
    Ok(())
}

pub fn lq_params() -> Vec<ParamSpec> {
    let mut v = control_common(100, 2_000);
    v.extend(problem_params(false, 0.0));
    v.extend(descent_params());
    v.iter_mut().filter(|p| p.key == "descent_tol").for_each(|p| p.default = crate::config::Value::Float(1e-4));
    v.extend([
        tol("u_tol", 1e-3, "max deviation from the exact discrete optimal control"),
        tol("cost_rel_tol", 0.01, "relative deviation from the optimal cost"),
        tol("vi_tol", 0.02, "VI residual at the computed optimum"),
    ]);
    v
}

/// Exact minimizer of `Σ_i Δ_i ½(q·Y_i² + r·u_i²)` with `Y_i = y₀ + Σ_{k<i} Δ_k u_k`,
/// and the expected cost including `½q·σ²·Σ_i Δ_i t_i`.
pub(crate) fn discrete_lq_optimum(grid: &TimeGrid, y0: f64, sigma: f64, q: f64, r: f64) -> anyhow::Result<(Vec<f64>, f64)> {
    let n = grid.n();
    let w = DVector::from_fn(n, |i, _| grid.dt(i));
    let l = DMatrix::from_fn(n, n, |i, k| if k < i { grid.dt(k) } else { 0.0 });
    let lw = l.transpose() * DMatrix::from_diagonal(&w);
    let a = &lw * &l * q + DMatrix::from_diagonal(&w) * r;
    let rhs = -(&lw * DVector::from_element(n, y0)) * q;
    let u = a.lu().solve(&rhs).ok_or_else(|| anyhow::anyhow!("singular LQ normal equations"))?;
    let y = DVector::from_element(n, y0) + &l * &u;
    let cost: f64 = (0..n).map(|i| 0.5 * w[i] * (q * (y[i] * y[i] + sigma * sigma * grid.t(i)) + r * u[i] * u[i])).sum();
    Ok((u.iter().copied().collect(), cost))
}

pub fn lq(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let (spec, ens, grid) = setup(cfg)?;
    let o = descend(cfg, &spec, &ens)?;
    let (u_star, j_star) = discrete_lq_optimum(&grid, cfg.f64("y0"), cfg.f64("sigma"), cfg.f64("q"), cfg.f64("r"))?;
    let u = &o.iterate;
    let mut t = Table::new(&["t", "u", "u_star", "G"]);
    for k in 0..grid.n() {
        t.push(vec![grid.t(k).into(), u.at(k, 0)[0].into(), u_star[k].into(), o.final_gradient.mean(k)[0].into()]);
    }
    out.table(None, &t)?;
    out.table(Some("descent"), &descent_table(&o))?;
    let err = (0..grid.n()).map(|k| (u.at(k, 0)[0] - u_star[k]).abs()).fold(0.0, f64::max);
    out.check("control_error", err, cfg.f64("u_tol"));
    let j = evaluate_cost(&spec, u, &solve_state(&spec, u, &ens)?);
    out.check("cost_error", (j - j_star).abs(), cfg.f64("cost_rel_tol") * j_star.abs());
    out.check("vi_residual", vi_residual(&o.final_gradient, u, &spec.set, &grid), cfg.f64("vi_tol"));
    Ok(())
}
