use std::sync::Arc;

use mfsvie::backward::SolverConfig;
use mfsvie::fractional::{ito_variance_check, mean_field_oracle, solve_fractional, to_bsvie, FractionalSpec, TerminalFn};
use mfsvie::stochastic::{BrownianEnsemble, DiscreteProcessPair, TimeGrid};

use super::{basis, choice, ensemble, flag, float, grid_for, grid_params, int, space_params, tol};
use crate::config::{ExperimentConfig, Kind, ParamSpec, Section};
use crate::output::{RunOutputs, Table};

pub fn params() -> Vec<ParamSpec> {
    let mut v = grid_params(150, true);
    v.extend(space_params(10_000, Some(2)));
    v.extend([
        float("gamma", Section::Params, Kind::open(0.5, 1.0), 0.75, "Caputo order"),
        float("a", Section::Params, Kind::closed(-5.0, 5.0), 1.0, "mean-field coefficient"),
        choice("terminal", Section::Params, &["one-plus-b", "one", "b"], "one-plus-b", "terminal value ξ"),
        flag("near_one", Section::Params, true, "also solve at gamma_near and compare with the exponential"),
        float("gamma_near", Section::Params, Kind::open(0.5, 1.0), 0.999, "order of the near-exponential run"),
        tol("m0_tol", 0.1, "absolute error of m(0)"),
        tol("near_one_tol", 0.05, "absolute distance of the near-one m(0) from the exponential"),
    ]);
    v
}

fn terminal(cfg: &ExperimentConfig) -> (TerminalFn, f64) {
    match cfg.str("terminal") {
        "one-plus-b" => (Arc::new(|e: &BrownianEnsemble, p: usize, o: &mut [f64]| o[0] = 1.0 + e.b(e.grid().n(), p)[0]), 1.0),
        "one" => (Arc::new(|_: &BrownianEnsemble, _: usize, o: &mut [f64]| o[0] = 1.0), 1.0),
        _ => (Arc::new(|e: &BrownianEnsemble, p: usize, o: &mut [f64]| o[0] = e.b(e.grid().n(), p)[0]), 0.0),
    }
}

/// Solves at order `gamma` on a grid aligned to that order's contraction partition.
fn solve_at(cfg: &ExperimentConfig, gamma: f64) -> anyhow::Result<DiscreteProcessPair> {
    let (xi, _) = terminal(cfg);
    let b = cfg.f64("b");
    let fs = FractionalSpec::mean_field(gamma, cfg.f64("a"), xi, b);
    // The envelopes do not depend on the ensemble; a one-particle probe suffices.
    let probe = BrownianEnsemble::generate_sized(&TimeGrid::uniform(1, b)?, 1, 1, 0);
    let (_, _, env) = to_bsvie(&fs, &probe)?;
    let grid = grid_for(cfg, Some(&env))?;
    let ens = ensemble(cfg, &grid);
    let (sol, _) = solve_fractional(&fs, basis(cfg, ens)?, &SolverConfig::default())?;
    Ok(sol)
}

pub fn run(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let (gamma, a, b) = (cfg.f64("gamma"), cfg.f64("a"), cfg.f64("b"));
    let (_, xi_mean) = terminal(cfg);
    let sol = solve_at(cfg, gamma)?;
    let grid = sol.grid().clone();
    let mut t = Table::new(&["t", "mean_x", "oracle", "abs_error"]);
    for i in 0..=grid.n() {
        let want = xi_mean * mean_field_oracle(gamma, a, b, grid.t(i))?;
        let m = sol.x_mean(i)[0];
        t.push(vec![grid.t(i).into(), m.into(), want.into(), (m - want).abs().into()]);
    }
    out.table(None, &t)?;
    let want0 = xi_mean * mean_field_oracle(gamma, a, b, 0.0)?;
    out.check("m0", (sol.x_mean(0)[0] - want0).abs(), cfg.f64("m0_tol"));

    if cfg.bool("near_one") {
        let near = solve_at(cfg, cfg.f64("gamma_near"))?;
        let exp0 = xi_mean * (a * b).exp();
        let m = near.x_mean(0)[0];
        let mut t = Table::new(&["gamma", "m0", "exponential", "abs_error"]);
        t.push(vec![cfg.f64("gamma_near").into(), m.into(), exp0.into(), (m - exp0).abs().into()]);
        out.table(Some("near-one"), &t)?;
        out.check("near_one_m0", (m - exp0).abs(), cfg.f64("near_one_tol"));
    }
    Ok(())
}

pub fn ito_params() -> Vec<ParamSpec> {
    vec![
        int("n", Section::Grid, 1, 100_000, 30, "number of grid steps"),
        float("b", Section::Grid, Kind::positive(), 1.0, "horizon"),
        int("particles", Section::Space, 2, 100_000_000, 100_000, "number of particles N"),
        float("gamma", Section::Params, Kind::open(0.5, 1.0), 0.75, "Caputo order"),
        float("sigma", Section::Params, Kind::positive(), 1.0, "density of the terminal value"),
        tol("rel_tol", 0.05, "relative error of the variance"),
    ]
}

pub fn ito(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let v = ito_variance_check(cfg.f64("gamma"), cfg.f64("sigma"), cfg.f64("b"), cfg.usize("n"), cfg.usize("particles"), cfg.seed())?;
    let mut t = Table::new(&["quantity", "value"]);
    t.push(vec!["empirical".into(), v.empirical.into()]);
    t.push(vec!["isometry".into(), v.isometry.into()]);
    t.push(vec!["oracle".into(), v.oracle.into()]);
    t.push(vec!["z_mean".into(), v.z_mean.into()]);
    out.table(None, &t)?;
    out.check("variance", (v.empirical - v.oracle).abs(), cfg.f64("rel_tol") * v.oracle);
    Ok(())
}
