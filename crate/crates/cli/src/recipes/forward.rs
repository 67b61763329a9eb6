use mfsvie::forward::{shift_free_term_forward, solve_forward, ForwardSolution, ForwardSpec};
use mfsvie::fractional::{gamma_fn, mittag_leffler};
use mfsvie::stochastic::{BrownianEnsemble, TimeGrid};

use super::{choice, float, grid_params, space_params, tol};
use crate::config::{ExperimentConfig, Kind, ParamSpec, Section};
use crate::output::{RunOutputs, Table};

pub fn params() -> Vec<ParamSpec> {
    let mut v = grid_params(200, false);
    v.extend(space_params(10_000, None));
    v.extend([
        choice(
            "spec",
            Section::Params,
            &["linear-meanfield-drift", "constant-diffusion", "fractional-drift"],
            "linear-meanfield-drift",
            "built-in forward problem",
        ),
        float("a", Section::Params, Kind::closed(-10.0, 10.0), 1.0, "mean-field drift coefficient"),
        float("sigma", Section::Params, Kind::closed(-10.0, 10.0), 0.0, "constant diffusion"),
        float("y0", Section::Params, Kind::closed(-1e6, 1e6), 1.0, "free term"),
        float("gamma", Section::Params, Kind::open(0.5, 1.0), 0.75, "order of the fractional drift"),
        float("scale", Section::Params, Kind::positive(), 1.0, "prefactor of the fractional drift"),
        tol("mean_tol", 0.02, "absolute error of the terminal mean"),
    ]);
    v
}

fn spec(cfg: &ExperimentConfig) -> anyhow::Result<ForwardSpec> {
    let (a, sigma, y0, b) = (cfg.f64("a"), cfg.f64("sigma"), cfg.f64("y0"), cfg.f64("b"));
    Ok(match cfg.str("spec") {
        "linear-meanfield-drift" => ForwardSpec::linear_mean_field(a, sigma, y0, b)?,
        "constant-diffusion" => ForwardSpec::constant_diffusion(sigma, b)?,
        _ => ForwardSpec::fractional_drift(cfg.f64("gamma"), cfg.f64("scale"), a, y0, b)?,
    })
}

/// Exact mean and variance at time `t`.
fn oracle(cfg: &ExperimentConfig, t: f64) -> anyhow::Result<(f64, f64)> {
    let (a, sigma, y0) = (cfg.f64("a"), cfg.f64("sigma"), cfg.f64("y0"));
    Ok(match cfg.str("spec") {
        "linear-meanfield-drift" => (y0 * (a * t).exp(), sigma * sigma * t),
        "constant-diffusion" => (0.0, sigma * sigma * t),
        _ => {
            let g = cfg.f64("gamma");
            // The mean solves m = y₀ + a·scale·Γ(γ)·I^γ m.
            (y0 * mittag_leffler(g, a * cfg.f64("scale") * gamma_fn(g)? * t.powf(g))?, 0.0)
        }
    })
}

fn solve(cfg: &ExperimentConfig, n: usize) -> anyhow::Result<ForwardSolution> {
    let grid = TimeGrid::uniform(n, cfg.f64("b"))?;
    let ens = BrownianEnsemble::generate_sized(&grid, cfg.usize("particles"), 1, cfg.seed());
    let shifted = shift_free_term_forward(&spec(cfg)?, &ens)?;
    Ok(solve_forward(&shifted, &ens)?)
}

pub fn run(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let n = cfg.usize("n");
    let sol = solve(cfg, n)?;
    let grid = sol.grid().clone();
    let mut t = Table::new(&["t", "mean_1", "var_1", "oracle_mean", "oracle_var", "abs_error"]);
    for i in 0..=n {
        let (m, v) = oracle(cfg, grid.t(i))?;
        t.push(vec![
            grid.t(i).into(),
            sol.mean(i)[0].into(),
            sol.variance(i)[0].into(),
            m.into(),
            v.into(),
            (sol.mean(i)[0] - m).abs().into(),
        ]);
    }
    out.table(None, &t)?;

    let (m_b, v_b) = oracle(cfg, grid.horizon())?;
    let err = (sol.mean(n)[0] - m_b).abs();
    out.check("terminal_mean", err, cfg.f64("mean_tol"));
    if cfg.str("spec") == "constant-diffusion" {
        // Three standard errors of a Gaussian sample variance.
        let np = cfg.usize("particles") as f64;
        out.check("terminal_variance", (sol.variance(n)[0] - v_b).abs(), 3.0 * v_b * (2.0 / (np - 1.0)).sqrt());
    } else if n >= 2 {
        let coarse = solve(cfg, n / 2)?;
        let coarse_err = (coarse.mean(n / 2)[0] - m_b).abs();
        out.check_strict("refinement", err, coarse_err);
    }
    Ok(())
}
