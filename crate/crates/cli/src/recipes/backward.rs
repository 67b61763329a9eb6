use std::sync::Arc;

use mfsvie::backward::{
    bsvie_stability_ladder_from, measure_contraction, solve_bsvie_cascade, verify_m_condition, BackwardGeneratorSpec,
    FreeTermSpec, SolverConfig,
};
use mfsvie::forward::{forward_stability_ladder_from, linearity_spread, Coefficient, ForwardSpec, StabilityReport};
use mfsvie::kernels::{BackwardEnvelopes, KernelEnvelopeSet, Triangle};
use mfsvie::stochastic::{BrownianEnsemble, DiscreteProcessPair};
use mfsvie::Kernel;

use super::{basis, choice, ensemble, float, grid_for, grid_params, int, space_params, tol};
use crate::config::{ExperimentConfig, Kind, ParamSpec, Section};
use crate::output::{Cell, RunOutputs, Table};

pub fn zero_gen_params() -> Vec<ParamSpec> {
    let mut v = grid_params(100, false);
    v.extend(space_params(10_000, Some(2)));
    v.push(tol("m_tol", 0.1, "normalized M-condition residual"));
    v
}

/// `Ψ ≡ B(b)` with a zero generator: `X(t) = E[B(b) | F_t] = B(t)`.
pub fn zero_gen(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let grid = grid_for(cfg, None)?;
    let ens = ensemble(cfg, &grid);
    let ft = FreeTermSpec::terminal_brownian(&ens, 1)?;
    let (sol, _) = solve_bsvie_cascade(&BackwardGeneratorSpec::zero(cfg.f64("b")), &ft, basis(cfg, ens.clone())?, &SolverConfig::default())?;
    let m = verify_m_condition(&sol);
    let np = ens.n_particles();
    let mut t = Table::new(&["t", "rms_x_minus_b", "m_residual"]);
    let mut worst: f64 = 0.0;
    for i in 0..=grid.n() {
        let x = sol.x(i);
        let rms = ((0..np).map(|p| (x[p] - ens.b(i, p)[0]).powi(2)).sum::<f64>() / np as f64).sqrt();
        worst = worst.max(rms);
        t.push(vec![grid.t(i).into(), rms.into(), m.per_node[i].into()]);
    }
    out.table(None, &t)?;
    out.check("rms_x_minus_b", worst, 3.0 / (np as f64).sqrt());
    out.check("m_residual", m.max, cfg.f64("m_tol"));
    Ok(())
}

pub fn params() -> Vec<ParamSpec> {
    let mut v = grid_params(100, true);
    v.extend(space_params(10_000, Some(2)));
    v.extend([
        choice("mode", Section::Params, &["exponential", "contraction"], "exponential", "experiment"),
        float("a", Section::Params, Kind::closed(-5.0, 5.0), 1.0, "mean-field coefficient of P = a·x̄"),
        int("samples", Section::Params, 1, 1000, 5, "random pairs for the contraction measurement"),
        tol("rel_tol", 0.03, "relative error of the mean at t = 0"),
        tol("m_tol", 0.1, "normalized M-condition residual"),
        tol("ratio_tol", 0.5, "contraction ratio before the noise allowance"),
    ]);
    v
}

fn mean_field_generator(a: f64, b: f64) -> anyhow::Result<BackwardGeneratorSpec> {
    let mut env = BackwardEnvelopes::zero(b);
    env.lx2 = Kernel::constant(a.abs(), Triangle::Upper, b)?;
    Ok(BackwardGeneratorSpec::pointwise(move |p, out| out[0] = a * p.x_bar[0], env, true))
}

/// `ξ = 1 + B(b)`.
fn one_plus_terminal(ens: &BrownianEnsemble) -> anyhow::Result<FreeTermSpec> {
    let n = ens.grid().n();
    Ok(FreeTermSpec::from_fn(ens, 1, false, move |e, _, p, out| out[0] = 1.0 + e.b(n, p)[0])?)
}

fn aleph_heatmap(sol: &DiscreteProcessPair) -> Table {
    let nodes = sol.nodes();
    let grid = sol.grid();
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..nodes).map(|j| format!("s{j}"))).collect();
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&refs);
    for i in 0..nodes {
        let mut row = vec![Cell::from(grid.t(i))];
        row.extend((0..nodes).map(|j| Cell::from(sol.aleph_mean(i, j)[0])));
        t.push(row);
    }
    t
}

pub fn run(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let (a, b) = (cfg.f64("a"), cfg.f64("b"));
    let gen = mean_field_generator(a, b)?;
    let grid = grid_for(cfg, Some(&KernelEnvelopeSet::Backward(gen.envelopes.clone())))?;
    let ens = ensemble(cfg, &grid);
    let ft = one_plus_terminal(&ens)?;
    let sc = SolverConfig::default();
    let (sol, rep) = solve_bsvie_cascade(&gen, &ft, basis(cfg, ens.clone())?, &sc)?;

    let mut report = Table::new(&["key", "value"]);
    report.push(vec!["blocks".into(), (rep.block_nodes.len() - 1).into()]);
    report.push(vec!["block_nodes".into(), Cell::Text(join(&rep.block_nodes))]);
    report.push(vec!["iterations".into(), Cell::Text(join(&rep.iterations))]);
    report.push(vec!["m_residual".into(), rep.m_residual.into()]);
    for (k, r) in rep.contraction_ratios.iter().enumerate() {
        report.push(vec![Cell::Text(format!("contraction_ratio_{k}")), (*r).into()]);
    }
    out.table(Some("report"), &report)?;

    if cfg.str("mode") == "exponential" {
        let mut t = Table::new(&["t", "mean_x", "var_x", "oracle", "abs_error"]);
        for i in 0..=grid.n() {
            let want = (a * (b - grid.t(i))).exp();
            let x = sol.x(i);
            let m = sol.x_mean(i)[0];
            let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
            t.push(vec![grid.t(i).into(), m.into(), var.into(), want.into(), (m - want).abs().into()]);
        }
        out.table(None, &t)?;
        out.table(Some("aleph"), &aleph_heatmap(&sol))?;
        let want0 = (a * b).exp();
        out.check("mean_x0", (sol.x_mean(0)[0] - want0).abs(), cfg.f64("rel_tol") * want0);
        out.check("m_residual", rep.m_residual, cfg.f64("m_tol"));
    } else {
        // The last block sees the original free term.
        let k = rep.block_nodes.len();
        let (lo, hi) = (rep.block_nodes[k - 2], rep.block_nodes[k - 1]);
        let template = DiscreteProcessPair::zeros(sol.basis().clone(), 1);
        let samples = measure_contraction(&gen, &ft, &template, lo, hi, cfg.usize("samples"), cfg.seed() ^ 0x5eed, &sc)?;
        let mut t = Table::new(&["sample", "block_start", "block_end", "ratio", "noise", "bound"]);
        let mut margin = f64::NEG_INFINITY;
        for (s, c) in samples.iter().enumerate() {
            let bound = cfg.f64("ratio_tol") + 3.0 * c.noise;
            margin = margin.max(c.ratio - bound);
            t.push(vec![s.into(), grid.t(lo).into(), grid.t(hi).into(), c.ratio.into(), c.noise.into(), bound.into()]);
        }
        out.table(None, &t)?;
        out.check("ratio_minus_bound", margin, 0.0);
    }
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn stability_params() -> Vec<ParamSpec> {
    let mut v = grid_params(100, true);
    v.extend(space_params(10_000, Some(2)));
    v.extend([
        float("delta", Section::Params, Kind::positive(), 0.1, "largest perturbation; the ladder halves it twice"),
        float("a", Section::Params, Kind::closed(-5.0, 5.0), 1.0, "mean-field coefficient"),
        float("sigma", Section::Params, Kind::closed(-5.0, 5.0), 0.3, "forward diffusion"),
        tol("spread_tol", 1.1, "max/min of distance/δ over the ladder"),
    ]);
    v
}

fn push_ladder(t: &mut Table, name: &str, reports: &[StabilityReport]) {
    for r in reports {
        t.push(vec![name.into(), r.delta.into(), r.distance.into(), r.rhs.into(), r.ratio.into(), (r.distance / r.delta).into()]);
    }
}

pub fn stability(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let (a, sigma, b) = (cfg.f64("a"), cfg.f64("sigma"), cfg.f64("b"));
    let d0 = cfg.f64("delta");
    let deltas = [d0, d0 / 2.0, d0 / 4.0];
    let gen = mean_field_generator(a, b)?;
    let grid = grid_for(cfg, Some(&KernelEnvelopeSet::Backward(gen.envelopes.clone())))?;
    let ens = ensemble(cfg, &grid);

    // Perturbations clone the base so untouched coefficients are shared and
    // drop out of the right-hand side without being evaluated.
    let base = ForwardSpec::linear_mean_field(a, sigma, 1.0, b)?;
    let free = forward_stability_ladder_from(
        &base,
        |d| {
            let mut moved = base.clone();
            moved.phi = ForwardSpec::constant_free_term(vec![1.0 + d]);
            Ok(moved)
        },
        &deltas,
        &ens,
    )?;
    let drift = forward_stability_ladder_from(
        &base,
        |d| {
            let mut moved = base.clone();
            moved.drift = Coefficient::new(Arc::new(move |_, _, yb: &[f64], o: &mut [f64]| o[0] = a * yb[0] + d));
            moved.zero_at_zero = false;
            Ok(moved)
        },
        &deltas,
        &ens,
    )?;
    let base_ft = one_plus_terminal(&ens)?;
    let backward = bsvie_stability_ladder_from(
        &gen,
        &base_ft,
        |d| Ok((gen.clone(), base_ft.shifted(&[d]))),
        &deltas,
        basis(cfg, ens.clone())?,
        &SolverConfig::default(),
    )?;

    let mut t = Table::new(&["experiment", "delta", "distance", "rhs", "ratio", "slope"]);
    push_ladder(&mut t, "forward-free-term", &free);
    push_ladder(&mut t, "forward-drift", &drift);
    push_ladder(&mut t, "backward-free-term", &backward);
    out.table(None, &t)?;
    let tol = cfg.f64("spread_tol");
    out.check("forward_free_term_spread", linearity_spread(&free), tol);
    out.check("forward_drift_spread", linearity_spread(&drift), tol);
    out.check("backward_spread", linearity_spread(&backward), tol);
    Ok(())
}
