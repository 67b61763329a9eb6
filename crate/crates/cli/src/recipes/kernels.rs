use mfsvie::kernels::{contraction_partition, epsilon_partition, BackwardEnvelopes, KernelEnvelopeSet, Triangle};
use mfsvie::Kernel;

use super::{choice, float, tol};
use crate::config::{ExperimentConfig, Kind, ParamSpec, Section};
use crate::output::{Cell, RunOutputs, Table};
use crate::quad;

fn kernel_params() -> Vec<ParamSpec> {
    vec![
        choice("kind", Section::Params, &["fractional", "constant"], "fractional", "kernel family"),
        float("gamma", Section::Params, Kind::open(0.5, 1.0), 0.75, "fractional order"),
        float("scale", Section::Params, Kind::positive(), 1.0, "fractional prefactor"),
        float("c", Section::Params, Kind::positive(), 1.0, "value of the constant kernel"),
        float("b", Section::Grid, Kind::positive(), 1.0, "horizon"),
    ]
}

fn kernel(cfg: &ExperimentConfig) -> anyhow::Result<Kernel> {
    let b = cfg.f64("b");
    Ok(match cfg.str("kind") {
        "fractional" => Kernel::fractional(cfg.f64("gamma"), cfg.f64("scale"), Triangle::Upper, b)?,
        _ => Kernel::constant(cfg.f64("c"), Triangle::Upper, b)?,
    })
}

pub fn kernel_check_params() -> Vec<ParamSpec> {
    let mut v = kernel_params();
    v.push(float("r", Section::Params, Kind::nonnegative(), 0.0, "left end of the norm interval"));
    v.push(tol("rel_tol", 1e-8, "relative agreement with quadrature"));
    v
}

pub fn kernel_check(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let k = kernel(cfg)?;
    let (r, b) = (cfg.f64("r"), cfg.f64("b"));
    anyhow::ensure!(r < b, "r = {r} must lie below the horizon {b}");
    let closed = [("l2_norm_sq", k.l2_norm_sq(r, b)?), ("ess_sup_tail", k.ess_sup_tail(r, b)?)];
    let oracle = [quad::l2_sq(&k, r, b, 1e-13), quad::sup_tail(&k, r, b, 1e-14)];
    let mut t = Table::new(&["quantity", "closed_form", "quadrature", "rel_error"]);
    for ((name, c), q) in closed.iter().zip(oracle) {
        let rel = (c - q).abs() / q.abs().max(f64::MIN_POSITIVE);
        t.push(vec![Cell::from(*name), (*c).into(), q.into(), rel.into()]);
        out.check(name, rel, cfg.f64("rel_tol"));
    }
    out.table(None, &t)
}

pub fn partition_params() -> Vec<ParamSpec> {
    let mut v = kernel_params();
    v.extend([
        choice("mode", Section::Params, &["epsilon", "contraction"], "epsilon", "partition rule"),
        float("eps", Section::Params, Kind::positive(), 0.5, "tail bound of the epsilon partition"),
        float("threshold", Section::Params, Kind::open(0.0, 1.0), 0.25, "composite bound of the contraction partition"),
        float("cconst", Section::Params, Kind::positive(), 1.0, "constant C of the composite bound"),
    ]);
    v
}

/// Longest cell whose fractional tail stays below `eps`.
fn fractional_cell_bound(gamma: f64, scale: f64, eps: f64) -> f64 {
    let e = 2.0 * gamma - 1.0;
    (eps * eps * e / (scale * scale)).powf(1.0 / e)
}

pub fn partition(cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
    let k = kernel(cfg)?;
    let b = cfg.f64("b");
    let epsilon = cfg.str("mode") == "epsilon";
    // Contraction mode treats the kernel as the only envelope, on the x argument.
    let mut env = BackwardEnvelopes::zero(b);
    env.lx1 = k.clone();
    let env = KernelEnvelopeSet::Backward(env);
    let (part, bound) = if epsilon {
        (epsilon_partition(&k, cfg.f64("eps"), b)?, cfg.f64("eps"))
    } else {
        (contraction_partition(&env, cfg.f64("threshold"), cfg.f64("cconst"), b)?, cfg.f64("threshold"))
    };

    let mut t = Table::new(&["cell", "start", "end", "length", "certificate", "recheck"]);
    let mut worst: f64 = 0.0;
    let mut longest: f64 = 0.0;
    for i in 0..part.cells() {
        let (lo, hi) = part.cell(i);
        // The epsilon recheck is the quadrature tail at the left end of the cell.
        let recheck = if epsilon { quad::tail_sq(&k, lo, hi, 1e-14).sqrt() } else { env.composite(lo, hi, cfg.f64("cconst"))? };
        worst = worst.max(recheck);
        longest = longest.max(hi - lo);
        t.push(vec![i.into(), lo.into(), hi.into(), (hi - lo).into(), part.certificates()[i].into(), recheck.into()]);
    }
    out.table(None, &t)?;
    out.text(Some("points"), format!("{}\n", part.to_csv_line()))?;

    if epsilon {
        out.check_strict("recheck_below_eps", worst, bound);
        if cfg.str("kind") == "fractional" {
            let max_len = fractional_cell_bound(cfg.f64("gamma"), cfg.f64("scale"), bound);
            out.check("cell_length", longest, max_len * (1.0 + 1e-12));
        } else {
            let c = cfg.f64("c");
            out.check("cell_length", longest, bound * bound / (c * c) * (1.0 + 1e-12));
        }
    } else {
        out.check("recheck_below_threshold", worst, bound);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_bound_example() {
        assert!((fractional_cell_bound(0.75, 1.0, 0.5) - 0.015625).abs() < 1e-15);
    }
}
