//! Recipe registry: each recipe declares its parameters and runs one experiment.

use std::sync::Arc;

use mfsvie::backward::SolverConfig;
use mfsvie::kernels::{contraction_partition, KernelEnvelopeSet};
use mfsvie::stochastic::{BrownianEnsemble, RegressionBasis, TimeGrid};

use crate::config::{ExperimentConfig, Kind, ParamSpec, Section, Value};
use crate::output::RunOutputs;

mod backward;
mod control;
mod forward;
mod fractional;
mod kernels;

pub type RunFn = fn(&ExperimentConfig, &mut RunOutputs) -> anyhow::Result<()>;

pub struct RecipeDef {
    pub name: &'static str,
    pub about: &'static str,
    params: fn() -> Vec<ParamSpec>,
    run: RunFn,
}

impl std::fmt::Debug for RecipeDef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecipeDef").field("name", &self.name).finish()
    }
}

impl RecipeDef {
    /// Declared parameters, the shared `seed` and `out` first.
    pub fn params(&self) -> Vec<ParamSpec> {
        let mut v = vec![
            int("seed", Section::Top, 0, i64::MAX, 42, "master seed of the Brownian ensemble"),
            ParamSpec {
                key: "out",
                section: Section::Top,
                kind: Kind::Text,
                default: Value::Str("out".into()),
                help: "output directory",
            },
        ];
        v.extend((self.params)());
        v
    }

    pub(crate) fn run(&self, cfg: &ExperimentConfig, out: &mut RunOutputs) -> anyhow::Result<()> {
        (self.run)(cfg, out)
    }
}

static RECIPES: &[RecipeDef] = &[
    RecipeDef {
        name: "kernel-check",
        about: "Closed-form kernel norms against adaptive quadrature",
        params: kernels::kernel_check_params,
        run: kernels::kernel_check,
    },
    RecipeDef {
        name: "partition",
        about: "Certified epsilon or contraction partition of a kernel",
        params: kernels::partition_params,
        run: kernels::partition,
    },
    RecipeDef {
        name: "forward",
        about: "Forward mean-field Volterra solve against its mean oracle",
        params: forward::params,
        run: forward::run,
    },
    RecipeDef {
        name: "backward-zero-gen",
        about: "Zero-generator backward cascade against Brownian conditional expectations",
        params: backward::zero_gen_params,
        run: backward::zero_gen,
    },
    RecipeDef {
        name: "backward",
        about: "Mean-field backward cascade: exponential oracle or contraction measurement",
        params: backward::params,
        run: backward::run,
    },
    RecipeDef {
        name: "stability",
        about: "Forward and backward perturbation ladders on common random numbers",
        params: backward::stability_params,
        run: backward::stability,
    },
    RecipeDef {
        name: "fractional",
        about: "Caputo mean-field problem against the Mittag-Leffler oracle",
        params: fractional::params,
        run: fractional::run,
    },
    RecipeDef {
        name: "ito-variance",
        about: "Itô-isometry variance of the transformed fractional equation",
        params: fractional::ito_params,
        run: fractional::ito,
    },
    RecipeDef {
        name: "control-grad",
        about: "Adjoint gradient field against finite differences",
        params: control::grad_params,
        run: control::grad,
    },
    RecipeDef {
        name: "mp-verify",
        about: "Projected gradient descent, then the maximum-principle checks",
        params: control::mp_params,
        run: control::mp_verify,
    },
    RecipeDef {
        name: "lq",
        about: "Linear-quadratic problem against its exact discrete optimum",
        params: control::lq_params,
        run: control::lq,
    },
];

pub fn all() -> &'static [RecipeDef] {
    RECIPES
}

pub fn find(name: &str) -> Option<&'static RecipeDef> {
    RECIPES.iter().find(|r| r.name == name)
}

// Parameter constructors.

pub(crate) fn float(key: &'static str, section: Section, kind: Kind, default: f64, help: &'static str) -> ParamSpec {
    ParamSpec { key, section, kind, default: Value::Float(default), help }
}

pub(crate) fn int(key: &'static str, section: Section, lo: i64, hi: i64, default: i64, help: &'static str) -> ParamSpec {
    ParamSpec { key, section, kind: Kind::Int { lo, hi }, default: Value::Int(default), help }
}

pub(crate) fn choice(
    key: &'static str,
    section: Section,
    opts: &'static [&'static str],
    default: &'static str,
    help: &'static str,
) -> ParamSpec {
    ParamSpec { key, section, kind: Kind::Choice(opts), default: Value::Str(default.into()), help }
}

pub(crate) fn flag(key: &'static str, section: Section, default: bool, help: &'static str) -> ParamSpec {
    ParamSpec { key, section, kind: Kind::Bool, default: Value::Bool(default), help }
}

pub(crate) fn tol(key: &'static str, default: f64, help: &'static str) -> ParamSpec {
    float(key, Section::Tolerance, Kind::positive(), default, help)
}

/// `n`, `b` and, when `align` is set, the `align` flag.
pub(crate) fn grid_params(n: i64, align: bool) -> Vec<ParamSpec> {
    let mut v = vec![
        int("n", Section::Grid, 1, 100_000, n, "number of grid steps"),
        float("b", Section::Grid, Kind::positive(), 1.0, "horizon"),
    ];
    if align {
        v.push(flag("align", Section::Grid, true, "merge the contraction partition into the grid"));
    }
    v
}

/// `particles` and, when `degree` is given, the regression degree `p`.
pub(crate) fn space_params(particles: i64, degree: Option<i64>) -> Vec<ParamSpec> {
    let mut v = vec![int("particles", Section::Space, 2, 100_000_000, particles, "number of particles N")];
    if let Some(p) = degree {
        v.push(int("p", Section::Space, 0, 6, p, "total degree of the regression basis"));
    }
    v
}

/// Grid on `[0, b]`, aligned to the contraction partition of `env` when requested.
pub(crate) fn grid_for(cfg: &ExperimentConfig, env: Option<&KernelEnvelopeSet<f64>>) -> anyhow::Result<TimeGrid> {
    let (n, b) = (cfg.usize("n"), cfg.f64("b"));
    match env {
        Some(env) if cfg.bool("align") => {
            let sc = SolverConfig::default();
            let part = contraction_partition(env, sc.threshold, sc.c, b)?;
            Ok(TimeGrid::aligned(n, &part)?)
        }
        _ => Ok(TimeGrid::uniform(n, b)?),
    }
}

pub(crate) fn ensemble(cfg: &ExperimentConfig, grid: &TimeGrid) -> Arc<BrownianEnsemble> {
    Arc::new(BrownianEnsemble::generate_sized(grid, cfg.usize("particles"), 1, cfg.seed()))
}

pub(crate) fn basis(cfg: &ExperimentConfig, ens: Arc<BrownianEnsemble>) -> anyhow::Result<Arc<RegressionBasis>> {
    Ok(Arc::new(RegressionBasis::new(ens, cfg.usize("p"), None)?))
}
