//! Experiment runner: configuration grammar, recipe registry and
//! reproducible CSV export for the `mfsvie` solvers.

pub mod config;
pub mod output;
pub mod quad;
pub mod recipes;

use std::path::Path;
use std::time::Instant;

use anyhow::Context;

pub use config::{parse_config, parse_config_for, render, ConfigError, ExperimentConfig, Value};
pub use output::{Check, ResultManifest};

/// Runs the configured recipe, writes its CSV files and manifest under `out`,
/// and returns the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<ResultManifest> {
    let start = Instant::now();
    let def = cfg.def();
    let mut outputs = output::RunOutputs::new(def.name);
    def.run(cfg, &mut outputs).with_context(|| format!("recipe `{}`", def.name))?;
    let manifest = ResultManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        recipe: def.name.to_string(),
        config: cfg.entries().into_iter().map(|(k, _, v)| (k.to_string(), v.to_string())).collect(),
        wall_clock: start.elapsed().as_secs_f64(),
        files: Vec::new(),
        checks: Vec::new(),
        out_dir: Default::default(),
    };
    output::write_all(Path::new(cfg.out()), &outputs, manifest)
}
