//! Regression Monte Carlo solvers for singular mean-field backward Volterra
//! equations
//!
//! `X(t) = Ψ(t) + ∫ₜᵇ P(t,s,X(s),ℵ(t,s),ℵ(s,t),EX(s),Eℵ(t,s),Eℵ(s,t)) ds − ∫ₜᵇ ℵ(t,s) dB_s`
//!
//! together with the M-condition `X(t) = EX(t) + ∫₀ᵗ ℵ(t,s) dB_s`.

mod cascade;
mod generator;
mod sweep;

pub use cascade::{
    bsvie_stability_experiment, bsvie_stability_ladder, bsvie_stability_ladder_from, measure_contraction, picard_map_theta, random_pair,
    solve_bsvie_cascade, solve_bsvie_global_picard, CascadeReport, ContractionSample, PicardLog,
};
pub use generator::{BackwardGeneratorSpec, FreeTermSpec, GenArgs, Generator, PointArgs, Pointwise};
pub use sweep::{
    extend_m_solution, shift_free_term_backward, solve_bsvie_simple, solve_fredholm_block, solve_param_bsde_family,
    verify_m_condition, InnerStats, MConditionReport,
};

/// Tolerances and caps of the backward solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative M²-residual at which a block's Picard iteration stops.
    pub tol: f64,
    /// Picard iteration cap per block.
    pub max_iter: usize,
    /// Relative tolerance of the inner `z` fixed point.
    pub inner_tol: f64,
    /// Iteration cap of the inner `z` fixed point.
    pub inner_cap: usize,
    /// Constant multiplying the composite envelope bound.
    pub c: f64,
    /// Composite bound every partition cell must satisfy.
    pub threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 60, inner_tol: 1e-8, inner_cap: 50, c: 1.0, threshold: 0.25 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.tol > 0.0
            && self.max_iter >= 1
            && self.inner_tol > 0.0
            && self.inner_cap >= 1
            && self.c > 0.0
            && self.threshold > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid solver configuration {self:?}")))
        }
    }
}
