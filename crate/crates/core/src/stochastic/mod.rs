//! Grids, seeded Brownian ensembles, regression-based conditional
//! expectations, and discrete process pairs.

mod ensemble;
mod grid;
mod pair;
mod regression;

pub use ensemble::{empirical_mean, BrownianEnsemble};
pub use grid::{SpaceConfig, TimeGrid};
pub use pair::{m2_distance, m2_norm, m2_norm_range, DiscreteProcessPair};
pub use regression::{cond_expect, martingale_coeff, NodeFeatures, RegressionBasis};
