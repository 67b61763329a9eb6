use std::sync::Arc;

use super::ensemble::empirical_mean;
use super::grid::TimeGrid;
use super::regression::RegressionBasis;
use crate::error::{Error, Result};

/// Discrete pair `(X, ℵ)` on a grid.
///
/// `X(t_i)` is stored per particle. `ℵ(t_i, t_j)` is stored as regression
/// coefficients over the node-`j` basis, so it is `𝓕_{t_j}`-measurable by
/// construction. With left-point stochastic integrals the upper triangle is
/// `j ≥ i` (it carries `∫_{t_i}^b ℵ(t_i,s)dB_s`) and the lower triangle is
/// `j < i` (it carries the representation of `X(t_i)`). Column `n` is never
/// used.
#[derive(Debug, Clone)]
pub struct DiscreteProcessPair {
    basis: Arc<RegressionBasis>,
    nn: usize,
    np: usize,
    d: usize,
    m: usize,
    x: Vec<f64>,
    x_mean: Vec<f64>,
    coef: Vec<f64>,
    aleph_mean: Vec<f64>,
}

impl DiscreteProcessPair {
    pub fn zeros(basis: Arc<RegressionBasis>, d: usize) -> Self {
        let nn = basis.ensemble().grid().n() + 1;
        let np = basis.n_particles();
        let m = basis.ensemble().m();
        let k = basis.k_max();
        Self {
            nn,
            np,
            d,
            m,
            x: vec![0.0; nn * np * d],
            x_mean: vec![0.0; nn * d],
            coef: vec![0.0; nn * nn * k * d * m],
            aleph_mean: vec![0.0; nn * nn * d * m],
            basis,
        }
    }

    pub fn basis(&self) -> &Arc<RegressionBasis> {
        &self.basis
    }

    pub fn grid(&self) -> &TimeGrid {
        self.basis.ensemble().grid()
    }

    /// Number of nodes `n + 1`.
    pub fn nodes(&self) -> usize {
        self.nn
    }

    pub fn n_particles(&self) -> usize {
        self.np
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Particle-major `N × d` values of `X(t_i)`.
    pub fn x(&self, i: usize) -> &[f64] {
        let w = self.np * self.d;
        &self.x[i * w..(i + 1) * w]
    }

    pub fn x_mean(&self, i: usize) -> &[f64] {
        &self.x_mean[i * self.d..(i + 1) * self.d]
    }

    pub fn set_x(&mut self, i: usize, values: &[f64]) -> Result<()> {
        let w = self.np * self.d;
        if values.len() != w {
            return Err(Error::Shape(format!("X(t_{i}) needs {w} values, got {}", values.len())));
        }
        self.x[i * w..(i + 1) * w].copy_from_slice(values);
        let mean = empirical_mean(values, self.d);
        self.x_mean[i * self.d..(i + 1) * self.d].copy_from_slice(&mean);
        Ok(())
    }

    fn coef_offset(&self, i: usize, j: usize) -> usize {
        (i * self.nn + j) * self.basis.k_max() * self.d * self.m
    }

    /// Coefficients of `ℵ(t_i, t_j)` laid out `[q·(d·m) + c·m + b]`, padded to `K_max`.
    pub fn aleph_coef(&self, i: usize, j: usize) -> &[f64] {
        let o = self.coef_offset(i, j);
        &self.coef[o..o + self.basis.k_max() * self.d * self.m]
    }

    /// Stores coefficients for `ℵ(t_i, t_j)`; `coef.len()` must be `K_j·d·m`.
    pub fn set_aleph_coef(&mut self, i: usize, j: usize, coef: &[f64]) -> Result<()> {
        let dm = self.d * self.m;
        let kj = self.basis.k(j);
        if coef.len() != kj * dm {
            return Err(Error::Shape(format!("ℵ(t_{i}, t_{j}) needs {} coefficients, got {}", kj * dm, coef.len())));
        }
        let o = self.coef_offset(i, j);
        let kmax = self.basis.k_max();
        self.coef[o..o + kj * dm].copy_from_slice(coef);
        self.coef[o + kj * dm..o + kmax * dm].iter_mut().for_each(|v| *v = 0.0);
        let mean = self.basis.coef_mean(j, coef, dm);
        let mo = (i * self.nn + j) * dm;
        self.aleph_mean[mo..mo + dm].copy_from_slice(&mean);
        Ok(())
    }

    /// Sets `ℵ(t_i, t_j)` to a deterministic `d × m` value.
    pub fn set_aleph_constant(&mut self, i: usize, j: usize, value: &[f64]) -> Result<()> {
        let dm = self.d * self.m;
        if value.len() != dm {
            return Err(Error::Shape("constant ℵ needs d·m entries".into()));
        }
        let mut coef = vec![0.0; self.basis.k(j) * dm];
        coef[..dm].copy_from_slice(value);
        self.set_aleph_coef(i, j, &coef)
    }

    /// Per-particle values of `ℵ(t_i, t_j)` into `out` (`N × d·m`).
    pub fn aleph_values(&self, i: usize, j: usize, out: &mut [f64]) {
        let dm = self.d * self.m;
        let kj = self.basis.k(j);
        self.basis.predict(j, &self.aleph_coef(i, j)[..kj * dm], dm, out);
    }

    pub fn aleph_mean(&self, i: usize, j: usize) -> &[f64] {
        let dm = self.d * self.m;
        let mo = (i * self.nn + j) * dm;
        &self.aleph_mean[mo..mo + dm]
    }

    /// `E|ℵ(t_i,t_j)|²` from the node Gram matrix.
    pub fn aleph_second_moment(&self, i: usize, j: usize) -> f64 {
        let dm = self.d * self.m;
        let kj = self.basis.k(j);
        self.basis.coef_second_moment(j, &self.aleph_coef(i, j)[..kj * dm], dm)
    }

    /// Copies rows `rows` of `X` and all their `ℵ` entries from `other`.
    pub fn copy_rows_from(&mut self, other: &Self, rows: std::ops::Range<usize>) {
        let w = self.np * self.d;
        let dm = self.d * self.m;
        let row_coef = self.nn * self.basis.k_max() * dm;
        for i in rows {
            self.x[i * w..(i + 1) * w].copy_from_slice(&other.x[i * w..(i + 1) * w]);
            self.x_mean[i * self.d..(i + 1) * self.d].copy_from_slice(&other.x_mean[i * self.d..(i + 1) * self.d]);
            self.coef[i * row_coef..(i + 1) * row_coef].copy_from_slice(&other.coef[i * row_coef..(i + 1) * row_coef]);
            let rm = self.nn * dm;
            self.aleph_mean[i * rm..(i + 1) * rm].copy_from_slice(&other.aleph_mean[i * rm..(i + 1) * rm]);
        }
    }

    /// Checks that the mean caches agree with recomputed empirical means.
    pub fn mean_cache_error(&self) -> f64 {
        let mut err = 0.0f64;
        let dm = self.d * self.m;
        let mut buf = vec![0.0; self.np * dm];
        for i in 0..self.nn {
            let mean = empirical_mean(self.x(i), self.d);
            for (a, b) in mean.iter().zip(self.x_mean(i)) {
                err = err.max((a - b).abs());
            }
            for j in 0..self.nn.saturating_sub(1) {
                self.aleph_values(i, j, &mut buf);
                let mean = empirical_mean(&buf, dm);
                for (a, b) in mean.iter().zip(self.aleph_mean(i, j)) {
                    err = err.max((a - b).abs());
                }
            }
        }
        err
    }
}

/// Discrete M²-norm on the node range `[lo, hi]`:
/// `(E[Σ_j |X_j|²Δ_j + Σ_j Σ_{k>j} |ℵ(t_j,t_k)|²Δ_kΔ_j])^{1/2}` with `lo ≤ j < k < hi`.
pub fn m2_norm_range(sol: &DiscreteProcessPair, lo: usize, hi: usize) -> f64 {
    m2_core(sol, None, lo, hi)
}

/// Discrete M²-norm over the whole grid.
pub fn m2_norm(sol: &DiscreteProcessPair) -> f64 {
    m2_norm_range(sol, 0, sol.nodes() - 1)
}

/// M²-distance between two pairs sharing a basis, on `[lo, hi]`.
pub fn m2_distance(a: &DiscreteProcessPair, b: &DiscreteProcessPair, lo: usize, hi: usize) -> f64 {
    m2_core(a, Some(b), lo, hi)
}

fn m2_core(a: &DiscreteProcessPair, b: Option<&DiscreteProcessPair>, lo: usize, hi: usize) -> f64 {
    let grid = a.grid();
    let np = a.np as f64;
    let dm = a.d * a.m;
    let mut total = 0.0;
    for j in lo..hi {
        let dt = grid.dt(j);
        let xa = a.x(j);
        let sq: f64 = match b {
            Some(b) => xa.iter().zip(b.x(j)).map(|(u, v)| (u - v) * (u - v)).sum(),
            None => xa.iter().map(|u| u * u).sum(),
        };
        total += sq / np * dt;
        for k in j + 1..hi {
            let kk = a.basis.k(k);
            let ca = &a.aleph_coef(j, k)[..kk * dm];
            let mom = match b {
                Some(b) => {
                    let diff: Vec<f64> = ca.iter().zip(&b.aleph_coef(j, k)[..kk * dm]).map(|(u, v)| u - v).collect();
                    a.basis.coef_second_moment(k, &diff, dm)
                }
                None => a.basis.coef_second_moment(k, ca, dm),
            };
            total += mom * grid.dt(k) * dt;
        }
    }
    total.max(0.0).sqrt()
}
