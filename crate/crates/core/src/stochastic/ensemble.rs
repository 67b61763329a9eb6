use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::grid::{SpaceConfig, TimeGrid};

/// Brownian increments for `N` particles on a grid.
///
/// Storage is node-major: `increment(j, p)` is the `m`-vector `ΔB_j` of
/// particle `p`. Particle `p` draws from ChaCha stream `p` of the seed, so its
/// path depends only on `(seed, p, grid, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    n_particles: usize,
    m: usize,
    seed: u64,
    increments: Vec<f64>,
    path: Vec<f64>,
}

impl BrownianEnsemble {
    pub fn generate(grid: &TimeGrid, cfg: &SpaceConfig, seed: u64) -> Self {
        Self::generate_sized(grid, cfg.n_particles, cfg.m, seed)
    }

    pub fn generate_sized(grid: &TimeGrid, n_particles: usize, m: usize, seed: u64) -> Self {
        let n = grid.n();
        let per_particle: Vec<Vec<f64>> = (0..n_particles)
            .into_par_iter()
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                let mut out = Vec::with_capacity(n * m);
                for j in 0..n {
                    let sd = grid.dt(j).sqrt();
                    for _ in 0..m {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        out.push(sd * z);
                    }
                }
                out
            })
            .collect();
        let mut increments = vec![0.0; n * n_particles * m];
        for (p, row) in per_particle.iter().enumerate() {
            for j in 0..n {
                let dst = (j * n_particles + p) * m;
                increments[dst..dst + m].copy_from_slice(&row[j * m..(j + 1) * m]);
            }
        }
        let mut path = vec![0.0; (n + 1) * n_particles * m];
        for j in 0..n {
            let (done, rest) = path.split_at_mut((j + 1) * n_particles * m);
            let prev = &done[j * n_particles * m..];
            let next = &mut rest[..n_particles * m];
            let inc = &increments[j * n_particles * m..(j + 1) * n_particles * m];
            for q in 0..n_particles * m {
                next[q] = prev[q] + inc[q];
            }
        }
        Self { grid: grid.clone(), n_particles, m, seed, increments, path }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ΔB_j` of particle `p`.
    pub fn increment(&self, j: usize, p: usize) -> &[f64] {
        let o = (j * self.n_particles + p) * self.m;
        &self.increments[o..o + self.m]
    }

    /// All particles' `ΔB_j`, particle-major.
    pub fn increments_at(&self, j: usize) -> &[f64] {
        let w = self.n_particles * self.m;
        &self.increments[j * w..(j + 1) * w]
    }

    /// `B(t_j)` of particle `p`.
    pub fn b(&self, j: usize, p: usize) -> &[f64] {
        let o = (j * self.n_particles + p) * self.m;
        &self.path[o..o + self.m]
    }

    /// All particles' `B(t_j)`, particle-major.
    pub fn path_at(&self, j: usize) -> &[f64] {
        let w = self.n_particles * self.m;
        &self.path[j * w..(j + 1) * w]
    }
}

/// Mean over particles of a particle-major `N × dim` array.
pub fn empirical_mean(values: &[f64], dim: usize) -> Vec<f64> {
    let n = values.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in values.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}
