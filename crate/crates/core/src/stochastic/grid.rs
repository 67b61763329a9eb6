use crate::error::{Error, Result};
use crate::Partition;

/// Strictly increasing nodes `0 = t₀ < … < t_n = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    aligned: bool,
}

impl TimeGrid {
    pub fn uniform(n: usize, b: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::Config(format!("horizon {b} must be positive")));
        }
        let nodes = (0..=n).map(|j| if j == n { b } else { b * j as f64 / n as f64 }).collect();
        Ok(Self { nodes, aligned: false })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(Error::Config("grid must start at 0 and have at least one step".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes.iter().all(|t| t.is_finite()) {
            return Err(Error::Config("grid nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes, aligned: false })
    }

    /// Uniform grid with every partition point inserted as a node.
    ///
    /// Uniform nodes closer than a quarter step to a partition point are dropped.
    pub fn aligned(n: usize, partition: &Partition) -> Result<Self> {
        let pts = partition.points();
        let b = *pts.last().unwrap();
        let base = Self::uniform(n, b)?;
        let h = b / n as f64;
        let mut nodes: Vec<f64> = base
            .nodes
            .iter()
            .copied()
            .filter(|t| pts.iter().all(|p| (t - p).abs() >= 0.25 * h))
            .chain(pts.iter().copied())
            .collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut grid = Self::from_nodes(nodes)?;
        grid.aligned = true;
        Ok(grid)
    }

    /// Number of steps `n`.
    pub fn n(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    /// Step `Δ_j = t_{j+1} − t_j`.
    pub fn dt(&self, j: usize) -> f64 {
        self.nodes[j + 1] - self.nodes[j]
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn is_aligned(&self) -> bool {
        self.aligned
    }

    /// Index of the node equal to `t` up to `1e-12·b`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon();
        self.nodes.iter().position(|x| (x - t).abs() <= tol)
    }

    /// Node indices of every partition point; errors when a point is not a node.
    pub fn partition_indices(&self, partition: &Partition) -> Result<Vec<usize>> {
        if (partition.points().last().unwrap() - self.horizon()).abs() > 1e-12 * self.horizon() {
            return Err(Error::Config("partition and grid horizons differ".into()));
        }
        partition
            .points()
            .iter()
            .map(|p| {
                self.index_of(*p)
                    .ok_or_else(|| Error::Config(format!("partition point {p} is not a grid node")))
            })
            .collect()
    }
}

/// Dimensions of a discretized problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceConfig {
    /// State dimension.
    pub d: usize,
    /// Noise dimension.
    pub m: usize,
    /// Regression degree.
    pub p: usize,
    /// Particle count.
    pub n_particles: usize,
}

impl SpaceConfig {
    pub fn new(d: usize, m: usize, p: usize, n_particles: usize) -> Result<Self> {
        let cfg = Self { d, m, p, n_particles };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::Config("d and m must be at least 1".into()));
        }
        if self.n_particles < 2 {
            return Err(Error::Config("at least two particles are required".into()));
        }
        Ok(())
    }
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self { d: 1, m: 1, p: 2, n_particles: 10_000 }
    }
}
