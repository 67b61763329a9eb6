//! Least-squares Monte Carlo on polynomial features of `B(t_j)` and optional
//! caller-supplied `𝓕_{t_j}`-measurable features.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::ensemble::{empirical_mean, BrownianEnsemble};
use crate::error::{Error, Result};

const RIDGE: f64 = 1e-10;
const RANK_TOL: f64 = 1e-11;
const COLLINEAR_TOL: f64 = 1e-8;
/// Basis matrices are cached when they hold at most this many entries in total.
const CACHE_ENTRIES: usize = 1 << 26;

/// Per-node extra regressors, node-major: `values[(j·N + p)·nf + f]` for `j = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    nf: usize,
    n_particles: usize,
    values: Vec<f64>,
}

impl NodeFeatures {
    pub fn new(nf: usize, n_particles: usize, values: Vec<f64>) -> Result<Self> {
        if nf == 0 || values.len() % (nf * n_particles) != 0 {
            return Err(Error::Shape("feature array is not a whole number of nodes".into()));
        }
        Ok(Self { nf, n_particles, values })
    }

    pub fn count(&self) -> usize {
        self.nf
    }

    fn nodes(&self) -> usize {
        self.values.len() / (self.nf * self.n_particles)
    }

    fn get(&self, j: usize, p: usize, f: usize) -> f64 {
        self.values[(j * self.n_particles + p) * self.nf + f]
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Brownian(usize),
    Feature(usize),
}

#[derive(Debug, Clone)]
struct Var {
    src: Source,
    center: f64,
    inv_scale: f64,
}

#[derive(Debug, Clone)]
struct NodeBasis {
    vars: Vec<Var>,
    exps: Vec<Vec<u32>>,
    degree: usize,
    gram: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    phi_mean: Vec<f64>,
    /// Column-major `N × K` basis matrix (`[a·N + p]`), when cached.
    cache: Option<Vec<f64>>,
}

/// Regression bases for every node of an ensemble.
///
/// The first basis function at every node is the constant 1, so a coefficient
/// vector `[c, 0, …]` represents the constant `c`.
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    ens: Arc<BrownianEnsemble>,
    features: Option<Arc<NodeFeatures>>,
    degree: usize,
    nodes: Vec<NodeBasis>,
    k_max: usize,
}

fn monomials(nvars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; nvars]];
    for total in 1..=degree {
        let mut cur = vec![0u32; nvars];
        fn rec(v: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if v + 1 == cur.len() {
                cur[v] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[v] = e;
                rec(v + 1, left - e, cur, out);
            }
        }
        if nvars > 0 {
            rec(0, total as u32, &mut cur, &mut out);
        }
    }
    out
}

impl RegressionBasis {
    pub fn new(ens: Arc<BrownianEnsemble>, degree: usize, features: Option<Arc<NodeFeatures>>) -> Result<Self> {
        let n = ens.grid().n();
        if let Some(f) = &features {
            if f.n_particles != ens.n_particles() || f.nodes() != n + 1 {
                return Err(Error::Shape("features must cover every node and particle".into()));
            }
        }
        let mut nodes = Vec::with_capacity(n + 1);
        for j in 0..=n {
            nodes.push(Self::build_node(&ens, features.as_deref(), j, degree)?);
        }
        let k_max = nodes.iter().map(|nb| nb.exps.len()).max().unwrap_or(1);
        let entries: usize = nodes.iter().map(|nb| nb.exps.len() * ens.n_particles()).sum();
        if entries <= CACHE_ENTRIES {
            for (j, nb) in nodes.iter_mut().enumerate() {
                let k = nb.exps.len();
                let np = ens.n_particles();
                let mut cache = vec![0.0; k * np];
                let mut row = vec![0.0; k];
                for p in 0..np {
                    eval_phi(&ens, features.as_deref(), &nb.vars, &nb.exps, nb.degree, j, p, &mut row);
                    for (a, v) in row.iter().enumerate() {
                        cache[a * np + p] = *v;
                    }
                }
                nb.cache = Some(cache);
            }
        }
        Ok(Self { ens, features, degree, nodes, k_max })
    }

    fn build_node(ens: &BrownianEnsemble, feat: Option<&NodeFeatures>, j: usize, degree: usize) -> Result<NodeBasis> {
        let np = ens.n_particles();
        let mut vars = Vec::new();
        if j > 0 {
            let mut cands: Vec<Source> = (0..ens.m()).map(Source::Brownian).collect();
            if let Some(f) = feat {
                cands.extend((0..f.count()).map(Source::Feature));
            }
            // Standardized columns of the accepted variables, for the collinearity test.
            let mut cols: Vec<Vec<f64>> = Vec::new();
            for src in cands {
                let vals: Vec<f64> = (0..np).map(|p| raw(ens, feat, src, j, p)).collect();
                let mean = vals.iter().sum::<f64>() / np as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / np as f64;
                let sd = var.sqrt();
                if !(sd > 1e-12 * (1.0 + mean.abs())) {
                    continue;
                }
                let col: Vec<f64> = vals.iter().map(|v| (v - mean) / sd).collect();
                if !collinear(&cols, &col) {
                    cols.push(col);
                    vars.push(Var { src, center: mean, inv_scale: 1.0 / sd });
                }
            }
        }
        let mut deg = if vars.is_empty() { 0 } else { degree };
        loop {
            let exps = monomials(vars.len(), deg);
            let k = exps.len();
            let mut gram = DMatrix::<f64>::zeros(k, k);
            let mut phi_sum = vec![0.0; k];
            let mut phi = vec![0.0; k];
            for p in 0..np {
                eval_phi(ens, feat, &vars, &exps, deg, j, p, &mut phi);
                for a in 0..k {
                    phi_sum[a] += phi[a];
                    for b in 0..=a {
                        gram[(a, b)] += phi[a] * phi[b];
                    }
                }
            }
            for a in 0..k {
                for b in 0..a {
                    gram[(b, a)] = gram[(a, b)];
                }
            }
            gram /= np as f64;
            let eig = gram.clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if deg > 0 && !(min > RANK_TOL * max) {
                deg -= 1;
                continue;
            }
            // The constant direction is left unpenalized so constants are fitted exactly.
            let mut ridged = gram.clone();
            for a in 1..k {
                ridged[(a, a)] += RIDGE;
            }
            let chol = ridged
                .cholesky()
                .ok_or_else(|| Error::Shape(format!("normal equations singular at node {j}")))?;
            let phi_mean = phi_sum.iter().map(|s| s / np as f64).collect();
            return Ok(NodeBasis { vars, exps, degree: deg, gram, chol, phi_mean, cache: None });
        }
    }

    pub fn ensemble(&self) -> &Arc<BrownianEnsemble> {
        &self.ens
    }

    pub fn features(&self) -> Option<&Arc<NodeFeatures>> {
        self.features.as_ref()
    }

    /// Requested degree `p`.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Degree actually used at node `j` after rank reduction.
    pub fn degree_at(&self, j: usize) -> usize {
        self.nodes[j].degree
    }

    /// Number of basis functions at node `j`.
    pub fn k(&self, j: usize) -> usize {
        self.nodes[j].exps.len()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn n_particles(&self) -> usize {
        self.ens.n_particles()
    }

    /// Relative standard error scale `(K_max / N)^{1/2}` of one regression.
    pub fn noise_level(&self) -> f64 {
        (self.k_max as f64 / self.n_particles() as f64).sqrt()
    }

    /// Empirical mean of each basis function at node `j`.
    pub fn phi_mean(&self, j: usize) -> &[f64] {
        &self.nodes[j].phi_mean
    }

    /// Empirical Gram matrix `ΦᵀΦ/N` at node `j`.
    pub fn gram(&self, j: usize) -> &DMatrix<f64> {
        &self.nodes[j].gram
    }

    /// Basis row of particle `p` at node `j`.
    pub fn phi(&self, j: usize, p: usize, out: &mut [f64]) {
        let nb = &self.nodes[j];
        if let Some(c) = &nb.cache {
            let np = self.n_particles();
            for (a, o) in out[..nb.exps.len()].iter_mut().enumerate() {
                *o = c[a * np + p];
            }
            return;
        }
        eval_phi(&self.ens, self.features.as_deref(), &nb.vars, &nb.exps, nb.degree, j, p, out);
    }

    /// Least-squares coefficients `[q·dim + c]` of a particle-major `N × dim` target.
    pub fn fit(&self, j: usize, targets: &[f64], dim: usize) -> Vec<f64> {
        let nb = &self.nodes[j];
        let k = nb.exps.len();
        let np = self.n_particles();
        // Accumulated as `[a·dim + c]` so the inner loop is contiguous.
        let mut acc = vec![0.0; k * dim];
        match &nb.cache {
            Some(cache) if dim == 1 => {
                for (r, col) in acc.iter_mut().zip(cache.chunks_exact(np)) {
                    *r = dot(col, &targets[..np]);
                }
            }
            Some(cache) => {
                for (a, col) in cache.chunks_exact(np).enumerate() {
                    let dst = &mut acc[a * dim..(a + 1) * dim];
                    for (ph, y) in col.iter().zip(targets.chunks_exact(dim)) {
                        for (r, yc) in dst.iter_mut().zip(y) {
                            *r += ph * yc;
                        }
                    }
                }
            }
            None => {
                let mut phi = vec![0.0; k];
                for (p, y) in targets.chunks_exact(dim).enumerate().take(np) {
                    self.phi(j, p, &mut phi);
                    for (dst, ph) in acc.chunks_exact_mut(dim).zip(&phi) {
                        for (r, yc) in dst.iter_mut().zip(y) {
                            *r += ph * yc;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / np as f64;
        let rhs = DMatrix::<f64>::from_fn(k, dim, |a, c| acc[a * dim + c] * inv);
        let mut sol = nb.chol.solve(&rhs);
        // One refinement step against the unridged Gram removes the ridge bias,
        // which keeps the projection idempotent to rounding.
        let resid = &rhs - &nb.gram * &sol;
        sol += nb.chol.solve(&resid);
        let mut out = vec![0.0; k * dim];
        for a in 0..k {
            for c in 0..dim {
                out[a * dim + c] = sol[(a, c)];
            }
        }
        out
    }

    /// Evaluates coefficients `[q·dim + c]` at every particle into `out` (`N × dim`).
    pub fn predict(&self, j: usize, coef: &[f64], dim: usize, out: &mut [f64]) {
        let nb = &self.nodes[j];
        let k = nb.exps.len();
        let row_eval = |phi: &[f64], o: &mut [f64]| {
            for (c, oc) in o.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (a, ph) in phi.iter().enumerate() {
                    acc += ph * coef[a * dim + c];
                }
                *oc = acc;
            }
        };
        match &nb.cache {
            Some(cache) => {
                let np = self.n_particles();
                let out = &mut out[..np * dim];
                out.fill(0.0);
                for (a, col) in cache.chunks_exact(np).enumerate().take(k) {
                    if dim == 1 {
                        let w = coef[a];
                        for (o, ph) in out.iter_mut().zip(col) {
                            *o += w * ph;
                        }
                    } else {
                        let w = &coef[a * dim..(a + 1) * dim];
                        for (o, ph) in out.chunks_exact_mut(dim).zip(col) {
                            for (oc, wc) in o.iter_mut().zip(w) {
                                *oc += wc * ph;
                            }
                        }
                    }
                }
            }
            None => {
                let mut phi = vec![0.0; k];
                for (p, o) in out.chunks_exact_mut(dim).enumerate().take(self.n_particles()) {
                    self.phi(j, p, &mut phi);
                    row_eval(&phi, o);
                }
            }
        }
    }

    /// Mean over particles of a fitted function: `Σ_q coef_q · mean(φ_q)`.
    pub fn coef_mean(&self, j: usize, coef: &[f64], dim: usize) -> Vec<f64> {
        let pm = &self.nodes[j].phi_mean;
        (0..dim).map(|c| pm.iter().enumerate().map(|(a, m)| m * coef[a * dim + c]).sum()).collect()
    }

    /// `E|f|²` of a fitted function using the exact empirical Gram matrix.
    pub fn coef_second_moment(&self, j: usize, coef: &[f64], dim: usize) -> f64 {
        let g = &self.nodes[j].gram;
        let k = g.nrows();
        let mut acc = 0.0;
        for c in 0..dim {
            for a in 0..k {
                for b in 0..k {
                    acc += coef[a * dim + c] * g[(a, b)] * coef[b * dim + c];
                }
            }
        }
        acc
    }

    /// Fitted conditional expectation `Ê[targets | 𝓕_{t_j}]`; plain mean at `j = 0`.
    pub fn cond_expect(&self, j: usize, targets: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; targets.len()];
        if j == 0 {
            let mean = empirical_mean(targets, dim);
            for row in out.chunks_exact_mut(dim) {
                row.copy_from_slice(&mean);
            }
            return out;
        }
        let coef = self.fit(j, targets, dim);
        self.predict(j, &coef, dim, &mut out);
        out
    }

    /// Martingale-representation coefficient at node `j < n`.
    ///
    /// Regresses `(target − Ê_j target)·ΔB_j/Δ_j` on the node basis. Returns
    /// coefficients laid out `[q·(dim·m) + c·m + b]` and the fitted
    /// `Ê_j target` used for centering.
    pub fn martingale_coeff(&self, j: usize, targets: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let cond = self.cond_expect(j, targets, dim);
        let coef = self.martingale_coeff_centered(j, targets, &cond, dim);
        (coef, cond)
    }

    /// As [`martingale_coeff`](Self::martingale_coeff) with a precomputed centering term.
    pub fn martingale_coeff_centered(&self, j: usize, targets: &[f64], cond: &[f64], dim: usize) -> Vec<f64> {
        let m = self.ens.m();
        let np = self.n_particles();
        let inv_dt = 1.0 / self.ens.grid().dt(j);
        let inc = self.ens.increments_at(j);
        let mut y = vec![0.0; np * dim * m];
        if dim == 1 && m == 1 {
            for (((yv, t), c), db) in y.iter_mut().zip(targets).zip(cond).zip(inc) {
                *yv = (t - c) * db * inv_dt;
            }
        } else {
            for p in 0..np {
                for c in 0..dim {
                    let r = (targets[p * dim + c] - cond[p * dim + c]) * inv_dt;
                    for b in 0..m {
                        y[(p * dim + c) * m + b] = r * inc[p * m + b];
                    }
                }
            }
        }
        self.fit(j, &y, dim * m)
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for q in 0..4 {
            acc[q] += x[q] * y[q];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// True when `col` is within `COLLINEAR_TOL` of the span of `cols` (all standardized).
fn collinear(cols: &[Vec<f64>], col: &[f64]) -> bool {
    if cols.is_empty() {
        return false;
    }
    let k = cols.len();
    let np = col.len() as f64;
    let g = DMatrix::<f64>::from_fn(k, k, |a, b| cols[a].iter().zip(&cols[b]).map(|(u, v)| u * v).sum::<f64>() / np);
    let r = nalgebra::DVector::<f64>::from_fn(k, |a, _| cols[a].iter().zip(col).map(|(u, v)| u * v).sum::<f64>() / np);
    match g.cholesky() {
        // Residual variance of the least-squares projection onto the span.
        Some(ch) => 1.0 - r.dot(&ch.solve(&r)) < COLLINEAR_TOL,
        None => true,
    }
}

fn raw(ens: &BrownianEnsemble, feat: Option<&NodeFeatures>, src: Source, j: usize, p: usize) -> f64 {
    match src {
        Source::Brownian(c) => ens.b(j, p)[c],
        Source::Feature(f) => feat.expect("feature source").get(j, p, f),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_phi(
    ens: &BrownianEnsemble,
    feat: Option<&NodeFeatures>,
    vars: &[Var],
    exps: &[Vec<u32>],
    degree: usize,
    j: usize,
    p: usize,
    out: &mut [f64],
) {
    let nv = vars.len();
    let mut pw = [[1.0f64; 8]; 8];
    let stack = nv <= 8 && degree < 8;
    let mut heap = Vec::new();
    if !stack {
        heap = vec![vec![1.0; degree + 1]; nv];
    }
    for (a, v) in vars.iter().enumerate() {
        let x = (raw(ens, feat, v.src, j, p) - v.center) * v.inv_scale;
        for e in 1..=degree {
            if stack {
                pw[a][e] = pw[a][e - 1] * x;
            } else {
                heap[a][e] = heap[a][e - 1] * x;
            }
        }
    }
    for (q, ex) in exps.iter().enumerate() {
        let mut acc = 1.0;
        for (a, &e) in ex.iter().enumerate() {
            if e > 0 {
                acc *= if stack { pw[a][e as usize] } else { heap[a][e as usize] };
            }
        }
        out[q] = acc;
    }
}

/// Conditional expectation with a one-off basis of degree `p` in `B(t_j)`.
pub fn cond_expect(ens: &Arc<BrownianEnsemble>, j: usize, targets: &[f64], dim: usize, p: usize) -> Result<Vec<f64>> {
    let basis = RegressionBasis::new(ens.clone(), p, None)?;
    Ok(basis.cond_expect(j, targets, dim))
}

/// Per-particle martingale coefficients (`N × dim × m`) with a one-off basis.
pub fn martingale_coeff(
    ens: &Arc<BrownianEnsemble>,
    j: usize,
    targets: &[f64],
    dim: usize,
    p: usize,
) -> Result<Vec<f64>> {
    if j >= ens.grid().n() {
        return Err(Error::Domain(format!("martingale coefficient needs j < n, got {j}")));
    }
    let basis = RegressionBasis::new(ens.clone(), p, None)?;
    let (coef, _) = basis.martingale_coeff(j, targets, dim);
    let mut out = vec![0.0; ens.n_particles() * dim * ens.m()];
    basis.predict(j, &coef, dim * ens.m(), &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 2).len(), 3);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 0).len(), 1);
        assert_eq!(monomials(0, 3).len(), 1);
        assert!(monomials(2, 2)[0].iter().all(|e| *e == 0));
    }

    #[test]
    fn vector_solve_matches_matrix_solve() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let chol = g.clone().cholesky().unwrap();
        let x = chol.solve(&DVector::from_vec(vec![1.0, 1.0]));
        let r = g * x - DVector::from_vec(vec![1.0, 1.0]);
        assert!(r.norm() < 1e-14);
    }
}
