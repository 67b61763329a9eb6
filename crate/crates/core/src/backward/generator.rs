use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{BackwardEnvelopes, Triangle};
use crate::stochastic::{BrownianEnsemble, TimeGrid};
use crate::Kernel;

/// Column arguments of a generator for row `t = t_i` and column `s = t_j`.
///
/// Per-particle slices are particle-major: `x` is `N × d`, `z = ℵ(t,s)` and
/// `xi = ℵ(s,t)` are `N × d·m` (row-major `d × m` per particle).
#[derive(Debug, Clone, Copy)]
pub struct GenArgs<'a> {
    pub i: usize,
    pub j: usize,
    pub t: f64,
    pub s: f64,
    pub s_next: f64,
    pub d: usize,
    pub m: usize,
    pub n_particles: usize,
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub xi: &'a [f64],
    pub x_bar: &'a [f64],
    pub z_bar: &'a [f64],
    pub xi_bar: &'a [f64],
}

/// Generator evaluated for every particle of one column at once, so that
/// mean-field terms may be arbitrary empirical functionals.
pub trait Generator: Send + Sync {
    /// Writes `N × d` values into `out`.
    fn eval(&self, args: &GenArgs, out: &mut [f64]);
}

/// Arguments of a pointwise generator for a single particle.
#[derive(Debug, Clone, Copy)]
pub struct PointArgs<'a> {
    pub i: usize,
    pub j: usize,
    pub t: f64,
    pub s: f64,
    pub s_next: f64,
    pub particle: usize,
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub xi: &'a [f64],
    pub x_bar: &'a [f64],
    pub z_bar: &'a [f64],
    pub xi_bar: &'a [f64],
}

/// Adapts a per-particle closure to [`Generator`].
pub struct Pointwise<F>(pub F);

impl<F> Generator for Pointwise<F>
where
    F: Fn(&PointArgs, &mut [f64]) + Send + Sync,
{
    fn eval(&self, a: &GenArgs, out: &mut [f64]) {
        let (d, dm) = (a.d, a.d * a.m);
        for p in 0..a.n_particles {
            let pa = PointArgs {
                i: a.i,
                j: a.j,
                t: a.t,
                s: a.s,
                s_next: a.s_next,
                particle: p,
                x: &a.x[p * d..(p + 1) * d],
                z: &a.z[p * dm..(p + 1) * dm],
                xi: &a.xi[p * dm..(p + 1) * dm],
                x_bar: a.x_bar,
                z_bar: a.z_bar,
                xi_bar: a.xi_bar,
            };
            (self.0)(&pa, &mut out[p * d..(p + 1) * d]);
        }
    }
}

struct ZeroGenerator;

impl Generator for ZeroGenerator {
    fn eval(&self, _: &GenArgs, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Generator `P(t,s,x,z,ξ,x̄,z̄,ξ̄)` with its Lipschitz envelopes.
///
/// With `factor = Some(k)` the generator returns the regular part `p` and
/// `P = k(t,s)·p`; the solvers then use product-integration weights
/// `∫_{t_j}^{t_{j+1}} k(t_i,s) ds`.
#[derive(Clone)]
pub struct BackwardGeneratorSpec {
    pub generator: Arc<dyn Generator>,
    pub envelopes: BackwardEnvelopes<f64>,
    pub zero_at_zero: bool,
    pub factor: Option<Kernel>,
    zero: bool,
}

impl BackwardGeneratorSpec {
    pub fn new(generator: Arc<dyn Generator>, envelopes: BackwardEnvelopes<f64>, zero_at_zero: bool) -> Self {
        Self { generator, envelopes, zero_at_zero, factor: None, zero: false }
    }

    /// True when both specs evaluate the same generator with the same factor.
    pub fn same_as(&self, other: &Self) -> bool {
        (self.zero && other.zero) || (Arc::ptr_eq(&self.generator, &other.generator) && self.factor == other.factor)
    }

    pub fn pointwise<F>(f: F, envelopes: BackwardEnvelopes<f64>, zero_at_zero: bool) -> Self
    where
        F: Fn(&PointArgs, &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(Arc::new(Pointwise(f)), envelopes, zero_at_zero)
    }

    pub fn zero(b: f64) -> Self {
        Self { generator: Arc::new(ZeroGenerator), envelopes: BackwardEnvelopes::zero(b), zero_at_zero: true, factor: None, zero: true }
    }

    /// Declares `P = k(t,s)·p` with `k` on the upper triangle.
    pub fn with_factor(mut self, k: Kernel) -> Result<Self> {
        if k.domain() != Triangle::Upper {
            return Err(Error::Config("backward kernels live on the upper triangle".into()));
        }
        self.factor = Some(k);
        Ok(self)
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// True when the generator ignores `X(s)`, `ℵ(s,t)` and their means.
    pub fn ignores_frozen(&self) -> bool {
        let e = &self.envelopes;
        self.zero || (e.lx1.is_zero() && e.lx2.is_zero() && e.lxi1.is_zero() && e.lxi2.is_zero())
    }

    pub fn depends_on_z(&self) -> bool {
        !self.zero && self.envelopes.depends_on_z()
    }

    /// Quadrature weight of column `j` in row `i`.
    pub fn weight(&self, grid: &TimeGrid, i: usize, j: usize) -> f64 {
        match &self.factor {
            Some(k) => k.cell_integral(grid.t(i), grid.t(j), grid.t(j + 1)),
            None => grid.dt(j),
        }
    }
}

/// Free term `Ψ(t_i)` per particle and node.
///
/// `measurable_at[i]` is a node index `q` such that `Ψ(t_i)` is
/// `𝓕_{t_q}`-measurable; solvers skip conditioning at nodes `≥ q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeTermSpec {
    d: usize,
    np: usize,
    values: Vec<f64>,
    measurable_at: Vec<usize>,
}

impl FreeTermSpec {
    pub fn from_values(d: usize, np: usize, values: Vec<f64>, measurable_at: Vec<usize>) -> Result<Self> {
        let nn = measurable_at.len();
        if values.len() != nn * np * d {
            return Err(Error::Shape(format!("free term needs {} values, got {}", nn * np * d, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::FreeTerm("free term has non-finite values".into()));
        }
        Ok(Self { d, np, values, measurable_at })
    }

    /// `Ψ(t_i)` from a closure over the path; `adapted` declares `Ψ(t_i) ∈ 𝓕_{t_i}`.
    pub fn from_fn<F>(ens: &BrownianEnsemble, d: usize, adapted: bool, f: F) -> Result<Self>
    where
        F: Fn(&BrownianEnsemble, usize, usize, &mut [f64]),
    {
        let nn = ens.grid().n() + 1;
        let np = ens.n_particles();
        let mut values = vec![0.0; nn * np * d];
        for i in 0..nn {
            for p in 0..np {
                let o = (i * np + p) * d;
                f(ens, i, p, &mut values[o..o + d]);
            }
        }
        let meas = (0..nn).map(|i| if adapted { i } else { nn - 1 }).collect();
        Self::from_values(d, np, values, meas)
    }

    /// `Ψ(t) = B(b)` in the first `min(d, m)` components.
    pub fn terminal_brownian(ens: &BrownianEnsemble, d: usize) -> Result<Self> {
        let n = ens.grid().n();
        Self::from_fn(ens, d, false, |e, _, p, out| {
            out.fill(0.0);
            for (o, b) in out.iter_mut().zip(e.b(n, p)) {
                *o = *b;
            }
        })
    }

    /// Deterministic constant `Ψ ≡ c`.
    pub fn constant(ens: &BrownianEnsemble, c: &[f64]) -> Result<Self> {
        Self::from_fn(ens, c.len(), true, |_, _, _, out| out.copy_from_slice(c))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_particles(&self) -> usize {
        self.np
    }

    pub fn nodes(&self) -> usize {
        self.measurable_at.len()
    }

    /// Particle-major values of `Ψ(t_i)`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.np * self.d;
        &self.values[i * w..(i + 1) * w]
    }

    pub fn measurable_at(&self, i: usize) -> usize {
        self.measurable_at[i]
    }

    pub(crate) fn set_row(&mut self, i: usize, values: &[f64], measurable_at: usize) {
        let w = self.np * self.d;
        self.values[i * w..(i + 1) * w].copy_from_slice(values);
        self.measurable_at[i] = measurable_at;
    }

    /// Same free term shifted by a deterministic constant.
    pub fn shifted(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for row in out.values.chunks_exact_mut(self.d) {
            for (v, s) in row.iter_mut().zip(c) {
                *v += s;
            }
        }
        out
    }
}
