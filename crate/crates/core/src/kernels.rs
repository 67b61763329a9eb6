//! Two-parameter kernels on the triangles of `[0,b]²`, their square norms,
//! and the partitions used to build contraction blocks.
//!
//! `Triangle::Upper` is the set `{t < s}` where backward Lipschitz envelopes
//! live; `Triangle::Lower` is `{s < t}` for forward envelopes. Every kernel is
//! nonnegative and finite strictly off the diagonal.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which open triangle of `[0,b]²` a kernel is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Triangle {
    /// `s < t`.
    Lower,
    /// `t < s`.
    Upper,
}

/// Piecewise-constant kernel given by one value per cell of a node grid.
///
/// `values[a * c + q]` is the kernel on `(nodes[a], nodes[a+1]) × (nodes[q], nodes[q+1])`
/// where `c = nodes.len() - 1`. Diagonal cells hold the value of the half-cell
/// inside the kernel's triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Table<T> {
    nodes: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> Table<T> {
    pub fn new(nodes: Vec<T>, values: Vec<T>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != T::zero() {
            return Err(Error::Config("table nodes must start at 0 and have at least two entries".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("table nodes must be strictly increasing".into()));
        }
        let c = nodes.len() - 1;
        if values.len() != c * c {
            return Err(Error::Shape(format!("table needs {} cell values, got {}", c * c, values.len())));
        }
        if values.iter().any(|v| *v < T::zero() || v.is_nan()) {
            return Err(Error::Config("table values must be nonnegative".into()));
        }
        Ok(Self { nodes, values })
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    fn cell_of(&self, x: T) -> usize {
        let c = self.nodes.len() - 1;
        match self.nodes.binary_search_by(|n| n.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(c - 1),
            Err(i) => i.saturating_sub(1).min(c - 1),
        }
    }

    fn lookup(&self, t: T, s: T) -> T {
        let c = self.nodes.len() - 1;
        self.values[self.cell_of(t) * c + self.cell_of(s)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind<T> {
    /// `scale · |s − t|^{γ−1}`.
    Fractional { gamma: T, scale: T },
    Constant { c: T },
    Tabulated(Table<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularKernel<T> {
    kind: KernelKind<T>,
    domain: Triangle,
    horizon: T,
}

const MAX_LEVEL: u32 = 12;
const CAUCHY_TOL: f64 = 1e-6;
const BISECTION_STEPS: usize = 200;
const MAX_CELLS: usize = 1_000_000;
/// Relative headroom of ε-partition certificates. Maximal cells can sit exactly
/// on `ε` (γ = 3/4, ε = 1/2 gives cells of length 1/64), where any independent
/// quadrature would read the boundary value up to rounding.
const CERT_MARGIN: f64 = 1e-9;

impl<T: Scalar> SingularKernel<T> {
    /// Fractional kernel `scale·|s−t|^{γ−1}` with `γ ∈ (0, 1]`.
    ///
    /// Square integrability additionally needs `γ > ½`; that is checked by
    /// the norm operations, not here.
    pub fn fractional(gamma: T, scale: T, domain: Triangle, horizon: T) -> Result<Self> {
        if !(gamma > T::zero() && gamma <= T::one()) {
            return Err(Error::Config(format!("fractional exponent {gamma} outside (0, 1]")));
        }
        if !(scale >= T::zero()) || !scale.is_finite() {
            return Err(Error::Config(format!("kernel scale {scale} must be finite and nonnegative")));
        }
        Self::build(KernelKind::Fractional { gamma, scale }, domain, horizon)
    }

    pub fn constant(c: T, domain: Triangle, horizon: T) -> Result<Self> {
        if !(c >= T::zero()) || !c.is_finite() {
            return Err(Error::Config(format!("constant kernel value {c} must be finite and nonnegative")));
        }
        Self::build(KernelKind::Constant { c }, domain, horizon)
    }

    pub fn zero(domain: Triangle, horizon: T) -> Self {
        Self::constant(T::zero(), domain, horizon).expect("zero kernel")
    }

    pub fn tabulated(table: Table<T>, domain: Triangle) -> Result<Self> {
        let horizon = *table.nodes.last().unwrap();
        Self::build(KernelKind::Tabulated(table), domain, horizon)
    }

    fn build(kind: KernelKind<T>, domain: Triangle, horizon: T) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon {horizon} must be positive")));
        }
        Ok(Self { kind, domain, horizon })
    }

    pub fn kind(&self) -> &KernelKind<T> {
        &self.kind
    }

    pub fn domain(&self) -> Triangle {
        self.domain
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    /// Same kernel with its scale multiplied by `factor ≥ 0`.
    pub fn scaled(&self, factor: T) -> Result<Self> {
        if !(factor >= T::zero()) || !factor.is_finite() {
            return Err(Error::Config("kernel scale factor must be finite and nonnegative".into()));
        }
        let kind = match &self.kind {
            KernelKind::Fractional { gamma, scale } => KernelKind::Fractional { gamma: *gamma, scale: *scale * factor },
            KernelKind::Constant { c } => KernelKind::Constant { c: *c * factor },
            KernelKind::Tabulated(tab) => {
                KernelKind::Tabulated(Table::new(tab.nodes.clone(), tab.values.iter().map(|v| *v * factor).collect())?)
            }
        };
        Ok(Self { kind, domain: self.domain, horizon: self.horizon })
    }

    /// `(t, s) ↦ k(s, t)` on the opposite triangle.
    pub fn transposed(&self) -> Self {
        let kind = match &self.kind {
            KernelKind::Tabulated(tab) => {
                let c = tab.nodes.len() - 1;
                let values = (0..c * c).map(|a| tab.values[(a % c) * c + a / c]).collect();
                KernelKind::Tabulated(Table { nodes: tab.nodes.clone(), values })
            }
            other => other.clone(),
        };
        let domain = match self.domain {
            Triangle::Lower => Triangle::Upper,
            Triangle::Upper => Triangle::Lower,
        };
        Self { kind, domain, horizon: self.horizon }
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            KernelKind::Fractional { scale, .. } => *scale == T::zero(),
            KernelKind::Constant { c } => *c == T::zero(),
            KernelKind::Tabulated(tab) => tab.values.iter().all(|v| *v == T::zero()),
        }
    }

    /// Kernel value at `(t, s)`; the point must lie strictly inside the triangle.
    pub fn eval(&self, t: T, s: T) -> Result<T> {
        let tol = self.horizon * T::c(1e-12);
        let inside = match self.domain {
            Triangle::Upper => s > t,
            Triangle::Lower => s < t,
        };
        if !inside {
            return Err(Error::Domain(format!("({t}, {s}) is not strictly inside the {:?} triangle", self.domain)));
        }
        if t < -tol || s < -tol || t > self.horizon + tol || s > self.horizon + tol {
            return Err(Error::Domain(format!("({t}, {s}) outside [0, {}]²", self.horizon)));
        }
        Ok(self.eval_unchecked(t, s))
    }

    fn eval_unchecked(&self, t: T, s: T) -> T {
        match &self.kind {
            KernelKind::Fractional { gamma, scale } => *scale * (s - t).abs().powf(*gamma - T::one()),
            KernelKind::Constant { c } => *c,
            KernelKind::Tabulated(tab) => tab.lookup(t, s),
        }
    }

    fn check_interval(&self, r: T, b: T) -> Result<()> {
        if !(r >= T::zero()) || !(b >= r) || b > self.horizon * (T::one() + T::c(1e-12)) {
            return Err(Error::Domain(format!("interval [{r}, {b}] not inside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    fn check_square_integrable(&self) -> Result<()> {
        if let KernelKind::Fractional { gamma, scale } = &self.kind {
            if *scale > T::zero() && !(T::c(2.0) * *gamma - T::one() > T::zero()) {
                return Err(Error::Admissibility(format!(
                    "fractional exponent {gamma} gives a divergent square integral (need γ > 1/2)"
                )));
            }
        }
        Ok(())
    }

    /// `∬ k²` over the kernel's triangle restricted to `[r,b]²`.
    pub fn l2_norm_sq(&self, r: T, b: T) -> Result<T> {
        self.check_interval(r, b)?;
        self.check_square_integrable()?;
        let h = b - r;
        let two = T::c(2.0);
        match &self.kind {
            KernelKind::Fractional { gamma, scale } => {
                if *scale == T::zero() {
                    return Ok(T::zero());
                }
                let q = two * *gamma;
                Ok(*scale * *scale * h.powf(q) / ((q - T::one()) * q))
            }
            KernelKind::Constant { c } => Ok(*c * *c * h * h / two),
            KernelKind::Tabulated(_) => cauchy_levels(|level| Ok(self.graded_double_sq(r, b, level))),
        }
    }

    /// Essential supremum over the base point of the tail norm
    /// `(∫ k² along the free variable)^{1/2}` on `[r,b]`.
    ///
    /// For `Upper` this is `sup_t (∫_t^b k(t,s)² ds)^{1/2}`; for `Lower` it is
    /// `sup_s (∫_s^b k(t,s)² dt)^{1/2}`.
    pub fn ess_sup_tail(&self, r: T, b: T) -> Result<T> {
        self.check_interval(r, b)?;
        self.check_square_integrable()?;
        let h = b - r;
        if h == T::zero() {
            return Ok(T::zero());
        }
        match &self.kind {
            KernelKind::Fractional { gamma, scale } => {
                let q = T::c(2.0) * *gamma - T::one();
                if *scale == T::zero() {
                    return Ok(T::zero());
                }
                Ok(*scale * (h.powf(q) / q).sqrt())
            }
            KernelKind::Constant { c } => Ok(*c * h.sqrt()),
            KernelKind::Tabulated(tab) => {
                let mut points: Vec<T> = vec![r];
                points.extend(tab.nodes.iter().copied().filter(|x| *x > r && *x < b));
                cauchy_levels(|level| {
                    let samples = 1usize << (level + 2);
                    let mut sup = T::zero();
                    let step = h / T::c(samples as f64);
                    let extra = (0..samples).map(|k| r + step * T::c(k as f64 + 0.5));
                    for base in points.iter().copied().chain(extra) {
                        sup = sup.max(self.graded_tail_sq(base, b, level));
                    }
                    Ok(sup.sqrt())
                })
            }
        }
    }

    /// `∫_{s0}^{s1} k(t, s) ds` for a cell on the kernel's side of `t`.
    ///
    /// Exact for fractional and constant kinds. Used as product-integration weights.
    pub fn cell_integral(&self, t: T, s0: T, s1: T) -> T {
        match &self.kind {
            KernelKind::Fractional { gamma, scale } => {
                let (a, b) = match self.domain {
                    Triangle::Upper => (s0 - t, s1 - t),
                    Triangle::Lower => (t - s1, t - s0),
                };
                let a = a.max(T::zero());
                let b = b.max(T::zero());
                *scale * (b.powf(*gamma) - a.powf(*gamma)) / *gamma
            }
            KernelKind::Constant { c } => *c * (s1 - s0),
            KernelKind::Tabulated(_) => {
                let (u0, u1) = match self.domain {
                    Triangle::Upper => (s0 - t, s1 - t),
                    Triangle::Lower => (t - s1, t - s0),
                };
                let dom = self.domain;
                graded_1d(u0.max(T::zero()), u1.max(T::zero()), 8, |u| match dom {
                    Triangle::Upper => self.eval_unchecked(t, t + u),
                    Triangle::Lower => self.eval_unchecked(t, t - u),
                })
            }
        }
    }

    fn graded_tail_sq(&self, base: T, b: T, level: u32) -> T {
        let len = b - base;
        graded_1d(T::zero(), len, level, |u| {
            let v = match self.domain {
                Triangle::Upper => self.eval_unchecked(base, base + u),
                Triangle::Lower => self.eval_unchecked(base + u, base),
            };
            v * v
        })
    }

    fn graded_double_sq(&self, r: T, b: T, level: u32) -> T {
        let outer = 1usize << (level + 2);
        let h = (b - r) / T::c(outer as f64);
        let mut acc = T::zero();
        for k in 0..outer {
            let base = r + h * T::c(k as f64 + 0.5);
            acc = acc + self.graded_tail_sq(base, b, level);
        }
        acc * h
    }
}

/// Midpoint quadrature of `f(u)` on `[u0, u1]` with cells graded towards `u = 0`.
///
/// Each octave `[2^{-k-1} u1, 2^{-k} u1]` gets `2^{⌈level/2⌉}` equal cells; the
/// octave count grows with the level and the last layer touching zero gets one
/// midpoint.
fn graded_1d<T: Scalar, F: Fn(T) -> T>(u0: T, u1: T, level: u32, f: F) -> T {
    if !(u1 > u0) {
        return T::zero();
    }
    let per_octave = 1usize << level.div_ceil(2);
    let max_octaves = 2 * level as usize + 10;
    let mut acc = T::zero();
    let mut hi = u1;
    for _ in 0..max_octaves {
        let lo = (hi * T::c(0.5)).max(u0);
        let w = (hi - lo) / T::c(per_octave as f64);
        for q in 0..per_octave {
            acc = acc + w * f(lo + w * T::c(q as f64 + 0.5));
        }
        hi = lo;
        if hi <= u0 {
            return acc;
        }
    }
    acc + (hi - u0) * f(u0 + (hi - u0) * T::c(0.5))
}

fn cauchy_levels<T: Scalar, F: FnMut(u32) -> Result<T>>(mut q: F) -> Result<T> {
    let mut prev = q(1)?;
    for level in 2..=MAX_LEVEL {
        let cur = q(level)?;
        if !cur.is_finite() {
            break;
        }
        let scale = cur.abs().max(T::min_positive_value());
        if (cur - prev).abs() <= T::c(CAUCHY_TOL) * scale {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Admissibility(format!(
        "graded quadrature failed to converge to relative {CAUCHY_TOL} within {MAX_LEVEL} levels"
    )))
}

/// Ordered partition `0 = b₀ < … < b_m = b` with one certificate per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    points: Vec<T>,
    certificates: Vec<T>,
    bound: T,
    constant: T,
}

impl<T: Scalar> Partition<T> {
    /// Partition with explicit points; certificates are left at zero.
    pub fn from_points(points: Vec<T>) -> Result<Self> {
        if points.len() < 2 || points[0] != T::zero() {
            return Err(Error::Config("partition must start at 0 and have at least one cell".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("partition points must be strictly increasing".into()));
        }
        let cells = points.len() - 1;
        Ok(Self { points, certificates: vec![T::zero(); cells], bound: T::infinity(), constant: T::one() })
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    /// Certificate value per cell (tail norm or composite bound).
    pub fn certificates(&self) -> &[T] {
        &self.certificates
    }

    /// Bound each certificate was checked against.
    pub fn bound(&self) -> T {
        self.bound
    }

    /// Constant `C` used by the backward composite bound (1 otherwise).
    pub fn constant(&self) -> T {
        self.constant
    }

    pub fn cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn cell(&self, i: usize) -> (T, T) {
        (self.points[i], self.points[i + 1])
    }

    /// Comma-separated ascending list of the points.
    pub fn to_csv_line(&self) -> String {
        self.points.iter().map(|p| format!("{:.17e}", p.to_f64_lossy())).collect::<Vec<_>>().join(",")
    }
}

/// Greedy left-to-right partition where every cell has
/// `ess sup (∫ k² over the cell tail)^{1/2} < ε`.
pub fn epsilon_partition<T: Scalar>(k: &SingularKernel<T>, eps: T, b: T) -> Result<Partition<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Config("ε must be positive".into()));
    }
    k.ess_sup_tail(T::zero(), b)?;
    let target = eps * (T::one() - T::c(CERT_MARGIN));
    let (points, certificates) = greedy(b, |lo, hi| k.ess_sup_tail(lo, hi), |v| v < target)?;
    Ok(Partition { points, certificates, bound: eps, constant: T::one() })
}

/// Lipschitz envelopes of a backward generator, all on `Triangle::Upper`.
///
/// Indices 1 refer to the pathwise arguments, 2 to the mean-field ones; `x`
/// is `X(s)`, `z` is `ℵ(t,s)` and `xi` is `ℵ(s,t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardEnvelopes<T> {
    pub lx1: SingularKernel<T>,
    pub lz1: SingularKernel<T>,
    pub lxi1: SingularKernel<T>,
    pub lx2: SingularKernel<T>,
    pub lz2: SingularKernel<T>,
    pub lxi2: SingularKernel<T>,
}

impl<T: Scalar> BackwardEnvelopes<T> {
    pub fn zero(b: T) -> Self {
        let z = SingularKernel::zero(Triangle::Upper, b);
        Self { lx1: z.clone(), lz1: z.clone(), lxi1: z.clone(), lx2: z.clone(), lz2: z.clone(), lxi2: z }
    }

    fn all(&self) -> [&SingularKernel<T>; 6] {
        [&self.lx1, &self.lz1, &self.lxi1, &self.lx2, &self.lz2, &self.lxi2]
    }

    /// True when the generator may depend on `ℵ(t,s)` or its mean.
    pub fn depends_on_z(&self) -> bool {
        !(self.lz1.is_zero() && self.lz2.is_zero())
    }

    /// Checks square integrability of `L_x·`, finite tails of `L_ξ·` and `L_z·`.
    pub fn check(&self) -> Result<()> {
        for k in self.all() {
            if k.domain() != Triangle::Upper {
                return Err(Error::Admissibility("backward envelopes must live on the upper triangle".into()));
            }
        }
        let b = self.lx1.horizon();
        self.lx1.l2_norm_sq(T::zero(), b)?;
        self.lx2.l2_norm_sq(T::zero(), b)?;
        for k in [&self.lxi1, &self.lxi2, &self.lz1, &self.lz2] {
            k.ess_sup_tail(T::zero(), b)?;
        }
        Ok(())
    }

    /// `C·[∬L_x1² + sup∫L_ξ1² + ∬L_x2² + sup∫L_ξ2²]` over `[lo, hi]`.
    pub fn composite(&self, lo: T, hi: T, c: T) -> Result<T> {
        let t1 = self.lxi1.ess_sup_tail(lo, hi)?;
        let t2 = self.lxi2.ess_sup_tail(lo, hi)?;
        Ok(c * (self.lx1.l2_norm_sq(lo, hi)? + t1 * t1 + self.lx2.l2_norm_sq(lo, hi)? + t2 * t2))
    }
}

/// Lipschitz envelopes of a forward equation, on `Triangle::Lower`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardEnvelopes<T> {
    pub k1: SingularKernel<T>,
    pub k2: SingularKernel<T>,
}

impl<T: Scalar> ForwardEnvelopes<T> {
    pub fn zero(b: T) -> Self {
        let z = SingularKernel::zero(Triangle::Lower, b);
        Self { k1: z.clone(), k2: z }
    }

    pub fn check(&self) -> Result<()> {
        if self.k1.domain() != Triangle::Lower || self.k2.domain() != Triangle::Lower {
            return Err(Error::Admissibility("forward envelopes must live on the lower triangle".into()));
        }
        let b = self.k1.horizon();
        self.k1.l2_norm_sq(T::zero(), b)?;
        self.k2.ess_sup_tail(T::zero(), b)?;
        Ok(())
    }

    /// `∬K₁² + sup_s ∫_s K₂² dt` over `[lo, hi]`.
    pub fn composite(&self, lo: T, hi: T) -> Result<T> {
        let t = self.k2.ess_sup_tail(lo, hi)?;
        Ok(self.k1.l2_norm_sq(lo, hi)? + t * t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelEnvelopeSet<T> {
    Backward(BackwardEnvelopes<T>),
    Forward(ForwardEnvelopes<T>),
}

impl<T: Scalar> KernelEnvelopeSet<T> {
    /// Composite contraction bound over `[lo, hi]`; `c` only scales the backward form.
    pub fn composite(&self, lo: T, hi: T, c: T) -> Result<T> {
        match self {
            Self::Backward(e) => e.composite(lo, hi, c),
            Self::Forward(e) => e.composite(lo, hi),
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            Self::Backward(e) => e.check(),
            Self::Forward(e) => e.check(),
        }
    }
}

/// Greedy partition whose every cell satisfies `composite ≤ threshold`.
pub fn contraction_partition<T: Scalar>(
    env: &KernelEnvelopeSet<T>,
    threshold: T,
    c: T,
    b: T,
) -> Result<Partition<T>> {
    if !(threshold > T::zero()) || !(c > T::zero()) {
        return Err(Error::Config("threshold and C must be positive".into()));
    }
    env.check()?;
    let (points, certificates) = greedy(b, |lo, hi| env.composite(lo, hi, c), |v| v <= threshold)?;
    let constant = match env {
        KernelEnvelopeSet::Backward(_) => c,
        KernelEnvelopeSet::Forward(_) => T::one(),
    };
    Ok(Partition { points, certificates, bound: threshold, constant })
}

fn greedy<T: Scalar>(
    b: T,
    value: impl Fn(T, T) -> Result<T>,
    ok: impl Fn(T) -> bool,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(b > T::zero()) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let mut points = vec![T::zero()];
    let mut certs = Vec::new();
    let mut a = T::zero();
    loop {
        let whole = value(a, b)?;
        if ok(whole) {
            points.push(b);
            certs.push(whole);
            return Ok((points, certs));
        }
        let (mut lo, mut hi) = (T::zero(), b - a);
        let mut lo_val = value(a, a)?;
        for _ in 0..BISECTION_STEPS {
            let mid = (lo + hi) * T::c(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            let v = value(a, a + mid)?;
            if ok(v) {
                lo = mid;
                lo_val = v;
            } else {
                hi = mid;
            }
        }
        if !(lo > b * T::epsilon() * T::c(16.0)) || points.len() > MAX_CELLS {
            return Err(Error::NotPartitionable(format!("no admissible cell found starting at {a}")));
        }
        a = a + lo;
        points.push(a);
        certs.push(lo_val);
    }
}
