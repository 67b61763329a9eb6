//! Adaptive Simpson quadrature used as an independent oracle for kernel norms.

use mfsvie::kernels::KernelKind;
use mfsvie::Kernel;

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
}

/// `∫_t^b k(t,s)² ds` for an upper-triangle kernel, evaluated through `k.eval`.
///
/// For a fractional kernel the substitution `s = t + v^q` with `q = 2/(2γ−1)`
/// turns the integrand into `scale²·q·v`, which Simpson integrates exactly
/// up to rounding, while the values still come from the kernel itself.
pub fn tail_sq(k: &Kernel, t: f64, b: f64, tol: f64) -> f64 {
    let (q, singular) = match k.kind() {
        KernelKind::Fractional { gamma, .. } => (2.0 / (2.0 * gamma - 1.0), true),
        _ => (1.0, false),
    };
    let top = (b - t).powf(1.0 / q);
    let f = |v: f64| {
        if singular && v == 0.0 {
            return 0.0;
        }
        // `eval` wants the open triangle; nudge the diagonal endpoint inside.
        let s = (t + v.powf(q)).max(t + (b - t) * 1e-12).min(b);
        let kv = k.eval(t, s).unwrap_or(0.0);
        kv * kv * q * v.powf(q - 1.0)
    };
    simpson(&f, 0.0, top, tol)
}

/// `∫_r^b ∫_t^b k(t,s)² ds dt`.
pub fn l2_sq(k: &Kernel, r: f64, b: f64, tol: f64) -> f64 {
    simpson(&|t: f64| tail_sq(k, t, b, tol * 0.1), r, b, tol)
}

/// `sup_{t ∈ [r,b]} (∫_t^b k(t,s)² ds)^{1/2}` over 33 equispaced `t`.
pub fn sup_tail(k: &Kernel, r: f64, b: f64, tol: f64) -> f64 {
    (0..=32).map(|i| r + (b - r) * i as f64 / 32.0).map(|t| tail_sq(k, t, b, tol).sqrt()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfsvie::kernels::Triangle;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(&|x| x * x * x - x, 0.0, 2.0, 1e-14);
        assert!((v - 2.0).abs() < 1e-13);
    }

    #[test]
    fn constant_kernel_norms() {
        let k = Kernel::constant(2.0, Triangle::Upper, 1.0).unwrap();
        assert!((l2_sq(&k, 0.0, 1.0, 1e-12) - 2.0).abs() < 1e-10);
        assert!((sup_tail(&k, 0.0, 1.0, 1e-12) - 2.0).abs() < 1e-10);
    }
}
