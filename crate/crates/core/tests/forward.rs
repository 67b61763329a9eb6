use std::sync::Arc;

use mfsvie::forward::*;
use mfsvie::kernels::{ForwardEnvelopes, Triangle};
use mfsvie::stochastic::{BrownianEnsemble, TimeGrid};
use mfsvie::{Error, Kernel};
use proptest::prelude::*;

fn ens(n: usize, np: usize, seed: u64) -> BrownianEnsemble {
    BrownianEnsemble::generate_sized(&TimeGrid::uniform(n, 1.0).unwrap(), np, 1, seed)
}

fn lower(c: f64) -> Kernel {
    Kernel::constant(c, Triangle::Lower, 1.0).unwrap()
}

/// `Φ = 1 + y`, `Ψ = 0`, `φ = 0`.
fn affine_drift() -> ForwardSpec {
    ForwardSpec {
        d: 1,
        m: 1,
        phi: ForwardSpec::constant_free_term(vec![0.0]),
        drift: Coefficient::new(Arc::new(|_, y: &[f64], _, out: &mut [f64]| out[0] = 1.0 + y[0])),
        diffusion: Coefficient::zero(),
        envelopes: ForwardEnvelopes { k1: lower(1.0), k2: lower(0.0) },
        zero_at_zero: false,
    }
}

#[test]
fn shift_of_affine_drift_integrates_the_constant() {
    let e = ens(10, 3, 1);
    let s = shift_free_term_forward(&affine_drift(), &e).unwrap();
    assert!(s.zero_at_zero);
    let mut out = [0.0];
    for i in 0..=10 {
        (s.phi)(&e, i, 2, &mut out);
        assert!((out[0] - e.grid().t(i)).abs() < 1e-14);
    }
    let ctx = CoefCtx { i: 3, k: 1, t: 0.3, s: 0.1, particle: 0 };
    s.drift.value(&ctx, &[2.5], &[0.0], &mut out);
    assert!((out[0] - 2.5).abs() < 1e-15);
    // Shifted and direct solves coincide.
    let a = solve_forward(&s, &e).unwrap();
    let b = solve_forward_direct(&affine_drift(), &e).unwrap();
    for i in 0..=10 {
        assert!((a.y(i)[0] - b.y(i)[0]).abs() < 1e-13);
    }
    assert!(matches!(solve_forward(&affine_drift(), &e), Err(Error::Config(_))));
}

#[test]
fn shift_of_constant_diffusion_is_scaled_brownian() {
    let e = ens(16, 20, 2);
    let spec = ForwardSpec::constant_diffusion(0.5, 1.0).unwrap();
    assert!(!spec.zero_at_zero);
    let s = shift_free_term_forward(&spec, &e).unwrap();
    let mut out = [0.0];
    for i in 0..=16 {
        for p in 0..20 {
            (s.phi)(&e, i, p, &mut out);
            assert!((out[0] - 0.5 * e.b(i, p)[0]).abs() < 1e-14);
        }
    }
    let centered = ForwardSpec::linear_mean_field(1.0, 0.0, 1.0, 1.0).unwrap();
    let same = shift_free_term_forward(&centered, &e).unwrap();
    (same.phi)(&e, 5, 0, &mut out);
    assert_eq!(out[0], 1.0);
}

#[test]
fn no_dynamics_returns_the_free_term() {
    let e = ens(12, 8, 3);
    let mut spec = ForwardSpec::constant_diffusion(0.0, 1.0).unwrap();
    spec.phi = Arc::new(|e: &BrownianEnsemble, i, p, out: &mut [f64]| out[0] = e.grid().t(i) + p as f64);
    let sol = solve_forward(&spec, &e).unwrap();
    for i in 0..=12 {
        for p in 0..8 {
            assert_eq!(sol.y(i)[p], e.grid().t(i) + p as f64);
        }
    }
}

#[test]
fn linear_mean_field_mean_is_exponential_and_improves_with_n() {
    let mut errs = Vec::new();
    for n in [50, 100, 200] {
        let e = ens(n, 10_000, 42);
        let sol = solve_forward(&ForwardSpec::linear_mean_field(1.0, 0.0, 1.0, 1.0).unwrap(), &e).unwrap();
        let err = (sol.mean(n)[0] - std::f64::consts::E).abs();
        // The left-point scheme reproduces (1 + 1/n)ⁿ.
        assert!((sol.mean(n)[0] - (1.0 + 1.0 / n as f64).powi(n as i32)).abs() < 1e-12);
        errs.push(err);
    }
    assert!(errs[2] <= 0.02);
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn constant_diffusion_variance_is_the_isometry() {
    let np = 10_000;
    let e = ens(50, np, 4);
    let spec = shift_free_term_forward(&ForwardSpec::constant_diffusion(0.5, 1.0).unwrap(), &e).unwrap();
    let sol = solve_forward(&spec, &e).unwrap();
    let v = sol.variance(50)[0];
    // Standard error of a Gaussian sample variance: σ²·√(2/(N−1)).
    let se = 0.25 * (2.0 / (np as f64 - 1.0)).sqrt();
    assert!((v - 0.25).abs() <= 3.0 * se, "{v}");
}

#[test]
fn fractional_drift_uses_product_integration() {
    // Y = 1 + ∫ (t−s)^{γ−1}·a·Ȳ ds with a = 0: constant.
    let e = ens(40, 4, 5);
    let flat = solve_forward(&ForwardSpec::fractional_drift(0.75, 1.0, 0.0, 1.0, 1.0).unwrap(), &e).unwrap();
    assert!((0..=40).all(|i| flat.mean(i)[0] == 1.0));
    // With a small step the first step equals y₀·a·∫₀^Δ (Δ−s)^{γ−1} ds = a·Δ^γ/γ.
    let sol = solve_forward(&ForwardSpec::fractional_drift(0.75, 1.0, 0.5, 1.0, 1.0).unwrap(), &e).unwrap();
    let dt: f64 = 1.0 / 40.0;
    assert!((sol.mean(1)[0] - (1.0 + 0.5 * dt.powf(0.75) / 0.75)).abs() < 1e-13);
    assert!(sol.mean(40)[0] > sol.mean(20)[0]);
}

#[test]
fn factored_coefficients_live_on_the_lower_triangle() {
    let up = Kernel::fractional(0.75, 1.0, Triangle::Upper, 1.0).unwrap();
    assert!(Coefficient::factored(up, Arc::new(|_, _, _, o: &mut [f64]| o[0] = 1.0)).is_err());
    let mut spec = ForwardSpec::constant_diffusion(1.0, 1.0).unwrap();
    spec.m = 2;
    assert!(matches!(solve_forward_direct(&spec, &ens(4, 4, 0)), Err(Error::Shape(_))));
}

#[test]
fn blow_up_is_reported_with_its_node() {
    let mut spec = ForwardSpec::linear_mean_field(1.0, 0.0, 1.0, 1.0).unwrap();
    spec.drift = Coefficient::new(Arc::new(|_, y: &[f64], _, out: &mut [f64]| out[0] = y[0] * y[0]));
    spec.envelopes = ForwardEnvelopes { k1: lower(1e30), k2: lower(0.0) };
    spec.phi = ForwardSpec::constant_free_term(vec![100.0]);
    match solve_forward(&spec, &ens(50, 2, 6)) {
        Err(Error::Divergence { node, value }) => {
            assert!(node > 0 && node <= 50);
            assert!(!value.is_finite() || value.abs() > OVERFLOW);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn envelopes_are_spot_checked() {
    let grid = TimeGrid::uniform(20, 1.0).unwrap();
    let good = ForwardSpec::linear_mean_field(2.0, 0.3, 1.0, 1.0).unwrap();
    assert!(lipschitz_spot_check(&good, &grid, 200, 1) <= 1.0 + 1e-12);
    let mut bad = good.clone();
    bad.envelopes.k1 = lower(0.5);
    assert!(lipschitz_spot_check(&bad, &grid, 200, 1) > 1.0);
}

#[test]
fn stability_is_linear_in_free_term_and_drift_shifts() {
    let e = ens(50, 2000, 7);
    let same = forward_stability_experiment(
        &ForwardSpec::linear_mean_field(1.0, 0.3, 1.0, 1.0).unwrap(),
        &ForwardSpec::linear_mean_field(1.0, 0.3, 1.0, 1.0).unwrap(),
        &e,
    )
    .unwrap();
    assert_eq!(same.distance, 0.0);

    let deltas = [0.1, 0.05, 0.025];
    let free = forward_stability_ladder(
        |d| Ok((ForwardSpec::linear_mean_field(1.0, 0.3, 1.0, 1.0)?, ForwardSpec::linear_mean_field(1.0, 0.3, 1.0 + d, 1.0)?)),
        &deltas,
        &e,
    )
    .unwrap();
    assert!(linearity_spread(&free) <= 1.1, "{free:?}");
    assert!(free.iter().all(|r| r.ratio > 0.0 && r.ratio.is_finite()));

    let drift = forward_stability_ladder(
        |d| {
            let a = ForwardSpec::linear_mean_field(1.0, 0.3, 1.0, 1.0)?;
            let mut b = a.clone();
            b.drift = Coefficient::new(Arc::new(move |_, _, yb: &[f64], out: &mut [f64]| out[0] = yb[0] + d));
            b.zero_at_zero = false;
            Ok((a, b))
        },
        &deltas,
        &e,
    )
    .unwrap();
    assert!(linearity_spread(&drift) <= 1.1, "{drift:?}");
}

#[test]
fn base_once_ladder_matches_pairwise_ladder() {
    let e = ens(20, 400, 9);
    let deltas = [0.2, 0.1];
    let drift = |d: f64| Coefficient::new(Arc::new(move |_, _, yb: &[f64], out: &mut [f64]| out[0] = 0.5 * yb[0] + d));
    let pairwise = forward_stability_ladder(
        |d| {
            let a = ForwardSpec::linear_mean_field(0.5, 0.3, 1.0, 1.0)?;
            let mut b = a.clone();
            b.drift = drift(d);
            b.zero_at_zero = false;
            Ok((a, b))
        },
        &deltas,
        &e,
    )
    .unwrap();
    let base = ForwardSpec::linear_mean_field(0.5, 0.3, 1.0, 1.0).unwrap();
    let once = forward_stability_ladder_from(
        &base,
        |d| {
            let mut b = base.clone();
            b.drift = drift(d);
            b.zero_at_zero = false;
            Ok(b)
        },
        &deltas,
        &e,
    )
    .unwrap();
    assert_eq!(pairwise, once);
}

#[test]
fn shared_coefficients_are_skipped_exactly() {
    // A shared diffusion closure is skipped; an equal but distinct one is
    // evaluated and contributes zero. The distinct case compares centered free
    // terms, equal to the raw ones up to rounding.
    let e = ens(15, 300, 4);
    let a = ForwardSpec::linear_mean_field(1.0, 0.4, 1.0, 1.0).unwrap();
    let mut shared = a.clone();
    shared.phi = ForwardSpec::constant_free_term(vec![1.3]);
    let mut distinct = shared.clone();
    distinct.diffusion = Coefficient::new(Arc::new(|_, _, _, out: &mut [f64]| out[0] = 0.4));
    distinct.drift = Coefficient::new(Arc::new(|_, _, yb: &[f64], out: &mut [f64]| out[0] = 1.0 * yb[0]));
    assert!(a.diffusion.same_as(&shared.diffusion));
    assert!(!a.diffusion.same_as(&distinct.diffusion));
    let r1 = forward_stability_experiment(&a, &shared, &e).unwrap();
    let r2 = forward_stability_experiment(&a, &distinct, &e).unwrap();
    assert_eq!(r1.distance, r2.distance);
    assert!((r1.rhs - r2.rhs).abs() <= 1e-12 * r1.rhs, "{r1:?} vs {r2:?}");
    assert!((r1.rhs - 0.3).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_input_gives_zero_state(a in -2.0f64..2.0, n in 1usize..30, seed in 0u64..100) {
        let mut spec = ForwardSpec::linear_mean_field(a, 0.0, 0.0, 1.0).unwrap();
        spec.drift = Coefficient::new(Arc::new(move |_, y: &[f64], yb: &[f64], out: &mut [f64]| out[0] = a * (y[0] + yb[0]).sin()));
        spec.envelopes.k1 = lower(2.0 * a.abs());
        let sol = solve_forward(&spec, &ens(n, 5, seed)).unwrap();
        prop_assert!(sol.raw().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn particles_decouple_without_mean_field(np_small in 2usize..20, seed in 0u64..100) {
        let mut spec = ForwardSpec::constant_diffusion(0.4, 1.0).unwrap();
        spec.drift = Coefficient::new(Arc::new(|_, y: &[f64], _, out: &mut [f64]| out[0] = -y[0].tanh()));
        spec.envelopes.k1 = lower(1.0);
        spec.phi = ForwardSpec::constant_free_term(vec![0.3]);
        let big = solve_forward_direct(&spec, &ens(20, 64, seed)).unwrap();
        let small = solve_forward_direct(&spec, &ens(20, np_small, seed)).unwrap();
        for i in 0..=20 {
            prop_assert_eq!(&small.y(i)[..], &big.y(i)[..np_small]);
        }
    }
}
