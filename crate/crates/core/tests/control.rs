use std::sync::Arc;

use mfsvie::backward::SolverConfig;
use mfsvie::control::*;
use mfsvie::kernels::{contraction_partition, ForwardEnvelopes, KernelEnvelopeSet, Triangle};
use mfsvie::stochastic::{BrownianEnsemble, TimeGrid};
use mfsvie::{Error, Kernel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ensemble(n: usize, np: usize, seed: u64) -> Arc<BrownianEnsemble> {
    let grid = TimeGrid::uniform(n, 1.0).unwrap();
    Arc::new(BrownianEnsemble::generate_sized(&grid, np, 1, seed))
}

fn aligned_ensemble(spec: &ControlProblemSpec, n: usize, np: usize, seed: u64) -> Arc<BrownianEnsemble> {
    let env = KernelEnvelopeSet::Backward(spec.adjoint_envelopes());
    let part = contraction_partition(&env, 0.25, 1.0, spec.b).unwrap();
    let grid = TimeGrid::aligned(n, &part).unwrap();
    Arc::new(BrownianEnsemble::generate_sized(&grid, np, 1, seed))
}

/// `κ = κ(u)`, no diffusion, `g = ½(y² + u²)`, `φ ≡ y₀`, all derivatives synthesized.
fn control_only(y0: f64, kappa: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ControlProblemSpec {
    let mut spec = ControlProblemSpec::lq(y0, 0.0, 1.0, 1.0, 1.0).unwrap();
    spec.kappa = Arc::new(move |_, _, _, u: &[f64], out: &mut [f64]| out[0] = kappa(u[0]));
    spec.kappa_y = None;
    spec.kappa_ybar = None;
    spec.kappa_u = None;
    spec.g_y = None;
    spec.g_ybar = None;
    spec.g_u = None;
    spec
}

/// Exact minimizer of the discrete deterministic LQ cost
/// `Δ Σ_i ½(Y_i² + u_i²)` with `Y_i = 1 + Δ Σ_{k<i} u_k`.
fn discrete_lq_optimum(n: usize) -> (Vec<f64>, f64) {
    let dt = 1.0 / n as f64;
    let l = DMatrix::from_fn(n, n, |i, k| if k < i { dt } else { 0.0 });
    let a = l.transpose() * &l + DMatrix::identity(n, n);
    let rhs = -(l.transpose() * DVector::from_element(n, 1.0));
    let u = a.lu().solve(&rhs).unwrap();
    let y = DVector::from_element(n, 1.0) + &l * &u;
    let cost = 0.5 * dt * (y.norm_squared() + u.norm_squared());
    (u.iter().copied().collect(), cost)
}

#[test]
fn box_and_ball_projections() {
    let b = AdmissibleSet::Box { lo: -1.0, hi: 1.0 };
    let mut u = vec![2.0, -0.5, -3.0];
    b.project(&mut u);
    assert_eq!(u, vec![1.0, -0.5, -1.0]);
    let ball = AdmissibleSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
    let mut v = vec![3.0, 4.0];
    ball.project(&mut v);
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    assert!(AdmissibleSet::Box { lo: 1.0, hi: 0.0 }.validate(1).is_err());
    assert!(ball.validate(3).is_err());
}

#[test]
fn state_with_zero_control_is_brownian() {
    let spec = ControlProblemSpec::lq(0.5, 0.7, 1.0, 1.0, 1.0).unwrap();
    let ens = ensemble(20, 50, 1);
    let sol = solve_state(&spec, &ControlIterate::constant(1, 20, 0.0), &ens).unwrap();
    for i in 0..=20 {
        for p in 0..50 {
            assert!((sol.y(i)[p] - (0.5 + 0.7 * ens.b(i, p)[0])).abs() < 1e-12);
        }
    }
}

#[test]
fn unit_control_drives_state_to_one() {
    let spec = ControlProblemSpec::lq(0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
    let ens = ensemble(50, 4, 2);
    let sol = solve_state(&spec, &ControlIterate::constant(1, 50, 1.0), &ens).unwrap();
    assert!((sol.mean(50)[0] - 1.0).abs() < 1e-12);
}

#[test]
fn mean_field_controlled_state_is_exponential() {
    let mut spec = ControlProblemSpec::lq(1.0, 0.5, 1.0, 1.0, 1.0).unwrap();
    spec.kappa = Arc::new(|_, _, yb: &[f64], u: &[f64], out: &mut [f64]| out[0] = yb[0] + u[0]);
    spec.envelopes = ForwardEnvelopes { k1: Kernel::constant(1.0, Triangle::Lower, 1.0).unwrap(), k2: Kernel::zero(Triangle::Lower, 1.0) };
    let ens = ensemble(200, 10_000, 3);
    let sol = solve_state(&spec, &ControlIterate::constant(1, 200, 0.0), &ens).unwrap();
    let m = sol.mean(200)[0];
    // Left-point Euler gives (1 + 1/n)ⁿ; the diffusion only adds sampling noise.
    assert!((m - 1.005f64.powi(200)).abs() < 4.0 * 0.5 / 100.0, "{m}");
    assert!((m - std::f64::consts::E).abs() < 0.02, "{m}");
}

#[test]
fn cost_quadrature_examples() {
    let ens = ensemble(40, 8, 4);
    let spec = ControlProblemSpec::lq(1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
    let u = ControlIterate::constant(1, 40, 1.0);
    assert!((evaluate_cost(&spec, &u, &solve_state(&spec, &u, &ens).unwrap()) - 0.5).abs() < 1e-12);
    // κ ≡ 0 keeps Y ≡ 1.
    let mut frozen = ControlProblemSpec::lq(1.0, 0.0, 1.0, 1.0, 0.0).unwrap();
    frozen.kappa = Arc::new(|_, _, _, _, out: &mut [f64]| out[0] = 0.0);
    assert!((evaluate_cost(&frozen, &u, &solve_state(&frozen, &u, &ens).unwrap()) - 0.5).abs() < 1e-12);
    let lq = ControlProblemSpec::lq(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
    let zero = ControlIterate::constant(1, 40, 0.0);
    assert!((evaluate_cost(&lq, &zero, &solve_state(&lq, &zero, &ens).unwrap()) - 0.5).abs() < 1e-12);
}

#[test]
fn supplied_derivatives_match_finite_differences() {
    let grid = TimeGrid::uniform(50, 1.0).unwrap();
    for seed in 0..5 {
        let spec = ControlProblemSpec::random_linear(seed, 1.0).unwrap();
        assert!(derivative_spot_check(&spec, &grid, 64, seed) <= 1e-4);
    }
    let lq = ControlProblemSpec::lq(1.0, 0.3, 1.0, 2.0, 0.5).unwrap();
    assert!(derivative_spot_check(&lq, &grid, 64, 9) <= 1e-4);
    let mut wrong = lq.clone();
    wrong.g_u = Some(Arc::new(|_, _, _, u: &[f64], out: &mut [f64]| out[0] = -u[0]));
    assert!(derivative_spot_check(&wrong, &grid, 64, 9) > 0.1);
}

#[test]
fn adjoint_of_a_pure_cost_problem_is_the_state() {
    let spec = ControlProblemSpec::lq(1.0, 0.8, 1.0, 1.0, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 20, 2000, 5);
    let u = ControlIterate::constant(1, 20, 0.0);
    let state = solve_state(&spec, &u, &ens).unwrap();
    let (adj, rep) = solve_adjoint(&spec, &state, &u, &ens, 2, &SolverConfig::default()).unwrap();
    for i in 0..=20 {
        let rms = (0..2000).map(|p| (adj.x(i)[p] - state.y(i)[p]).powi(2)).sum::<f64>() / 2000.0;
        assert!(rms.sqrt() < 1e-6, "node {i}: {}", rms.sqrt());
    }
    // ℵ(t_i, t_k) for k < i is the martingale density of Y(t_i) = 1 + 0.8·B(t_i).
    assert!((adj.aleph_mean(15, 4)[0] - 0.8).abs() < 0.05);
    assert!(rep.m_residual <= 0.1);
}

#[test]
fn adjoint_vanishes_without_state_cost() {
    let spec = ControlProblemSpec::lq(1.0, 0.5, 1.0, 0.0, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 10, 200, 6);
    let u = ControlIterate::constant(1, 10, 0.3);
    let state = solve_state(&spec, &u, &ens).unwrap();
    let (adj, _) = solve_adjoint(&spec, &state, &u, &ens, 2, &SolverConfig::default()).unwrap();
    for i in 0..=10 {
        assert!(adj.x(i).iter().all(|v| v.abs() < 1e-12));
    }
    // G is then g_u = u pointwise.
    let g = gradient_field(&spec, &state, &adj, &u).unwrap();
    assert!((0..10).all(|k| (g.mean(k)[0] - 0.3).abs() < 1e-12));
}

#[test]
fn centered_cost_free_term_has_zero_mean_correction() {
    let mut spec = ControlProblemSpec::lq(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    spec.cost = Arc::new(|_, y: &[f64], yb: &[f64], _| 0.5 * (y[0] - yb[0]).powi(2));
    spec.g_y = None;
    spec.g_ybar = None;
    let ens = ensemble(10, 300, 7);
    let u = ControlIterate::constant(1, 10, 0.0);
    let state = solve_state(&spec, &u, &ens).unwrap();
    let (_, ft) = assemble_adjoint(&spec, &state, &u, &ens).unwrap();
    for i in 0..=10 {
        let ybar = state.mean(i)[0];
        for p in 0..300 {
            // Brute force: g_y = Y − Ȳ and E g_ȳ = −E(Y − Ȳ) = 0.
            assert!((ft.row(i)[p] - (state.y(i)[p] - ybar)).abs() < 1e-8);
        }
    }
}

#[test]
fn lq_gradient_is_remaining_time_and_duality_holds() {
    let spec = ControlProblemSpec::lq(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 100, 10_000, 42);
    let grid = ens.grid().clone();
    let u = ControlIterate::constant(1, grid.n(), 0.0);
    let state = solve_state(&spec, &u, &ens).unwrap();
    let (adj, _) = solve_adjoint(&spec, &state, &u, &ens, 2, &SolverConfig::default()).unwrap();
    let g = gradient_field(&spec, &state, &adj, &u).unwrap();
    for k in 0..grid.n() {
        assert!((g.mean(k)[0] - (1.0 - grid.t(k))).abs() <= 0.03, "node {k}");
    }
    assert!((g.mean(0)[0] - 1.0).abs() <= 0.03);
    assert!((g.mean(grid.index_of(0.5).unwrap())[0] - 0.5).abs() <= 0.03);

    let ones = ControlIterate::constant(1, grid.n(), 1.0);
    let dual = duality_check(&spec, &state, &adj, &u, &ones, &ens).unwrap();
    assert!((dual.lhs - 0.5).abs() <= 0.03 && (dual.rhs - 0.5).abs() <= 0.03, "{dual:?}");
    let same = duality_check(&spec, &state, &adj, &u, &u, &ens).unwrap();
    assert_eq!((same.lhs, same.rhs), (0.0, 0.0));

    // Indicator of the first ten nodes: derivative = ∫ over the block of (1 − t).
    let block: Vec<f64> = (0..grid.n()).map(|k| if k < 10 { 1.0 } else { 0.0 }).collect();
    let fd = fd_gradient_oracle(&spec, &u, &ens, 1e-2, &[block.clone(), vec![0.0; grid.n()]]).unwrap();
    let want: f64 = (0..10).map(|k| grid.dt(k) * (1.0 - grid.t(k + 1))).sum();
    assert!((fd[0] - want).abs() < 1e-9, "{} vs {want}", fd[0]);
    assert!((gradient_pairing(&g, &block, &grid) - fd[0]).abs() < 1e-9);
    assert_eq!(fd[1], 0.0);
}

#[test]
fn central_differences_converge_quadratically() {
    let spec = control_only(1.0, f64::sin);
    let ens = ensemble(50, 4, 8);
    let u = ControlIterate::constant(1, 50, 0.3);
    let dir = vec![1.0; 50];
    let est: Vec<f64> = [0.4, 0.2, 0.1]
        .iter()
        .map(|h| fd_gradient_oracle(&spec, &u, &ens, *h, &[dir.clone()]).unwrap()[0])
        .collect();
    let ratio = (est[0] - est[1]) / (est[1] - est[2]);
    assert!((ratio - 4.0).abs() <= 0.3 * 4.0, "ratio {ratio}");
}

#[test]
fn random_linear_gradient_matches_finite_differences_and_duality() {
    let spec = ControlProblemSpec::random_linear(7, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 100, 10_000, 42);
    let grid = ens.grid().clone();
    let u = ControlIterate::from_fn(&grid, 1, |t, o| o[0] = 0.3 * (3.0 * t).sin());
    let state = solve_state(&spec, &u, &ens).unwrap();
    let (adj, _) = solve_adjoint(&spec, &state, &u, &ens, 2, &SolverConfig::default()).unwrap();
    let g = gradient_field(&spec, &state, &adj, &u).unwrap();
    let dirs = random_directions(grid.n(), 1, 10, 11);
    let fd = fd_gradient_oracle(&spec, &u, &ens, 1e-3, &dirs).unwrap();
    for (v, f) in dirs.iter().zip(&fd) {
        let a = gradient_pairing(&g, v, &grid);
        assert!((a - f).abs() / (f.abs() + 1e-8) <= 0.05, "adjoint {a} vs fd {f}");
    }
    let v = u.shifted(&vec![1.0; grid.n()], 1.0);
    let dual = duality_check(&spec, &state, &adj, &u, &v, &ens).unwrap();
    assert!(dual.relative_gap() <= 0.05, "{dual:?}");
}

#[test]
fn synthesized_derivatives_reproduce_analytic_gradient() {
    let analytic = ControlProblemSpec::random_linear(3, 1.0).unwrap();
    let mut synth = analytic.clone();
    synth.kappa_y = None;
    synth.kappa_ybar = None;
    synth.kappa_u = None;
    synth.nu_y = None;
    synth.nu_ybar = None;
    synth.nu_u = None;
    synth.g_y = None;
    synth.g_ybar = None;
    synth.g_u = None;
    let ens = aligned_ensemble(&analytic, 30, 500, 12);
    let grid = ens.grid().clone();
    let u = ControlIterate::from_fn(&grid, 1, |t, o| o[0] = t - 0.5);
    let cfg = SolverConfig::default();
    let grads: Vec<GradientField> = [&analytic, &synth]
        .iter()
        .map(|spec| {
            let state = solve_state(spec, &u, &ens).unwrap();
            let (adj, _) = solve_adjoint(spec, &state, &u, &ens, 2, &cfg).unwrap();
            gradient_field(spec, &state, &adj, &u).unwrap()
        })
        .collect();
    for k in 0..grid.n() {
        assert!((grads[0].mean(k)[0] - grads[1].mean(k)[0]).abs() < 1e-6);
    }
}

#[test]
fn vi_residual_examples() {
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let field = |v: f64| GradientField::from_values(1, 4, 1, vec![v; 4]).unwrap();
    let interior = ControlIterate::constant(1, 4, 0.2);
    let boxed = AdmissibleSet::Box { lo: -1.0, hi: 1.0 };
    assert_eq!(vi_residual(&field(0.0), &interior, &boxed, &grid), 0.0);
    let boundary = ControlIterate::constant(1, 4, 1.0);
    assert_eq!(vi_residual(&field(-0.3), &boundary, &boxed, &grid), 0.0);
    assert!(vi_residual(&field(0.3), &boundary, &boxed, &grid) > 0.29);
    let r = vi_residual(&field(0.7), &interior, &AdmissibleSet::Unbounded, &grid);
    assert!((r - 0.7).abs() < 1e-12);
}

#[test]
fn descent_reaches_the_discrete_lq_optimum() {
    let spec = ControlProblemSpec::lq(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 100, 2000, 13);
    let n = ens.grid().n();
    assert_eq!(n, 100);
    let dcfg = DescentConfig { tol: 1e-4, ..DescentConfig::default() };
    let out = projected_gradient_descent(&spec, &ControlIterate::constant(1, n, 0.0), &ens, &dcfg, &SolverConfig::default()).unwrap();
    assert!(*out.residuals.last().unwrap() <= 0.02);
    assert!(out.monotone);
    let (u_star, j_star) = discrete_lq_optimum(n);
    let j = *out.iterate.costs.last().unwrap();
    assert!((j - j_star).abs() <= 0.01 * j_star, "{j} vs {j_star}");
    let err = out.iterate.values().iter().zip(&u_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "max control error {err}");
    assert!(out.iterate.costs.windows(2).all(|w| w[1] <= w[0]));

    // No random admissible perturbation lowers the cost beyond the noise.
    let noisy = ControlProblemSpec::lq(1.0, 0.3, 1.0, 1.0, 1.0).unwrap();
    let ens2 = aligned_ensemble(&noisy, 100, 2000, 14);
    let opt = projected_gradient_descent(&noisy, &ControlIterate::constant(1, n, 0.0), &ens2, &dcfg, &SolverConfig::default()).unwrap();
    let rep = perturbation_test(&noisy, &opt.iterate, &ens2, 20, 0.05, 15).unwrap();
    assert!(rep.passes(), "{rep:?}");
}

#[test]
fn descent_trivial_cases() {
    let cfg = SolverConfig::default();
    // G ≡ 0: no state cost, no control cost.
    let flat = ControlProblemSpec::lq(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
    let ens = aligned_ensemble(&flat, 10, 50, 16);
    let u0 = ControlIterate::constant(1, 10, 0.4);
    let out = projected_gradient_descent(&flat, &u0, &ens, &DescentConfig::default(), &cfg).unwrap();
    assert_eq!(out.iterate.values(), u0.values());
    // U = {0}.
    let mut pinned = ControlProblemSpec::lq(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
    pinned.set = AdmissibleSet::Box { lo: 0.0, hi: 0.0 };
    let zero = ControlIterate::constant(1, 10, 0.0);
    let out = projected_gradient_descent(&pinned, &zero, &ens, &DescentConfig::default(), &cfg).unwrap();
    assert!(out.iterate.values().iter().all(|v| *v == 0.0));
    assert_eq!(out.residuals, vec![0.0]);
    assert!(matches!(
        projected_gradient_descent(&pinned, &u0, &ens, &DescentConfig::default(), &cfg),
        Err(Error::Domain(_))
    ));
}

#[test]
fn uphill_gradient_stalls() {
    let mut spec = ControlProblemSpec::lq(1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
    spec.g_u = Some(Arc::new(|_, _, _, u: &[f64], out: &mut [f64]| out[0] = -u[0] - 1.0));
    let ens = aligned_ensemble(&spec, 10, 20, 17);
    let err = projected_gradient_descent(&spec, &ControlIterate::constant(1, 10, 0.0), &ens, &DescentConfig::default(), &SolverConfig::default());
    match err {
        Err(Error::Stall { costs }) => assert_eq!(costs.len(), 6),
        other => panic!("expected a stall, got {other:?}"),
    }
}

#[test]
fn adapted_controls_agree_with_open_loop_on_deterministic_values() {
    let mut spec = ControlProblemSpec::lq(1.0, 0.4, 1.0, 1.0, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 20, 400, 18);
    let open = ControlIterate::constant(1, 20, 0.25);
    let cfg = SolverConfig::default();
    let s1 = solve_state(&spec, &open, &ens).unwrap();
    let (a1, _) = solve_adjoint(&spec, &s1, &open, &ens, 2, &cfg).unwrap();
    let g1 = gradient_field(&spec, &s1, &a1, &open).unwrap();
    assert!(matches!(solve_state(&spec, &ControlIterate::adapted(1, 20, 400, vec![0.25; 8000]).unwrap(), &ens), Err(Error::Config(_))));
    spec.open_loop = false;
    let adapted = ControlIterate::adapted(1, 20, 400, vec![0.25; 8000]).unwrap();
    let s2 = solve_state(&spec, &adapted, &ens).unwrap();
    let (a2, _) = solve_adjoint(&spec, &s2, &adapted, &ens, 2, &cfg).unwrap();
    let g2 = gradient_field(&spec, &s2, &a2, &adapted).unwrap();
    for k in 0..20 {
        assert!((g1.mean(k)[0] - g2.mean(k)[0]).abs() < 1e-10);
    }
    let grid = ens.grid();
    assert!(vi_residual(&g2, &adapted, &spec.set, grid) >= vi_residual(&g1, &open, &spec.set, grid) - 1e-12);
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn projections_satisfy_the_obtuse_angle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let sets = [
        AdmissibleSet::Box { lo: -0.5, hi: 1.5 },
        AdmissibleSet::Ball { center: vec![0.3, -0.2, 0.1], radius: 0.8 },
    ];
    for (s, tol) in sets.iter().zip([0.0, 1e-12]) {
        for _ in 0..10_000 {
            let x = random_point(&mut rng, 3, 4.0);
            let mut z = random_point(&mut rng, 3, 2.0);
            s.project(&mut z);
            let mut px = x.clone();
            s.project(&mut px);
            let a: Vec<f64> = x.iter().zip(&px).map(|(u, v)| u - v).collect();
            let b: Vec<f64> = z.iter().zip(&px).map(|(u, v)| u - v).collect();
            assert!(dot(&a, &b) <= tol, "{s:?}: {}", dot(&a, &b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projections_are_idempotent(x in prop::collection::vec(-10.0f64..10.0, 3), r in 0.0f64..3.0, lo in -2.0f64..0.0, w in 0.0f64..3.0) {
        for s in [AdmissibleSet::Box { lo, hi: lo + w }, AdmissibleSet::Ball { center: vec![0.5, -1.0, 0.0], radius: r }, AdmissibleSet::Unbounded] {
            let mut once = x.clone();
            s.project(&mut once);
            let mut twice = once.clone();
            s.project(&mut twice);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!(s.contains(&twice));
        }
    }

    #[test]
    fn projection_is_nonexpansive(x in prop::collection::vec(-10.0f64..10.0, 2), y in prop::collection::vec(-10.0f64..10.0, 2)) {
        let s = AdmissibleSet::Ball { center: vec![1.0, 1.0], radius: 1.5 };
        let (mut px, mut py) = (x.clone(), y.clone());
        s.project(&mut px);
        s.project(&mut py);
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(&px, &py) <= d(&x, &y) + 1e-12);
    }

    #[test]
    fn unit_control_integrates_exactly(c in -2.0f64..2.0, n in 2usize..40) {
        let spec = ControlProblemSpec::lq(0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = TimeGrid::uniform(n, 1.0).unwrap();
        let ens = BrownianEnsemble::generate_sized(&grid, 2, 1, 0);
        let sol = solve_state(&spec, &ControlIterate::constant(1, n, c), &ens).unwrap();
        for i in 0..=n {
            prop_assert!((sol.mean(i)[0] - c * grid.t(i)).abs() <= 1e-12);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = ControlProblemSpec::random_linear(5, 1.0).unwrap();
    let ens = aligned_ensemble(&spec, 40, 300, 8);
    let grid = ens.grid().clone();
    let u = ControlIterate::from_fn(&grid, 1, |t, o| o[0] = 0.2 * t);
    let v = u.shifted(&vec![1.0; grid.n()], 1.0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let state = solve_state(&spec, &u, &ens).unwrap();
            let (adj, _) = solve_adjoint(&spec, &state, &u, &ens, 2, &SolverConfig::default()).unwrap();
            let g = gradient_field(&spec, &state, &adj, &u).unwrap();
            let dual = duality_check(&spec, &state, &adj, &u, &v, &ens).unwrap();
            let means: Vec<f64> = (0..grid.n()).map(|k| g.mean(k)[0]).collect();
            (evaluate_cost(&spec, &u, &state), means, dual.lhs, dual.rhs)
        })
    };
    // Work stealing makes the split of a parallel loop timing-dependent, so
    // one multithreaded run is not enough to expose an unordered reduction.
    let reference = run(1);
    for _ in 0..8 {
        assert_eq!(run(3), reference);
    }
}
