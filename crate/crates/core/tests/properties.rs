use georls::behavior::{hankel, identify_subspace, Trajectory};
use georls::control::{double_integrator, simulate, NoiseModel};
use georls::manifold::{chordal_distance, gap_distance, orthonormalize, projector, tangent_project, StiefelPoint};
use georls::oracle::{random_problem, random_vector, robust_objective, SelectorFamily};
use georls::solver::{
    build_a, find_lambda, solve, stationarity_residual, ReducedPencil, SolverOptions, TieRule, TIE_TOL,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (2usize..12).prop_flat_map(|n| (Just(n), 1..n))
}

#[test]
fn metric_equivalence_on_many_pairs() {
    let mut r = rng(5);
    for (k, n) in [(1, 3), (2, 5), (3, 8)] {
        for _ in 0..1000 {
            let y1 = StiefelPoint::random(n, k, &mut r);
            let y2 = StiefelPoint::random(n, k, &mut r);
            let c = chordal_distance(&y1, &y2).unwrap();
            let g = gap_distance(&y1, &y2).unwrap();
            assert!(
                g <= c + 1e-12 && c <= (k as f64).sqrt() * g + 1e-12,
                "k={k} n={n} gap={g} chordal={c}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chordal_and_overlap_sum_to_k((n, k) in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y1 = StiefelPoint::random(n, k, &mut r);
        let y2 = StiefelPoint::random(n, k, &mut r);
        let d = chordal_distance(&y1, &y2).unwrap();
        let overlap = (y1.basis().transpose() * y2.basis()).norm_squared();
        prop_assert!((d * d + overlap - k as f64).abs() <= 1e-9);
    }

    #[test]
    fn projector_ignores_basis_choice((n, k) in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y = StiefelPoint::random(n, k, &mut r);
        let q = StiefelPoint::random(k, k, &mut r);
        let rotated = orthonormalize(&(y.basis() * q.basis())).unwrap();
        let diff = &projector(&rotated).matrix - &projector(&y).matrix;
        prop_assert!(diff.amax() <= 1e-9);
    }

    #[test]
    fn chordal_is_a_metric((n, k) in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = StiefelPoint::random(n, k, &mut r);
        let b = StiefelPoint::random(n, k, &mut r);
        let c = StiefelPoint::random(n, k, &mut r);
        let ab = chordal_distance(&a, &b).unwrap();
        let ba = chordal_distance(&b, &a).unwrap();
        let bc = chordal_distance(&b, &c).unwrap();
        let ac = chordal_distance(&a, &c).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(chordal_distance(&a, &a).unwrap() <= 1e-9);
    }

    #[test]
    fn tangent_projection_is_idempotent((n, k) in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y = StiefelPoint::random(n, k, &mut r);
        let g = DMatrix::from_fn(n, k, |_, _| r.random_range(-1.0..1.0));
        let once = tangent_project(&y, &g).unwrap();
        let twice = tangent_project(&y, &once).unwrap();
        prop_assert!((&twice - &once).amax() <= 1e-12);
    }

    #[test]
    fn hankel_is_linear(q in 1usize..4, len in 5usize..30, depth in 1usize..5, a in -3.0..3.0f64, c in -3.0..3.0f64, seed in any::<u64>()) {
        prop_assume!(depth <= len);
        let mut r = rng(seed);
        let w1 = DMatrix::from_fn(q, len, |_, _| r.random_range(-1.0..1.0));
        let w2 = DMatrix::from_fn(q, len, |_, _| r.random_range(-1.0..1.0));
        let mixed = Trajectory::new(&w1 * a + &w2 * c).unwrap();
        let h1 = hankel(&Trajectory::new(w1).unwrap(), depth).unwrap();
        let h2 = hankel(&Trajectory::new(w2).unwrap(), depth).unwrap();
        let lhs = hankel(&mixed, depth).unwrap();
        prop_assert!((lhs - (h1 * a + h2 * c)).amax() <= 1e-12);
    }

    #[test]
    fn multiplier_distance_is_nonincreasing((n, k) in dims(), gamma in prop::sample::select(vec![0.0, 4.0]), seed in any::<u64>()) {
        let mut r = rng(seed);
        let prob = random_problem(n, k, gamma, 0.3, SelectorFamily::Any, &mut r).unwrap();
        let x = random_vector(n, &mut r);
        let a = build_a(&x, &prob);
        let pencil = ReducedPencil::new(&a, prob.ball().center());
        let mut last = f64::INFINITY;
        for i in 0..60 {
            let lambda = 1e-3 * 1.3f64.powi(i);
            let sel = pencil.select(&pencil.spectrum(lambda), TieRule::ClosestToCenter, TIE_TOL);
            prop_assert!(sel.distance() <= last + 1e-9, "lambda={lambda}: {} > {last}", sel.distance());
            last = sel.distance();
        }
    }

    #[test]
    fn slackness_and_inner_stationarity((n, k) in dims(), gamma in prop::sample::select(vec![0.0, 4.0]), rho_frac in 0.0..0.9f64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let rho = rho_frac * (k as f64).sqrt();
        let prob = random_problem(n, k, gamma, rho, SelectorFamily::Any, &mut r).unwrap();
        let x = random_vector(n, &mut r);
        let a = build_a(&x, &prob);
        let opts = SolverOptions::default();
        let inner = find_lambda(&x, &a, &prob, &opts).unwrap();
        let tol = opts.lambda_tol(k);
        prop_assert!(inner.lambda_star >= 0.0);
        if inner.lambda_star > 0.0 {
            prop_assert!((inner.distance - rho).abs() <= tol + 1e-12);
        } else {
            prop_assert!(inner.distance <= rho + tol);
        }
        let (res, scale) = stationarity_residual(&a, inner.lambda_star, prob.ball().center(), &inner.y_star);
        prop_assert!(res <= 1e-8 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Along a segment the robust objective is convex; checked where the
    // closed-form maximiser is exact (M = I, or no consistency weight).
    #[test]
    fn robust_objective_is_midpoint_convex((n, k) in dims(), full in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let (gamma, family) = if full { (4.0, SelectorFamily::Full) } else { (0.0, SelectorFamily::Any) };
        let prob = random_problem(n, k, gamma, r.random_range(0.05..0.5), family, &mut r).unwrap();
        let xa = random_vector(n, &mut r);
        let xb = random_vector(n, &mut r);
        let opts = SolverOptions::default();
        let g = |x: &DVector<f64>| robust_objective(x, &prob, &opts).unwrap();
        for t in [0.25, 0.5, 0.75] {
            let lo = &xa * (1.0 - t) + &xb * t;
            let h = 0.1;
            let left = &xa * (1.0 - t + h) + &xb * (t - h);
            let right = &xa * (1.0 - t - h) + &xb * (t + h);
            let (gl, gm, gr) = (g(&left), g(&lo), g(&right));
            prop_assert!(gm <= 0.5 * (gl + gr) + 1e-9 * (1.0 + gm.abs()), "t={t}: {gm} > mean({gl}, {gr})");
        }
    }

    #[test]
    fn solution_scales_with_data((n, k) in dims(), c in 0.1..10.0f64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let prob = random_problem(n, k, 4.0, r.random_range(0.05..0.5), SelectorFamily::Full, &mut r).unwrap();
        let opts = SolverOptions { tolx: 1e-10, ..Default::default() };
        let base = solve(&prob, &opts).unwrap();
        let scaled = solve(&prob.with_b(prob.b() * c).unwrap(), &SolverOptions { tolx: 1e-10 * c, ..opts }).unwrap();
        prop_assert!(base.converged && scaled.converged);
        let dx = (&scaled.x_star - &base.x_star * c).norm() / (c * base.x_star.norm().max(1.0));
        prop_assert!(dx <= 1e-6, "relative x* mismatch {dx}");
        prop_assert!((scaled.inner.distance - base.inner.distance).abs() <= 1e-6);
    }
}

#[test]
fn shifted_windows_lie_in_identified_behavior() {
    let sys = double_integrator();
    let mut r = rng(11);
    let depth = 8;
    let inputs = DMatrix::from_fn(1, 120, |_, _| r.random_range(-1.0..1.0));
    let sim = simulate(
        &sys,
        &DVector::zeros(2),
        &inputs,
        &mut NoiseModel::noiseless().sampler(0),
    )
    .unwrap();
    let est = identify_subspace(&sim.noiseless, depth, depth + 2).unwrap();
    let basis = est.subspace.basis();
    for start in 0..=(120 - depth) {
        let w = sim.noiseless.window(start, depth).unwrap();
        let resid = &w - basis * (basis.transpose() * &w);
        assert!(
            resid.norm() <= 1e-8 * w.norm().max(1.0),
            "window {start}: {}",
            resid.norm()
        );
    }
}
