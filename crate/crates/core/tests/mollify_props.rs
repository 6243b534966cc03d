use mfc_core::mollify::{
    convexity_preservation_probe, sample_bump, sample_bump_counted, smooth_eval, Segment, FUNCTIONALS,
};
use mfc_core::rng::aux_rng;
use mfc_core::{BaseFunctional, EmpiricalMeasure, Estimate, SmoothedFunctional, VectorTuple};
use proptest::prelude::*;

/// Acceptance probability of the bump given a uniform proposal on the unit
/// ball: `d ∫₀¹ exp(1/(ρ²-1) + 1) ρ^{d-1} dρ`, by composite Simpson.
fn acceptance_oracle(d: usize) -> f64 {
    let m = 20_000;
    let h = 1.0 / m as f64;
    let f = |rho: f64| {
        if rho >= 1.0 {
            0.0
        } else {
            (1.0 / (rho * rho - 1.0) + 1.0).exp() * rho.powi(d as i32 - 1)
        }
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    d as f64 * s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bump_draws_stay_inside_the_ball(seed in any::<u64>(), d in 1usize..4, k in 1usize..50) {
        let eps = 1.0 / k as f64;
        let mut rng = aux_rng(seed, 0);
        for _ in 0..50 {
            let y = sample_bump(eps, d, &mut rng);
            prop_assert_eq!(y.len(), d);
            prop_assert!(y.iter().map(|v| v * v).sum::<f64>().sqrt() < eps);
        }
    }

    #[test]
    fn smoothing_moves_atoms_by_less_than_epsilon(seed in any::<u64>(), k in 1usize..20, x in -3.0f64..3.0, atoms in prop::collection::vec(-3.0f64..3.0, 1..5)) {
        // Atom resampling adds its own error to the mean, so it is checked at a Dirac.
        let spread = EmpiricalMeasure::scalar(&atoms).unwrap();
        let dirac = EmpiricalMeasure::scalar(&atoms[..1]).unwrap();
        for (name, mu) in [("position", spread), ("mean", dirac)] {
            let base = BaseFunctional::registry(name, 1).unwrap();
            let sf = SmoothedFunctional::new(base.clone(), k, 16, seed).unwrap();
            let est = smooth_eval(&sf, &[x], &mu).unwrap();
            prop_assert!(est.max_offset_norm < sf.epsilon());
            prop_assert!((est.mean - base.eval(&[x], &mu).unwrap()).abs() < sf.epsilon());
        }
    }
}

#[test]
fn bump_is_centered() {
    for d in [1, 2] {
        let mut rng = aux_rng(11, d as u64);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| sample_bump(1.0, d, &mut rng)).collect();
        for axis in 0..d {
            let coord: Vec<f64> = draws.iter().map(|y| y[axis]).collect();
            let est = Estimate::from_samples(&coord);
            assert!(est.mean.abs() <= 4.0 * est.std_error, "d = {d}, axis {axis}: {est:?}");
        }
    }
}

#[test]
fn acceptance_rate_matches_quadrature() {
    for d in [1, 2, 3] {
        let mut rng = aux_rng(5, d as u64);
        let draws = 50_000;
        let proposals: usize = (0..draws).map(|_| sample_bump_counted(0.5, d, &mut rng).1).sum();
        let rate = draws as f64 / proposals as f64;
        let oracle = acceptance_oracle(d);
        let se = (oracle * (1.0 - oracle) / proposals as f64).sqrt();
        assert!((rate - oracle).abs() <= 4.0 * se, "d = {d}: {rate} vs {oracle}");
    }
}

#[test]
fn smoothed_mean_at_a_dirac_tends_to_zero() {
    let base = BaseFunctional::registry("mean", 1).unwrap();
    let mu = EmpiricalMeasure::scalar(&[0.0]).unwrap();
    for k in [1, 4, 16] {
        let sf = SmoothedFunctional::new(base.clone(), k, 4000, 3).unwrap();
        let est = smooth_eval(&sf, &[0.0], &mu).unwrap();
        assert!(est.mean.abs() <= 4.0 * est.std_error, "k = {k}: {est:?}");
        assert!(est.mean.abs() < sf.epsilon());
    }
}

#[test]
fn smoothed_position_is_unbiased() {
    let base = BaseFunctional::registry("position", 2).unwrap();
    let mu = EmpiricalMeasure::from_points(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let sf = SmoothedFunctional::new(base, 2, 4000, 9).unwrap();
    let est = smooth_eval(&sf, &[0.7, -0.2], &mu).unwrap();
    assert!((est.mean - 0.7).abs() <= 4.0 * est.std_error, "{est:?}");
}

#[test]
fn constants_are_fixed_points() {
    let sf = SmoothedFunctional::new(BaseFunctional::constant(2.5, 1), 3, 50, 1).unwrap();
    let mu = EmpiricalMeasure::scalar(&[1.0, 2.0]).unwrap();
    let est = smooth_eval(&sf, &[0.0], &mu).unwrap();
    assert_eq!((est.mean, est.std_error), (2.5, 0.0));
}

#[test]
fn estimates_are_reproducible_across_thread_counts() {
    let base = BaseFunctional::registry("abs-offset", 1).unwrap();
    let sf = SmoothedFunctional::new(base, 8, 999, 21).unwrap();
    let mu = EmpiricalMeasure::scalar(&[-1.0, 0.5, 2.0]).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| smooth_eval(&sf, &[0.2], &mu).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn registry_and_validation() {
    for name in FUNCTIONALS {
        let f = BaseFunctional::registry(name, 2).unwrap();
        assert_eq!(f.name, name);
    }
    assert!(BaseFunctional::registry("nope", 1).is_err());
    assert!(BaseFunctional::new("bad", 1, "x[1]", None, false).is_err());
    assert!(SmoothedFunctional::new(BaseFunctional::constant(0.0, 1), 0, 1, 0).is_err());
    let mu = EmpiricalMeasure::scalar(&[0.0]).unwrap();
    let sf = SmoothedFunctional::new(BaseFunctional::registry("position", 2).unwrap(), 2, 2, 0).unwrap();
    assert!(smooth_eval(&sf, &[0.0], &mu).is_err());
}

#[test]
fn convexity_probe_requires_a_declared_convex_lift() {
    let base = BaseFunctional::new("concave", 1, "-(x[0]^2)", None, false).unwrap();
    let sf = SmoothedFunctional::new(base, 2, 10, 0).unwrap();
    let seg = Segment {
        lambda: 0.5,
        x: vec![0.0],
        big_x: VectorTuple::scalar(&[0.0]).unwrap(),
        y: vec![1.0],
        big_y: VectorTuple::scalar(&[1.0]).unwrap(),
    };
    assert!(convexity_preservation_probe(&sf, std::slice::from_ref(&seg)).is_err());

    let sf = SmoothedFunctional::new(BaseFunctional::registry("second-moment", 1).unwrap(), 4, 200, 0).unwrap();
    let report = convexity_preservation_probe(&sf, &[seg]).unwrap();
    assert!(report.pass, "{report:?}");
}
