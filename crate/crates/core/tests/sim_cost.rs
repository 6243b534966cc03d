use mfc_core::cost::{tuple_hash, write_experiment_row, EXPERIMENT_HEADER};
use mfc_core::sim::{simulate_lifted_atoms, simulate_particles};
use mfc_core::{cost_finite, cost_lifted, policy_compare, ControlPolicy, LiftedPolicy, ModelSpec, SimConfig, VectorTuple};
use proptest::prelude::*;

fn model(b: &str, sigma: &str, l1: &str, ut: &str) -> ModelSpec {
    ModelSpec::new("test", 1, 1, &[b], &[&[sigma]], l1, 1.0, ut).unwrap()
}

fn within(est: f64, se: f64, target: f64, z: f64) -> bool {
    (est - target).abs() <= z * se.max(1e-15)
}

#[test]
fn particles_share_one_increment_sequence() {
    let m = model("0", "1", "0", "m2/2");
    let cfg = SimConfig::new(0.0, 1.0, 50, 20, 3).unwrap();
    let x0 = VectorTuple::scalar(&[-1.0, 0.0, 2.5]).unwrap();
    let bundle = simulate_particles(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
    for p in 0..cfg.n_paths {
        for k in 0..cfg.steps {
            let dw = bundle.increment(p, k)[0];
            let (now, next) = (bundle.state(p, k), bundle.state(p, k + 1));
            for i in 0..3 {
                assert!((next[i] - now[i] - dw).abs() <= 1e-14, "path {p} step {k} particle {i}");
            }
        }
        let end = bundle.state(p, cfg.steps);
        assert!((end[2] - end[0] - 3.5).abs() <= 1e-12);
    }
}

#[test]
fn zero_drift_is_a_martingale() {
    let m = model("0", "1+0.5*tanh(x[0])", "0", "m2/2");
    let cfg = SimConfig::new(0.0, 1.0, 100, 20_000, 8).unwrap();
    let x0 = VectorTuple::scalar(&[0.3, -0.7, 1.1]).unwrap();
    let bundle = simulate_particles(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
    for i in 0..3 {
        let ends: Vec<f64> = (0..cfg.n_paths).map(|p| bundle.state(p, cfg.steps)[i]).collect();
        let est = mfc_core::Estimate::from_samples(&ends);
        assert!(within(est.mean, est.std_error, x0.as_slice()[i], 4.0), "{i}: {est:?}");
    }
}

#[test]
fn lift_reproduces_particles_bit_for_bit() {
    let m = ModelSpec::registry("tanh-interaction").unwrap();
    let cfg = SimConfig::new(0.2, 1.0, 40, 64, 17).unwrap();
    let x0 = VectorTuple::scalar(&[0.5, -1.0, 2.0, 0.0]).unwrap();
    let schedule: Vec<Vec<f64>> = (0..cfg.steps).map(|k| vec![0.01 * k as f64, -0.2, 0.3, 0.0]).collect();
    let policy = ControlPolicy::open_loop(schedule);
    let a = simulate_particles(&m, &cfg, &x0, &policy).unwrap();
    let b = simulate_lifted_atoms(&m, &cfg, &x0, &LiftedPolicy::lift(policy.clone())).unwrap();
    assert_eq!(a.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let finite = cost_finite(&m, &cfg, &x0, &policy).unwrap();
    let lifted = cost_lifted(&m, &cfg, &x0, &LiftedPolicy::lift(policy)).unwrap();
    assert_eq!(finite.mean.to_bits(), lifted.mean.to_bits());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let m = ModelSpec::registry("LQ-mean-reverting").unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 30, 257, 99).unwrap();
    let x0 = VectorTuple::scalar(&[1.0, -0.5]).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let bundle = simulate_particles(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
            let cost = cost_finite(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
            (bundle.states, cost.mean, cost.std_error)
        })
    };
    let (s1, m1, e1) = run(1);
    let (s4, m4, e4) = run(4);
    assert!(s1.iter().zip(&s4).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!((m1.to_bits(), e1.to_bits()), (m4.to_bits(), e4.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_particles_permutes_paths(atoms in prop::collection::vec(-2.0f64..2.0, 2..5), rot in 1usize..5, seed in any::<u64>()) {
        let m = ModelSpec::registry("tanh-interaction").unwrap();
        let cfg = SimConfig::new(0.0, 0.5, 10, 4, seed).unwrap();
        let n = atoms.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let x0 = VectorTuple::scalar(&atoms).unwrap();
        let a = simulate_particles(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
        let b = simulate_particles(&m, &cfg, &x0.permuted(&perm), &ControlPolicy::Zero).unwrap();
        for p in 0..cfg.n_paths {
            for k in 0..=cfg.steps {
                let expected = VectorTuple::scalar(a.state(p, k)).unwrap().permuted(&perm);
                for (u, v) in b.state(p, k).iter().zip(expected.as_slice()) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn no_control_beats_the_value() {
    // LQ-decoupled with n = 1, x = 1: V = x²/4 + ln(2)/2.
    let m = ModelSpec::registry("LQ-decoupled").unwrap();
    let value = 0.25 + 0.5 * std::f64::consts::LN_2;
    let cfg = SimConfig::new(0.0, 1.0, 50, 20_000, 5).unwrap();
    let x0 = VectorTuple::scalar(&[1.0]).unwrap();
    for c in [-0.5, 0.0, 0.25, 0.5, 1.0] {
        let policy = ControlPolicy::open_loop(vec![vec![c]; cfg.steps]);
        let est = cost_finite(&m, &cfg, &x0, &policy).unwrap();
        // Constant control: X_T ~ N(1 - c, 1), so J = ((1 - c)² + 1)/2 + c²/2 exactly.
        let exact = ((1.0 - c) * (1.0 - c) + 1.0) / 2.0 + c * c / 2.0;
        assert!(within(est.mean, est.std_error, exact, 4.0), "c = {c}: {est:?} vs {exact}");
        assert!(est.mean + 4.0 * est.std_error >= value);
    }
}

#[test]
fn left_endpoint_quadrature_is_first_order() {
    // ẋ = -x, l_1 = x²: ∫₀¹ e^{-2s} ds.
    let m = model("-x[0]", "0", "x[0]^2", "0");
    let x0 = VectorTuple::scalar(&[1.0]).unwrap();
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let errors: Vec<f64> = [16, 32, 64, 128]
        .iter()
        .map(|&steps| {
            let cfg = SimConfig::new(0.0, 1.0, steps, 1, 0).unwrap();
            let est = cost_finite(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
            (est.mean - exact).abs()
        })
        .collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.8..2.2).contains(&ratio), "{errors:?}");
    }
}

#[test]
fn comparison_ranks_and_pairs() {
    let m = ModelSpec::registry("LQ-decoupled").unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 20, 4000, 12).unwrap();
    let x0 = VectorTuple::scalar(&[1.0]).unwrap();
    let policies: Vec<(String, ControlPolicy)> = [("zero", 0.0), ("half", 0.5), ("big", 2.0)]
        .iter()
        .map(|(id, c)| (id.to_string(), ControlPolicy::open_loop(vec![vec![*c]; cfg.steps])))
        .collect();
    let cmp = policy_compare(&m, &cfg, &x0, &policies).unwrap();
    let order: Vec<&str> = cmp.ranked.iter().map(|r| r.policy_id.as_str()).collect();
    assert_eq!(order, ["half", "zero", "big"]);
    assert_eq!(cmp.ranked[0].excess_over_best.mean, 0.0);
    let ab = cmp.paired_difference("zero", "half").unwrap();
    let ba = cmp.paired_difference("half", "zero").unwrap();
    assert_eq!(ab.mean, -ba.mean);
    // J(0) - J(1/2) = 1 - 0.75 with common noise.
    assert!(within(ab.mean, ab.std_error, 0.25, 4.0), "{ab:?}");
    assert!(policy_compare(&m, &cfg, &x0, &policies[..1]).is_err());
}

#[test]
fn exploding_paths_are_errors() {
    let m = model("x[0]^3", "0", "0", "m2");
    let cfg = SimConfig::new(0.0, 1.0, 100, 2, 0).unwrap();
    let x0 = VectorTuple::scalar(&[10.0]).unwrap();
    assert!(cost_finite(&m, &cfg, &x0, &ControlPolicy::Zero).is_err());
}

#[test]
fn experiment_rows_match_header() {
    let m = ModelSpec::registry("LQ-decoupled").unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 10, 100, 1).unwrap();
    let x0 = VectorTuple::scalar(&[1.0, 2.0]).unwrap();
    let est = cost_finite(&m, &cfg, &x0, &ControlPolicy::Zero).unwrap();
    let mut out = Vec::new();
    write_experiment_row(&mut out, &m, &cfg, &x0, "zero", &est).unwrap();
    let row = String::from_utf8(out).unwrap();
    let fields: Vec<&str> = row.trim_end().split(',').collect();
    assert_eq!(fields.len(), EXPERIMENT_HEADER.split(',').count());
    assert_eq!(fields[0], "LQ-decoupled");
    assert_eq!(fields[3], tuple_hash(&x0));
    assert_ne!(tuple_hash(&x0), tuple_hash(&x0.permuted(&[1, 0])));
}
