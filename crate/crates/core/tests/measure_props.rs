use mfc_core::measure::{brute_force_wasserstein, wasserstein_r, EmpiricalMeasure, VectorTuple};
use proptest::prelude::*;

fn measure(d: usize, n: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| EmpiricalMeasure::new(d, v).unwrap())
}

/// Two or three measures with equal atom count and dimension.
fn family(k: usize, max_n: usize) -> impl Strategy<Value = Vec<EmpiricalMeasure>> {
    (1usize..=3, 1usize..=max_n).prop_flat_map(move |(d, n)| prop::collection::vec(measure(d, n), k))
}

fn exponent() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(1.5), Just(2.0), 1.0f64..=2.0]
}

fn shuffle(mu: &EmpiricalMeasure, seed: u64) -> EmpiricalMeasure {
    let n = mu.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut s = seed;
    for i in (1..n).rev() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        perm.swap(i, (s >> 33) as usize % (i + 1));
    }
    mu.to_tuple().permuted(&perm).to_measure()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn triangle_inequality(ms in family(3, 6), r in exponent()) {
        let (a, b, c) = (&ms[0], &ms[1], &ms[2]);
        let lhs = wasserstein_r(a, c, r).unwrap();
        let rhs = wasserstein_r(a, b, r).unwrap() + wasserstein_r(b, c, r).unwrap();
        prop_assert!(lhs <= rhs + 1e-12, "{lhs} > {rhs}");
    }

    #[test]
    fn shuffles_do_not_matter(ms in family(2, 6), r in exponent(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let base = wasserstein_r(&ms[0], &ms[1], r).unwrap();
        let shuffled = wasserstein_r(&shuffle(&ms[0], s1), &shuffle(&ms[1], s2), r).unwrap();
        prop_assert!((base - shuffled).abs() <= 1e-12);
    }

    #[test]
    fn monotone_in_exponent(ms in family(2, 6), r in 1.0f64..=2.0, s in 1.0f64..=2.0) {
        let (r, s) = if r <= s { (r, s) } else { (s, r) };
        let dr = wasserstein_r(&ms[0], &ms[1], r).unwrap();
        let ds = wasserstein_r(&ms[0], &ms[1], s).unwrap();
        prop_assert!(dr <= ds + 1e-12, "d_{r} = {dr} > d_{s} = {ds}");
    }

    #[test]
    fn agrees_with_brute_force(ms in family(2, 6), r in exponent()) {
        let fast = wasserstein_r(&ms[0], &ms[1], r).unwrap();
        let slow = brute_force_wasserstein(&ms[0], &ms[1], r).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-12);
    }

    #[test]
    fn rnorm_is_moment_root(ms in family(1, 8), r in exponent()) {
        let x = ms[0].to_tuple();
        let lhs = x.rnorm(r).unwrap().powf(r);
        let rhs = ms[0].moment_r(r).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-14 * rhs.max(1.0));
    }

    #[test]
    fn identity_of_indiscernibles(ms in family(1, 6), r in exponent(), s in any::<u64>()) {
        prop_assert_eq!(wasserstein_r(&ms[0], &shuffle(&ms[0], s), r).unwrap(), 0.0);
        prop_assert_eq!(&ms[0], &shuffle(&ms[0], s));
    }

    #[test]
    fn duplication_preserves_distance(ms in family(2, 4), r in exponent(), m in 1usize..=3) {
        let dup = |mu: &EmpiricalMeasure| mu.to_tuple().duplicate_atoms(m).unwrap().to_measure();
        let base = wasserstein_r(&ms[0], &ms[1], r).unwrap();
        let duplicated = wasserstein_r(&dup(&ms[0]), &dup(&ms[1]), r).unwrap();
        prop_assert!((base - duplicated).abs() <= 1e-12);
    }

    #[test]
    fn tuple_distance_bounds_transport(ms in family(2, 6), r in exponent()) {
        let (x, y) = (ms[0].to_tuple(), ms[1].to_tuple());
        prop_assert!(wasserstein_r(&ms[0], &ms[1], r).unwrap() <= x.rdistance(&y, r).unwrap() + 1e-12);
    }

    #[test]
    fn quantile_matches_assignment_in_one_dimension(a in prop::collection::vec(-5.0f64..5.0, 1..7), b in prop::collection::vec(-5.0f64..5.0, 1..7), r in exponent()) {
        // Unequal counts go through the quantile coupling; equal-count refinement is an assignment.
        let (mu, nu) = (EmpiricalMeasure::scalar(&a).unwrap(), EmpiricalMeasure::scalar(&b).unwrap());
        let direct = wasserstein_r(&mu, &nu, r).unwrap();
        let (n, m) = (a.len(), b.len());
        let mu_rep = mu.to_tuple().duplicate_atoms(m).unwrap().to_measure();
        let nu_rep = nu.to_tuple().duplicate_atoms(n).unwrap().to_measure();
        let refined = wasserstein_r(&mu_rep, &nu_rep, r).unwrap();
        prop_assert!((direct - refined).abs() <= 1e-10, "{direct} vs {refined}");
    }
}

#[test]
fn unequal_counts_rejected_above_one_dimension() {
    let mu = EmpiricalMeasure::from_points(&[vec![0.0, 0.0]]).unwrap();
    let nu = EmpiricalMeasure::from_points(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
    assert!(wasserstein_r(&mu, &nu, 2.0).is_err());
    assert!(wasserstein_r(&mu, &mu, 0.5).is_err());
}

#[test]
fn tuple_distance_examples() {
    let x = VectorTuple::scalar(&[0.0, 0.0]).unwrap();
    let y = VectorTuple::scalar(&[3.0, 4.0]).unwrap();
    assert!((x.rdistance(&y, 2.0).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(x.rdistance(&y, 1.0).unwrap(), 3.5);
}
