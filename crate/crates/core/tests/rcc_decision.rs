mod common;

use momineq::qp::{solve_projection, QpProblem, QpSolution};
use momineq::rcc::{active_rank, rcc_decide, rcc_test, slackness_z};
use momineq::stats::{chi2_quantile, std_normal_cdf, SpdMatrix};
use momineq::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn identity(d: usize) -> SpdMatrix {
    SpdMatrix::new(DMatrix::identity(d, d)).unwrap()
}

#[test]
fn rank_examples() {
    let i2 = DMatrix::identity(2, 2);
    assert_eq!(active_rank(&i2, &[]), 0);
    assert_eq!(active_rank(&i2, &[0, 1]), 2);
    assert_eq!(
        active_rank(
            &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            &[0, 1]
        ),
        1
    );
}

#[test]
fn slackness_examples() {
    let a = DMatrix::identity(2, 2);
    let rho = DVector::from_vec(vec![0.0, 1.0]);
    let k = DVector::zeros(2);
    assert!((slackness_z(&a, &rho, &k, &identity(2), 100, 0).unwrap() - 10.0).abs() < 1e-12);

    let single = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let z = slackness_z(&single, &DVector::zeros(1), &k, &identity(2), 100, 0).unwrap();
    assert_eq!(z, f64::INFINITY);

    let prop = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
    let z = slackness_z(
        &prop,
        &DVector::from_vec(vec![0.0, 5.0]),
        &k,
        &identity(2),
        100,
        0,
    )
    .unwrap();
    assert_eq!(z, f64::INFINITY);
}

#[test]
fn slackness_errors() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
    let k = DVector::zeros(2);
    let rho = DVector::from_vec(vec![0.0, 1.0]);
    assert!(matches!(
        slackness_z(&a, &rho, &k, &identity(2), 10, 0),
        Err(Error::ZeroAnchorRow(0))
    ));
    assert!(matches!(
        slackness_z(&a, &rho, &k, &identity(2), 10, 1),
        Err(Error::AnchorNotActive(1))
    ));
}

#[test]
fn interior_point_accepts_with_zero_critical() {
    let p = QpProblem::new(
        DVector::from_vec(vec![-1.0]),
        identity(1),
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        100,
    )
    .unwrap();
    let (_, r) = rcc_test(&p, 0.05).unwrap();
    assert_eq!(r.r_hat, 0);
    assert_eq!(r.critical, 0.0);
    assert!(!r.reject);
    assert_eq!(r.beta, 0.05);
}

#[test]
fn refined_level_on_a_half_line() {
    let p = QpProblem::new(
        DVector::from_vec(vec![0.5]),
        identity(1),
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        100,
    )
    .unwrap();
    let (_, r) = rcc_test(&p, 0.05).unwrap();
    assert_eq!(r.r_hat, 1);
    assert!(r.z_infinite);
    assert!((r.beta - 0.10).abs() < 1e-15);
    assert!((r.critical - 2.705543454).abs() < 1e-8);
    assert!((r.statistic - 25.0).abs() < 1e-10);
    assert!(r.reject);
}

#[test]
fn rank_two_keeps_alpha() {
    let p = QpProblem::new(
        DVector::from_vec(vec![1.0, 1.0]),
        identity(2),
        DMatrix::identity(2, 2),
        DVector::zeros(2),
        1,
    )
    .unwrap();
    let (_, r) = rcc_test(&p, 0.05).unwrap();
    assert_eq!(r.r_hat, 2);
    assert_eq!(r.beta, 0.05);
    assert!(r.z.is_none());
    assert!((r.critical - chi2_quantile(2, 0.95).unwrap()).abs() < 1e-12);
}

#[test]
fn alpha_outside_range_is_rejected() {
    let p = QpProblem::new(
        DVector::from_vec(vec![0.5]),
        identity(1),
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        10,
    )
    .unwrap();
    for alpha in [0.0, -0.1, 0.51, 1.0] {
        assert!(matches!(rcc_test(&p, alpha), Err(Error::InvalidAlpha(_))));
    }
    // alpha = 1/2 with no inactive rows gives level 1 and a zero critical value
    let (_, r) = rcc_test(&p, 0.5).unwrap();
    assert_eq!(r.beta, 1.0);
    assert_eq!(r.critical, 0.0);
}

/// beta as a function of the standardised slack of one inactive row.
fn beta_at_slack(slack: f64, n: usize) -> f64 {
    let a = DMatrix::identity(2, 2);
    let p = QpProblem::new(
        DVector::from_vec(vec![1.0, -slack]),
        identity(2),
        a,
        DVector::zeros(2),
        n,
    )
    .unwrap();
    rcc_test(&p, 0.05).unwrap().1.beta
}

#[test]
fn beta_is_monotone_in_z() {
    let mut prev = 0.0;
    for i in 0..40 {
        let slack = i as f64 * 0.01;
        let b = beta_at_slack(slack, 100);
        let z = 10.0 * slack;
        assert!((b - 2.0 * 0.05 * std_normal_cdf(z)).abs() < 1e-12);
        assert!(b >= prev);
        assert!(b <= 0.1);
        prev = b;
    }
    assert!((beta_at_slack(0.0, 100) - 0.05).abs() < 1e-12);
}

fn decide(p: &QpProblem, s: &QpSolution, alpha: f64) -> momineq::rcc::RccResult {
    rcc_decide(s, &p.a, &p.rho, &p.sigma, p.n, alpha).unwrap()
}

#[test]
fn anchor_choice_does_not_matter_at_rank_one() {
    // rows 0 and 1 are proportional and both active; row 2 is slack
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 0.0, 1.0]);
    let rho = DVector::from_vec(vec![0.0, 0.0, 1.0]);
    let sigma = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
    let p = QpProblem::new(
        DVector::from_vec(vec![1.0, 0.0]),
        sigma.clone(),
        a.clone(),
        rho.clone(),
        50,
    )
    .unwrap();
    let s = solve_projection(&p).unwrap();
    assert_eq!(s.active_rows, vec![0, 1]);
    let z0 = slackness_z(&a, &rho, &s.kappa_hat, &sigma, 50, 0).unwrap();
    let z1 = slackness_z(&a, &rho, &s.kappa_hat, &sigma, 50, 1).unwrap();
    assert!((z0 - z1).abs() <= 1e-9 * (1.0 + z0.abs()));
    assert_eq!(decide(&p, &s, 0.05).r_hat, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn decision_invariant_under_row_rescaling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(1..=4);
        let rows = rng.random_range(1..=6);
        let p = common::random_qp(&mut rng, dim, rows);
        let scale = DVector::from_fn(rows, |_, _| rng.random_range(0.1..10.0));
        let mut a2 = p.a.clone();
        let mut rho2 = p.rho.clone();
        for i in 0..rows {
            a2.row_mut(i).scale_mut(scale[i]);
            rho2[i] *= scale[i];
        }
        let q = QpProblem::new(p.pbar.clone(), p.sigma.clone(), a2, rho2, p.n).unwrap();
        let (s1, r1) = rcc_test(&p, 0.05).unwrap();
        let (s2, r2) = rcc_test(&q, 0.05).unwrap();
        prop_assert!((r1.statistic - r2.statistic).abs() <= 1e-9 * (1.0 + r1.statistic));
        prop_assert_eq!(r1.r_hat, r2.r_hat);
        prop_assert_eq!(&s1.active_rows, &s2.active_rows);
        prop_assert_eq!(r1.reject, r2.reject);
        if let (Some(z1), Some(z2)) = (r1.z, r2.z) {
            prop_assert!(z1 == z2 || (z1 - z2).abs() <= 1e-8 * (1.0 + z1.abs()));
        }
    }

    #[test]
    fn reject_monotone_in_statistic(seed in any::<u64>(), bump in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(1..=4);
        let rows = rng.random_range(1..=6);
        let p = common::random_qp(&mut rng, dim, rows);
        let mut s = solve_projection(&p).unwrap();
        let r = decide(&p, &s, 0.05);
        if r.reject {
            s.statistic += bump;
            prop_assert!(decide(&p, &s, 0.05).reject);
        }
        prop_assert_eq!(r.reject, r.statistic > r.critical);
        prop_assert!(r.beta <= 0.1 + 1e-15);
        if r.r_hat != 1 {
            prop_assert_eq!(r.beta, 0.05);
        }
    }
}
