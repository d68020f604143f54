mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vismask::evaluation::{correlate, krcc, plcc_fitted, srcc};
use vismask::Orientation;

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

#[test]
fn rank_correlations_match_brute_force() {
    let mut r = rng(11);
    for case in 0..200 {
        let n = r.random_range(3..=10);
        // every third case is heavily tied
        let (x, y) = if case % 3 == 0 {
            (tied_column(&mut r, n), tied_column(&mut r, n))
        } else {
            let x: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            (x, y)
        };
        let s = srcc(&x, &y).unwrap();
        let k = krcc(&x, &y).unwrap();
        assert!(close(s, srcc_oracle(&x, &y), 1e-10), "srcc case {case}: {s:?} vs {:?}", srcc_oracle(&x, &y));
        assert!(close(k, krcc_oracle(&x, &y), 1e-10), "krcc case {case}: {k:?} vs {:?}", krcc_oracle(&x, &y));
    }
}

#[test]
fn fitted_plcc_matches_nelder_mead_oracle() {
    let mut r = rng(12);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = r.random_range(8..=10);
        let (x, y) = iqa_like(&mut r, n);
        let got = plcc_fitted(&x, &y).unwrap();
        let (want, fallback) = plcc_oracle(&x, &y);
        assert_eq!(got.linear_fallback, fallback, "case {case}: fallback disagrees");
        let d = (got.plcc.unwrap() - want.unwrap()).abs();
        worst = worst.max(d);
        assert!(d <= 1e-6, "case {case}: plcc {:?} vs oracle {want:?}", got.plcc);
    }
    eprintln!("worst plcc deviation {worst:e}");
}

#[test]
fn too_few_samples_are_rejected() {
    assert!(srcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(krcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    let x: Vec<f64> = (0..7).map(f64::from).collect();
    assert!(plcc_fitted(&x, &x).is_err());
    assert!(srcc(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
}

#[test]
fn constant_columns_are_degenerate() {
    let x = [1.0, 1.0, 1.0, 1.0];
    let y = [0.1, 0.4, 0.2, 0.9];
    assert_eq!(srcc(&x, &y).unwrap(), None);
    assert_eq!(krcc(&x, &y).unwrap(), None);
}

fn column(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![(-1000i32..1000).prop_map(|v| v as f64 / 10.0), Just(0.0)], n)
}

fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| (column(n), column(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rank_correlations_ignore_monotone_transforms((x, y) in paired(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + a * v + b).collect();
        prop_assert!(close(srcc(&tx, &y).unwrap(), srcc(&x, &y).unwrap(), 1e-10));
        prop_assert!(close(krcc(&tx, &y).unwrap(), krcc(&x, &y).unwrap(), 1e-10));
    }

    #[test]
    fn rank_correlations_are_symmetric_and_bounded((x, y) in paired()) {
        let s = srcc(&x, &y).unwrap();
        let k = krcc(&x, &y).unwrap();
        prop_assert!(close(s, srcc(&y, &x).unwrap(), 1e-12));
        prop_assert!(close(k, krcc(&y, &x).unwrap(), 1e-12));
        for v in [s, k].into_iter().flatten() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn reversing_one_column_flips_the_sign((x, y) in paired()) {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let s = srcc(&x, &y).unwrap().map(|v| -v);
        let k = krcc(&x, &y).unwrap().map(|v| -v);
        prop_assert!(close(srcc(&neg, &y).unwrap(), s, 1e-12));
        prop_assert!(close(krcc(&neg, &y).unwrap(), k, 1e-12));
    }

    #[test]
    fn orientation_makes_good_metrics_positive(n in 8usize..30, seed in 0u64..1000) {
        // a perfect lower-is-better metric: score falls as quality rises
        let mut r = rng(seed);
        let mos: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 + r.random_range(0.0..1e-3)).collect();
        let err: Vec<f64> = mos.iter().map(|m| (1.0 - m).powi(2)).collect();
        let rep = correlate("d", "m", Orientation::LowerBetter, &err, &mos).unwrap();
        prop_assert!((rep.srcc - 1.0).abs() < 1e-12);
        prop_assert!((rep.krcc - 1.0).abs() < 1e-12);
        prop_assert!(rep.plcc > 0.99);
        let rep = correlate("d", "m", Orientation::HigherBetter, &err, &mos).unwrap();
        prop_assert!((rep.srcc + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fitted_plcc_ignores_affine_score_scale(seed in 0u64..500, a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let mut r = rng(seed);
        let (x, y) = iqa_like(&mut r, 12);
        let tx: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let p = plcc_fitted(&x, &y).unwrap().plcc.unwrap();
        let q = plcc_fitted(&tx, &y).unwrap().plcc.unwrap();
        prop_assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        prop_assert!(p <= 1.0 + 1e-12);
    }
}
