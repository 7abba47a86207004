mod common;

use chap_core::analysis::mann_whitney::{
    exact_p, mann_whitney, normal_p, u_statistic, Classification, Shift,
};
use chap_core::analysis::{
    judge, AnalysisError, DirectionOfHarm, MetricClass, MetricInput, Overall,
};
use common::oracles::{pair_u, permutation_p};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(rng: &mut ChaCha8Rng, n: usize, hi: i32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..hi) as f64).collect()
}

#[test]
fn exact_p_matches_permutation_oracle_for_all_small_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n1 in 1..=8 {
        for n2 in 1..=8 {
            // narrow ranges force heavy ties, wide ones almost none
            for hi in [3, 6, 40] {
                let b = sample(&mut rng, n1, hi);
                let c = sample(&mut rng, n2, hi);
                let got = exact_p(&b, &c).unwrap();
                let want = permutation_p(&b, &c);
                assert!(
                    (got - want).abs() <= 1e-12,
                    "n1={n1} n2={n2} {b:?} {c:?}: {got} vs {want}"
                );
                assert_eq!(u_statistic(&b, &c).unwrap(), pair_u(&b, &c));
            }
        }
    }
}

#[test]
fn frozen_reference_values() {
    let b = [1.0, 2.0, 3.0, 4.0, 5.0];
    let c = [6.0, 7.0, 8.0, 9.0, 10.0];
    let r = mann_whitney(&b, &c, 0.01).unwrap();
    assert_eq!(r.u, 0.0);
    assert!((r.p_value - 2.0 / 252.0).abs() < 1e-15);
    assert_eq!(r.classification, Classification::High);
    assert!(r.exact);

    // large-sample values computed once with an independent statistics package
    let b: Vec<f64> = (0..30).map(f64::from).collect();
    let c: Vec<f64> = (0..30).map(|x| f64::from(x) + 8.0).collect();
    let r = mann_whitney(&b, &c, 0.01).unwrap();
    assert!(!r.exact);
    assert_eq!(r.u, 242.0);
    assert!((r.p_value - 0.0021498780622138474).abs() < 1e-12);
    assert_eq!(r.classification, Classification::High);

    let b: Vec<f64> = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0].repeat(3);
    let c: Vec<f64> = [2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0, 6.0, 6.0, 7.0].repeat(3);
    let u = u_statistic(&b, &c).unwrap();
    assert_eq!(u, 225.0);
    assert!((normal_p(&b, &c).unwrap() - 0.0007552281133902476).abs() < 1e-12);
}

#[test]
fn tiny_samples_are_inconclusive() {
    let r = mann_whitney(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0], 0.01).unwrap();
    assert_eq!(r.classification, Classification::Inconclusive);
    assert_eq!(r.shift, Shift::High);
    assert!((r.p_value - 0.1).abs() < 1e-12);
}

#[test]
fn input_errors() {
    assert_eq!(
        mann_whitney(&[], &[1.0], 0.01),
        Err(AnalysisError::EmptySample)
    );
    assert_eq!(
        mann_whitney(&[f64::NAN], &[1.0], 0.01),
        Err(AnalysisError::NotANumber)
    );
    assert!(matches!(
        mann_whitney(&[1.0], &[1.0], 0.0),
        Err(AnalysisError::Alpha(_))
    ));
}

#[test]
fn all_tied_samples_pass() {
    let a = vec![4.0; 40];
    let r = mann_whitney(&a, &a, 0.01).unwrap();
    assert_eq!(r.p_value, 1.0);
    assert_eq!(r.classification, Classification::Pass);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rank_invariance(
        b in prop::collection::vec(0i32..50, 1..30),
        c in prop::collection::vec(0i32..50, 1..30),
        scale in 0.1f64..10.0,
        offset in -100.0f64..100.0,
    ) {
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let c: Vec<f64> = c.into_iter().map(f64::from).collect();
        let f = |v: &f64| (v * scale + offset).exp2();
        let tb: Vec<f64> = b.iter().map(f).collect();
        let tc: Vec<f64> = c.iter().map(f).collect();
        let r = mann_whitney(&b, &c, 0.05).unwrap();
        let t = mann_whitney(&tb, &tc, 0.05).unwrap();
        prop_assert_eq!(r.u, t.u);
        prop_assert_eq!(r.p_value, t.p_value);
        prop_assert_eq!(r.classification, t.classification);
    }

    #[test]
    fn symmetry(
        b in prop::collection::vec(0i32..50, 1..30),
        c in prop::collection::vec(0i32..50, 1..30),
    ) {
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let c: Vec<f64> = c.into_iter().map(f64::from).collect();
        let r = mann_whitney(&b, &c, 0.05).unwrap();
        let s = mann_whitney(&c, &b, 0.05).unwrap();
        prop_assert!((r.p_value - s.p_value).abs() < 1e-12);
        prop_assert_eq!(r.u + s.u, (b.len() * c.len()) as f64);
        let flipped = match r.shift { Shift::High => Shift::Low, Shift::Low => Shift::High, Shift::None => Shift::None };
        prop_assert_eq!(s.shift, flipped);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }
}

fn metric(
    name: &str,
    class: MetricClass,
    dir: DirectionOfHarm,
    b: Option<Vec<f64>>,
    c: Option<Vec<f64>>,
) -> MetricInput {
    MetricInput {
        name: name.into(),
        class,
        direction_of_harm: dir,
        baseline: b,
        canary: c,
    }
}

fn steady(v: f64) -> Vec<f64> {
    (0..60).map(|i| v + (i % 7) as f64).collect()
}

#[test]
fn judge_fails_on_harmful_kpi_shift() {
    let v = judge(
        &[metric(
            "sps",
            MetricClass::Kpi,
            DirectionOfHarm::LowIsBad,
            Some(steady(100.0)),
            Some(steady(50.0)),
        )],
        0.01,
    );
    assert_eq!(v.overall, Overall::Fail);
    assert_eq!(v.score, 0.0);
    assert_eq!(
        v.comparison("sps").unwrap().classification,
        Classification::Low
    );
}

#[test]
fn judge_ignores_harmless_kpi_shift() {
    let v = judge(
        &[metric(
            "sps",
            MetricClass::Kpi,
            DirectionOfHarm::LowIsBad,
            Some(steady(100.0)),
            Some(steady(150.0)),
        )],
        0.01,
    );
    assert_eq!(v.overall, Overall::Pass);
}

#[test]
fn judge_missing_kpi_is_inconclusive() {
    let v = judge(
        &[
            metric(
                "sps",
                MetricClass::Kpi,
                DirectionOfHarm::LowIsBad,
                Some(steady(100.0)),
                None,
            ),
            metric(
                "cpu",
                MetricClass::Health,
                DirectionOfHarm::HighIsBad,
                Some(steady(1.0)),
                Some(steady(1.0)),
            ),
        ],
        0.01,
    );
    assert_eq!(v.overall, Overall::Inconclusive);
    assert_eq!(v.score, 50.0);
    assert!(judge(&[], 0.01).overall == Overall::Inconclusive);
}

#[test]
fn judge_health_regressions_only_warn() {
    let v = judge(
        &[
            metric(
                "sps",
                MetricClass::Kpi,
                DirectionOfHarm::LowIsBad,
                Some(steady(100.0)),
                Some(steady(100.0)),
            ),
            metric(
                "latency",
                MetricClass::Health,
                DirectionOfHarm::HighIsBad,
                Some(steady(10.0)),
                Some(steady(90.0)),
            ),
        ],
        0.01,
    );
    assert_eq!(v.overall, Overall::Pass);
    assert_eq!(v.warnings, vec!["latency".to_string()]);
    assert_eq!(v.score, 50.0);
}
