mod common;

use std::sync::Arc;

use proptest::prelude::*;
use vhj_core::problem::*;
use vhj_core::Error;

fn quartic() -> ProblemSpec {
    ProblemSpec {
        name: "quartic".into(),
        hamiltonian: Arc::new(|_: &[f64], _: f64, z: &[f64]| z[0].powi(4) / 4.0),
        growth: GrowthProfile { p: 4.0, q: 4.0, m_f: 1.0, big_m_f: 1.0, ..common::loose_growth() },
        ..common::frozen(1)
    }
}

fn kpz_numeric(lambda: f64, d: usize) -> ProblemSpec {
    ProblemSpec { conjugate_closed_form: None, ..kpz(lambda, d, 1.0) }
}

#[test]
fn kpz_validates() {
    let rep = validate(&kpz(0.5, 1, 1.0), &ValidateConfig::default()).unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
    let rep = validate(&kpz(0.5, 3, 1.0), &ValidateConfig::default()).unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
}

#[test]
fn builtins_validate() {
    for name in ["kpz", "lq", "power_utility", "exp_utility"] {
        let spec = by_name(name).unwrap();
        let rep = validate(&spec, &ValidateConfig::default()).unwrap();
        assert!(rep.passed(), "{name}: {:?}", rep.failures().collect::<Vec<_>>());
    }
    assert!(by_name("nope").is_err());
}

#[test]
fn p_g_must_vanish_when_p_rho_is_one() {
    let g = GrowthProfile { p_rho: 1.0, p_g: 0.5, ..common::loose_growth() };
    let failed: Vec<String> = g.check_exponents().into_iter().filter(|f| !f.passed).map(|f| f.check).collect();
    assert_eq!(failed, vec!["p_g must be 0 when p_rho=1".to_string()]);
}

#[test]
fn q_f_boundary_is_strict() {
    let g = GrowthProfile { p_rho: 0.0, q: 2.0, q_f: 1.99, ..common::loose_growth() };
    assert!(g.check_exponents().iter().all(|f| f.passed));
    let g = GrowthProfile { q_f: 2.0, ..g };
    assert!(g.check_exponents().iter().any(|f| !f.passed && f.check.starts_with("q_F")));
    let spec = ProblemSpec { growth: GrowthProfile { q_f: 1.99, ..kpz(0.5, 1, 1.0).growth }, ..kpz(0.5, 1, 1.0) };
    assert!(validate(&spec, &ValidateConfig::default()).unwrap().passed());
}

#[test]
fn conjugate_exponents_are_finite() {
    let g = common::loose_growth();
    assert_eq!(g.p_conj(), 2.0);
    assert_eq!(g.q_conj(), 2.0);
}

#[test]
fn dimension_mismatch_is_structural() {
    let spec = ProblemSpec { drift: Arc::new(|_: &[f64]| vec![0.0, 0.0]), ..kpz(0.5, 1, 1.0) };
    match validate(&spec, &ValidateConfig::default()) {
        Err(Error::Structural(m)) => assert!(m.contains("drift")),
        other => panic!("expected structural error, got {other:?}"),
    }
}

#[test]
fn sampled_violation_reports_a_point() {
    // claims L_F = 0 while F depends on y
    let spec = ProblemSpec { growth: common::loose_growth(), ..common::scalar(0.0, 1.0, 1.0, 0.5, 2.0, |x| x.cos()) };
    let rep = validate(&spec, &ValidateConfig::default()).unwrap();
    let bad: Vec<_> = rep.failures().collect();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].check, "F lipschitz in y");
    assert!(bad[0].worst_point.is_some());
}

#[test]
fn kpz_conjugate_closed_and_numeric() {
    let cfg = ConjugateConfig::default();
    let closed = kpz(0.5, 2, 1.0);
    assert!((conjugate(&closed, &cfg, &[0.3, -1.0], &[1.0, 0.0], 2.0).unwrap() - 0.5).abs() < 1e-15);
    let numeric = kpz_numeric(0.5, 2);
    let v = conjugate(&numeric, &cfg, &[0.3, -1.0], &[1.0, 0.0], 2.0).unwrap();
    assert!((v - 0.5).abs() < 1e-8, "{v}");
}

#[test]
fn zero_hamiltonian_conjugate_at_zero() {
    let spec = ProblemSpec {
        hamiltonian: Arc::new(|_: &[f64], _: f64, _: &[f64]| 0.0),
        growth: GrowthProfile { m_f: 0.0, ..common::loose_growth() },
        ..common::frozen(1)
    };
    assert_eq!(conjugate(&spec, &ConjugateConfig::default(), &[0.0], &[0.0], 0.0).unwrap(), 0.0);
}

#[test]
fn quartic_conjugate() {
    let v = conjugate(&quartic(), &ConjugateConfig::default(), &[0.0], &[1.0], 0.0).unwrap();
    assert!((v - 0.75).abs() < 1e-8, "{v}");
}

#[test]
fn non_finite_hamiltonian_is_reported() {
    let spec = ProblemSpec { hamiltonian: Arc::new(|_: &[f64], _: f64, z: &[f64]| if z[0] > 1.0 { f64::NAN } else { z[0] * z[0] }), ..quartic() };
    assert!(matches!(numeric_conjugate(&spec, &ConjugateConfig::default(), &[0.0], &[0.0], 0.0), Err(Error::NonFinite { .. })));
}

#[test]
fn bad_conjugate_config() {
    let cfg = ConjugateConfig { grid_points: 2, ..ConjugateConfig::default() };
    assert!(cfg.check().is_err());
    let cfg = ConjugateConfig { tol: 0.0, ..ConjugateConfig::default() };
    assert!(numeric_conjugate(&quartic(), &cfg, &[0.0], &[1.0], 0.0).is_err());
}

#[test]
fn crosscheck_kpz() {
    let rep = conjugate_crosscheck(&kpz(0.5, 1, 1.0), &ConjugateConfig::default(), 100, 11).unwrap();
    assert_eq!(rep.reference, "closed_form");
    assert!(rep.max_discrepancy <= 1e-6, "{}", rep.max_discrepancy);
}

#[test]
fn crosscheck_linear_y_term() {
    let spec = common::scalar(0.0, 1.0, 1.0, 0.5, -0.7, |x| x.cos());
    assert_eq!(spec.growth.l_f, 0.7);
    conjugate_crosscheck(&spec, &ConjugateConfig::default(), 50, 3).unwrap();
    let wrong = ProblemSpec { growth: GrowthProfile { l_f: 0.5, ..spec.growth.clone() }, ..spec };
    match conjugate_crosscheck(&wrong, &ConjugateConfig::default(), 50, 3) {
        Err(Error::AssumptionViolation { check, sample, .. }) => {
            assert_eq!(check, "f lipschitz in y");
            assert_eq!(sample.len(), 4);
        }
        other => panic!("expected violation, got {other:?}"),
    }
}

#[test]
fn crosscheck_half_square_within_growth_bounds() {
    let spec = ProblemSpec { growth: GrowthProfile { m_f: 1.0, big_m_f: 1.0, ..common::loose_growth() }, ..common::scalar(0.0, 1.0, 1.0, 0.5, 0.0, |_| 0.0) };
    let rep = conjugate_crosscheck(&spec, &ConjugateConfig::default(), 100, 5).unwrap();
    assert!(rep.max_discrepancy < 1e-8);
    // without a closed form the reference is a denser grid
    let numeric = ProblemSpec { conjugate_closed_form: None, ..spec };
    let rep = conjugate_crosscheck(&numeric, &ConjugateConfig::default(), 20, 5).unwrap();
    assert_eq!(rep.reference, "refined_numeric");
    assert!(rep.max_discrepancy < 1e-8);
}

#[test]
fn custom_config_roundtrip() {
    let json = r#"{
        "name": "quad", "dim": 1, "horizon": 1.0,
        "drift": {"matrix": [[0.0]], "offset": [0.0]},
        "sigma": {"constant": [[1.0]]},
        "rho": {"constant": [[1.0]]},
        "hamiltonian": {"z_terms": [{"coef": 0.5, "power": 2.0}]},
        "terminal": {"terms": [{"coef": 1.0, "exponents": [2]}]},
        "growth": {"p_rho": 0.0, "p": 2.0, "q": 2.0, "p_f": 0.0, "q_f": 0.0, "p_g": 0.0, "q_g": 2.0,
                   "m_f": 1.0, "big_m_f": 1.0, "m_g": 0.0, "big_m_g": 1.0, "l_f": 0.0, "m_rho": 1.0, "l_coef": 0.0}
    }"#;
    let cfg: CustomConfig = serde_json::from_str(json).unwrap();
    let spec = cfg.build().unwrap();
    assert!(spec.conjugate_closed_form.is_some());
    assert!((spec.f(&[0.0], &[1.0], 0.0) - 0.5).abs() < 1e-12);
    assert_eq!((spec.terminal)(&[3.0]), 9.0);
    assert!(validate(&spec, &ValidateConfig::default()).unwrap().passed());
    let back: CustomConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

fn a_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
    (-3.0..3.0f64, -3.0..3.0f64, -2.0..2.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn numeric_conjugate_is_convex_in_a((a1, a2, y) in a_strategy()) {
        let spec = quartic();
        let cfg = ConjugateConfig::default();
        let f = |a: f64| numeric_conjugate(&spec, &cfg, &[0.0], &[a], y).unwrap();
        let mid = f(0.5 * (a1 + a2));
        prop_assert!(mid <= 0.5 * (f(a1) + f(a2)) + 1e-9);
    }

    #[test]
    fn duality_round_trip(z in -2.0..2.0f64, y in -1.0..1.0f64) {
        let spec = kpz(0.5, 1, 1.0);
        let back = reconstruct_hamiltonian(&spec, &[0.0], y, &[z], 6.0, 121);
        prop_assert!((back - 0.5 * z * z).abs() < 1e-8, "{} vs {}", back, 0.5 * z * z);
    }

    #[test]
    fn refinement_does_not_hurt((a, _, y) in a_strategy()) {
        let spec = ProblemSpec { conjugate_closed_form: None, ..quartic() };
        let exact = 0.75 * a.abs().powf(4.0 / 3.0);
        let coarse = ConjugateConfig { grid_points: 11, refine_iters: 0, ..ConjugateConfig::default() };
        let fine = ConjugateConfig { grid_points: 21, ..coarse.clone() };
        let e1 = (numeric_conjugate(&spec, &coarse, &[0.0], &[a], y).unwrap() - exact).abs();
        let e2 = (numeric_conjugate(&spec, &fine, &[0.0], &[a], y).unwrap() - exact).abs();
        prop_assert!(e2 <= e1 + 1e-10, "{} -> {}", e1, e2);
    }

    #[test]
    fn conjugate_lipschitz_in_y(a in -3.0..3.0f64, y1 in -2.0..2.0f64, y2 in -2.0..2.0f64) {
        let spec = common::scalar(0.0, 1.0, 1.0, 0.5, 0.3, |x| x.cos());
        let numeric = ProblemSpec { conjugate_closed_form: None, ..spec.clone() };
        let cfg = ConjugateConfig::default();
        let f1 = numeric_conjugate(&numeric, &cfg, &[0.0], &[a], y1).unwrap();
        let f2 = numeric_conjugate(&numeric, &cfg, &[0.0], &[a], y2).unwrap();
        prop_assert!((f1 - f2).abs() <= spec.growth.l_f * (y1 - y2).abs() + 1e-8);
    }
}
