mod common;

use std::sync::Arc;

use vhj_core::bsde::{solve_penalized, BasisKind, RegressionConfig};
use vhj_core::dual::*;
use vhj_core::forward::{simulate, simulate_tilted, SimOptions, TimeGrid};
use vhj_core::problem::kpz;
use vhj_core::stats::{mean_stderr, Estimate};

fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, steps).unwrap()
}

fn quick() -> RegressionConfig {
    RegressionConfig { basis: BasisKind::TotalDegree { degree: 3 }, ..RegressionConfig::default() }
}

#[test]
fn gamma_vanishes_for_y_free_generators() {
    let spec = kpz(0.5, 1, 1.0);
    let b = simulate(&spec, &grid(6), &[0.0], &[0.0], 1000, 1).unwrap();
    let sol = solve_penalized(&spec, &b, 2.0, &quick()).unwrap();
    let g = gamma_process(&spec, &b, &sol).unwrap();
    assert!(g.gamma.iter().all(|v| *v == 0.0));
    assert!(g.discount.iter().all(|v| *v == 1.0));
    assert_eq!(g.clamp_count, 0);
}

#[test]
fn gamma_of_linear_generator_is_its_slope() {
    // f = a²/2 - c y, so γ = -c wherever Y ≠ 0
    let c = 0.8;
    let spec = common::scalar(0.0, 1.0, 1.0, 0.5, c, |x| 2.0 + x.cos());
    let b = simulate(&spec, &grid(8), &[0.0], &[0.0], 1000, 2).unwrap();
    let sol = solve_penalized(&spec, &b, 2.0, &quick()).unwrap();
    let g = gamma_process(&spec, &b, &sol).unwrap();
    for v in &g.gamma {
        assert!((v + c).abs() < 1e-12, "{v}");
    }
    assert!(g.max_abs() <= spec.growth.l_f);
    let dt = b.grid.dt();
    assert!((g.discount_at(3, 8) - (-c * 8.0 * dt).exp()).abs() < 1e-12);
}

#[test]
fn gamma_is_clamped_to_lipschitz_constant() {
    // declared L_F smaller than the true slope
    let mut spec = common::scalar(0.0, 1.0, 1.0, 0.5, 0.8, |x| 2.0 + x.cos());
    let b = simulate(&spec, &grid(4), &[0.0], &[0.0], 500, 2).unwrap();
    let sol = solve_penalized(&spec, &b, 2.0, &quick()).unwrap();
    spec.growth.l_f = 0.5;
    let g = gamma_process(&spec, &b, &sol).unwrap();
    assert_eq!(g.max_abs(), 0.5);
    assert_eq!(g.clamp_count, 500 * 4);
    assert_eq!(g.clamp_rate, 1.0);
}

#[test]
fn constant_terminal_zero_tilt_is_exact() {
    let spec = common::scalar(0.0, 1.0, 1.0, 0.0, 0.0, |_| 3.0);
    let est = dual_estimate(&spec, &grid(5), &[0.0], &[0.0], &Control::zero(1), 1.0, &SimOptions::new(100, 1), &GammaSource::Zero).unwrap();
    assert_eq!(est.estimate, Estimate::exact(3.0));
}

#[test]
fn zero_tilt_matches_plain_pathwise_functional() {
    let spec = kpz(0.5, 1, 1.0);
    let g = grid(10);
    let sim = SimOptions::new(3000, 17);
    let est = dual_estimate(&spec, &g, &[0.2], &[0.1], &Control::zero(1), 0.0, &sim, &GammaSource::Zero).unwrap();
    let b = simulate(&spec, &g, &[0.2], &[0.1], sim.n_paths, sim.seed).unwrap();
    let direct = mean_stderr(&pathwise_cost(&spec, &b, &GammaSource::Zero));
    assert_eq!(est.estimate.value.to_bits(), direct.value.to_bits());
    assert_eq!(est.estimate.stderr.to_bits(), direct.stderr.to_bits());
}

#[test]
fn tilted_estimate_replays_on_tilted_bundle() {
    let spec = kpz(0.5, 1, 1.0);
    let g = grid(10);
    let sim = SimOptions::new(1000, 4);
    let ctl = Control::Constant(vec![-0.7]);
    let est = dual_estimate(&spec, &g, &[0.0], &[0.5], &ctl, 1.0, &sim, &GammaSource::Zero).unwrap();
    let b = simulate_tilted(&spec, &g, &[0.0], &[0.5], &sim, &ctl, 1.0).unwrap();
    let direct = mean_stderr(&pathwise_cost(&spec, &b, &GammaSource::Zero));
    assert_eq!(est.estimate.value.to_bits(), direct.value.to_bits());
}

#[test]
fn drift_and_weighted_modes_agree() {
    let spec = kpz(0.5, 1, 1.0);
    let g = grid(50);
    let sim = SimOptions::new(40_000, 8);
    let ctl = Control::Constant(vec![-0.5]);
    let drift = estimate_impl(&spec, &g, &[0.0], &[0.5], &ctl, 1.0, &sim, &GammaSource::Zero, MeasureMode::Drift).unwrap();
    let weighted = estimate_impl(&spec, &g, &[0.0], &[0.5], &ctl, 1.0, &sim, &GammaSource::Zero, MeasureMode::Weighted).unwrap();
    let (a, b) = (drift.estimate, weighted.estimate);
    // O(dt) timing difference on top of the noise
    assert!((a.value - b.value).abs() <= 4.0 * a.combined(&b) + 0.02, "{a:?} {b:?}");
    assert_eq!(weighted.mode, MeasureMode::Weighted);
}

#[test]
fn tilt_bound_is_enforced() {
    let spec = kpz(0.5, 1, 1.0);
    let sim = SimOptions::new(10, 1);
    for mode in [MeasureMode::Drift, MeasureMode::Weighted] {
        let r = estimate_impl(&spec, &grid(4), &[0.0], &[0.0], &Control::Constant(vec![2.0]), 1.0, &sim, &GammaSource::Zero, mode);
        assert!(matches!(r, Err(vhj_core::Error::TiltBound { .. })), "{mode:?}");
    }
}

#[test]
fn zero_v_gives_zero_nu_star() {
    // ϱ = 0, f = g = 0: Y and V vanish identically
    let spec = common::scalar(0.0, 1.0, 0.0, 0.0, 0.0, |_| 0.0);
    let b = simulate(&spec, &grid(5), &[0.0], &[0.0], 2000, 3).unwrap();
    let sol = solve_penalized(&spec, &b, 4.0, &quick()).unwrap();
    for rule in [NuRule::Argmin, NuRule::SignOfV] {
        let cfg = NuStarConfig { rule, ..NuStarConfig::default() };
        let tab = nu_star(&sol, &b, &cfg).unwrap();
        let mut out = [1.0];
        for k in 0..5 {
            tab.eval(k, &[0.1], &[0.2], &mut out);
            assert_eq!(out[0], 0.0, "{rule:?}");
        }
    }
}

#[test]
fn sign_rule_opposes_v() {
    // g increasing in X with ϱ = 1 makes V > 0, so ν* = -n
    let spec = common::scalar(0.0, 0.5, 1.0, 0.0, 0.0, |x| x);
    let b = simulate(&spec, &grid(5), &[0.0], &[0.0], 4000, 3).unwrap();
    let n = 3.0;
    let sol = solve_penalized(&spec, &b, n, &quick()).unwrap();
    assert!((0..b.n_paths).all(|p| sol.v_at(p, 2)[0] > 0.0));
    let tab = nu_star(&sol, &b, &NuStarConfig { rule: NuRule::SignOfV, ..NuStarConfig::default() }).unwrap();
    let mut out = [0.0];
    tab.eval(2, &[0.0], &[0.0], &mut out);
    assert!((out[0] + n).abs() < 1e-12, "{}", out[0]);
    // the argmin rule pushes the same way, within the ball
    let tab = nu_star(&sol, &b, &NuStarConfig::default()).unwrap();
    tab.eval(2, &[0.0], &[0.0], &mut out);
    assert!(out[0] < 0.0 && out[0] >= -n);
}

#[test]
fn nu_table_serializes() {
    let spec = kpz(0.5, 1, 1.0);
    let b = simulate(&spec, &grid(4), &[0.0], &[0.0], 2000, 5).unwrap();
    let sol = solve_penalized(&spec, &b, 4.0, &quick()).unwrap();
    let tab = nu_star(&sol, &b, &NuStarConfig::default()).unwrap();
    let back: NuTable = serde_json::from_str(&serde_json::to_string(&tab).unwrap()).unwrap();
    assert_eq!(back, tab);
    // the start step has a single (x, i) cell
    assert_eq!(tab.values[0].len(), 1);
    assert!(nu_star(&sol, &b, &NuStarConfig { bins: 1, ..NuStarConfig::default() }).is_err());
}

#[test]
fn sandwich_needs_a_control() {
    let spec = kpz(0.5, 1, 1.0);
    let err = dual_sandwich(&spec, &grid(4), &[0.0], &[0.0], 1.0, &[], Estimate::exact(0.0), &SimOptions::new(10, 1), &GammaSource::Zero).unwrap_err();
    assert!(err.to_string().contains("at least one control required"));
}

#[test]
fn trivial_sandwich() {
    let spec = common::scalar(0.0, 1.0, 1.0, 0.0, 0.0, |_| 2.0);
    let trials = vec![("zero".to_string(), Control::zero(1))];
    let rep = dual_sandwich(&spec, &grid(4), &[0.0], &[0.0], 1.0, &trials, Estimate::exact(2.0), &SimOptions::new(100, 1), &GammaSource::Zero).unwrap();
    assert_eq!(rep.min, Estimate::exact(2.0));
    assert!(rep.lower_ok);
    assert_eq!(rep.optimizer_ok, None);
}

#[test]
fn small_kpz_sandwich() {
    let spec = kpz(0.5, 1, 1.0);
    let g = grid(20);
    let b = simulate(&spec, &g, &[0.0], &[0.0], 20_000, 13).unwrap();
    let n = 4.0;
    let sol = solve_penalized(&spec, &b, n, &RegressionConfig::default()).unwrap();
    let tab = nu_star(&sol, &b, &NuStarConfig::default()).unwrap();
    let trials = vec![
        ("zero".to_string(), Control::zero(1)),
        ("+n".to_string(), Control::Constant(vec![n])),
        ("-n".to_string(), Control::Constant(vec![-n])),
        ("nu*".to_string(), Control::Table(Arc::new(tab))),
    ];
    let sim = SimOptions::new(20_000, 99);
    let rep = dual_sandwich(&spec, &g, &[0.0], &[0.0], n, &trials, sol.u_estimate, &sim, &GammaSource::Zero).unwrap();
    assert!(rep.lower_ok, "{rep:#?}");
    assert_eq!(rep.min_label, "nu*");
    assert_eq!(rep.optimizer_ok, Some(true), "{rep:#?}");
}
