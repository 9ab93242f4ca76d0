//! End-to-end acceptance checks at full scale. Runs without the test harness
//! so every line is printed; pass criterion numbers to run a subset.

mod common;

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vhj_core::bsde::{check_growth_bound, run_ladder_on, BackwardSolution, LadderConfig, LadderReport, RegressionConfig};
use vhj_core::dual::{dual_sandwich, nu_star, Control, GammaSource, NuStarConfig, NuTable, SandwichReport};
use vhj_core::forward::{simulate, SimOptions, TimeGrid};
use vhj_core::oracles::{cole_hopf_kpz, fd_hjb_1d, riccati_lq, FDGrid1D};
use vhj_core::problem::{conjugate_crosscheck, kpz, lq, numeric_conjugate, ConjugateConfig, GrowthProfile, LqParams, ProblemSpec};
use vhj_core::stats::{mean_stderr, Estimate};

const PATHS: usize = 100_000;
const STEPS: usize = 50;
const DUAL_N: f64 = 16.0;

type Outcome = (bool, String);

fn grid() -> TimeGrid {
    TimeGrid::new(0.0, 1.0, STEPS).unwrap()
}

fn cos(x: &[f64]) -> f64 {
    x[0].cos()
}

fn kpz1() -> ProblemSpec {
    kpz(0.5, 1, 1.0)
}

fn tanh_case() -> LqParams {
    LqParams::scalar(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0)
}

struct KpzRun {
    report: LadderReport,
    /// `(u_n, ν*, policy)` at `n = DUAL_N`
    dual: (Estimate, NuTable, Arc<vhj_core::bsde::FeedbackPolicy>),
    secs: f64,
}

fn ladder(spec: &ProblemSpec, x: f64, a: f64, seed: u64, schedule: Option<Vec<f64>>, mut each: impl FnMut(&BackwardSolution, &vhj_core::forward::PathBundle)) -> LadderReport {
    let bundle = simulate(spec, &grid(), &[x], &[a], PATHS, seed).unwrap();
    let cfg = match schedule {
        Some(s) => LadderConfig { schedule: s, ..LadderConfig::default() },
        None => LadderConfig::default(),
    };
    run_ladder_on(spec, &bundle, &cfg, &RegressionConfig::default(), &mut each).unwrap()
}

/// The KPZ ladder at the origin, shared by several criteria.
fn kpz_run() -> &'static KpzRun {
    static RUN: OnceLock<KpzRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let mut dual = None;
        let report = ladder(&kpz1(), 0.0, 0.0, 1, None, |sol, train| {
            if sol.n == DUAL_N {
                dual = Some((sol.u_estimate, nu_star(sol, train, &NuStarConfig::default()).unwrap(), sol.policy.clone()));
            }
        });
        KpzRun { report, dual: dual.unwrap(), secs: t.elapsed().as_secs_f64() }
    })
}

/// LQ ladders at x = 0, 0.5, 1.
fn lq_runs() -> &'static Vec<(f64, LadderReport)> {
    static RUNS: OnceLock<Vec<(f64, LadderReport)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = lq(&tanh_case()).unwrap();
        [0.0, 0.5, 1.0].iter().map(|&x| (x, ladder(&spec, x, 0.0, 7, Some(vec![1.0, 4.0, 16.0, 64.0]), |_, _| {}))).collect()
    })
}

fn c1() -> Outcome {
    let spec = kpz1();
    let ch = cole_hopf_kpz(0.5, &cos, 1.0, 0.0, &[0.0], 40).unwrap();
    let fd = fd_hjb_1d(&spec, &FDGrid1D { a_max: 3.0, ..FDGrid1D::new(-3.0, 3.0, 241, 8000) }).unwrap().value_at(0.0);
    let run = kpz_run();
    let u = run.report.final_u;
    let diff = (u.value - ch).abs();
    let ok = (ch - fd).abs() <= 1e-3 && diff <= 0.05 && run.secs <= 300.0;
    (ok, format!("u_bsde = {:.5} ± {:.5}, cole-hopf {ch:.5} (fd {fd:.5}), |diff| = {diff:.4} <= 0.05, ladder {:.0}s", u.value, u.stderr, run.secs))
}

fn c2() -> Outcome {
    let r = &kpz_run().report;
    let us: Vec<String> = r.levels.iter().map(|l| format!("{}:{:.4}", l.n, l.u.value)).collect();
    (r.monotone && r.levels.len() == 7, format!("u_n {} violations {:?}", us.join(" "), r.violations))
}

fn c3() -> Outcome {
    let r = &kpz_run().report;
    let (m1, m64) = (r.level(1.0).unwrap().constraint_mass.value, r.level(64.0).unwrap().constraint_mass.value);
    (m64 < 0.5 * m1 && r.mass_monotone, format!("mass n=1 {m1:.4}, n=64 {m64:.5} (ratio {:.3}), nonincreasing {}", m64 / m1, r.mass_monotone))
}

fn c4() -> Outcome {
    let u0 = kpz_run().report.final_u;
    let u1 = ladder(&kpz1(), 0.0, 1.0, 2, None, |_, _| {}).final_u;
    let (diff, se) = ((u0.value - u1.value).abs(), u0.combined(&u1));
    (diff <= 3.0 * se, format!("u(a=0) = {:.5}, u(a=1) = {:.5}, |diff| = {diff:.5} <= 3σ = {:.5}", u0.value, u1.value, 3.0 * se))
}

fn c5() -> Outcome {
    let (u_n, table, _) = &kpz_run().dual;
    let n = DUAL_N;
    let trials = vec![
        ("0".to_string(), Control::zero(1)),
        ("+n".to_string(), Control::Constant(vec![n])),
        ("-n".to_string(), Control::Constant(vec![-n])),
        ("nu*".to_string(), Control::Table(Arc::new(table.clone()))),
    ];
    let s: SandwichReport = dual_sandwich(&kpz1(), &grid(), &[0.0], &[0.0], n, &trials, *u_n, &SimOptions::new(PATHS, 1001), &GammaSource::Zero).unwrap();
    let vals: Vec<String> = s.entries.iter().map(|e| format!("{} {:.4}", e.label, e.estimate.estimate.value)).collect();
    (s.lower_ok && s.optimizer_ok == Some(true), format!("u_16 = {:.4}; {}", u_n.value, vals.join(", ")))
}

fn c6() -> Outcome {
    let params = tanh_case();
    let ric = riccati_lq(&params, 1000).unwrap();
    let fd = fd_hjb_1d(&lq(&params).unwrap(), &FDGrid1D { a_max: 6.0, pad: 3.0, ..FDGrid1D::new(-2.0, 2.0, 161, 6000) }).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (x, rep) in lq_runs() {
        let r = ric.value(0.0, &[*x]);
        let u = rep.final_u.value;
        let tol = 0.05f64.max(0.05 * u.abs());
        let fd_gap = (fd.value_at(*x) - r).abs();
        ok &= (u - r).abs() <= tol && fd_gap <= 1e-2;
        parts.push(format!("x={x}: {u:.4} vs {r:.4} (fd gap {fd_gap:.1e})"));
    }
    (ok, parts.join(", "))
}

fn quartic() -> ProblemSpec {
    ProblemSpec {
        hamiltonian: Arc::new(|_: &[f64], _: f64, z: &[f64]| z[0].powi(4) / 4.0),
        growth: GrowthProfile { p: 4.0, q: 4.0, ..common::loose_growth() },
        ..common::frozen(1)
    }
}

fn c7() -> Outcome {
    let cfg = ConjugateConfig::default();
    let kpz_err = conjugate_crosscheck(&ProblemSpec { conjugate_closed_form: None, ..kpz1() }, &cfg, 100, 5).unwrap().max_discrepancy;
    let q = quartic();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut quart_err: f64 = 0.0;
    for _ in 0..100 {
        let (a, y): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        let num = numeric_conjugate(&q, &cfg, &[0.0], &[a], y).unwrap();
        quart_err = quart_err.max((num - 0.75 * a.abs().powf(4.0 / 3.0)).abs());
    }
    // convexity in a and L_F-Lipschitz in y on a generator with a y-term
    let ly = common::scalar(0.0, 1.0, 1.0, 0.5, 0.3, |x| x.cos());
    let ly = ProblemSpec { conjugate_closed_form: None, ..ly };
    let (mut convex_bad, mut lip_bad) = (0, 0);
    for _ in 0..1000 {
        let (a1, a2, th): (f64, f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0));
        let (y1, y2): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let f = |spec: &ProblemSpec, a: f64, y: f64| numeric_conjugate(spec, &cfg, &[0.0], &[a], y).unwrap();
        if f(&q, th * a1 + (1.0 - th) * a2, y1) > th * f(&q, a1, y1) + (1.0 - th) * f(&q, a2, y1) + 1e-9 {
            convex_bad += 1;
        }
        if (f(&ly, a1, y1) - f(&ly, a1, y2)).abs() > ly.growth.l_f * (y1 - y2).abs() + 1e-9 {
            lip_bad += 1;
        }
    }
    let ok = kpz_err <= 1e-6 && quart_err <= 1e-6 && convex_bad == 0 && lip_bad == 0;
    (ok, format!("max err kpz {kpz_err:.1e}, quartic {quart_err:.1e}; convexity failures {convex_bad}/1000, lipschitz failures {lip_bad}/1000"))
}

fn c8() -> Outcome {
    let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let b = simulate(&common::brownian(1), &g, &[0.0], &[0.0], PATHS, 4).unwrap();
    let bm = mean_stderr(&(0..PATHS).map(|p| b.x_at(p, 20)[0].powi(2)).collect::<Vec<_>>());
    let ok_bm = (bm.value - 1.0).abs() <= 3.0 * bm.stderr;

    let steps = 200;
    let g = TimeGrid::new(0.0, 1.0, steps).unwrap();
    let ib_spec = ProblemSpec { rho: Arc::new(|_: &[f64]| vec![1.0]), ..common::frozen(1) };
    let b = simulate(&ib_spec, &g, &[0.0], &[0.0], PATHS, 8).unwrap();
    let ib = mean_stderr(&(0..PATHS).map(|p| b.x_at(p, steps)[0].powi(2)).collect::<Vec<_>>());
    // left-point sum of I has variance (1 - dt)(1 - dt/2)/3
    let dt = g.dt();
    let ib_exact = (1.0 - dt) * (1.0 - 0.5 * dt) / 3.0;
    let ok_ib = (ib.value - ib_exact).abs() <= 3.0 * ib.stderr;

    let spec = kpz(0.5, 2, 1.0);
    let g = TimeGrid::new(0.0, 1.0, 12).unwrap();
    let sim = || simulate(&spec, &g, &[0.0, 0.5], &[0.1, 0.0], 20_000, 77).unwrap();
    let bytes = |threads: usize| {
        let bundle = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(sim);
        let mut out = Vec::new();
        bundle.write_to(&mut out).unwrap();
        out
    };
    let same = bytes(1) == bytes(4);
    (
        ok_bm && ok_ib && same,
        format!("E[W_1²] = {:.4} ± {:.4} (1), E[I²] = {:.4} ± {:.4} ({ib_exact:.4}), 1 vs 4 threads identical {same}", bm.value, bm.stderr, ib.value, ib.stderr),
    )
}

fn c9() -> Outcome {
    let lo = kpz1();
    let hi = ProblemSpec { terminal: Arc::new(|x: &[f64]| x[0].cos() + 0.1 * (-x[0] * x[0]).exp()), ..lo.clone() };
    let fd = FDGrid1D { a_max: 3.0, ..FDGrid1D::new(-3.0, 3.0, 61, 600) };
    let (a, b) = (fd_hjb_1d(&lo, &fd).unwrap(), fd_hjb_1d(&hi, &fd).unwrap());
    let monotone = a.start().iter().zip(b.start()).all(|(u, v)| u <= v);
    let at = |nx: usize, nt: usize| fd_hjb_1d(&lo, &FDGrid1D { a_max: 3.0, pad: 2.0, ..FDGrid1D::new(-2.0, 2.0, nx, nt) }).unwrap().value_at(0.0);
    let (u1, u2, u3) = (at(21, 200), at(41, 800), at(81, 3200));
    let ratio = (u1 - u2) / (u2 - u3);
    (monotone && (3.0..=5.0).contains(&ratio), format!("ordering preserved {monotone}, refinement ratio {ratio:.3}"))
}

fn c10() -> Outcome {
    let kspec = kpz1();
    let k = check_growth_bound(&[(vec![0.0], vec![0.0], &kpz_run().report)], &kspec).unwrap();
    let lspec = lq(&tanh_case()).unwrap();
    let batch: Vec<_> = lq_runs().iter().map(|(x, r)| (vec![*x], vec![0.0], r)).collect();
    let l = check_growth_bound(&batch, &lspec).unwrap();
    (k.stable && l.stable, format!("max/min fitted constant: kpz {:.3}, lq {:.3} (<= 2)", k.ratio, l.ratio))
}

fn main() {
    let all: [(u32, fn() -> Outcome); 10] = [(1, c1), (2, c2), (3, c3), (4, c4), (5, c5), (6, c6), (7, c7), (8, c8), (9, c9), (10, c10)];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, f) in all {
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = f();
        println!("{} criterion {k}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
