//! Acceptance suite. Prints one PASS/FAIL line per criterion on stdout and
//! fails the test if a criterion fails, except those listed in
//! `KNOWN_DEVIATIONS`, which are printed as FAIL with the measured value.
//!
//! Run with `cargo test --release -p ergolab --test acceptance`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ergolab::run::RECORD_FILE;
use ergolab::{execute, Kind, RunOptions};
use ergolab_core::basis::BasisSpec;
use ergolab_core::bsde::{
    constrained_limit, discounted_grid, maximality_probe, solve, solve_finite_horizon, solve_penalized, BsdeConfig,
    BsdeProblem, Penalization, Terminal,
};
use ergolab_core::ergodic::{ergodic_cost, long_time_sweep, martingale_residual, vanishing_discount_sweep};
use ergolab_core::math::mean_se;
use ergolab_core::model::{
    build_colored_model, build_desk_model, build_heat_model, validate_assumptions, ColoredCost, ColoredDrift,
    CostSpec, DriftForm, DriftSpec, HeatCost, HeatDrift, ModelInstance, NoiseMap, NoiseProfile, RandomizationMap,
    RunningCost, SpectralOperator, TerminalCost,
};
use ergolab_core::oracle::{
    brute_force_value, hjb_discounted, hjb_ergodic, hjb_parabolic, uniform_controls, Oracle1DModel,
};
use ergolab_core::randomization::{
    approximating_alpha, randomized_value_mc, simulate_randomized_pair, step_target_l2_errors, StepTarget,
};
use ergolab_core::state_sim::{
    contraction_gap, moment_report, simulate_state, ControlPolicy, EtaSource, TimeGrid,
};

// Tolerances pinned from the criteria.
const SE_MULT: f64 = 3.0;
const C1_NS: [u32; 3] = [10, 100, 1000];
const C2_BETAS: [f64; 2] = [0.5, 0.125];
const C2_CLIP_RATE: f64 = 0.01;
const C3_LADDER: [u32; 7] = [1, 2, 4, 8, 16, 32, 64];
const C3_TOL_FACTOR: f64 = 1e-3;
const C4_BETA: f64 = 0.25;
const C4_REL_TOL: f64 = 0.03;
const C5_BETAS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];
const C5_TS: [f64; 4] = [5.0, 10.0, 20.0, 40.0];
const C5_REL_TOL: f64 = 0.05;
const C5_VHAT_TOL: f64 = 0.05;
const C6_REL_TOL: f64 = 0.01;
const C7_DRIFT_TOL_FRACTION: f64 = 0.05;
const C10_CLOSED_FORM_TOL: f64 = 1e-3;

/// Criteria that cannot hold as stated; see the README.
const KNOWN_DEVIATIONS: [u32; 1] = [1];

fn emit(line: &str) {
    // bypasses the test harness capture so the lines land in the log
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

struct Outcome {
    id: u32,
    passed: bool,
    summary: String,
}

fn report(id: u32, title: &str, passed: bool, detail: String, seconds: f64) -> Outcome {
    let tag = if passed { "PASS" } else { "FAIL" };
    let known = if !passed && KNOWN_DEVIATIONS.contains(&id) { " [known deviation]" } else { "" };
    let summary = format!("{tag} {id:>2} {title}: {detail} ({seconds:.1}s){known}");
    emit(&summary);
    Outcome { id, passed, summary }
}

fn desk() -> ModelInstance {
    build_desk_model(0.1).unwrap()
}

fn desk_oracle(model: &ModelInstance) -> Oracle1DModel {
    Oracle1DModel::from_model(model, uniform_controls(-4.0, 4.0, 161), -5.0, 5.0, 801).unwrap()
}

/// Settings for the discounted and ergodic comparisons on the desk model.
fn fine_cfg(seed: u64) -> BsdeConfig {
    let mut cfg = BsdeConfig::new(0.02, 2000, BasisSpec::polynomial(10, 0, 10), seed);
    cfg.a_spread = 0.0;
    cfg
}

fn heat() -> ModelInstance {
    build_heat_model(
        4,
        HeatDrift { kappa: 2.0, s_tanh: 1.0, c_sin: 1.0, control_modes: 1 },
        HeatCost::FieldTanh2 { wx: 1.0, wa: 0.1 },
        NoiseProfile::FirstModes(2),
    )
    .unwrap()
}

fn colored() -> ModelInstance {
    build_colored_model(4, ColoredDrift { kappa: 1.0, gain: 0.5, control_modes: 1 }, ColoredCost { wx: 1.0, wa: 0.1 }, 0.5, 1.0)
        .unwrap()
}

/// Single-mode model with zero drift.
fn ou_model(eig: f64, gain: f64) -> ModelInstance {
    ModelInstance {
        operator: SpectralOperator { eigenvalues: vec![eig] },
        noise: NoiseMap { gains: vec![gain], m_a: gain.abs() * (1.0 + 1e-9), gamma: 0.0 },
        drift: DriftSpec { form: DriftForm::Zero, lipschitz_x: 0.0, growth: 0.0, dissipativity: -eig },
        cost: CostSpec { running: RunningCost::Constant { c: 1.0 }, terminal: TerminalCost::Zero, m_ell: 1.0, l_ell: 0.0, c_phi: 0.0 },
        randomization: RandomizationMap::dyadic(1),
        delta: 1.0,
        rho: 0.25,
        eta: None,
    }
}

fn with_cost(mut m: ModelInstance, running: RunningCost, m_ell: f64) -> ModelInstance {
    m.cost.running = running;
    m.cost.m_ell = m_ell;
    m
}

// 1. Randomization rate.
fn criterion_1() -> Outcome {
    let t = Instant::now();
    // a fast, strongly damped mode gives η = X_{t0} with known E|η|² at a
    // tiny t0, so the grid can resolve the ramp for every n
    let (lam, var_target): (f64, f64) = (-1000.0, 4.0);
    let gain = (var_target * 2.0 * -lam).sqrt();
    let model = ou_model(lam, gain);
    let t0 = 0.01;
    let e_eta2 = var_target * (1.0 - (2.0 * lam * t0).exp());
    let target = StepTarget { t0, eta: EtaSource::OfState(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0])) };
    let mut literal_ok = true;
    let mut corrected_ok = true;
    let mut parts = Vec::new();
    for &n in &C1_NS {
        let h = 1.0 / (10.0 * n as f64);
        let horizon = t0 + 2.0 / n as f64;
        let grid = TimeGrid::new(0.0, horizon, (horizon / h).round() as usize).unwrap();
        let alpha = approximating_alpha(&target, n, &model.randomization, horizon).unwrap();
        let pair = simulate_randomized_pair(&model, &[0.0], &[0.0], &alpha.policy, &grid, 10_000, 100 + n as u64).unwrap();
        let errs = step_target_l2_errors(&pair, &target, &model.randomization.weights).unwrap();
        let (mean, se) = mean_se(&errs);
        let quoted = e_eta2 / n as f64;
        let ramp = e_eta2 / (3.0 * n as f64);
        literal_ok &= (mean - quoted).abs() <= SE_MULT * se;
        corrected_ok &= (mean - ramp).abs() <= SE_MULT * se;
        parts.push(format!("n={n}: {mean:.4e}±{se:.1e} vs E|η|²/n={quoted:.4e}, E|η|²/(3n)={ramp:.4e}"));
    }
    let out = report(1, "randomization rate E|η|²/n", literal_ok, parts.join("; "), t.elapsed().as_secs_f64());
    emit(&format!(
        "        ramp closed form E|η|²/(3n) within {SE_MULT} SE for every n: {}",
        if corrected_ok { "yes" } else { "no" }
    ));
    assert!(corrected_ok, "measured error departs from the ramp closed form");
    out
}

// 2. A priori bounds.
fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, model) in [("desk", desk()), ("heat", heat()), ("colored", colored())] {
        let x0 = vec![0.0; model.n_modes()];
        let a0 = vec![0.0; model.m_controls()];
        for &beta in &C2_BETAS {
            let mut cfg = BsdeConfig::new(0.1, 300, BasisSpec::polynomial(3, 0, 3), 5);
            cfg.tail_tol = 1e-2;
            cfg.channel_nodes = 5;
            let grid = discounted_grid(&model, beta, &cfg).unwrap();
            for n in [Penalization::Finite(8), Penalization::Infinite] {
                let sol = solve_penalized(&model, &x0, &a0, beta, n, &grid, &cfg).unwrap();
                let d = &sol.diagnostics;
                let y_ok = d.y_abs_max <= model.cost.m_ell / beta && d.y_fit_abs_max <= model.cost.m_ell / beta + 1e-9;
                let clip_ok = d.clip_rate() < C2_CLIP_RATE;
                let z_ok = d.z_sup <= d.z_bound + SE_MULT * d.z_regression_se;
                ok &= y_ok && clip_ok && z_ok;
                if n == Penalization::Infinite {
                    parts.push(format!(
                        "{name} β={beta}: |Y|≤{:.3}/{:.2}, clip {:.1e}, sup|Z| {:.3}≤{:.3}",
                        d.y_abs_max,
                        model.cost.m_ell / beta,
                        d.clip_rate(),
                        d.z_sup,
                        d.z_bound
                    ));
                }
            }
        }
    }
    report(2, "a priori bounds on Y and Z", ok, parts.join("; "), t.elapsed().as_secs_f64())
}

// 3. Penalization monotonicity.
fn criterion_3() -> Outcome {
    let t = Instant::now();
    let model = desk();
    let beta = 0.5;
    let mut cfg = BsdeConfig::new(0.05, 1000, BasisSpec::polynomial(10, 0, 10), 11);
    cfg.x_spread = 1.0;
    cfg.a_spread = 1.5;
    let (limit, rep) = constrained_limit(&model, &[0.0], &[0.0], beta, &C3_LADDER, &cfg).unwrap();
    let tol = C3_TOL_FACTOR * model.cost.m_ell / beta;
    assert_eq!(rep.tolerance, tol);
    let ok = rep.max_violation <= tol && rep.k_monotone;
    let ys: Vec<String> = rep.entries.iter().map(|e| format!("{:.4}", e.y0)).collect();
    let detail = format!(
        "Y0(n) = [{}] → {:.4}; max increase {:.2e} ≤ {tol:.1e}; K nondecreasing on every path: {}",
        ys.join(", "),
        limit.y0,
        rep.max_violation,
        rep.k_monotone
    );
    report(3, "penalization monotonicity", ok, detail, t.elapsed().as_secs_f64())
}

// 4. Discounted oracle equivalence.
fn criterion_4() -> Outcome {
    let t = Instant::now();
    let model = desk();
    let cfg = fine_cfg(31);
    let grid = discounted_grid(&model, C4_BETA, &cfg).unwrap();
    let sol = solve(
        &BsdeProblem {
            model: &model,
            x0: &[0.0],
            a0: &[0.0],
            beta: C4_BETA,
            penalization: Penalization::Infinite,
            terminal: Terminal::Zero,
            grid,
            forced_k_rate: 0.0,
        },
        &cfg,
    )
    .unwrap();
    let oracle = hjb_discounted(&desk_oracle(&model), C4_BETA).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..9 {
        let x = -2.0 + 0.5 * i as f64;
        let b = sol.value_at(&model, &[x], &[0.0]).unwrap();
        let o = oracle.at(x);
        worst = worst.max((b - o).abs() / o.abs());
    }
    report(
        4,
        "discounted value vs HJB oracle",
        worst <= C4_REL_TOL,
        format!("β={C4_BETA}, 9 points on [-2,2], max relative error {:.2}% ≤ {:.0}%", 100.0 * worst, 100.0 * C4_REL_TOL),
        t.elapsed().as_secs_f64(),
    )
}

struct ErgodicRefs {
    lambda_vd: f64,
    lambda_lt: f64,
    lambda_oracle: f64,
    oracle: ergolab_core::oracle::OracleErgodic,
}

// 5. Ergodic consistency.
fn criterion_5() -> (Outcome, ErgodicRefs) {
    let t = Instant::now();
    let model = desk();
    let cfg = fine_cfg(21);
    let xs: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
    let states: Vec<Vec<f64>> = xs.iter().map(|x| vec![if x.abs() < 1e-12 { 0.0 } else { *x }]).collect();
    let est = vanishing_discount_sweep(&model, &states, &[0.0], &C5_BETAS, &cfg).unwrap();
    let lt = long_time_sweep(&model, &[0.0], &[0.0], &C5_TS, &TerminalCost::Zero, &cfg, None).unwrap();
    let oracle = hjb_ergodic(&desk_oracle(&model)).unwrap();
    let (a, b, c) = (est.lambda, lt.lambda, oracle.lambda);
    let rel = |p: f64, q: f64| (p - q).abs() / q.abs();
    let lam_worst = rel(a, c).max(rel(b, c)).max(rel(a, b));
    let scale = xs.iter().map(|x| oracle.at(*x).abs()).fold(0.0, f64::max);
    let v_worst = xs.iter().zip(&est.v_hat).map(|(x, v)| (v - oracle.at(*x)).abs()).fold(0.0, f64::max) / scale;
    let ok = lam_worst <= C5_REL_TOL && v_worst <= C5_VHAT_TOL && est.failure().is_none() && lt.bounded;
    let detail = format!(
        "λ vanishing-discount {a:.5}, long-time {b:.5}, oracle {c:.5} (worst pair {:.2}%); v̂ sup error {:.2}% of sup|v̂|",
        100.0 * lam_worst,
        100.0 * v_worst
    );
    let out = report(5, "ergodic constant and bias function", ok, detail, t.elapsed().as_secs_f64());
    (out, ErgodicRefs { lambda_vd: a, lambda_lt: b, lambda_oracle: c, oracle })
}

// 6. Terminal-cost washout.
fn criterion_6(lambda_zero_phi: f64) -> Outcome {
    let t = Instant::now();
    let model = desk();
    let cfg = fine_cfg(21);
    let phi = TerminalCost::AbsNorm { c: 0.5 };
    let lt = long_time_sweep(&model, &[0.0], &[0.0], &C5_TS, &phi, &cfg, None).unwrap();
    let rel = (lt.lambda - lambda_zero_phi).abs() / lambda_zero_phi.abs();
    report(
        6,
        "terminal cost washes out",
        rel < C6_REL_TOL,
        format!("φ=0: λ={lambda_zero_phi:.5}, φ=0.5|x|: λ={:.5}, relative difference {:.3}%", lt.lambda, 100.0 * rel),
        t.elapsed().as_secs_f64(),
    )
}

// 7. Ergodic lower bound and martingale optimality.
fn criterion_7(refs: &ErgodicRefs) -> Outcome {
    let t = Instant::now();
    let model = desk();
    let lambda = refs.lambda_vd;
    let (t_end, h, paths) = (40.0, 0.02, 400);
    // the pipeline λ carries the criterion-5 tolerance
    let lambda_budget = C5_REL_TOL * lambda.abs();
    let o = Arc::new(refs.oracle.clone());
    let o2 = o.clone();
    let heuristics: Vec<(&str, ControlPolicy)> = vec![
        ("u=0", ControlPolicy::zero(1)),
        ("u=1", ControlPolicy::constant(vec![1.0])),
        ("u=-1", ControlPolicy::constant(vec![-1.0])),
        ("u=-x", ControlPolicy::feedback(|inp, out: &mut [f64]| out[0] = -inp.x[0])),
        ("u=-2tanh(2x)", ControlPolicy::feedback(|inp, out: &mut [f64]| out[0] = -2.0 * (2.0 * inp.x[0]).tanh())),
    ];
    let tol = C7_DRIFT_TOL_FRACTION * model.cost.m_ell;
    let grid = TimeGrid::with_step(t_end, h).unwrap();
    let v_hat = move |x: &[f64]| o2.at(x[0]);
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, pol)) in heuristics.iter().enumerate() {
        let c = ergodic_cost(&model, pol, &[0.0], t_end, h, paths, 70 + i as u64).unwrap();
        let lower = c.mean >= lambda - SE_MULT * c.se - lambda_budget;
        let mr = martingale_residual(&model, pol, &v_hat, refs.lambda_oracle, &grid, &[0.0], 100, 80 + i as u64, 5.0, 8).unwrap();
        let sub = mr.is_submartingale(tol);
        ok &= lower && sub;
        parts.push(format!("{name} {:.4}", c.mean));
    }
    let oracle_pol = ControlPolicy::feedback(move |inp, out: &mut [f64]| out[0] = o.feedback(inp.x[0]));
    let c = ergodic_cost(&model, &oracle_pol, &[0.0], t_end, h, paths, 90).unwrap();
    let opt_ok = (c.mean - lambda).abs() <= SE_MULT * c.se + lambda_budget;
    let mr = martingale_residual(&model, &oracle_pol, &v_hat, refs.lambda_oracle, &grid, &[0.0], 400, 91, 5.0, 8).unwrap();
    let mart_ok = mr.is_martingale(tol);
    ok &= opt_ok && mart_ok;
    let detail = format!(
        "λ={lambda:.4}; heuristics [{}] all ≥ λ - budget; oracle feedback {:.4}±{:.4}; drift max |bin| {:.4} ≤ {tol:.3}",
        parts.join(", "),
        c.mean,
        c.se,
        mr.max_abs_bin
    );
    report(7, "ergodic lower bound and optimality", ok, detail, t.elapsed().as_secs_f64())
}

// 8. Value independence of the initial channel.
fn criterion_8() -> Outcome {
    let t = Instant::now();
    let model = build_desk_model(0.0).unwrap();
    assert!(model.cost.running.is_state_only());
    let (beta, h, k) = (0.5, 1e-3, 200.0);
    let grid = TimeGrid::with_step(16.0, h).unwrap();
    let r = model.randomization.weights[0];
    // steer the channel to 0 at rate k; shared noise keeps I¹ - I² = Δa e^{-kt}
    let steer = ControlPolicy::feedback(move |inp, out: &mut [f64]| out[0] = -k * inp.channel[0] / r).with_bound(1e6);
    let (a1, a2) = (-2.0, 3.0);
    let v1 = randomized_value_mc(&model, &[0.0], &[a1], &steer, beta, &grid, 2000, 8, 1e-3).unwrap();
    let v2 = randomized_value_mc(&model, &[0.0], &[a2], &steer, beta, &grid, 2000, 8, 1e-3).unwrap();
    // |ΔJ| ≤ L_ℓ · gain · |Δa| / ((β + μ_total)(β + k)), μ_total = 1 for the
    // desk drift
    let correction = model.cost.l_ell * (a2 - a1).abs() / ((beta + 1.0) * (beta + k));
    let se = (v1.se * v1.se + v2.se * v2.se).sqrt();
    let diff = (v1.mean - v2.mean).abs();
    report(
        8,
        "randomized value independent of a0",
        diff <= SE_MULT * se + correction,
        format!(
            "a0={a1}: {:.5}, a0={a2}: {:.5}, |Δ|={diff:.2e} ≤ 3 SE {:.2e} + drift correction {correction:.2e}",
            v1.mean,
            v2.mean,
            SE_MULT * se
        ),
        t.elapsed().as_secs_f64(),
    )
}

fn manifests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests")
}

fn scratch_dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("ergolab-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn payload_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != RECORD_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

const TINY_BSDE: &str = r#"
version = 1
kind = "bsde"
seed = 5
out = "unused"

[model]
path = "MODELS/desk.json"

[discretization]
h = 0.1
n_paths = 200
basis_degree = 4
channel_nodes = 5
tail_tol = 0.01

[ladders]
n = [1, 4]

[problem]
x0 = [0.0]
a0 = [0.0]
beta = 0.5
"#;

// 9. Determinism.
fn criterion_9() -> Outcome {
    let t = Instant::now();
    let dir = scratch_dir("det");
    let models = Path::new(env!("CARGO_MANIFEST_DIR")).join("models");
    let tiny = dir.join("tiny_bsde.toml");
    std::fs::write(&tiny, TINY_BSDE.replace("MODELS", &models.to_string_lossy())).unwrap();
    let mut ok = true;
    let mut files = 0;
    for (manifest, kind) in [(manifests_dir().join("simulate_heat.toml"), Kind::Simulate), (tiny, Kind::Bsde)] {
        let mut payloads = Vec::new();
        for workers in [1usize, 3] {
            for rep in 0..2 {
                let out = dir.join(format!("{kind:?}-{workers}-{rep}"));
                let opts = RunOptions { out: Some(out.clone()), workers: Some(workers), seed_override: None, expected_kind: Some(kind) };
                execute(&manifest, &opts).unwrap();
                payloads.push(payload_bytes(&out));
            }
        }
        files += payloads[0].len();
        ok &= payloads.iter().all(|p| *p == payloads[0]) && !payloads[0].is_empty();
    }
    std::fs::remove_dir_all(&dir).ok();
    report(
        9,
        "bitwise determinism across reruns and worker counts",
        ok,
        format!("{files} result files identical over 2 reruns × workers {{1, 3}}"),
        t.elapsed().as_secs_f64(),
    )
}

struct Battery {
    items: Vec<(String, bool)>,
}

impl Battery {
    fn check(&mut self, name: &str, ok: bool) {
        self.items.push((name.to_string(), ok));
    }
}

// 10. Trivial exactness battery.
fn criterion_10() -> Outcome {
    let t = Instant::now();
    let mut b = Battery { items: Vec::new() };
    let tol = C10_CLOSED_FORM_TOL;
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;

    // model
    let h2 = build_heat_model(
        2,
        HeatDrift { kappa: 2.0, s_tanh: 0.0, c_sin: 1.0, control_modes: 1 },
        HeatCost::FieldTanh2 { wx: 1.0, wa: 0.1 },
        NoiseProfile::Identity,
    )
    .unwrap();
    b.check("heat spectrum [-π², -4π²]", (h2.operator.eigenvalues[0] + pi2).abs() < 1e-12 && (h2.operator.eigenvalues[1] + 4.0 * pi2).abs() < 1e-12);
    let rep = validate_assumptions(&h2, 1000, 1);
    b.check("f = -2x + sin u passes (A.5) with μ = 2", h2.drift.dissipativity == 2.0 && rep.get("A.5").unwrap().passed);
    let mut expansive = desk();
    expansive.drift.form = DriftForm::Linear { kappa: -1.0 };
    let w = validate_assumptions(&expansive, 1000, 1);
    let a5 = w.get("A.5").unwrap();
    b.check("F(x) = x fails (A.5) with a positive margin", !a5.passed && a5.worst_margin > 0.0);
    let mut t2 = desk();
    t2.cost.running = RunningCost::Tanh2 { wx: 1.0, wa: 0.0 };
    t2.cost.m_ell = 1.0;
    t2.cost.l_ell = 1.0;
    b.check("ℓ = tanh² x passes (A.6) with M = L = 1", validate_assumptions(&t2, 1000, 1).get("A.6").unwrap().passed);
    let degenerate = build_heat_model(
        4,
        HeatDrift { kappa: 2.0, s_tanh: 0.0, c_sin: 1.0, control_modes: 1 },
        HeatCost::FieldTanh2 { wx: 1.0, wa: 0.1 },
        NoiseProfile::FirstModes(1),
    );
    b.check("heat with g_k = 0 for k ≥ 2 passes (A.2)", degenerate.is_ok());
    let c16 = build_colored_model(16, ColoredDrift { kappa: 1.0, gain: 0.5, control_modes: 1 }, ColoredCost { wx: 1.0, wa: 0.1 }, 0.3, 1.0).unwrap();
    b.check("colored η = 0.3: g_1 = 1, g_16 = 16^-0.3", c16.noise.gains[0] == 1.0 && (c16.noise.gains[15] - 16f64.powf(-0.3)).abs() < 1e-15);
    b.check(
        "colored η = 0.2 rejected",
        build_colored_model(4, ColoredDrift { kappa: 1.0, gain: 0.5, control_modes: 1 }, ColoredCost { wx: 1.0, wa: 0.1 }, 0.2, 1.0).is_err(),
    );

    // state simulation
    let mut det = ou_model(-1.0, 0.0);
    det.operator.eigenvalues = vec![-1.0, -3.0];
    det.noise.gains = vec![0.0, 0.0];
    let grid = TimeGrid::with_step(2.0, 0.1).unwrap();
    let ens = simulate_state(&det, &[1.0, -2.0], &ControlPolicy::zero(1), &grid, 2, 1).unwrap();
    let exact = (0..=grid.n_steps).all(|k| {
        let tk = grid.node(k);
        let x = ens.state(1, k);
        (x[0] - (-tk).exp()).abs() < 1e-12 && (x[1] + 2.0 * (-3.0 * tk).exp()).abs() < 1e-12
    });
    b.check("F = 0, G = 0 follows the semigroup", exact);
    let ou = ou_model(-1.0, 1.0);
    let grid = TimeGrid::with_step(10.0, 0.05).unwrap();
    let ens = simulate_state(&ou, &[0.0], &ControlPolicy::zero(1), &grid, 10_000, 2).unwrap();
    let xs: Vec<f64> = (0..10_000).map(|p| ens.state(p, grid.n_steps)[0]).collect();
    let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let (v, se) = mean_se(&sq);
    b.check("OU variance at T = 10 is (1 - e^-20)/2 within 3 SE", (v - 0.5 * (1.0 - (-20.0f64).exp())).abs() <= SE_MULT * se);
    let mom = moment_report(&ens, &[1.0]).unwrap();
    let last = mom.mean_abs.last().unwrap();
    b.check("OU E|X_t| → √(1/π) within 3 SE", (last.1 - (1.0 / std::f64::consts::PI).sqrt()).abs() <= SE_MULT * last.2);
    let zero_ens = simulate_state(&det, &[0.0, 0.0], &ControlPolicy::zero(1), &TimeGrid::with_step(1.0, 0.1).unwrap(), 3, 1).unwrap();
    let zm = moment_report(&zero_ens, &[1.0, 2.0]).unwrap();
    b.check("zero model has zero moments", zm.sup_moments.iter().all(|m| m.1 == 0.0) && zm.mean_abs.iter().all(|m| m.1 == 0.0));
    let d = desk();
    let g = TimeGrid::with_step(3.0, 0.01).unwrap();
    let same = contraction_gap(&d, &[0.5], &[0.5], &ControlPolicy::constant(vec![0.3]), &g, 20, 3).unwrap();
    b.check("coupled runs from one point have zero gap", same.iter().all(|s| s.max_ratio == 0.0));
    let mut lin = ou_model(0.0, 0.7);
    lin.drift = DriftSpec { form: DriftForm::Linear { kappa: 2.0 }, lipschitz_x: 2.0, growth: 2.0, dissipativity: 2.0 };
    let gap = contraction_gap(&lin, &[1.0], &[-0.5], &ControlPolicy::zero(1), &g, 20, 3).unwrap();
    b.check("linear drift: gap ratio ≡ 1 within 1e-8", gap.iter().all(|s| (s.max_ratio - 1.0).abs() < 1e-8));

    // randomization
    let m = desk();
    let r = m.randomization.weights[0];
    let g = TimeGrid::with_step(2.0, 0.05).unwrap();
    let pair = simulate_randomized_pair(&m, &[0.0], &[0.3], &ControlPolicy::zero(1), &g, 10_000, 4).unwrap();
    let ch: Vec<f64> = (0..10_000).map(|p| (pair.channel_at(p, g.n_steps)[0] - 0.3).powi(2)).collect();
    let (cv, cse) = mean_se(&ch);
    b.check("α = 0: Var(I_T - a0) = r² T within 3 SE", (cv - r * r * 2.0).abs() <= SE_MULT * cse);
    let pair = simulate_randomized_pair(&m, &[0.0], &[0.3], &ControlPolicy::constant(vec![1.5]), &g, 3, 4).unwrap();
    let drift_exact = (0..3).all(|p| {
        let ii = pair.integrated_intensity(p, &m.randomization.weights);
        (0..=g.n_steps).all(|k| (ii[k] - g.node(k) * r * 1.5).abs() < 1e-12)
    });
    b.check("α = c: I_t - a0 - R W_t = t R c exactly", drift_exact);
    let fixed = StepTarget { t0: 0.25, eta: EtaSource::Fixed(vec![1.0]) };
    let a100 = approximating_alpha(&fixed, 100, &m.randomization, 1.0).unwrap();
    b.check("|η| = 1, n = 100: quoted error 0.01", (a100.quoted_error.unwrap() - 0.01).abs() < 1e-15);
    let g4 = TimeGrid::new(0.0, 1.0, 4000).unwrap();
    let err_at = |n: u32| {
        let a = approximating_alpha(&fixed, n, &m.randomization, 1.0).unwrap();
        let pair = simulate_randomized_pair(&m, &[0.0], &[0.0], &a.policy, &g4, 1, 5).unwrap();
        step_target_l2_errors(&pair, &fixed, &m.randomization.weights).unwrap()[0]
    };
    b.check("error(n)/error(2n) = 2 for deterministic η", ((err_at(50) / err_at(100)) - 2.0).abs() < 1e-9);
    let mc = with_cost(desk(), RunningCost::Constant { c: 1.0 }, 1.0);
    let gv = TimeGrid::with_step(20.0, 0.05).unwrap();
    let v = randomized_value_mc(&mc, &[0.0], &[0.0], &ControlPolicy::zero(1), 0.5, &gv, 50, 6, 1e-3).unwrap();
    b.check("ℓ ≡ 1, β = 0.5: value 2 within the tail budget", (v.mean - 2.0).abs() <= v.tail_budget + 1e-12);

    // bsde
    let cfg = BsdeConfig::new(0.05, 200, BasisSpec::polynomial(2, 0, 2), 7);
    let cc = with_cost(desk(), RunningCost::Constant { c: 0.7 }, 0.7);
    let gd = discounted_grid(&cc, 0.5, &cfg).unwrap();
    let sol = solve_penalized(&cc, &[0.0], &[0.0], 0.5, Penalization::Finite(3), &gd, &cfg).unwrap();
    let te = gd.t_end - gd.t0;
    b.check("ℓ ≡ c discounted: Y0 = c(1 - e^{-βT})/β", (sol.y0 - 0.7 * (1.0 - (-0.5 * te).exp()) / 0.5).abs() < tol);
    let gf = TimeGrid::with_step(3.0, 0.05).unwrap();
    let sol = solve_finite_horizon(&cc, &[0.0], &[0.0], 0.0, &TerminalCost::Zero, Penalization::Finite(3), &gf, &cfg).unwrap();
    b.check("ℓ ≡ c, φ = 0, β = 0: Y0 = cT", (sol.y0 - 2.1).abs() < tol);
    let mut inert = build_desk_model(0.0).unwrap();
    inert.drift.form = DriftForm::TanhControl { kappa: 0.5, gain: 0.0 };
    let (lim, rep) = constrained_limit(&inert, &[0.0], &[0.0], 0.5, &[1, 4, 16], &cfg).unwrap();
    let flat = rep.entries.iter().all(|e| (e.y0 - lim.y0).abs() < tol && e.k_final_mean.abs() < tol);
    b.check("control-free problem: flat ladder, K ≈ 0", flat);
    let same = maximality_probe(&inert, &lim, &lim, 1e-12).unwrap();
    b.check("maximality probe of a solution against itself is 0", same.min_margin == 0.0 && same.passed);

    // ergodic
    let cfg_e = {
        let mut c = BsdeConfig::new(0.05, 200, BasisSpec::polynomial(2, 0, 2), 8);
        c.a_spread = 0.0;
        c
    };
    let xs: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().map(|x| vec![*x]).collect();
    let c4 = with_cost(desk(), RunningCost::Constant { c: 0.4 }, 0.4);
    let est = vanishing_discount_sweep(&c4, &xs, &[0.0], &[0.5, 0.25], &cfg_e).unwrap();
    b.check("ℓ ≡ c: λ = c and v̂ ≡ 0", (est.lambda - 0.4).abs() < tol && est.v_hat.iter().all(|v| v.abs() < 1e-9));
    let ga = with_cost(desk(), RunningCost::Tanh2 { wx: 0.0, wa: 1.0 }, 1.0);
    let est = vanishing_discount_sweep(&ga, &xs, &[0.0], &[0.5, 0.25], &cfg_e).unwrap();
    b.check("ℓ = tanh²(a): λ = 0 and v̂ ≡ 0", est.lambda.abs() < tol && est.v_hat.iter().all(|v| v.abs() < tol));
    let lt = long_time_sweep(&c4, &[0.0], &[0.0], &[1.0, 2.0, 4.0], &TerminalCost::Zero, &cfg_e, None).unwrap();
    b.check("ℓ ≡ c, φ = 0: v^T = cT, slope c", lt.entries.iter().all(|e| (e.v - 0.4 * e.t).abs() < tol) && (lt.lambda - 0.4).abs() < tol);
    let ec = ergodic_cost(&c4, &ControlPolicy::constant(vec![0.7]), &[0.3], 5.0, 0.05, 20, 9).unwrap();
    b.check("ℓ ≡ c: ergodic cost c", (ec.mean - 0.4).abs() < 1e-12);
    let gm = TimeGrid::with_step(2.0, 0.05).unwrap();
    let zero = |_: &[f64]| 0.0;
    let mr = martingale_residual(&c4, &ControlPolicy::zero(1), zero, 0.4, &gm, &[0.0], 20, 9, 0.0, 4).unwrap();
    b.check("ℓ ≡ c, λ = c, v̂ ≡ 0: zero drift", mr.max_abs_bin < 1e-12);
    let mr = martingale_residual(&c4, &ControlPolicy::zero(1), zero, 1.4, &gm, &[0.0], 20, 9, 0.0, 4).unwrap();
    b.check("λ + 1: drift ≡ -1", mr.bins.iter().all(|bn| (bn.mean + 1.0).abs() < 1e-12));

    // oracle
    let oc = Oracle1DModel::new(|x, a| -x + a.tanh(), 0.7, |_, _| 0.6, uniform_controls(-1.0, 1.0, 5), -4.0, 4.0, 201).unwrap();
    let dv = hjb_discounted(&oc, 0.5).unwrap();
    b.check("oracle ℓ ≡ c: v = c/β to 1e-8", dv.v.iter().all(|v| (v - 1.2).abs() < 1e-8));
    b.check("oracle ℓ ≡ c: λ = c", (hjb_ergodic(&oc).unwrap().lambda - 0.6).abs() < 1e-8);
    let og = Oracle1DModel::new(|x, a| -x + a.tanh(), 0.7, |_, a| a.tanh().powi(2) + 0.2, uniform_controls(-1.0, 1.0, 5), -4.0, 4.0, 201).unwrap();
    let eg = hjb_ergodic(&og).unwrap();
    b.check("oracle ℓ = g(a): λ = min g, v̂ ≡ 0", (eg.lambda - 0.2).abs() < 1e-8 && eg.v_hat.iter().all(|v| v.abs() < 1e-8));
    let od = desk_oracle(&desk());
    let p0 = hjb_parabolic(&od, 0.0, 1e-9, |x: f64| x.abs(), 1).unwrap();
    b.check("oracle T → 0: v = φ", p0.v.iter().zip(&p0.x).all(|(v, x)| (v - x.abs()).abs() < 1e-6));
    let pc = hjb_parabolic(&oc, 0.0, 2.0, |_| 0.0, 200).unwrap();
    b.check("oracle ℓ ≡ c, φ = 0: v = cT", pc.v.iter().all(|v| (v - 1.2).abs() < 1e-8));
    let dm = desk();
    let single = brute_force_value(&dm, &[0.2], &[vec![0.5]], 0.3, 0.6, 3, 8).unwrap();
    let bf_grid = TimeGrid::with_step(0.6, 0.2).unwrap();
    let ens = simulate_state(&dm, &[0.2], &ControlPolicy::constant(vec![0.5]), &bf_grid, 20_000, 10).unwrap();
    let costs: Vec<f64> = (0..20_000)
        .map(|p| (0..3).map(|k| (-0.3 * 0.2 * k as f64).exp() * 0.2 * dm.running(ens.state(p, k), &[0.5])).sum())
        .collect();
    let (mc_mean, mc_se) = mean_se(&costs);
    b.check("singleton control grid: enumeration equals plain Monte Carlo", (single.value - mc_mean).abs() <= SE_MULT * mc_se);
    let small = brute_force_value(&dm, &[0.2], &[vec![-1.0], vec![0.0]], 0.3, 0.6, 3, 6).unwrap();
    let large = brute_force_value(&dm, &[0.2], &[vec![-1.0], vec![0.0], vec![1.0], vec![-0.5]], 0.3, 0.6, 3, 6).unwrap();
    b.check("enlarging the control grid never raises the value", large.value <= small.value + 1e-15);

    // cli
    let exe = env!("CARGO_BIN_EXE_ergolab");
    let dir = scratch_dir("cli");
    let status = Command::new(exe)
        .args(["validate", "--manifest"])
        .arg(manifests_dir().join("validate_heat.toml"))
        .arg("--out")
        .arg(dir.join("validate"))
        .output()
        .unwrap();
    b.check("validate on the shipped heat manifest exits 0", status.status.code() == Some(0));
    let bad_model = dir.join("expansive.toml");
    let mut doc = ergolab::ModelDoc::from_model(&desk()).unwrap();
    doc.drift.params = vec![-1.0, 1.0];
    let mut manifest: toml::Table = toml::from_str("version = 1\nkind = \"validate\"\nseed = 1\nout = \"x\"").unwrap();
    let mut model = toml::Table::new();
    model.insert("inline".into(), toml::Value::try_from(&doc).unwrap());
    manifest.insert("model".into(), toml::Value::Table(model));
    std::fs::write(&bad_model, toml::to_string(&manifest).unwrap()).unwrap();
    let st = Command::new(exe).args(["validate", "--manifest"]).arg(&bad_model).arg("--out").arg(dir.join("bad")).output().unwrap();
    b.check("a failing assumption exits 2", st.status.code() == Some(2));
    let heat_rec = dir.join("validate").join(RECORD_FILE);
    let mut other = execute(&manifests_dir().join("validate_heat.toml"), &RunOptions { out: Some(dir.join("v2")), ..Default::default() }).unwrap();
    other.model_sha256 = Some("0".repeat(64));
    let other_rec = dir.join("v2").join(RECORD_FILE);
    std::fs::write(&other_rec, serde_json::to_string(&other).unwrap()).unwrap();
    let st = Command::new(exe).arg("report").arg("--out").arg(dir.join("rep")).arg(&heat_rec).arg(&other_rec).output().unwrap();
    b.check("report refuses records of different models (exit 1)", st.status.code() == Some(1));
    std::fs::remove_dir_all(&dir).ok();

    let failed: Vec<&str> = b.items.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    for (name, ok) in &b.items {
        emit(&format!("        {} {name}", if *ok { "ok  " } else { "FAIL" }));
    }
    let detail = if failed.is_empty() {
        format!("{} closed-form checks", b.items.len())
    } else {
        format!("{} of {} failed: {}", failed.len(), b.items.len(), failed.join("; "))
    };
    report(10, "trivial exactness battery", failed.is_empty(), detail, t.elapsed().as_secs_f64())
}

#[test]
fn acceptance() {
    let started = Instant::now();
    emit("acceptance criteria");
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let (c5, refs) = criterion_5();
    outcomes.push(c5);
    outcomes.push(criterion_6(refs.lambda_lt));
    outcomes.push(criterion_7(&refs));
    outcomes.push(criterion_8());
    outcomes.push(criterion_9());
    outcomes.push(criterion_10());
    emit(&format!("total {:.0}s", started.elapsed().as_secs_f64()));
    let unexpected: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed && !KNOWN_DEVIATIONS.contains(&o.id))
        .map(|o| o.summary.as_str())
        .collect();
    assert!(unexpected.is_empty(), "failing criteria:\n{}", unexpected.join("\n"));
}
