//! Manifest execution: one pipeline per experiment kind, each writing its
//! result files and a [`RunRecord`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ergolab_core::basis::BasisSpec;
use ergolab_core::bsde::{constrained_limit, discounted_grid, solve, BsdeConfig, BsdeProblem, Penalization, Terminal};
use ergolab_core::ergodic::{long_time_sweep, vanishing_discount_sweep};
use ergolab_core::model::{validate_assumptions, ModelInstance, TerminalCost};
use ergolab_core::oracle::{hjb_discounted, hjb_ergodic, uniform_controls, Oracle1DModel};
use ergolab_core::state_sim::{moment_report, simulate_state, ControlPolicy, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::{self, f64_rows, header, Provenance};
use crate::manifest::{Discretization, Kind, LoadedManifest, Manifest, PolicyDoc};
use crate::model_doc::ModelDoc;
use crate::report;

pub const RECORD_FILE: &str = "run_record.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Ensembles up to this many path-nodes are also written as CSV.
const CSV_NODE_LIMIT: usize = 100_000;
const DEFAULT_BASIS_DEGREE: usize = 6;
const DEFAULT_VALIDATION_SAMPLES: usize = 1000;
const DEFAULT_CLIP_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest_sha256: String,
    pub model_sha256: Option<String>,
    pub software_version: String,
    pub kind: Kind,
    pub seed: u64,
    pub seed_override: Option<u64>,
    pub workers: usize,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
    /// Result files, relative to the output directory.
    pub results: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed_override: Option<u64>,
    /// Subcommand used; must agree with the manifest kind.
    pub expected_kind: Option<Kind>,
}

/// Shared state of one run.
pub struct Ctx {
    pub out: PathBuf,
    pub manifest_sha256: String,
    pub model_sha256: Option<String>,
    pub seed: u64,
    pub results: Vec<String>,
    pub checks: Vec<Check>,
    pub stages: Vec<StageTiming>,
}

impl Ctx {
    fn prov(&self) -> Provenance<'_> {
        Provenance { manifest_sha256: &self.manifest_sha256, seed: self.seed }
    }

    pub fn csv(&mut self, name: &str, head: &[&str], rows: Vec<Vec<f64>>) -> Result<(), CliError> {
        io::write_csv(&self.out.join(name), &header(head), &f64_rows(rows), self.prov())?;
        self.results.push(name.into());
        Ok(())
    }

    pub fn csv_strings(&mut self, name: &str, head: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        io::write_csv(&self.out.join(name), head, rows, self.prov())?;
        self.results.push(name.into());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), CliError> {
        io::write_json(&self.out.join(name), body, self.prov(), self.model_sha256.as_deref())?;
        self.results.push(name.into());
        Ok(())
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, passed, detail));
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let t = Instant::now();
        let r = f(self);
        self.stages.push(StageTiming { name: name.into(), seconds: t.elapsed().as_secs_f64() });
        r
    }
}

/// Runs a manifest and writes its record. Check failures are reported in
/// the record, not as errors.
pub fn execute(manifest_path: &Path, opts: &RunOptions) -> Result<RunRecord, CliError> {
    let loaded = LoadedManifest::load(manifest_path)?;
    let m = &loaded.manifest;
    if let Some(k) = opts.expected_kind {
        if k != m.kind {
            return Err(CliError::Manifest(format!(
                "subcommand '{}' does not match manifest kind '{}'",
                k.as_str(),
                m.kind.as_str()
            )));
        }
    }
    let out = opts.out.clone().unwrap_or_else(|| loaded.resolve(&m.out));
    let seed = opts.seed_override.unwrap_or(m.seed);
    let workers = opts.workers.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Manifest(format!("worker pool: {e}")))?;
    let started = Instant::now();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut ctx = Ctx {
        out: out.clone(),
        manifest_sha256: loaded.sha256.clone(),
        model_sha256: None,
        seed,
        results: Vec::new(),
        checks: Vec::new(),
        stages: Vec::new(),
    };
    pool.install(|| dispatch(&loaded, &mut ctx))?;
    let record = RunRecord {
        manifest_sha256: ctx.manifest_sha256,
        model_sha256: ctx.model_sha256,
        software_version: env!("CARGO_PKG_VERSION").into(),
        kind: m.kind,
        seed,
        seed_override: opts.seed_override,
        workers,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        stages: ctx.stages,
        passed: ctx.checks.iter().all(|c| c.passed),
        results: ctx.results,
        checks: ctx.checks,
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Format(e.to_string()))? + "\n";
    let path = out.join(RECORD_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(record)
}

fn dispatch(loaded: &LoadedManifest, ctx: &mut Ctx) -> Result<(), CliError> {
    let m = &loaded.manifest;
    if m.kind == Kind::Report {
        let records: Vec<PathBuf> = m.records.as_ref().unwrap().iter().map(|p| loaded.resolve(p)).collect();
        return report::run(ctx, &records, m.tolerances.as_ref().and_then(|t| t.lambda_consistency));
    }
    let doc = loaded.model_doc()?;
    ctx.model_sha256 = Some(doc.hash());
    let model = doc.to_model()?;
    let samples = m.discretization.as_ref().and_then(|d| d.validation_samples).unwrap_or(DEFAULT_VALIDATION_SAMPLES);
    let seed = ctx.seed;
    let report = ctx.stage("validate", |_| Ok(validate_assumptions(&model, samples, seed)))?;
    if m.kind == Kind::Validate {
        for c in &report.checks {
            ctx.check(&c.id, c.passed, format!("{}: worst margin {:e}", c.label, c.worst_margin));
        }
        return ctx.json("validation.json", &report);
    }
    if let Some(c) = report.first_failure() {
        return Err(CliError::Model(format!("assumption {} fails (margin {:e})", c.id, c.worst_margin)));
    }
    match m.kind {
        Kind::Simulate => simulate(m, &model, ctx),
        Kind::Bsde => bsde(m, &model, ctx),
        Kind::ErgodicSweep => sweep(m, &model, ctx),
        Kind::LongTime => long_time(m, &model, ctx),
        Kind::OracleCompare => oracle_compare(m, &model, ctx),
        Kind::Validate | Kind::Report => unreachable!(),
    }
}

fn bsde_config(d: &Discretization, seed: u64) -> BsdeConfig {
    let deg = d.basis_degree.unwrap_or(DEFAULT_BASIS_DEGREE);
    let mut cfg = BsdeConfig::new(d.h, d.n_paths, BasisSpec::polynomial(deg, 0, deg), seed);
    if let Some(v) = d.channel_nodes {
        cfg.channel_nodes = v;
    }
    if let Some(v) = d.x_spread {
        cfg.x_spread = v;
    }
    if let Some(v) = d.a_spread {
        cfg.a_spread = v;
    }
    if let Some(v) = d.tail_tol {
        cfg.tail_tol = v;
    }
    cfg
}

fn check_dims(model: &ModelInstance, x0: &[f64], a0: &[f64]) -> Result<(), CliError> {
    if x0.len() != model.n_modes() || a0.len() != model.m_controls() {
        return Err(CliError::Manifest(format!(
            "problem.x0/a0 have lengths {}/{}, the model needs {}/{}",
            x0.len(),
            a0.len(),
            model.n_modes(),
            model.m_controls()
        )));
    }
    Ok(())
}

pub fn policy_from_doc(doc: &PolicyDoc, m: usize) -> Result<ControlPolicy, CliError> {
    let p = match doc.kind.as_str() {
        "zero" => ControlPolicy::zero(m),
        "constant" => {
            if doc.params.len() != m {
                return Err(CliError::Manifest(format!("constant policy needs {m} parameters")));
            }
            ControlPolicy::constant(doc.params.clone())
        }
        "linear_feedback" => {
            let k = *doc.params.first().ok_or_else(|| CliError::Manifest("linear_feedback needs [k]".into()))?;
            ControlPolicy::feedback(move |inp, out: &mut [f64]| {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[0] = -k * inp.x[0];
            })
        }
        other => return Err(CliError::Manifest(format!("unknown policy kind '{other}'"))),
    };
    Ok(match doc.bound {
        Some(b) => p.with_bound(b),
        None => p,
    })
}

fn simulate(m: &Manifest, model: &ModelInstance, ctx: &mut Ctx) -> Result<(), CliError> {
    let d = m.discretization.as_ref().unwrap();
    let p = m.problem.as_ref().unwrap();
    check_dims(model, &p.x0, &p.a0)?;
    let policy = policy_from_doc(p.policy.as_ref().unwrap(), model.m_controls())?;
    let grid = TimeGrid::with_step(d.t_end.unwrap(), d.h)?;
    let seed = ctx.seed;
    let ens = ctx.stage("simulate", |_| Ok(simulate_state(model, &p.x0, &policy, &grid, d.n_paths, seed)?))?;
    let path = ctx.out.join("ensemble.escl");
    io::write_escl(&path, &ens, None, ctx.prov())?;
    ctx.results.push("ensemble.escl".into());
    if ens.n_paths * (grid.n_steps + 1) <= CSV_NODE_LIMIT {
        let (head, rows) = io::ensemble_csv(&ens);
        ctx.csv_strings("ensemble.csv", &head, &rows)?;
    }
    let moments = moment_report(&ens, &[1.0, 2.0])?;
    ctx.csv("mean_abs.csv", &["t", "mean_abs_x", "se"], moments.mean_abs.iter().map(|r| vec![r.0, r.1, r.2]).collect())?;
    ctx.json("moments.json", &moments)?;
    ctx.check("uniform_first_moment", !moments.growth_flag, format!("fitted bound {:.4}", moments.first_moment_bound));
    Ok(())
}

fn bsde(m: &Manifest, model: &ModelInstance, ctx: &mut Ctx) -> Result<(), CliError> {
    let d = m.discretization.as_ref().unwrap();
    let p = m.problem.as_ref().unwrap();
    check_dims(model, &p.x0, &p.a0)?;
    let cfg = bsde_config(d, ctx.seed);
    let beta = p.beta.unwrap();
    let n_ladder = m.ladders.as_ref().unwrap().n.clone().unwrap();
    let (limit, rep) = ctx.stage("ladder", |_| Ok(constrained_limit(model, &p.x0, &p.a0, beta, &n_ladder, &cfg)?))?;
    ctx.csv(
        "ladder.csv",
        &["n", "y0", "gamma_integral", "k_final_mean", "clip_rate"],
        rep.entries.iter().map(|e| vec![e.n as f64, e.y0, e.gamma_integral, e.k_final_mean, e.clip_rate]).collect(),
    )?;
    ctx.csv("limit_table.csv", &["t", "mean_y", "sup_z", "mean_abs_gamma", "mean_k"], limit.table().into_iter().map(|r| r.to_vec()).collect())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        kind: &'static str,
        beta: f64,
        y0_limit: f64,
        monotonicity: &'a ergolab_core::bsde::MonotonicityReport,
        limit_diagnostics: &'a ergolab_core::bsde::Diagnostics,
    }
    ctx.json(SUMMARY_FILE, &Summary { kind: "bsde", beta, y0_limit: limit.y0, monotonicity: &rep, limit_diagnostics: &limit.diagnostics })?;
    let dg = &limit.diagnostics;
    let clip_tol = m.tolerances.as_ref().and_then(|t| t.clip_rate).unwrap_or(DEFAULT_CLIP_RATE);
    ctx.check("monotone_in_n", rep.monotone, format!("max violation {:.3e}, tolerance {:.1e}", rep.max_violation, rep.tolerance));
    ctx.check("k_nondecreasing", rep.k_monotone, "every reconstructed K path");
    ctx.check("y_bound", dg.y_abs_max <= dg.y_bound, format!("max |Y| {:.4} vs M_ell/beta {:.4}", dg.y_abs_max, dg.y_bound));
    let worst_clip = rep.entries.iter().map(|e| e.clip_rate).fold(dg.clip_rate(), f64::max);
    ctx.check("clip_rate", worst_clip < clip_tol, format!("{worst_clip:.2e}"));
    let z_ok = dg.z_sup <= dg.z_bound + 3.0 * dg.z_regression_se;
    ctx.check("z_bound", z_ok, format!("sup|Z| {:.4} vs {:.4} + 3 SE", dg.z_sup, dg.z_bound));
    Ok(())
}

fn grid_states(model: &ModelInstance, xs: &[f64]) -> Vec<Vec<f64>> {
    xs.iter()
        .map(|v| {
            let mut x = vec![0.0; model.n_modes()];
            x[0] = *v;
            x
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: String,
    pub lambda: f64,
    /// Largest affine-fit residual plus the extrapolation step from the
    /// smallest discount.
    pub lambda_budget: f64,
    pub x_grid: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_v0: Vec<f64>,
    pub slope: f64,
    pub diagnostics: ergolab_core::ergodic::ExtrapolationDiagnostics,
}

fn sweep(m: &Manifest, model: &ModelInstance, ctx: &mut Ctx) -> Result<(), CliError> {
    let d = m.discretization.as_ref().unwrap();
    let p = m.problem.as_ref().unwrap();
    check_dims(model, &p.x0, &p.a0)?;
    let cfg = bsde_config(d, ctx.seed);
    let betas = m.ladders.as_ref().unwrap().beta.clone().unwrap();
    let xs = p.x_grid.clone().unwrap();
    let states = grid_states(model, &xs);
    let est = ctx.stage("vanishing_discount", |_| Ok(vanishing_discount_sweep(model, &states, &p.a0, &betas, &cfg)?))?;
    let last = est.beta_ladder.last().unwrap();
    let budget = est.diagnostics.max_residual + (est.lambda - last.beta_v0).abs();
    ctx.csv(
        "beta_ladder.csv",
        &["beta", "v0", "beta_v0", "residual"],
        est.beta_ladder.iter().map(|e| vec![e.beta, e.v0, e.beta_v0, e.residual]).collect(),
    )?;
    ctx.csv("v_hat.csv", &["x", "v_hat"], xs.iter().zip(&est.v_hat).map(|(x, v)| vec![*x, *v]).collect())?;
    let summary = SweepSummary {
        kind: Kind::ErgodicSweep.as_str().into(),
        lambda: est.lambda,
        lambda_budget: budget,
        x_grid: xs.clone(),
        v_hat: est.v_hat.clone(),
        beta: est.beta_ladder.iter().map(|e| e.beta).collect(),
        beta_v0: est.beta_ladder.iter().map(|e| e.beta_v0).collect(),
        slope: est.diagnostics.slope,
        diagnostics: est.diagnostics.clone(),
    };
    ctx.json(SUMMARY_FILE, &summary)?;
    let dg = &est.diagnostics;
    ctx.check("beta_cauchy", dg.cauchy_ok, format!("{:?}", dg.cauchy));
    ctx.check("lambda_bounded", dg.lambda_bounded, format!("lambda {:.6}", est.lambda));
    ctx.check("v_hat_growth", dg.growth_ok, format!("{:.4} vs L_ell/mu {:.4}", dg.growth, dg.growth_bound));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTimeSummary {
    pub kind: String,
    pub lambda: f64,
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub v_over_t: Vec<f64>,
    pub residual: Vec<f64>,
    pub residual_constant: Vec<f64>,
    pub bounded: bool,
}

fn long_time(m: &Manifest, model: &ModelInstance, ctx: &mut Ctx) -> Result<(), CliError> {
    let d = m.discretization.as_ref().unwrap();
    let p = m.problem.as_ref().unwrap();
    check_dims(model, &p.x0, &p.a0)?;
    let cfg = bsde_config(d, ctx.seed);
    let ts = m.ladders.as_ref().unwrap().t.clone().unwrap();
    let t = p.terminal.as_ref().unwrap();
    let phi = TerminalCost::from_catalog(&t.name, &t.params)?;
    let rep = ctx.stage("long_time", |_| Ok(long_time_sweep(model, &p.x0, &p.a0, &ts, &phi, &cfg, None)?))?;
    ctx.csv(
        "t_ladder.csv",
        &["t", "v", "v_over_t", "residual"],
        rep.entries.iter().map(|e| vec![e.t, e.v, e.v_over_t, e.residual]).collect(),
    )?;
    let summary = LongTimeSummary {
        kind: Kind::LongTime.as_str().into(),
        lambda: rep.lambda,
        t: ts.clone(),
        v: rep.entries.iter().map(|e| e.v).collect(),
        v_over_t: rep.entries.iter().map(|e| e.v_over_t).collect(),
        residual: rep.entries.iter().map(|e| e.residual).collect(),
        residual_constant: rep.residual_constant.clone(),
        bounded: rep.bounded,
    };
    ctx.json(SUMMARY_FILE, &summary)?;
    ctx.check("residual_bounded", rep.bounded, format!("{:?}", rep.residual_constant));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub kind: String,
    pub beta: f64,
    pub x_grid: Vec<f64>,
    pub bsde: Vec<f64>,
    pub oracle: Vec<f64>,
    pub relative_error: Vec<f64>,
    pub max_relative_error: f64,
    pub oracle_lambda: f64,
    pub oracle_v_hat: Vec<f64>,
}

fn oracle_compare(m: &Manifest, model: &ModelInstance, ctx: &mut Ctx) -> Result<(), CliError> {
    if model.n_modes() != 1 || model.m_controls() != 1 {
        return Err(CliError::Model("oracle comparison needs a model with one state and one control mode".into()));
    }
    let d = m.discretization.as_ref().unwrap();
    let p = m.problem.as_ref().unwrap();
    check_dims(model, &p.x0, &p.a0)?;
    let o = p.oracle.as_ref().unwrap();
    let tol = m.tolerances.as_ref().unwrap().relative.unwrap();
    let beta = p.beta.unwrap();
    let xs = p.x_grid.clone().unwrap();
    let cfg = bsde_config(d, ctx.seed);
    let sol = ctx.stage("bsde", |_| {
        let grid = discounted_grid(model, beta, &cfg)?;
        Ok(solve(
            &BsdeProblem {
                model,
                x0: &p.x0,
                a0: &p.a0,
                beta,
                penalization: Penalization::Infinite,
                terminal: Terminal::Zero,
                grid,
                forced_k_rate: 0.0,
            },
            &cfg,
        )?)
    })?;
    let bsde_vals = xs.iter().map(|x| sol.value_at(model, &[*x], &p.a0)).collect::<Result<Vec<f64>, _>>()?;
    let om = Oracle1DModel::from_model(model, uniform_controls(o.u_min, o.u_max, o.n_u), o.x_min, o.x_max, o.n_x)?;
    let (disc, erg) = ctx.stage("oracle", |_| Ok((hjb_discounted(&om, beta)?, hjb_ergodic(&om)?)))?;
    let oracle_vals: Vec<f64> = xs.iter().map(|x| disc.at(*x)).collect();
    let rel: Vec<f64> = bsde_vals.iter().zip(&oracle_vals).map(|(b, o)| (b - o).abs() / o.abs().max(1e-12)).collect();
    let max_rel = rel.iter().copied().fold(0.0, f64::max);
    ctx.csv(
        "oracle_compare.csv",
        &["x", "bsde", "oracle", "relative_error"],
        (0..xs.len()).map(|i| vec![xs[i], bsde_vals[i], oracle_vals[i], rel[i]]).collect(),
    )?;
    let summary = OracleSummary {
        kind: Kind::OracleCompare.as_str().into(),
        beta,
        x_grid: xs.clone(),
        bsde: bsde_vals,
        oracle: oracle_vals,
        relative_error: rel,
        max_relative_error: max_rel,
        oracle_lambda: erg.lambda,
        oracle_v_hat: xs.iter().map(|x| erg.at(*x)).collect(),
    };
    ctx.json(SUMMARY_FILE, &summary)?;
    ctx.check("oracle_discounted", max_rel <= tol, format!("max relative error {max_rel:.4} vs {tol}"));
    Ok(())
}

/// Loads the model document a manifest refers to.
pub fn manifest_model(path: &Path) -> Result<ModelDoc, CliError> {
    LoadedManifest::load(path)?.model_doc()
}
