//! Consolidation of several run records into plot-ready tables and one
//! summary with the cross-estimator consistency check.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;
use crate::io::fmt;
use crate::manifest::Kind;
use crate::run::{Ctx, LongTimeSummary, OracleSummary, RunRecord, SweepSummary, SUMMARY_FILE};

fn load_summary<T: serde::de::DeserializeOwned>(record_path: &Path) -> Result<T, CliError> {
    let path = record_path.parent().unwrap_or(Path::new(".")).join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct ReportSummary {
    kind: &'static str,
    records: Vec<String>,
    lambda_vanishing_discount: Option<f64>,
    lambda_budget: Option<f64>,
    lambda_long_time: Option<f64>,
    lambda_oracle: Option<f64>,
    lambda_difference: Option<f64>,
    lambda_consistency_tol: Option<f64>,
    oracle_max_relative_error: Option<f64>,
}

/// Merges the records. Records of different models are refused.
pub fn run(ctx: &mut Ctx, records: &[PathBuf], consistency_tol: Option<f64>) -> Result<(), CliError> {
    if records.is_empty() {
        return Err(CliError::Manifest("report needs at least one run record".into()));
    }
    let loaded: Vec<RunRecord> = records.iter().map(|p| RunRecord::load(p)).collect::<Result<_, _>>()?;
    let model = loaded[0].model_sha256.clone();
    if let Some(r) = loaded.iter().find(|r| r.model_sha256 != model) {
        return Err(CliError::Manifest(format!(
            "records come from different models ({} vs {})",
            model.as_deref().unwrap_or("none"),
            r.model_sha256.as_deref().unwrap_or("none")
        )));
    }
    ctx.model_sha256 = model;
    let mut sweep: Option<SweepSummary> = None;
    let mut long: Option<LongTimeSummary> = None;
    let mut oracle: Option<OracleSummary> = None;
    for (rec, path) in loaded.iter().zip(records) {
        match rec.kind {
            Kind::ErgodicSweep => sweep = Some(load_summary(path)?),
            Kind::LongTime => long = Some(load_summary(path)?),
            Kind::OracleCompare => oracle = Some(load_summary(path)?),
            _ => {}
        }
    }
    let mut beta_rows = Vec::new();
    if let Some(s) = &sweep {
        for (b, bv) in s.beta.iter().zip(&s.beta_v0) {
            beta_rows.push(vec![*b, *bv, s.lambda + s.slope * b]);
        }
    }
    ctx.csv("plot_beta_ladder.csv", &["beta", "beta_v0", "affine_fit"], beta_rows)?;
    let t_rows = long.as_ref().map(|l| l.t.iter().zip(&l.v_over_t).map(|(t, v)| vec![*t, *v]).collect()).unwrap_or_default();
    ctx.csv("plot_t_ladder.csv", &["t", "v_over_t"], t_rows)?;
    let mut overlay = Vec::new();
    if let Some(s) = &sweep {
        for (i, x) in s.x_grid.iter().enumerate() {
            let o = oracle.as_ref().and_then(|o| o.x_grid.iter().position(|ox| ox == x).map(|j| o.oracle_v_hat[j]));
            overlay.push(vec![fmt(*x), fmt(s.v_hat[i]), o.map(fmt).unwrap_or_default()]);
        }
    }
    let head: Vec<String> = ["x", "v_hat", "oracle_v_hat"].iter().map(|s| s.to_string()).collect();
    ctx.csv_strings("plot_v_hat.csv", &head, &overlay)?;
    let lambda_difference = match (&sweep, &long) {
        (Some(s), Some(l)) => Some((s.lambda - l.lambda).abs()),
        _ => None,
    };
    let summary = ReportSummary {
        kind: "report",
        records: loaded.iter().map(|r| r.manifest_sha256.clone()).collect(),
        lambda_vanishing_discount: sweep.as_ref().map(|s| s.lambda),
        lambda_budget: sweep.as_ref().map(|s| s.lambda_budget),
        lambda_long_time: long.as_ref().map(|l| l.lambda),
        lambda_oracle: oracle.as_ref().map(|o| o.oracle_lambda),
        lambda_difference,
        lambda_consistency_tol: consistency_tol,
        oracle_max_relative_error: oracle.as_ref().map(|o| o.max_relative_error),
    };
    ctx.json(SUMMARY_FILE, &summary)?;
    if let (Some(diff), Some(tol), Some(s)) = (lambda_difference, consistency_tol, &sweep) {
        let rel = diff / s.lambda.abs().max(1e-12);
        ctx.check("lambda_consistency", rel <= tol, format!("relative difference {rel:.4} vs {tol}"));
    }
    Ok(())
}
