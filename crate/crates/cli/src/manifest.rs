//! TOML experiment manifests. Unknown keys are rejected, ladders and seeds
//! have no defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::model_doc::{FormDoc, ModelDoc};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Validate,
    Simulate,
    Bsde,
    ErgodicSweep,
    LongTime,
    OracleCompare,
    Report,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Validate => "validate",
            Kind::Simulate => "simulate",
            Kind::Bsde => "bsde",
            Kind::ErgodicSweep => "ergodic-sweep",
            Kind::LongTime => "long-time",
            Kind::OracleCompare => "oracle-compare",
            Kind::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    /// Path of a model document, relative to the manifest.
    pub path: Option<PathBuf>,
    pub inline: Option<ModelDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub h: f64,
    pub n_paths: usize,
    pub basis_degree: Option<usize>,
    /// Horizon of forward simulations.
    pub t_end: Option<f64>,
    pub channel_nodes: Option<usize>,
    pub x_spread: Option<f64>,
    pub a_spread: Option<f64>,
    pub tail_tol: Option<f64>,
    pub validation_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladders {
    pub beta: Option<Vec<f64>>,
    pub t: Option<Vec<f64>>,
    pub n: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDoc {
    /// `zero`, `constant` (params = control vector) or `linear_feedback`
    /// (`u_1 = -k x_1`, params = [k]).
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDoc {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub n_u: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub x0: Vec<f64>,
    pub a0: Vec<f64>,
    pub beta: Option<f64>,
    /// First-coordinate values of the state grid; other coordinates are 0.
    pub x_grid: Option<Vec<f64>>,
    pub terminal: Option<FormDoc>,
    pub policy: Option<PolicyDoc>,
    pub oracle: Option<OracleDoc>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative error against the oracle.
    pub relative: Option<f64>,
    /// Agreement of two estimators of the ergodic constant, relative.
    pub lambda_consistency: Option<f64>,
    pub clip_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: Kind,
    pub seed: u64,
    /// Output directory, relative to the manifest.
    pub out: PathBuf,
    pub model: Option<ModelRef>,
    pub discretization: Option<Discretization>,
    pub ladders: Option<Ladders>,
    pub problem: Option<Problem>,
    pub tolerances: Option<Tolerances>,
    /// Run records consumed by `report`.
    pub records: Option<Vec<PathBuf>>,
}

/// A parsed manifest with its location and content hash.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub dir: PathBuf,
    pub sha256: String,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Manifest(msg.into())
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| bad("manifest is not UTF-8"))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        manifest.check()?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedManifest { manifest, dir, sha256: hex::encode(Sha256::digest(&bytes)) })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn model_doc(&self) -> Result<ModelDoc, CliError> {
        let r = self.manifest.model.as_ref().ok_or_else(|| bad("[model] is required"))?;
        match (&r.path, &r.inline) {
            (Some(p), None) => ModelDoc::load(&self.resolve(p)),
            (None, Some(doc)) => Ok(doc.clone()),
            _ => Err(bad("[model] needs exactly one of `path` or `inline`")),
        }
    }
}

fn strictly_decreasing_positive(v: &[f64]) -> bool {
    v.iter().all(|b| *b > 0.0 && b.is_finite()) && v.windows(2).all(|w| w[1] < w[0])
}

fn strictly_increasing_positive(v: &[f64]) -> bool {
    v.iter().all(|b| *b > 0.0 && b.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl Manifest {
    /// Structural checks that do not need the model.
    pub fn check(&self) -> Result<(), CliError> {
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("version {} is not supported (expected {MANIFEST_VERSION})", self.version)));
        }
        if let Some(l) = &self.ladders {
            if let Some(b) = &l.beta {
                if b.is_empty() || !strictly_decreasing_positive(b) {
                    return Err(bad("ladders.beta must be nonempty, positive and strictly decreasing"));
                }
            }
            if let Some(t) = &l.t {
                if t.is_empty() || !strictly_increasing_positive(t) {
                    return Err(bad("ladders.t must be nonempty, positive and strictly increasing"));
                }
            }
            if let Some(n) = &l.n {
                if n.is_empty() || n[0] == 0 || n.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(bad("ladders.n must be nonempty, positive and strictly increasing"));
                }
            }
        }
        if let Some(t) = &self.tolerances {
            for (name, v) in [("relative", t.relative), ("lambda_consistency", t.lambda_consistency), ("clip_rate", t.clip_rate)] {
                if let Some(v) = v {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(bad(format!("tolerances.{name} must be strictly positive")));
                    }
                }
            }
        }
        if let Some(d) = &self.discretization {
            if !(d.h > 0.0) || d.n_paths == 0 {
                return Err(bad("discretization needs h > 0 and n_paths > 0"));
            }
        }
        let need = |ok: bool, what: &str| -> Result<(), CliError> {
            if ok {
                Ok(())
            } else {
                Err(bad(format!("kind = \"{}\" requires {what}", self.kind.as_str())))
            }
        };
        let ladders = self.ladders.clone().unwrap_or_default();
        let problem = self.problem.as_ref();
        match self.kind {
            Kind::Validate => need(self.model.is_some(), "[model]"),
            Kind::Report => need(self.records.as_ref().is_some_and(|r| !r.is_empty()), "a nonempty `records` list"),
            Kind::Simulate => {
                need(self.model.is_some() && self.discretization.is_some() && problem.is_some(), "[model], [discretization] and [problem]")?;
                need(self.discretization.as_ref().unwrap().t_end.is_some(), "discretization.t_end")?;
                need(problem.unwrap().policy.is_some(), "problem.policy")
            }
            Kind::Bsde => {
                need(self.model.is_some() && self.discretization.is_some() && problem.is_some(), "[model], [discretization] and [problem]")?;
                need(ladders.n.is_some(), "ladders.n")?;
                need(problem.unwrap().beta.is_some(), "problem.beta")
            }
            Kind::ErgodicSweep => {
                need(self.model.is_some() && self.discretization.is_some() && problem.is_some(), "[model], [discretization] and [problem]")?;
                need(ladders.beta.is_some(), "ladders.beta")?;
                need(problem.unwrap().x_grid.is_some(), "problem.x_grid")
            }
            Kind::LongTime => {
                need(self.model.is_some() && self.discretization.is_some() && problem.is_some(), "[model], [discretization] and [problem]")?;
                need(ladders.t.as_ref().is_some_and(|t| t.len() >= 2), "ladders.t with two or more horizons")?;
                need(problem.unwrap().terminal.is_some(), "problem.terminal")
            }
            Kind::OracleCompare => {
                need(self.model.is_some() && self.discretization.is_some() && problem.is_some(), "[model], [discretization] and [problem]")?;
                let p = problem.unwrap();
                need(p.beta.is_some() && p.x_grid.is_some() && p.oracle.is_some(), "problem.beta, problem.x_grid and problem.oracle")?;
                need(self.tolerances.as_ref().is_some_and(|t| t.relative.is_some()), "tolerances.relative")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
version = 1
kind = "ergodic-sweep"
seed = 7
out = "runs/x"

[model]
path = "desk.json"

[discretization]
h = 0.05
n_paths = 100

[ladders]
beta = [0.5, 0.25]

[problem]
x0 = [0.0]
a0 = [0.0]
x_grid = [-1.0, 0.0, 1.0]
"#;

    #[test]
    fn parses_and_checks() {
        let m: Manifest = toml::from_str(BASE).unwrap();
        m.check().unwrap();
        assert_eq!(m.kind, Kind::ErgodicSweep);
    }

    #[test]
    fn unknown_keys_fail_with_the_key_name() {
        let text = BASE.replace("n_paths = 100", "n_paths = 100\nn_pathz = 3");
        let err = toml::from_str::<Manifest>(&text).unwrap_err().to_string();
        assert!(err.contains("n_pathz"), "{err}");
    }

    #[test]
    fn ladders_and_seed_are_mandatory() {
        let no_seed = BASE.replace("seed = 7\n", "");
        assert!(toml::from_str::<Manifest>(&no_seed).is_err());
        let unordered: Manifest = toml::from_str(&BASE.replace("[0.5, 0.25]", "[0.25, 0.5]")).unwrap();
        assert!(unordered.check().is_err());
        let missing: Manifest = toml::from_str(&BASE.replace("beta = [0.5, 0.25]", "")).unwrap();
        assert!(missing.check().is_err());
    }
}
