//! Versioned JSON document for a model instance. Drift, running and
//! terminal costs are named catalog entries with a flat parameter list.

use std::path::Path;

use ergolab_core::model::{
    CostSpec, DriftForm, DriftSpec, ModelInstance, NoiseMap, RandomizationMap, RunningCost, SpectralOperator,
    TerminalCost,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MODEL_DOC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormDoc {
    pub name: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub version: u32,
    pub eigenvalues: Vec<f64>,
    pub noise_gains: Vec<f64>,
    pub randomization_weights: Vec<f64>,
    /// Declared trace of the untruncated randomization operator.
    pub randomization_trace: f64,
    pub mu: f64,
    #[serde(rename = "M_ell")]
    pub m_ell: f64,
    #[serde(rename = "L_ell")]
    pub l_ell: f64,
    #[serde(rename = "C_F")]
    pub c_f: f64,
    #[serde(rename = "L_F")]
    pub l_f: f64,
    #[serde(rename = "M_A")]
    pub m_a: f64,
    #[serde(rename = "C_phi")]
    pub c_phi: f64,
    pub gamma: f64,
    pub rho: f64,
    pub delta: f64,
    pub eta: Option<f64>,
    pub drift: FormDoc,
    pub cost: FormDoc,
    pub terminal: FormDoc,
}

impl ModelDoc {
    pub fn from_model(model: &ModelInstance) -> Result<Self, CliError> {
        if matches!(model.drift.form, DriftForm::Custom(_))
            || matches!(model.cost.running, RunningCost::Custom(_))
            || matches!(model.cost.terminal, TerminalCost::Custom(_))
        {
            return Err(CliError::Model("custom closures have no document form".into()));
        }
        Ok(ModelDoc {
            version: MODEL_DOC_VERSION,
            eigenvalues: model.operator.eigenvalues.clone(),
            noise_gains: model.noise.gains.clone(),
            randomization_weights: model.randomization.weights.clone(),
            randomization_trace: model.randomization.trace_limit,
            mu: model.drift.dissipativity,
            m_ell: model.cost.m_ell,
            l_ell: model.cost.l_ell,
            c_f: model.drift.growth,
            l_f: model.drift.lipschitz_x,
            m_a: model.noise.m_a,
            c_phi: model.cost.c_phi,
            gamma: model.noise.gamma,
            rho: model.rho,
            delta: model.delta,
            eta: model.eta,
            drift: FormDoc { name: model.drift.form.name().into(), params: model.drift.form.params() },
            cost: FormDoc { name: model.cost.running.name().into(), params: model.cost.running.params() },
            terminal: FormDoc { name: model.cost.terminal.name().into(), params: model.cost.terminal.params() },
        })
    }

    pub fn to_model(&self) -> Result<ModelInstance, CliError> {
        if self.version != MODEL_DOC_VERSION {
            return Err(CliError::Model(format!(
                "model document version {} is not supported (expected {MODEL_DOC_VERSION})",
                self.version
            )));
        }
        let n = self.eigenvalues.len();
        let m = self.randomization_weights.len();
        let model = ModelInstance {
            operator: SpectralOperator { eigenvalues: self.eigenvalues.clone() },
            noise: NoiseMap { gains: self.noise_gains.clone(), m_a: self.m_a, gamma: self.gamma },
            drift: DriftSpec {
                form: DriftForm::from_catalog(&self.drift.name, &self.drift.params, n, m)?,
                lipschitz_x: self.l_f,
                growth: self.c_f,
                dissipativity: self.mu,
            },
            cost: CostSpec {
                running: RunningCost::from_catalog(&self.cost.name, &self.cost.params, n, m)?,
                terminal: TerminalCost::from_catalog(&self.terminal.name, &self.terminal.params)?,
                m_ell: self.m_ell,
                l_ell: self.l_ell,
                c_phi: self.c_phi,
            },
            randomization: RandomizationMap { weights: self.randomization_weights.clone(), trace_limit: self.randomization_trace },
            delta: self.delta,
            rho: self.rho,
            eta: self.eta,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model document serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
