//! Spectrally truncated problem instances and assumption auditing.
//!
//! The state space is the span of the first `n_modes` eigenvectors of `A`,
//! the control space the span of the first `m` randomization modes.

mod builders;
mod catalog;
mod validate;

pub use builders::{
    build_colored_model, build_desk_model, build_heat_model, hs_profile_sup, ColoredCost,
    ColoredDrift, HeatCost, HeatDrift, NoiseProfile,
};
pub use catalog::{DriftForm, FieldGrid, RunningCost, TerminalCost, TANH2_LIPSCHITZ};
pub use validate::{validate_assumptions, AssumptionCheck, ValidationReport};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Diagonal generator `A` given by its eigenvalues.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectralOperator {
    pub eigenvalues: Vec<f64>,
}

impl SpectralOperator {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Diagonal noise map `G` with its Hilbert–Schmidt profile constants.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseMap {
    pub gains: Vec<f64>,
    pub m_a: f64,
    pub gamma: f64,
}

impl NoiseMap {
    /// Operator norm of the diagonal map.
    pub fn norm(&self) -> f64 {
        self.gains.iter().fold(0.0f64, |m, g| m.max(crate::math::abs(*g)))
    }
}

/// Diagonal randomization operator `R`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RandomizationMap {
    pub weights: Vec<f64>,
    /// Declared bound on the trace `Σ r_j` of the untruncated operator.
    pub trace_limit: f64,
}

impl RandomizationMap {
    /// `r_j = 2^{-j}`, `j = 1..=m`, with trace limit 1.
    pub fn dyadic(m: usize) -> Self {
        let weights = (1..=m).map(|j| crate::math::powf(2.0, -(j as f64))).collect();
        RandomizationMap { weights, trace_limit: 1.0 }
    }

    pub fn m_modes(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone)]
pub struct DriftSpec {
    pub form: DriftForm,
    pub lipschitz_x: f64,
    pub growth: f64,
    pub dissipativity: f64,
}

#[derive(Debug, Clone)]
pub struct CostSpec {
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub m_ell: f64,
    pub l_ell: f64,
    pub c_phi: f64,
}

/// A full problem: `dX = (AX + F(X, u)) dt + G dW`, cost `ℓ`, terminal `φ`,
/// randomization `R`, plus the fractional parameters of the compactness
/// estimate.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub operator: SpectralOperator,
    pub noise: NoiseMap,
    pub drift: DriftSpec,
    pub cost: CostSpec,
    pub randomization: RandomizationMap,
    pub delta: f64,
    pub rho: f64,
    pub eta: Option<f64>,
}

impl ModelInstance {
    pub fn n_modes(&self) -> usize {
        self.operator.n_modes()
    }

    pub fn m_controls(&self) -> usize {
        self.randomization.m_modes()
    }

    /// Writes `F(x, a)` into `out`.
    #[inline]
    pub fn drift_into(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        self.drift.form.eval(x, a, out)
    }

    #[inline]
    pub fn running(&self, x: &[f64], a: &[f64]) -> f64 {
        self.cost.running.eval(x, a)
    }

    #[inline]
    pub fn terminal(&self, x: &[f64]) -> f64 {
        self.cost.terminal.eval(x)
    }

    /// Default `ρ = (1/2 - γ)/2` for the compactness diagnostic.
    pub fn default_rho(gamma: f64) -> f64 {
        (0.5 - gamma) / 2.0
    }

    /// Structural checks: consistent dimensions and finite constants.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.n_modes();
        if n == 0 {
            return Err(Error::InvalidModel("no state modes".into()));
        }
        if self.noise.gains.len() != n {
            return Err(Error::Dimension {
                what: "noise gains",
                expected: n,
                got: self.noise.gains.len(),
            });
        }
        if self.m_controls() == 0 {
            return Err(Error::InvalidModel("no control modes".into()));
        }
        let constants = [
            ("mu", self.drift.dissipativity),
            ("L_F", self.drift.lipschitz_x),
            ("C_F", self.drift.growth),
            ("M_ell", self.cost.m_ell),
            ("L_ell", self.cost.l_ell),
            ("C_phi", self.cost.c_phi),
            ("M_A", self.noise.m_a),
        ];
        for (name, v) in constants {
            if !v.is_finite() {
                return Err(Error::InvalidModel(format!("{name} is not finite")));
            }
        }
        if let Some(dim) = self.drift.form.state_dim() {
            if dim != n {
                return Err(Error::Dimension { what: "drift field grid", expected: n, got: dim });
            }
        }
        Ok(())
    }
}
