use alloc::format;
use alloc::vec::Vec;

use super::catalog::{DriftForm, FieldGrid, RunningCost, TerminalCost, TANH2_LIPSCHITZ};
use super::validate::validate_assumptions;
use super::{CostSpec, DriftSpec, ModelInstance, NoiseMap, RandomizationMap, SpectralOperator};
use crate::error::{Error, Result};
use crate::math::{abs, exp, max_f, powf, sqrt, PI};

/// Pointwise drift `f(x, u) = -κx + s tanh(x) + c sin(u)` of the heat model,
/// with the control field spanned by `control_modes` sine modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatDrift {
    pub kappa: f64,
    pub s_tanh: f64,
    pub c_sin: f64,
    pub control_modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeatCost {
    /// `wx ∫ tanh²(x(ξ)) dξ + wa tanh²(a_1)`.
    FieldTanh2 { wx: f64, wa: f64 },
    /// `w ∫ x(ξ)² dξ`; unbounded, rejected by the builder.
    FieldQuadratic { w: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseProfile {
    /// `g_k = 1` for all modes.
    Identity,
    /// `g_k = 1` for the first `k` modes and 0 beyond.
    FirstModes(usize),
    Gains(Vec<f64>),
}

/// Modal drift of the colored-noise model: `F_k = -κ x_k + gain tanh(a_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredDrift {
    pub kappa: f64,
    pub gain: f64,
    pub control_modes: usize,
}

/// `wx tanh²(x_1) + wa tanh²(a_1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredCost {
    pub wx: f64,
    pub wa: f64,
}

/// `sup_{s ∈ (0,1)} s^γ (Σ_k g_k² e^{2λ_k s})^{1/2}` on a log grid of `s`.
/// Returns the supremum and its argument.
pub fn hs_profile_sup(eigenvalues: &[f64], gains: &[f64], gamma: f64) -> (f64, f64) {
    let mut best = (0.0, 1.0);
    let n_grid = 400;
    for i in 0..=n_grid {
        let s = powf(10.0, -9.0 + 9.0 * i as f64 / n_grid as f64) * (1.0 - 1e-12);
        let hs: f64 = eigenvalues
            .iter()
            .zip(gains)
            .map(|(l, g)| g * g * exp(2.0 * l * s))
            .sum();
        let v = powf(s, gamma) * sqrt(hs);
        if v > best.0 {
            best = (v, s);
        }
    }
    best
}

fn audit(model: ModelInstance) -> Result<ModelInstance> {
    model.check_shapes()?;
    let report = validate_assumptions(&model, 1000, 0x5eed);
    match report.first_failure() {
        None => Ok(model),
        Some(c) => Err(Error::InvalidModel(format!(
            "assumption {} fails: {} (margin {:e})",
            c.id, c.label, c.worst_margin
        ))),
    }
}

/// Stochastic heat equation on (0,1) with Dirichlet conditions, truncated to
/// `n_modes` sine modes; drift and cost are spectral projections of
/// pointwise functions.
pub fn build_heat_model(
    n_modes: usize,
    drift: HeatDrift,
    cost: HeatCost,
    noise_profile: NoiseProfile,
) -> Result<ModelInstance> {
    if n_modes == 0 {
        return Err(Error::InvalidArgument("n_modes must be positive".into()));
    }
    if drift.control_modes == 0 {
        return Err(Error::InvalidArgument("at least one control mode is required".into()));
    }
    let mu = drift.kappa - max_f(drift.s_tanh, 0.0);
    if !(mu > 0.0) {
        return Err(Error::InvalidModel(format!("drift is not strongly dissipative (mu = {mu})")));
    }
    let (wx, wa) = match cost {
        HeatCost::FieldTanh2 { wx, wa } => (wx, wa),
        HeatCost::FieldQuadratic { .. } => {
            return Err(Error::InvalidModel("running cost must be bounded".into()))
        }
    };
    let eigenvalues: Vec<f64> = (1..=n_modes).map(|k| -((k as f64) * PI).powi_f(2)).collect();
    let gain_of = |k: usize| -> f64 {
        match &noise_profile {
            NoiseProfile::Identity => 1.0,
            NoiseProfile::FirstModes(m) => {
                if k < *m {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseProfile::Gains(g) => g.get(k).copied().unwrap_or(0.0),
        }
    };
    if let NoiseProfile::Gains(g) = &noise_profile {
        if g.len() != n_modes {
            return Err(Error::Dimension { what: "noise gains", expected: n_modes, got: g.len() });
        }
    }
    let gains: Vec<f64> = (0..n_modes).map(gain_of).collect();
    let gamma = 0.25;
    // Reference truncation so the constant does not depend on n_modes.
    let n_ref = n_modes.max(512);
    let ref_eigs: Vec<f64> = (1..=n_ref).map(|k| -((k as f64) * PI).powi_f(2)).collect();
    let ref_gains: Vec<f64> = (0..n_ref)
        .map(|k| if k < n_modes { gains[k] } else if matches!(noise_profile, NoiseProfile::Identity) { 1.0 } else { 0.0 })
        .collect();
    let m_a = hs_profile_sup(&ref_eigs, &ref_gains, gamma).0 * (1.0 + 1e-9);
    let m = drift.control_modes;
    let grid = FieldGrid::new(n_modes, m);
    let model = ModelInstance {
        operator: SpectralOperator { eigenvalues },
        noise: NoiseMap { gains, m_a, gamma },
        drift: DriftSpec {
            form: DriftForm::Field {
                kappa: drift.kappa,
                s_tanh: drift.s_tanh,
                c_sin: drift.c_sin,
                c_lin: 0.0,
                grid: grid.clone(),
            },
            lipschitz_x: drift.kappa + abs(drift.s_tanh),
            growth: max_f(drift.kappa + abs(drift.s_tanh), abs(drift.c_sin)),
            dissipativity: mu,
        },
        cost: CostSpec {
            running: RunningCost::FieldTanh2 { wx, wa, grid },
            terminal: TerminalCost::Zero,
            m_ell: abs(wx) + abs(wa),
            l_ell: abs(wx) * TANH2_LIPSCHITZ,
            c_phi: 0.0,
        },
        randomization: RandomizationMap::dyadic(m),
        delta: 1.0,
        rho: ModelInstance::default_rho(gamma),
        eta: None,
    };
    audit(model)
}

/// Colored-noise model: `λ_k = -c k`, `G = (-A)^{-η}` with `η > 1/4`.
pub fn build_colored_model(
    n_modes: usize,
    drift: ColoredDrift,
    cost: ColoredCost,
    eta: f64,
    c: f64,
) -> Result<ModelInstance> {
    if !(eta > 0.25) {
        return Err(Error::InvalidModel(format!("colored exponent must exceed 1/4, got {eta}")));
    }
    if n_modes == 0 || drift.control_modes == 0 {
        return Err(Error::InvalidArgument("need at least one state and one control mode".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument("eigenvalue scale must be positive".into()));
    }
    if !(drift.kappa > 0.0) {
        return Err(Error::InvalidModel(format!("drift is not strongly dissipative (mu = {})", drift.kappa)));
    }
    let eigenvalues: Vec<f64> = (1..=n_modes).map(|k| -c * k as f64).collect();
    let gains: Vec<f64> = (1..=n_modes).map(|k| powf(c * k as f64, -eta)).collect();
    let gamma = max_f(0.5 - eta, 0.0);
    let m_a = hs_profile_sup(&eigenvalues, &gains, gamma).0 * (1.0 + 1e-9);
    let m = drift.control_modes;
    let active = n_modes.min(m) as f64;
    let model = ModelInstance {
        operator: SpectralOperator { eigenvalues },
        noise: NoiseMap { gains, m_a, gamma },
        drift: DriftSpec {
            form: DriftForm::TanhControl { kappa: drift.kappa, gain: drift.gain },
            lipschitz_x: drift.kappa,
            growth: max_f(drift.kappa, abs(drift.gain) * sqrt(active)),
            dissipativity: drift.kappa,
        },
        cost: CostSpec {
            running: RunningCost::Tanh2 { wx: cost.wx, wa: cost.wa },
            terminal: TerminalCost::Zero,
            m_ell: abs(cost.wx) + abs(cost.wa),
            l_ell: abs(cost.wx) * TANH2_LIPSCHITZ,
            c_phi: 0.0,
        },
        randomization: RandomizationMap::dyadic(m),
        delta: 1.0,
        rho: ModelInstance::default_rho(gamma),
        eta: Some(eta),
    };
    audit(model)
}

/// The 1-D desk model used against the oracle:
/// `dX = (-0.5 X + (-0.5 X + tanh u)) dt + 0.7 dW`, `ℓ = tanh²x + wa tanh²u`.
/// The linear part is split so that `A` keeps eigenvalue `-0.5` and `F`
/// carries dissipativity `μ = 0.5`.
pub fn build_desk_model(wa: f64) -> Result<ModelInstance> {
    let model = ModelInstance {
        operator: SpectralOperator { eigenvalues: alloc::vec![-0.5] },
        noise: NoiseMap { gains: alloc::vec![0.7], m_a: 0.7 * (1.0 + 1e-9), gamma: 0.0 },
        drift: DriftSpec {
            form: DriftForm::TanhControl { kappa: 0.5, gain: 1.0 },
            lipschitz_x: 0.5,
            growth: 1.0,
            dissipativity: 0.5,
        },
        cost: CostSpec {
            running: RunningCost::Tanh2 { wx: 1.0, wa },
            terminal: TerminalCost::Zero,
            m_ell: 1.0 + abs(wa),
            l_ell: TANH2_LIPSCHITZ,
            c_phi: 0.0,
        },
        randomization: RandomizationMap::dyadic(1),
        delta: 1.0,
        rho: ModelInstance::default_rho(0.0),
        eta: None,
    };
    audit(model)
}

trait PowiF {
    fn powi_f(self, n: i32) -> f64;
}

impl PowiF for f64 {
    fn powi_f(self, n: i32) -> f64 {
        powf(self, n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat(n: usize) -> Result<ModelInstance> {
        build_heat_model(
            n,
            HeatDrift { kappa: 2.0, s_tanh: 0.0, c_sin: 1.0, control_modes: 1 },
            HeatCost::FieldTanh2 { wx: 1.0, wa: 0.1 },
            NoiseProfile::Identity,
        )
    }

    #[test]
    fn heat_spectrum_is_dirichlet_laplacian() {
        let m = heat(2).unwrap();
        let e = &m.operator.eigenvalues;
        assert!((e[0] + PI * PI).abs() < 1e-12);
        assert!((e[1] + 4.0 * PI * PI).abs() < 1e-11);
        assert_eq!(m.drift.dissipativity, 2.0);
    }

    #[test]
    fn heat_rejects_bad_inputs() {
        let bad_mu = build_heat_model(
            2,
            HeatDrift { kappa: 0.5, s_tanh: 1.0, c_sin: 1.0, control_modes: 1 },
            HeatCost::FieldTanh2 { wx: 1.0, wa: 0.0 },
            NoiseProfile::Identity,
        );
        assert!(bad_mu.is_err());
        let unbounded = build_heat_model(
            2,
            HeatDrift { kappa: 2.0, s_tanh: 0.0, c_sin: 1.0, control_modes: 1 },
            HeatCost::FieldQuadratic { w: 1.0 },
            NoiseProfile::Identity,
        );
        assert!(unbounded.is_err());
    }

    #[test]
    fn colored_gains_follow_power_law() {
        let m = build_colored_model(
            16,
            ColoredDrift { kappa: 1.0, gain: 1.0, control_modes: 2 },
            ColoredCost { wx: 1.0, wa: 0.1 },
            0.3,
            1.0,
        )
        .unwrap();
        assert!((m.noise.gains[0] - 1.0).abs() < 1e-15);
        assert!((m.noise.gains[15] - 16f64.powf(-0.3)).abs() < 1e-14);
        assert!(build_colored_model(
            4,
            ColoredDrift { kappa: 1.0, gain: 1.0, control_modes: 1 },
            ColoredCost { wx: 1.0, wa: 0.0 },
            0.2,
            1.0
        )
        .is_err());
    }

    #[test]
    fn desk_model_builds() {
        let m = build_desk_model(0.1).unwrap();
        assert_eq!(m.n_modes(), 1);
        assert_eq!(m.randomization.weights, alloc::vec![0.5]);
    }
}
