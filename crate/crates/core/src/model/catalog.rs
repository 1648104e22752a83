//! Registered functional forms for drifts and costs, addressed by name and
//! a flat parameter list.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{abs, min_f, sin, sqrt, tanh, PI};

/// `sup_x |d/dx tanh²(x)| = 4 / (3√3)`.
pub const TANH2_LIPSCHITZ: f64 = 0.769_800_358_919_501;

type DriftFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
type CostFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Discrete sine transform on `ξ_i = i/(M+1)`, `i = 1..=M`, with weights
/// `1/(M+1)`. The sampled eigenfunctions `√2 sin(kπξ)` are exactly
/// orthonormal for `k ≤ M`, so pointwise monotone nonlinearities keep their
/// dissipativity constant after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub n_modes: usize,
    pub m_controls: usize,
    pub nodes: usize,
    table: Vec<f64>,
}

impl FieldGrid {
    pub fn new(n_modes: usize, m_controls: usize) -> Self {
        let k_max = n_modes.max(m_controls);
        let nodes = 4 * k_max + 4;
        let mut table = vec![0.0; k_max * nodes];
        for k in 0..k_max {
            for i in 0..nodes {
                let xi = (i + 1) as f64 / (nodes + 1) as f64;
                table[k * nodes + i] = sqrt(2.0) * sin((k + 1) as f64 * PI * xi);
            }
        }
        FieldGrid { n_modes, m_controls, nodes, table }
    }

    pub fn weight(&self) -> f64 {
        1.0 / (self.nodes + 1) as f64
    }

    /// Pointwise values of `Σ_k c_k e_k` at the nodes.
    pub fn synthesize(&self, coeffs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, c) in coeffs.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let row = &self.table[k * self.nodes..(k + 1) * self.nodes];
            for (o, e) in out.iter_mut().zip(row) {
                *o += c * e;
            }
        }
    }

    /// Discrete projection onto the first `out.len()` modes.
    pub fn project(&self, values: &[f64], out: &mut [f64]) {
        let w = self.weight();
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.table[k * self.nodes..(k + 1) * self.nodes];
            *o = w * row.iter().zip(values).map(|(e, v)| e * v).sum::<f64>();
        }
    }
}

/// Drift `F(x, a)` in mode coordinates.
#[derive(Clone)]
pub enum DriftForm {
    Zero,
    /// `F(x) = -κ x`.
    Linear { kappa: f64 },
    /// `F_k = -κ x_k + gain · tanh(a_k)` for `k < min(n, m)`, `-κ x_k` otherwise.
    TanhControl { kappa: f64, gain: f64 },
    /// Spectral projection of `f(x, u) = -κx + s tanh(x) + c sin(u) + d u`
    /// applied pointwise in space.
    Field { kappa: f64, s_tanh: f64, c_sin: f64, c_lin: f64, grid: FieldGrid },
    Custom(Arc<DriftFn>),
}

impl core::fmt::Debug for DriftForm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DriftForm::Custom(_) => f.write_str("Custom(..)"),
            other => write!(f, "{}{:?}", other.name(), other.params()),
        }
    }
}

impl DriftForm {
    pub fn from_catalog(name: &str, params: &[f64], n_modes: usize, m_controls: usize) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("drift '{name}' takes {k} parameters, got {}", params.len())))
            }
        };
        match name {
            "zero" => need(0).map(|_| DriftForm::Zero),
            "linear" => need(1).map(|_| DriftForm::Linear { kappa: params[0] }),
            "tanh_control" => need(2).map(|_| DriftForm::TanhControl { kappa: params[0], gain: params[1] }),
            "field" => need(4).map(|_| DriftForm::Field {
                kappa: params[0],
                s_tanh: params[1],
                c_sin: params[2],
                c_lin: params[3],
                grid: FieldGrid::new(n_modes, m_controls),
            }),
            other => Err(Error::InvalidModel(format!("unknown drift form '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DriftForm::Zero => "zero",
            DriftForm::Linear { .. } => "linear",
            DriftForm::TanhControl { .. } => "tanh_control",
            DriftForm::Field { .. } => "field",
            DriftForm::Custom(_) => "custom",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            DriftForm::Zero | DriftForm::Custom(_) => Vec::new(),
            DriftForm::Linear { kappa } => vec![*kappa],
            DriftForm::TanhControl { kappa, gain } => vec![*kappa, *gain],
            DriftForm::Field { kappa, s_tanh, c_sin, c_lin, .. } => vec![*kappa, *s_tanh, *c_sin, *c_lin],
        }
    }

    pub(crate) fn state_dim(&self) -> Option<usize> {
        match self {
            DriftForm::Field { grid, .. } => Some(grid.n_modes),
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        match self {
            DriftForm::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            DriftForm::Linear { kappa } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -kappa * xi;
                }
            }
            DriftForm::TanhControl { kappa, gain } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = -kappa * x[k];
                    if k < a.len() {
                        *o += gain * tanh(a[k]);
                    }
                }
            }
            DriftForm::Field { kappa, s_tanh, c_sin, c_lin, grid } => {
                let mut xs = [0.0; 64];
                let mut us = [0.0; 64];
                let mut buf_x;
                let mut buf_u;
                let (xv, uv): (&mut [f64], &mut [f64]) = if grid.nodes <= 64 {
                    (&mut xs[..grid.nodes], &mut us[..grid.nodes])
                } else {
                    buf_x = vec![0.0; grid.nodes];
                    buf_u = vec![0.0; grid.nodes];
                    (&mut buf_x[..], &mut buf_u[..])
                };
                grid.synthesize(x, xv);
                grid.synthesize(a, uv);
                for (xi, ui) in xv.iter_mut().zip(uv.iter()) {
                    let v = *xi;
                    *xi = -kappa * v + s_tanh * tanh(v) + c_sin * sin(*ui) + c_lin * ui;
                }
                grid.project(xv, out);
            }
            DriftForm::Custom(f) => f(x, a, out),
        }
    }
}

/// Running cost `ℓ(x, a)`.
#[derive(Clone)]
pub enum RunningCost {
    Constant { c: f64 },
    /// `wx tanh²(x_1) + wa tanh²(a_1)`.
    Tanh2 { wx: f64, wa: f64 },
    /// `wx tanh²(x_1) + wa min(a_1², 1)`.
    Tanh2MinSq { wx: f64, wa: f64 },
    /// `wx ∫ tanh²(x(ξ)) dξ + wa tanh²(a_1)` on a field grid.
    FieldTanh2 { wx: f64, wa: f64, grid: FieldGrid },
    Custom(Arc<CostFn>),
}

impl core::fmt::Debug for RunningCost {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RunningCost::Custom(_) => f.write_str("Custom(..)"),
            other => write!(f, "{}{:?}", other.name(), other.params()),
        }
    }
}

impl RunningCost {
    pub fn from_catalog(name: &str, params: &[f64], n_modes: usize, m_controls: usize) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("cost '{name}' takes {k} parameters, got {}", params.len())))
            }
        };
        match name {
            "constant" => need(1).map(|_| RunningCost::Constant { c: params[0] }),
            "tanh2" => need(2).map(|_| RunningCost::Tanh2 { wx: params[0], wa: params[1] }),
            "tanh2_min_sq" => need(2).map(|_| RunningCost::Tanh2MinSq { wx: params[0], wa: params[1] }),
            "field_tanh2" => need(2).map(|_| RunningCost::FieldTanh2 {
                wx: params[0],
                wa: params[1],
                grid: FieldGrid::new(n_modes, m_controls),
            }),
            other => Err(Error::InvalidModel(format!("unknown running cost '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunningCost::Constant { .. } => "constant",
            RunningCost::Tanh2 { .. } => "tanh2",
            RunningCost::Tanh2MinSq { .. } => "tanh2_min_sq",
            RunningCost::FieldTanh2 { .. } => "field_tanh2",
            RunningCost::Custom(_) => "custom",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            RunningCost::Constant { c } => vec![*c],
            RunningCost::Tanh2 { wx, wa }
            | RunningCost::Tanh2MinSq { wx, wa }
            | RunningCost::FieldTanh2 { wx, wa, .. } => vec![*wx, *wa],
            RunningCost::Custom(_) => Vec::new(),
        }
    }

    /// Whether the cost ignores the control argument.
    pub fn is_state_only(&self) -> bool {
        match self {
            RunningCost::Constant { .. } => true,
            RunningCost::Tanh2 { wa, .. }
            | RunningCost::Tanh2MinSq { wa, .. }
            | RunningCost::FieldTanh2 { wa, .. } => *wa == 0.0,
            RunningCost::Custom(_) => false,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], a: &[f64]) -> f64 {
        match self {
            RunningCost::Constant { c } => *c,
            RunningCost::Tanh2 { wx, wa } => {
                let tx = tanh(x[0]);
                let ta = if *wa != 0.0 { tanh(a[0]) } else { 0.0 };
                wx * tx * tx + wa * ta * ta
            }
            RunningCost::Tanh2MinSq { wx, wa } => {
                let tx = tanh(x[0]);
                wx * tx * tx + wa * min_f(a[0] * a[0], 1.0)
            }
            RunningCost::FieldTanh2 { wx, wa, grid } => {
                let mut vals = vec![0.0; grid.nodes];
                grid.synthesize(x, &mut vals);
                let s: f64 = vals.iter().map(|v| {
                    let t = tanh(*v);
                    t * t
                }).sum();
                let ta = tanh(a[0]);
                wx * grid.weight() * s + wa * ta * ta
            }
            RunningCost::Custom(f) => f(x, a),
        }
    }
}

/// Terminal cost `φ(x)`.
#[derive(Clone)]
pub enum TerminalCost {
    Zero,
    Constant { c: f64 },
    /// `c |x|`.
    AbsNorm { c: f64 },
    /// `c x_1`.
    LinearFirst { c: f64 },
    Custom(Arc<TerminalFn>),
}

impl core::fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TerminalCost::Custom(_) => f.write_str("Custom(..)"),
            other => write!(f, "{}{:?}", other.name(), other.params()),
        }
    }
}

impl TerminalCost {
    pub fn from_catalog(name: &str, params: &[f64]) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("terminal '{name}' takes {k} parameters, got {}", params.len())))
            }
        };
        match name {
            "zero" => need(0).map(|_| TerminalCost::Zero),
            "constant" => need(1).map(|_| TerminalCost::Constant { c: params[0] }),
            "abs_norm" => need(1).map(|_| TerminalCost::AbsNorm { c: params[0] }),
            "linear_first" => need(1).map(|_| TerminalCost::LinearFirst { c: params[0] }),
            other => Err(Error::InvalidModel(format!("unknown terminal cost '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TerminalCost::Zero => "zero",
            TerminalCost::Constant { .. } => "constant",
            TerminalCost::AbsNorm { .. } => "abs_norm",
            TerminalCost::LinearFirst { .. } => "linear_first",
            TerminalCost::Custom(_) => "custom",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            TerminalCost::Zero | TerminalCost::Custom(_) => Vec::new(),
            TerminalCost::Constant { c } | TerminalCost::AbsNorm { c } | TerminalCost::LinearFirst { c } => vec![*c],
        }
    }

    /// Smallest `C_φ` with `|φ(x)| ≤ C_φ (1 + |x|)` for the catalog forms.
    pub fn growth_constant(&self) -> Option<f64> {
        match self {
            TerminalCost::Zero => Some(0.0),
            TerminalCost::Constant { c } | TerminalCost::AbsNorm { c } | TerminalCost::LinearFirst { c } => Some(abs(*c)),
            TerminalCost::Custom(_) => None,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
            TerminalCost::Constant { c } => *c,
            TerminalCost::AbsNorm { c } => c * crate::math::norm(x),
            TerminalCost::LinearFirst { c } => c * x[0],
            TerminalCost::Custom(f) => f(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_grid_is_discretely_orthonormal() {
        let g = FieldGrid::new(5, 1);
        for k in 0..5 {
            for l in 0..5 {
                let mut ek = vec![0.0; 5];
                ek[k] = 1.0;
                let mut vals = vec![0.0; g.nodes];
                g.synthesize(&ek, &mut vals);
                let mut back = vec![0.0; 5];
                g.project(&vals, &mut back);
                let want = if k == l { 1.0 } else { 0.0 };
                assert!((back[l] - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn catalog_round_trips_names_and_params() {
        let d = DriftForm::from_catalog("tanh_control", &[0.5, 1.0], 1, 1).unwrap();
        assert_eq!(d.name(), "tanh_control");
        assert_eq!(d.params(), vec![0.5, 1.0]);
        assert!(DriftForm::from_catalog("linear", &[], 1, 1).is_err());
        assert!(RunningCost::from_catalog("nope", &[], 1, 1).is_err());
    }

    #[test]
    fn tanh2_lipschitz_constant() {
        let x = 0.5 * libm::log(2.0 + libm::sqrt(3.0)) ;
        // maximiser of 2 tanh sech² solves tanh² = 1/3
        let t = tanh(x);
        let d = 2.0 * t * (1.0 - t * t);
        assert!((t * t - 1.0 / 3.0).abs() < 1e-12);
        assert!((d - TANH2_LIPSCHITZ).abs() < 1e-12);
    }
}
