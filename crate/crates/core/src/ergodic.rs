//! Extraction of the ergodic pair `(v̂, λ)` and checks of its defining
//! properties.
//!
//! * Vanishing discount: `v̂ ≈ v^β(x) - v^β(0)` at the smallest `β` of a
//!   ladder, and `λ` from an affine fit of `β v^β(0)` against `β`.
//! * Long time: `v^T(x0)` for a ladder of horizons from one backward pass
//!   over the longest horizon; `λ` is the least-squares slope.
//! * Ergodic cost of a given policy, and the drift of
//!   `M_t = v̂(X_t) + ∫ ℓ ds - λ t` along its paths.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bsde::{discounted_grid, solve, solve_finite_horizon, BsdeConfig, BsdeProblem, Penalization, Terminal};
use crate::error::{Error, Result};
use crate::math::{abs, fit_line, max_f, mean_se, norm};
use crate::model::{ModelInstance, TerminalCost};
use crate::par;
use crate::state_sim::{ControlPolicy, Driver, PathRun, TimeGrid};

/// One rung of the discount ladder.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BetaEntry {
    pub beta: f64,
    pub v0: f64,
    pub beta_v0: f64,
    /// `v^β(x) - v^β(0)` on the state grid.
    pub v_hat: Vec<f64>,
    /// Affine-fit residual of `β v^β(0)`.
    pub residual: f64,
}

/// One rung of the horizon ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TEntry {
    pub t: f64,
    pub v: f64,
    pub v_over_t: f64,
    /// `v^T(x0) - v̂(x0) - λ T`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExtrapolationDiagnostics {
    /// `c₁` in `β v^β(0) = λ + c₁ β`.
    pub slope: f64,
    pub max_residual: f64,
    /// `sup_x |v̂^{β_i}(x) - v̂^{β_{i+1}}(x)|` for consecutive rungs.
    pub cauchy: Vec<f64>,
    pub cauchy_tol: f64,
    pub cauchy_ok: bool,
    /// `max |v̂(x)| / |x|` over the nonzero grid points.
    pub growth: f64,
    /// `L_ℓ / μ`.
    pub growth_bound: f64,
    pub growth_ok: bool,
    pub lambda_bounded: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErgodicEstimate {
    pub lambda: f64,
    pub x_grid: Vec<Vec<f64>>,
    pub v_hat: Vec<f64>,
    pub beta_ladder: Vec<BetaEntry>,
    pub t_ladder: Vec<TEntry>,
    pub diagnostics: ExtrapolationDiagnostics,
}

impl ErgodicEstimate {
    pub fn failure(&self) -> Option<String> {
        let d = &self.diagnostics;
        if !d.cauchy_ok {
            Some(format!("discount ladder is not Cauchy: successive sup gaps {:?}", d.cauchy))
        } else if !d.lambda_bounded {
            Some(format!("|lambda| = {} exceeds the cost bound", abs(self.lambda)))
        } else if !d.growth_ok {
            Some(format!("v_hat grows like {} |x|, above {}", d.growth, d.growth_bound))
        } else {
            None
        }
    }

    /// Piecewise-linear `v̂` along the first coordinate of the grid.
    pub fn v_hat_at(&self, x: f64) -> f64 {
        let mut pts: Vec<(f64, f64)> = self.x_grid.iter().map(|p| p[0]).zip(self.v_hat.iter().copied()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        crate::math::interp(&xs, &ys, x)
    }
}

/// Relative slack on the growth bound of `v̂`.
const GROWTH_SLACK: f64 = 0.05;

/// Vanishing-discount sweep. Each rung is one `n = ∞` solve started from the
/// spread law around `0`; the values on `x_grid` are read from it.
pub fn vanishing_discount_sweep(
    model: &ModelInstance,
    x_grid: &[Vec<f64>],
    a0: &[f64],
    beta_ladder: &[f64],
    cfg: &BsdeConfig,
) -> Result<ErgodicEstimate> {
    let n = model.n_modes();
    if beta_ladder.is_empty() || beta_ladder.iter().any(|b| !(*b > 0.0)) || beta_ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("discount ladder must be positive and strictly decreasing".into()));
    }
    if x_grid.iter().any(|x| x.len() != n) {
        return Err(Error::Dimension { what: "state grid point", expected: n, got: x_grid.iter().map(|x| x.len()).find(|l| *l != n).unwrap_or(0) });
    }
    let i0 = x_grid
        .iter()
        .position(|x| x.iter().all(|v| *v == 0.0))
        .ok_or_else(|| Error::InvalidArgument("the state grid must contain 0".into()))?;
    let zero = vec![0.0; n];
    let mut entries = Vec::with_capacity(beta_ladder.len());
    for &beta in beta_ladder {
        let grid = discounted_grid(model, beta, cfg)?;
        let sol = solve(
            &BsdeProblem {
                model,
                x0: &zero,
                a0,
                beta,
                penalization: Penalization::Infinite,
                terminal: Terminal::Zero,
                grid,
                forced_k_rate: 0.0,
            },
            cfg,
        )?;
        let vals = x_grid.iter().map(|x| sol.value_at(model, x, a0)).collect::<Result<Vec<f64>>>()?;
        let v0 = vals[i0];
        entries.push(BetaEntry {
            beta,
            v0,
            beta_v0: beta * v0,
            v_hat: vals.iter().map(|v| v - v0).collect(),
            residual: 0.0,
        });
    }
    // affine fit through the two smallest discounts
    let k = entries.len();
    let (lambda, slope) = if k == 1 {
        (entries[0].beta_v0, 0.0)
    } else {
        let (a, b) = (&entries[k - 2], &entries[k - 1]);
        let c1 = (a.beta_v0 - b.beta_v0) / (a.beta - b.beta);
        (b.beta_v0 - c1 * b.beta, c1)
    };
    let mut max_residual: f64 = 0.0;
    for e in &mut entries {
        e.residual = e.beta_v0 - (lambda + slope * e.beta);
        max_residual = max_f(max_residual, abs(e.residual));
    }
    let cauchy: Vec<f64> = entries
        .windows(2)
        .map(|w| w[0].v_hat.iter().zip(&w[1].v_hat).fold(0.0, |m, (a, b)| max_f(m, abs(a - b))))
        .collect();
    let cauchy_tol = 1e-3 * model.cost.m_ell;
    let cauchy_ok = cauchy.windows(2).all(|w| w[1] <= w[0] + cauchy_tol);
    let v_hat = entries[k - 1].v_hat.clone();
    let growth = x_grid
        .iter()
        .zip(&v_hat)
        .filter(|(x, _)| norm(x) > 0.0)
        .fold(0.0, |m, (x, v)| max_f(m, abs(*v) / norm(x)));
    let growth_bound = model.cost.l_ell / model.drift.dissipativity;
    let diagnostics = ExtrapolationDiagnostics {
        slope,
        max_residual,
        cauchy,
        cauchy_tol,
        cauchy_ok,
        growth,
        growth_bound,
        growth_ok: growth <= growth_bound * (1.0 + GROWTH_SLACK),
        lambda_bounded: abs(lambda) <= model.cost.m_ell,
    };
    Ok(ErgodicEstimate { lambda, x_grid: x_grid.to_vec(), v_hat, beta_ladder: entries, t_ladder: Vec::new(), diagnostics })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LongTimeReport {
    pub entries: Vec<TEntry>,
    /// Least-squares slope of `v^T(x0)` against `T`.
    pub lambda: f64,
    pub intercept: f64,
    /// `max_{T' ≤ T} |r(T')| / (1 + |x0|)` along the ladder.
    pub residual_constant: Vec<f64>,
    pub residual_tol: f64,
    pub bounded: bool,
}

impl LongTimeReport {
    pub fn failure(&self) -> Option<String> {
        if self.bounded {
            None
        } else {
            Some(format!("long-time residual keeps growing: {:?}", self.residual_constant))
        }
    }
}

/// `v^T(x0)` for every horizon of the ladder from one `n = ∞` solve on
/// `[0, T_max]`: the value at node `N - T/h` has `T` to go. With an anchor
/// `(v̂(x0), λ)` the residual is measured against it, otherwise against the
/// fitted line.
#[allow(clippy::too_many_arguments)]
pub fn long_time_sweep(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    t_ladder: &[f64],
    phi: &TerminalCost,
    cfg: &BsdeConfig,
    anchor: Option<(f64, f64)>,
) -> Result<LongTimeReport> {
    if t_ladder.len() < 2 || t_ladder.iter().any(|t| !(*t > 0.0)) || t_ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizon ladder needs two or more increasing positive entries".into()));
    }
    let h = cfg.h;
    let t_max = *t_ladder.last().unwrap();
    let grid = TimeGrid::with_step(t_max, h)?;
    let n_steps = grid.n_steps;
    let mut nodes = Vec::with_capacity(t_ladder.len());
    for &t in t_ladder {
        let k = t / grid.h();
        if abs(k - libm::round(k)) > 1e-6 {
            return Err(Error::InvalidArgument(format!("horizon {t} is not a multiple of the step {}", grid.h())));
        }
        nodes.push(n_steps - libm::round(k) as usize);
    }
    let sol = solve_finite_horizon(model, x0, a0, 0.0, phi, Penalization::Infinite, &grid, cfg)?;
    let mut vs = Vec::with_capacity(nodes.len());
    for &node in &nodes {
        vs.push(if node == 0 { sol.y0 } else { sol.value_at_step(model, node, x0, a0)? });
    }
    let (intercept, lambda) = fit_line(t_ladder, &vs);
    let (v_hat0, lam_ref) = anchor.unwrap_or((intercept, lambda));
    let scale = 1.0 + norm(x0);
    let mut entries = Vec::with_capacity(vs.len());
    let mut residual_constant = Vec::with_capacity(vs.len());
    let mut run_max: f64 = 0.0;
    for (&t, &v) in t_ladder.iter().zip(&vs) {
        let r = v - v_hat0 - lam_ref * t;
        run_max = max_f(run_max, abs(r));
        residual_constant.push(run_max / scale);
        entries.push(TEntry { t, v, v_over_t: v / t, residual: r });
    }
    // bounded: the second half of the ladder adds nothing beyond tolerance
    let residual_tol = 0.05 * model.cost.m_ell;
    let half = entries.len() / 2;
    let early = residual_constant[half.max(1) - 1];
    let bounded = *residual_constant.last().unwrap() <= early + residual_tol;
    Ok(LongTimeReport { entries, lambda, intercept, residual_constant, residual_tol, bounded })
}

/// Time-averaged cost of a policy with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErgodicCost {
    pub mean: f64,
    pub se: f64,
    pub t_end: f64,
    /// Set when `T < 10/μ`.
    pub mixing_warning: bool,
}

/// `(1/T) E ∫_0^T ℓ(X_t, u_t) dt` by Monte Carlo with left-point sums.
pub fn ergodic_cost(
    model: &ModelInstance,
    policy: &ControlPolicy,
    x0: &[f64],
    t_end: f64,
    h: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ErgodicCost> {
    model.check_shapes()?;
    if x0.len() != model.n_modes() {
        return Err(Error::Dimension { what: "initial state", expected: model.n_modes(), got: x0.len() });
    }
    let grid = TimeGrid::with_step(t_end, h)?;
    let a0 = vec![0.0; model.m_controls()];
    let run = PathRun::new(model, &grid, seed, Driver::Ordinary(policy));
    let hh = grid.h();
    let t_len = grid.t_end - grid.t0;
    let chunks = par::map_chunks(n_paths, |range| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(range.len());
        for p in range {
            let mut acc = 0.0;
            run.run(p, 0, grid.n_steps, x0, &a0, None, |tr| acc += hh * model.running(tr.x, tr.u))?;
            out.push(acc / t_len);
        }
        Ok(out)
    });
    let mut vals = Vec::with_capacity(n_paths);
    for c in chunks {
        vals.extend(c?);
    }
    let (mean, se) = mean_se(&vals);
    Ok(ErgodicCost { mean, se, t_end: t_len, mixing_warning: t_len < 10.0 / model.drift.dissipativity })
}

/// Realized drift of `M` per unit time on one bin of `|x|`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DriftBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MartingaleResidual {
    /// Mean of `ΔM / h` over all steps and paths.
    pub mean_drift: f64,
    pub se: f64,
    /// Regression of `ΔM / h` on `|X_t|` by equal-count bins.
    pub bins: Vec<DriftBin>,
    pub max_abs_bin: f64,
    pub min_bin: f64,
}

impl MartingaleResidual {
    /// `|drift| ≤ tol` on every bin, up to three standard errors.
    pub fn is_martingale(&self, tol: f64) -> bool {
        self.bins.iter().all(|b| abs(b.mean) <= tol + 3.0 * b.se)
    }

    /// `drift ≥ -tol` on every bin, up to three standard errors.
    pub fn is_submartingale(&self, tol: f64) -> bool {
        self.bins.iter().all(|b| b.mean >= -tol - 3.0 * b.se)
    }
}

/// Drift of `M_t = v̂(X_t) + ∫_0^t ℓ ds - λ t` under a policy, from the
/// realized increments `ΔM = v̂(X_{t+h}) - v̂(X_t) + h ℓ(X_t, u_t) - λ h`.
/// The first `burn_in` time units are skipped.
#[allow(clippy::too_many_arguments)]
pub fn martingale_residual<V>(
    model: &ModelInstance,
    policy: &ControlPolicy,
    v_hat: V,
    lambda: f64,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    burn_in: f64,
    n_bins: usize,
) -> Result<MartingaleResidual>
where
    V: Fn(&[f64]) -> f64 + Sync,
{
    model.check_shapes()?;
    if x0.len() != model.n_modes() {
        return Err(Error::Dimension { what: "initial state", expected: model.n_modes(), got: x0.len() });
    }
    let a0 = vec![0.0; model.m_controls()];
    let run = PathRun::new(model, grid, seed, Driver::Ordinary(policy));
    let h = grid.h();
    let t_skip = grid.t0 + burn_in;
    let chunks = par::map_chunks(n_paths, |range| -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        for p in range {
            run.run(p, 0, grid.n_steps, x0, &a0, None, |tr| {
                if tr.t + 1e-12 < t_skip {
                    return;
                }
                let dm = v_hat(tr.x_next) - v_hat(tr.x) + h * model.running(tr.x, tr.u) - lambda * h;
                out.push((norm(tr.x), dm / h));
            })?;
        }
        Ok(out)
    });
    let mut samples = Vec::new();
    for c in chunks {
        samples.extend(c?);
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("burn-in covers the whole grid".into()));
    }
    let drifts: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (mean_drift, se) = mean_se(&drifts);
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nb = n_bins.max(1).min(samples.len());
    let mut bins = Vec::with_capacity(nb);
    for b in 0..nb {
        let lo = b * samples.len() / nb;
        let hi = (b + 1) * samples.len() / nb;
        let part: Vec<f64> = samples[lo..hi].iter().map(|s| s.1).collect();
        let (mean, se) = mean_se(&part);
        bins.push(DriftBin { lo: samples[lo].0, hi: samples[hi - 1].0, count: hi - lo, mean, se });
    }
    let max_abs_bin = bins.iter().fold(0.0, |m, b| max_f(m, abs(b.mean)));
    let min_bin = bins.iter().fold(f64::INFINITY, |m, b| m.min(b.mean));
    Ok(MartingaleResidual { mean_drift, se, bins, max_abs_bin, min_bin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::model::{build_desk_model, RunningCost};

    fn cfg() -> BsdeConfig {
        let mut c = BsdeConfig::new(0.05, 300, BasisSpec::polynomial(4, 0, 4), 5);
        c.a_spread = 0.0;
        c
    }

    #[test]
    fn constant_cost_ladder_is_exact() {
        let mut model = build_desk_model(0.1).unwrap();
        model.cost.running = RunningCost::Constant { c: 0.4 };
        model.cost.m_ell = 0.4;
        let xs: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().map(|x| vec![*x]).collect();
        let est = vanishing_discount_sweep(&model, &xs, &[0.0], &[0.5, 0.25], &cfg()).unwrap();
        for e in &est.beta_ladder {
            assert!(e.v_hat.iter().all(|v| v.abs() < 1e-9));
            assert!((e.beta_v0 - 0.4).abs() < 2e-3, "{}", e.beta_v0);
        }
        assert!((est.lambda - 0.4).abs() < 2e-3);
        assert!(est.failure().is_none());
    }

    #[test]
    fn ladder_must_decrease_and_contain_zero() {
        let model = build_desk_model(0.1).unwrap();
        let xs = vec![vec![1.0]];
        assert!(vanishing_discount_sweep(&model, &xs, &[0.0], &[0.5], &cfg()).is_err());
        let xs = vec![vec![0.0]];
        assert!(vanishing_discount_sweep(&model, &xs, &[0.0], &[0.25, 0.5], &cfg()).is_err());
    }

    #[test]
    fn constant_cost_long_time_is_linear() {
        let mut model = build_desk_model(0.1).unwrap();
        model.cost.running = RunningCost::Constant { c: 0.3 };
        let rep = long_time_sweep(&model, &[0.0], &[0.0], &[1.0, 2.0, 4.0], &TerminalCost::Zero, &cfg(), None).unwrap();
        for e in &rep.entries {
            assert!((e.v - 0.3 * e.t).abs() < 1e-9, "{} {}", e.t, e.v);
            assert!(e.residual.abs() < 1e-9);
        }
        assert!((rep.lambda - 0.3).abs() < 1e-9);
        assert!(rep.bounded);
    }

    #[test]
    fn constant_cost_ergodic_cost_and_residual() {
        let mut model = build_desk_model(0.1).unwrap();
        model.cost.running = RunningCost::Constant { c: 0.25 };
        let pol = ControlPolicy::constant(vec![0.3]);
        let ec = ergodic_cost(&model, &pol, &[0.5], 4.0, 0.05, 50, 1).unwrap();
        assert!((ec.mean - 0.25).abs() < 1e-12 && ec.se < 1e-12);
        assert!(ec.mixing_warning);
        let grid = TimeGrid::with_step(2.0, 0.05).unwrap();
        let mr = martingale_residual(&model, &pol, |_| 0.0, 0.25, &grid, &[0.0], 20, 2, 0.0, 4).unwrap();
        assert!(mr.max_abs_bin < 1e-12);
        let wrong = martingale_residual(&model, &pol, |_| 0.0, 1.25, &grid, &[0.0], 20, 2, 0.0, 4).unwrap();
        assert!((wrong.mean_drift + 1.0).abs() < 1e-12);
        assert!(!wrong.is_submartingale(0.1));
    }
}
