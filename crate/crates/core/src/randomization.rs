//! The randomized control channel `I = a + ∫ R α ds + R W²` and the explicit
//! approximation of step controls by bounded intensities.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{abs, ceil, exp, ln, mean_se, norm, powf, sqrt};
use crate::model::{ModelInstance, RandomizationMap};
use crate::par;
use crate::state_sim::{
    assemble, collect_paths, record_path, ControlPolicy, Driver, EtaSource, PathEnsemble, PathRun,
    PolicyKind, StepIntensity, TimeGrid,
};

/// A simulated state ensemble together with its control channel.
#[derive(Debug, Clone)]
pub struct RandomizedPair {
    /// State paths; `controls` holds `I` at the left node of every step.
    pub ensemble: PathEnsemble,
    /// `[path][node 0..=n_steps][control]`.
    pub channel: Vec<f64>,
    pub alpha: ControlPolicy,
    pub a0: Vec<f64>,
}

impl RandomizedPair {
    pub fn m(&self) -> usize {
        self.a0.len()
    }

    pub fn channel_at(&self, path: usize, node: usize) -> &[f64] {
        let m = self.m();
        let per = (self.ensemble.grid.n_steps + 1) * m;
        let off = path * per + node * m;
        &self.channel[off..off + m]
    }

    /// `Î_t = I_t - a - R W²_t` along one path, at every node.
    pub fn integrated_intensity(&self, path: usize, weights: &[f64]) -> Vec<f64> {
        let m = self.m();
        let n_steps = self.ensemble.grid.n_steps;
        let mut w = vec![0.0; m];
        let mut out = Vec::with_capacity((n_steps + 1) * m);
        for node in 0..=n_steps {
            if node > 0 {
                let off = (path * n_steps + node - 1) * m;
                for j in 0..m {
                    w[j] += self.ensemble.noise2[off + j];
                }
            }
            let i = self.channel_at(path, node);
            for j in 0..m {
                out.push(i[j] - self.a0[j] - weights[j] * w[j]);
            }
        }
        out
    }
}

fn require_bounded(alpha: &ControlPolicy) -> Result<()> {
    match (&alpha.kind, alpha.bound) {
        (PolicyKind::Feedback(_), None) => Err(Error::InvalidArgument(
            "feedback intensity needs an explicit bound".into(),
        )),
        _ => Ok(()),
    }
}

/// Simulates `(X, I)` with `u` replaced by the channel `I`.
pub fn simulate_randomized_pair(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    alpha: &ControlPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<RandomizedPair> {
    model.check_shapes()?;
    let (n, m) = (model.n_modes(), model.m_controls());
    if x0.len() != n {
        return Err(Error::Dimension { what: "initial state", expected: n, got: x0.len() });
    }
    if a0.len() != m {
        return Err(Error::Dimension { what: "initial control", expected: m, got: a0.len() });
    }
    require_bounded(alpha)?;
    let run = PathRun::new(model, grid, seed, Driver::Randomized(alpha));
    let recs = collect_paths(n_paths, |p| record_path(&run, p, x0, a0, None))?;
    let (ensemble, channel) = assemble(grid, n, m, seed, recs);
    Ok(RandomizedPair { ensemble, channel, alpha: alpha.clone(), a0: a0.to_vec() })
}

/// Step control `η 1_{[t0, T)}`.
#[derive(Clone)]
pub struct StepTarget {
    pub t0: f64,
    pub eta: EtaSource,
}

/// Output of [`approximating_alpha`].
#[derive(Debug, Clone)]
pub struct ApproximatingAlpha {
    pub policy: ControlPolicy,
    pub n: u32,
    /// `|η|²/n`, the closed form quoted for the construction (fixed `η` only).
    pub quoted_error: Option<f64>,
    /// `|η|²/(3n)`, the exact value of `∫|η 1 - Î|²` for the linear ramp
    /// (fixed `η` only).
    pub ramp_error: Option<f64>,
    /// Whether `η` had components beyond the control truncation.
    pub projected: bool,
    /// Norm of the discarded components.
    pub projection_residual: f64,
}

/// `α^n_s = n 1_{[t0, t0+1/n)}(s) R^{-1} η`, whose integrated channel ramps
/// linearly from 0 to `η` on `[t0, t0 + 1/n)` and equals `η` afterwards.
pub fn approximating_alpha(
    target: &StepTarget,
    n: u32,
    r: &RandomizationMap,
    horizon: f64,
) -> Result<ApproximatingAlpha> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let t1 = target.t0 + 1.0 / n as f64;
    if t1 > horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument("t0 + 1/n exceeds the horizon".into()));
    }
    let m = r.m_modes();
    let (eta, projected, residual, errors) = match &target.eta {
        EtaSource::Fixed(v) => {
            let kept: Vec<f64> = (0..m).map(|j| v.get(j).copied().unwrap_or(0.0)).collect();
            let dropped = if v.len() > m { norm(&v[m..]) } else { 0.0 };
            let e2 = norm(&kept) * norm(&kept);
            (
                EtaSource::Fixed(kept),
                dropped > 0.0,
                dropped,
                Some((e2 / n as f64, e2 / (3.0 * n as f64))),
            )
        }
        EtaSource::OfState(f) => {
            let f = f.clone();
            let wrapped = EtaSource::OfState(alloc::sync::Arc::new(move |x: &[f64], out: &mut [f64]| f(x, out)));
            (wrapped, false, 0.0, None)
        }
    };
    let policy = ControlPolicy {
        kind: PolicyKind::Step(StepIntensity {
            t0: target.t0,
            t1,
            gain: n as f64,
            scale: r.weights.iter().map(|w| 1.0 / w).collect(),
            eta,
        }),
        bound: None,
    };
    Ok(ApproximatingAlpha {
        policy,
        n,
        quoted_error: errors.map(|e| e.0),
        ramp_error: errors.map(|e| e.1),
        projected,
        projection_residual: residual,
    })
}

/// Per-path `∫_0^T |η 1_{[t0,T)} - Î_t|² dt`, integrated exactly for the
/// piecewise-linear `Î`. `t0` must be a grid node; `η` is re-evaluated from
/// the state at `t0`, as the intensity does.
pub fn step_target_l2_errors(pair: &RandomizedPair, target: &StepTarget, weights: &[f64]) -> Result<Vec<f64>> {
    let grid = &pair.ensemble.grid;
    let h = grid.h();
    let k0f = (target.t0 - grid.t0) / h;
    let k0 = libm::round(k0f) as usize;
    if abs(k0f - k0 as f64) > 1e-9 || k0 > grid.n_steps {
        return Err(Error::InvalidArgument("t0 must lie on the grid".into()));
    }
    let m = pair.m();
    let errs = par::map_chunks(pair.ensemble.n_paths, |range| {
        range
            .map(|p| {
                let mut eta = vec![0.0; m];
                match &target.eta {
                    EtaSource::Fixed(v) => {
                        for j in 0..m {
                            eta[j] = v.get(j).copied().unwrap_or(0.0);
                        }
                    }
                    EtaSource::OfState(f) => f(pair.ensemble.state(p, k0), &mut eta),
                }
                let ihat = pair.integrated_intensity(p, weights);
                let mut total = 0.0;
                for k in 0..grid.n_steps {
                    let on = if k >= k0 { 1.0 } else { 0.0 };
                    for j in 0..m {
                        let d0 = on * eta[j] - ihat[k * m + j];
                        let d1 = on * eta[j] - ihat[(k + 1) * m + j];
                        total += h * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
                    }
                }
                total
            })
            .collect::<Vec<f64>>()
    });
    Ok(errs.into_iter().flatten().collect())
}

/// `ceil(ln(M/(β tol)) / β)`: the horizon after which the discounted tail is
/// below `tol`.
pub fn truncation_horizon(m_ell: f64, beta: f64, tol: f64) -> f64 {
    let v = ln(m_ell / (beta * tol)) / beta;
    if v > 0.0 {
        ceil(v)
    } else {
        0.0
    }
}

/// Discounted cost estimate with its error budget.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct McValue {
    pub mean: f64,
    pub se: f64,
    /// `M_ℓ e^{-β t_end} / β`.
    pub tail_budget: f64,
    pub t_end: f64,
}

/// Monte Carlo of `E ∫_0^∞ e^{-βs} ℓ(X_s, I_s) ds`, truncated at the grid end.
/// The running cost is frozen on each step and the discount integrated
/// exactly, so constant costs are reproduced without bias.
#[allow(clippy::too_many_arguments)]
pub fn randomized_value_mc(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    alpha: &ControlPolicy,
    beta: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    tail_tol: f64,
) -> Result<McValue> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("discount must be positive".into()));
    }
    model.check_shapes()?;
    require_bounded(alpha)?;
    let m_ell = model.cost.m_ell;
    let t_len = grid.t_end - grid.t0;
    let tail = m_ell * exp(-beta * t_len) / beta;
    if tail > tail_tol {
        return Err(Error::TailTolerance { required: truncation_horizon(m_ell, beta, tail_tol), t_end: t_len });
    }
    let h = grid.h();
    let step_w = (1.0 - exp(-beta * h)) / beta;
    let run = PathRun::new(model, grid, seed, Driver::Randomized(alpha));
    let chunks = par::map_chunks(n_paths, |range| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(range.len());
        for p in range {
            let mut acc = 0.0;
            run.run(p, 0, grid.n_steps, x0, a0, None, |tr| {
                let t = tr.t - grid.t0;
                acc += exp(-beta * t) * step_w * model.running(tr.x, tr.channel);
            })?;
            out.push(acc);
        }
        Ok(out)
    });
    let mut vals = Vec::with_capacity(n_paths);
    for c in chunks {
        vals.extend(c?);
    }
    let (mean, se) = mean_se(&vals);
    Ok(McValue { mean, se, tail_budget: tail, t_end: t_len })
}

/// Profile of `t^ρ E‖(δ - A)^ρ X_t‖` over the nodes of an ensemble, and its
/// supremum over `t > 0`.
pub fn fractional_norm_profile(model: &ModelInstance, ens: &PathEnsemble) -> (Vec<(f64, f64)>, f64) {
    let rho = model.rho;
    let w: Vec<f64> = model
        .operator
        .eigenvalues
        .iter()
        .map(|l| powf(model.delta - l, rho))
        .collect();
    let mut out = Vec::with_capacity(ens.grid.n_steps + 1);
    let mut sup = 0.0f64;
    let mut col = vec![0.0; ens.n_paths];
    for node in 0..=ens.grid.n_steps {
        for (p, c) in col.iter_mut().enumerate() {
            let x = ens.state(p, node);
            *c = sqrt(x.iter().zip(&w).map(|(xi, wi)| (wi * xi) * (wi * xi)).sum());
        }
        let t = ens.grid.node(node) - ens.grid.t0;
        let v = powf(t, rho) * mean_se(&col).0;
        if t > 0.0 {
            sup = sup.max(v);
        }
        out.push((t, v));
    }
    (out, sup)
}
