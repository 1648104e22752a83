//! Backward regression solver for the penalized and constrained BSDEs of
//! the randomized problem.
//!
//! The forward process is the uncontrolled randomized pair `(X, I)`. Each
//! backward step takes the fitted value `w` of the next node and computes at
//! every sample
//!
//! ```text
//! y = [h ℓ(x, a) + min_{|α| ≤ n} E w(X', a + hRα + R ΔW²)] / (1 + βh)
//! ```
//!
//! with the expectation taken exactly under the Gaussian one-step law. The
//! minimum over the `n`-ball is the one-step form of the driver term `-n|Γ|`
//! (`min_{|α|≤n} ⟨R ∂_a w, α⟩ = -n|Γ|`), and the gap to the unshifted
//! expectation is the increment of `K`. `Z` and `Γ` come from Gaussian
//! integration by parts, `E[w(X') ΔW]/h = gain · E ∇w(X')`. Pointwise values
//! are projected on the basis by least squares.
//!
//! Values are regressed on state features only. For finite `n` the channel
//! dependence is carried by a piecewise-linear grid in `a`: the scheme is
//! evaluated at every grid node for every sampled state, and the shifted
//! expectation of the interpolant is exact and a convex combination of node
//! values. A polynomial in `a` would instead let the minimum over shifts
//! feed on its oscillations, biasing `Y` down by an amount that grows with
//! `n`. Along the sampled paths the scheme is evaluated once more to record
//! the `K` increments.
//!
//! For `n = ∞` the value does not depend on the channel and the ball becomes
//! the whole control set.

use alloc::vec;
use alloc::vec::Vec;

use crate::basis::{Basis, BasisSpec, Boxes, Workspace};
use crate::channel::{Axis, ChannelGrid};
use crate::error::{Error, Result};
use crate::linalg::normal_solve;
use crate::math::{abs, exp, golden_min, max_f, mean_se, min_f, norm, sqrt};
use crate::model::{ModelInstance, TerminalCost};
use crate::par;
use crate::quadrature::{halton, GaussHermite};
use crate::randomization::truncation_horizon;
use crate::rng::{self, purpose, BLOCK};
use crate::state_sim::{ControlPolicy, Driver, PathRun, Stepper, TimeGrid};

/// Penalization level `n` of the driver term `-n|Γ|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Penalization {
    Finite(u32),
    /// The constrained limit.
    Infinite,
}

/// How the penalty enters a backward step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PenaltyForm {
    /// Minimise the next-step expectation over channel shifts `hRα`, `|α| ≤ n`.
    Shift,
    /// Subtract `h n pen(Γ)` with `pen = |·|`, or `ρ_k(u) = sqrt(|u|² + 1/k)`
    /// when a smoothing level is given. Stable only for small `n h`.
    Explicit { smoothing_k: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BsdeConfig {
    pub h: f64,
    pub n_paths: usize,
    pub basis: BasisSpec,
    pub seed: u64,
    /// Absolute bound on the discounted tail beyond the truncation horizon.
    pub tail_tol: f64,
    pub quad_nodes: usize,
    /// Box searched for the pointwise minimiser when `n = ∞`.
    pub control_range: (f64, f64),
    pub control_grid: usize,
    pub golden_iters: usize,
    /// Nodes per channel coordinate of the finite-`n` value grid.
    pub channel_nodes: usize,
    /// Search effort over channel shifts for finite `n`.
    pub shift_grid: usize,
    pub shift_iters: usize,
    /// Half-width of the uniform spread of initial states around `x0`.
    pub x_spread: f64,
    pub a_spread: f64,
    pub penalty: PenaltyForm,
    pub condition_limit: f64,
    pub ridge: f64,
    /// Lower quantile used to size the per-step boxes.
    pub box_quantile: f64,
    /// `K` is stored for every path at multiples of this many steps.
    pub k_stride: usize,
}

impl BsdeConfig {
    pub fn new(h: f64, n_paths: usize, basis: BasisSpec, seed: u64) -> Self {
        BsdeConfig {
            h,
            n_paths,
            basis,
            seed,
            tail_tol: 1e-3,
            quad_nodes: 8,
            control_range: (-4.0, 4.0),
            control_grid: 17,
            golden_iters: 14,
            channel_nodes: 9,
            shift_grid: 5,
            shift_iters: 8,
            x_spread: 2.5,
            a_spread: 2.5,
            penalty: PenaltyForm::Shift,
            condition_limit: 1e12,
            ridge: 0.0,
            box_quantile: 0.005,
            k_stride: BLOCK,
        }
    }
}

/// Terminal condition of the backward recursion.
#[derive(Debug, Clone, Copy)]
pub enum Terminal<'a> {
    /// Infinite-horizon truncation.
    Zero,
    Cost(&'a TerminalCost),
    /// A value already fitted on the same basis and channel grid.
    Fitted(&'a StepFit),
}

/// Regression coefficients of `Y`, `Z` (leading modes) and `Γ` at one
/// time node. For finite `n` there is one coefficient block per channel
/// grid node; for `n = ∞` a single block.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepFit {
    pub boxes: Boxes,
    /// Channel grid; empty for `n = ∞`.
    pub axes: Vec<Axis>,
    /// `[channel node][basis]`.
    pub y: Vec<f64>,
    /// `[channel node][n_x][basis]`.
    pub z: Vec<f64>,
    /// `[channel node][m][basis]`; empty for `n = ∞`.
    pub gamma: Vec<f64>,
}

/// Per-node summary statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepStat {
    pub t: f64,
    pub mean_y: f64,
    pub sup_z: f64,
    pub mean_abs_gamma: f64,
    pub mean_k: f64,
    pub condition: f64,
}

/// `K` along every path at the recorded times.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KPath {
    pub times: Vec<f64>,
    pub n_paths: usize,
    /// `[path][time]`.
    pub values: Vec<f64>,
}

impl KPath {
    pub fn path(&self, i: usize) -> &[f64] {
        let nt = self.times.len();
        &self.values[i * nt..(i + 1) * nt]
    }

    /// Every path starts at 0 and never decreases.
    pub fn is_monotone(&self) -> bool {
        (0..self.n_paths).all(|i| {
            let p = self.path(i);
            p.first().is_none_or(|v| *v == 0.0) && p.windows(2).all(|w| w[1] >= w[0])
        })
    }

    pub fn final_mean(&self) -> f64 {
        let nt = self.times.len();
        if nt == 0 || self.n_paths == 0 {
            return 0.0;
        }
        (0..self.n_paths).map(|i| self.path(i)[nt - 1]).sum::<f64>() / self.n_paths as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Diagnostics {
    pub evaluations: usize,
    pub clip_events: usize,
    /// Largest pointwise `|Y|` after clipping.
    pub y_abs_max: f64,
    /// Largest `|Y|` of the fitted regressions at the samples.
    pub y_fit_abs_max: f64,
    /// `M_ℓ/β`, or infinity when no discount bound applies.
    pub y_bound: f64,
    pub z_sup: f64,
    /// Largest per-step standard error of the `Z` regression.
    pub z_regression_se: f64,
    /// `L_ℓ |G| / μ`.
    pub z_bound: f64,
    /// `L_ℓ / (μ + β)`, reported only.
    pub z_bound_sharp: f64,
    /// `E ∫ |Γ| dt`.
    pub gamma_integral: f64,
    pub k_final_mean: f64,
    pub k_monotone: bool,
    pub max_condition: f64,
    /// Smallest `c` with `|Y| ≤ c (1 + |X|)` on the samples.
    pub growth_constant: f64,
    pub tail_budget: f64,
}

impl Diagnostics {
    pub fn clip_rate(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.clip_events as f64 / self.evaluations as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BsdeSolution {
    /// The scheme evaluated at `(x0, a0)` from the first fitted node.
    pub y0: f64,
    /// The node-0 regression evaluated at `(x0, a0)`.
    pub y0_regression: f64,
    pub x0: Vec<f64>,
    pub a0: Vec<f64>,
    pub penalization: Penalization,
    pub discount: f64,
    pub horizon: f64,
    pub grid: TimeGrid,
    pub config: BsdeConfig,
    pub forced_k_rate: f64,
    /// Index `i` holds node `i`, `0..=n_steps`.
    pub fits: Vec<StepFit>,
    pub k_path: KPath,
    pub stats: Vec<StepStat>,
    pub diagnostics: Diagnostics,
}

/// Everything that defines one backward solve.
#[derive(Debug, Clone)]
pub struct BsdeProblem<'a> {
    pub model: &'a ModelInstance,
    pub x0: &'a [f64],
    pub a0: &'a [f64],
    pub beta: f64,
    pub penalization: Penalization,
    pub terminal: Terminal<'a>,
    pub grid: TimeGrid,
    /// Extra `K` increment per unit time forced into every step.
    pub forced_k_rate: f64,
}

/// Regression basis of the solver: state coordinates only. The channel
/// enters through the node grid.
fn bsde_basis(spec: BasisSpec, n: usize, m: usize) -> Basis {
    Basis::new(BasisSpec { a_degree: 0, ..spec }, n, m)
}

/// Guard against tensor channel grids that would swamp the solver.
const MAX_CHANNEL_NODES: usize = 1024;

impl BsdeSolution {
    pub fn basis(&self, model: &ModelInstance) -> Basis {
        bsde_basis(self.config.basis, model.n_modes(), model.m_controls())
    }

    /// The node regression of `Y` at `(x, a)`.
    pub fn fitted(&self, model: &ModelInstance, node: usize, x: &[f64], a: &[f64]) -> f64 {
        let basis = self.basis(model);
        let fit = &self.fits[node];
        let p = basis.len();
        let mut ws = basis.workspace();
        let mut row = vec![0.0; p];
        basis.design_row(&fit.boxes, &x[..basis.n_x], &mut row, &mut ws);
        let block = |j: usize| -> f64 { row.iter().zip(&fit.y[j * p..(j + 1) * p]).map(|(r, c)| r * c).sum() };
        if fit.axes.is_empty() {
            return block(0);
        }
        let m = fit.axes.len();
        let mut g = ChannelGrid::new(m, self.config.channel_nodes);
        let mut q = vec![0.0; g.len()];
        let mut dq = vec![0.0; g.len() * m];
        g.weights(&fit.axes, a, &vec![0.0; m], &mut q, &mut dq);
        q.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, w)| w * block(j)).sum()
    }

    /// The scheme evaluated at `(x, a)` on node `step`, using the fit of the
    /// next node. Errors if a state coordinate lies outside the box of the
    /// training samples at that node.
    pub fn value_at_step(&self, model: &ModelInstance, step: usize, x: &[f64], a: &[f64]) -> Result<f64> {
        if step >= self.grid.n_steps {
            return Err(Error::InvalidArgument("value_at_step needs a node before the last".into()));
        }
        let basis = self.basis(model);
        let boxes = &self.fits[step].boxes;
        for (k, xi) in x.iter().take(basis.n_x).enumerate() {
            let (c, half) = boxes.boxes[k];
            if abs(xi - c) > half * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "state coordinate {k} = {xi} outside the sampled region [{}, {}] at node {step}",
                    c - half,
                    c + half
                )));
            }
        }
        let st = Stepper::new(model, self.grid.h());
        let gh = GaussHermite::new(self.config.quad_nodes);
        let ctx = Ctx::new(model, &st, &basis, &gh, self.discount, self.penalization, &self.config, self.forced_k_rate, self.clip_bound());
        let mut sc = Scratch::new(&ctx);
        Ok(ctx.solve_point(x, a, &self.fits[step + 1], &mut sc).y)
    }

    pub fn value_at(&self, model: &ModelInstance, x: &[f64], a: &[f64]) -> Result<f64> {
        self.value_at_step(model, 0, x, a)
    }

    fn clip_bound(&self) -> Option<f64> {
        if self.diagnostics.y_bound.is_finite() {
            Some(self.diagnostics.y_bound)
        } else {
            None
        }
    }

    /// Flat per-node rows `(t, mean Y, sup|Z|, E|Γ|, mean K)`.
    pub fn table(&self) -> Vec<[f64; 5]> {
        self.stats.iter().map(|s| [s.t, s.mean_y, s.sup_z, s.mean_abs_gamma, s.mean_k]).collect()
    }
}

/// Shared context of the pointwise backward step.
struct Ctx<'a> {
    model: &'a ModelInstance,
    st: &'a Stepper,
    basis: &'a Basis,
    gh: &'a GaussHermite,
    beta: f64,
    penal: Penalization,
    form: PenaltyForm,
    range: (f64, f64),
    grid_pts: usize,
    golden: usize,
    shift_pts: usize,
    shift_iters: usize,
    channel_nodes: usize,
    forced: f64,
    clip: Option<f64>,
    /// `g_k h φ₁(λ'_k h) / h` for the leading modes.
    z_gain: Vec<f64>,
}

struct Scratch {
    ws: Workspace,
    grid: ChannelGrid,
    /// Per channel node: expected value and state gradient of the next fit.
    e: Vec<f64>,
    gx: Vec<f64>,
    q: Vec<f64>,
    dq: Vec<f64>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    grad: Vec<f64>,
    buf: Vec<f64>,
    xm: Vec<f64>,
    u: Vec<f64>,
    alpha: Vec<f64>,
    z: Vec<f64>,
    gamma: Vec<f64>,
}

impl Scratch {
    fn new(ctx: &Ctx<'_>) -> Self {
        let nc = ctx.basis.n_coords().max(1);
        let n = ctx.st.n;
        let m = ctx.st.m;
        let grid = ChannelGrid::new(m, ctx.channel_nodes);
        let nodes = grid.len().min(MAX_CHANNEL_NODES);
        Scratch {
            ws: ctx.basis.workspace(),
            grid,
            e: vec![0.0; nodes],
            gx: vec![0.0; nodes * ctx.basis.n_x],
            q: vec![0.0; nodes],
            dq: vec![0.0; nodes * m],
            mean: vec![0.0; nc],
            sd: vec![0.0; nc],
            grad: vec![0.0; nc],
            buf: vec![0.0; n],
            xm: vec![0.0; n],
            u: vec![0.0; m],
            alpha: vec![0.0; m],
            z: vec![0.0; ctx.basis.n_x],
            gamma: vec![0.0; m],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PointOut {
    y: f64,
    dk: f64,
    clipped: bool,
}

impl<'a> Ctx<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &'a ModelInstance,
        st: &'a Stepper,
        basis: &'a Basis,
        gh: &'a GaussHermite,
        beta: f64,
        penal: Penalization,
        cfg: &BsdeConfig,
        forced: f64,
        clip: Option<f64>,
    ) -> Self {
        let z_gain = (0..basis.n_x)
            .map(|k| model.noise.gains[k] * st.drift_gain[k] / st.h)
            .collect();
        Ctx {
            model,
            st,
            basis,
            gh,
            beta,
            penal,
            form: cfg.penalty,
            range: cfg.control_range,
            grid_pts: cfg.control_grid.max(2),
            golden: cfg.golden_iters,
            shift_pts: cfg.shift_grid.max(2),
            shift_iters: cfg.shift_iters,
            channel_nodes: cfg.channel_nodes,
            forced,
            clip,
            z_gain,
        }
    }

    fn x_means(&self, x: &[f64], u: &[f64], sc: &mut Scratch) {
        self.st.mean(self.model, x, u, &mut sc.buf, &mut sc.xm);
        for k in 0..self.basis.n_x {
            sc.mean[k] = sc.xm[k];
            sc.sd[k] = self.st.noise_sd[k];
        }
    }

    fn solve_point(&self, x: &[f64], a: &[f64], next: &StepFit, sc: &mut Scratch) -> PointOut {
        let h = self.st.h;
        let (num, mut dk) = match self.penal {
            Penalization::Infinite => self.infinite_step(x, a, next, sc),
            Penalization::Finite(n) => self.finite_step(x, a, n, next, sc),
        };
        let num = num - self.forced * h;
        dk += self.forced * h;
        let mut y = num / (1.0 + self.beta * h);
        let mut clipped = false;
        if let Some(b) = self.clip {
            if abs(y) > b {
                y = y.clamp(-b, b);
                clipped = true;
            }
        }
        PointOut { y, dk, clipped }
    }

    fn finite_step(&self, x: &[f64], a: &[f64], n: u32, next: &StepFit, sc: &mut Scratch) -> (f64, f64) {
        let (h, nx, m) = (self.st.h, self.basis.n_x, self.st.m);
        let p = self.basis.len();
        let nodes = next.y.len() / p;
        self.x_means(x, a, sc);
        self.basis.tables(&next.boxes, &sc.mean, &sc.sd, self.gh, &mut sc.ws);
        for j in 0..nodes {
            sc.e[j] = self.basis.expect_grad(&next.y[j * p..(j + 1) * p], &mut sc.ws, &mut sc.grad);
            sc.gx[j * nx..(j + 1) * nx].copy_from_slice(&sc.grad[..nx]);
        }
        sc.grid.weights(&next.axes, a, &self.st.channel_sd, &mut sc.q, &mut sc.dq);
        let c0: f64 = (0..nodes).map(|j| sc.q[j] * sc.e[j]).sum();
        for k in 0..nx {
            sc.z[k] = self.z_gain[k] * (0..nodes).map(|j| sc.q[j] * sc.gx[j * nx + k]).sum::<f64>();
        }
        let r = &self.model.randomization.weights;
        for c in 0..m {
            sc.gamma[c] = r[c] * (0..nodes).map(|j| sc.dq[j * m + c] * sc.e[j]).sum::<f64>();
        }
        let cost = h * self.model.running(x, a);
        let nf = n as f64;
        let cut = match self.form {
            PenaltyForm::Shift => c0 - self.min_shift(a, nf, c0, next, nodes, sc),
            PenaltyForm::Explicit { smoothing_k } => {
                let g = norm(&sc.gamma[..m]);
                let pen = match smoothing_k {
                    Some(k) => sqrt(g * g + 1.0 / k),
                    None => g,
                };
                h * nf * pen
            }
        };
        (cost + c0 - cut, cut)
    }

    /// `min E w(X', a + hRα + RΔW²)` over `|α| ≤ n`, given the node
    /// expectations in `sc.e` and `c0` at `α = 0`.
    fn min_shift(&self, a: &[f64], n: f64, c0: f64, next: &StepFit, nodes: usize, sc: &mut Scratch) -> f64 {
        let (h, m) = (self.st.h, self.st.m);
        let r = &self.model.randomization.weights;
        let sd = &self.st.channel_sd;
        let axes = &next.axes;
        let Scratch { grid, q, dq, e, alpha, gamma, .. } = sc;
        let mut value = |mu: &[f64], q: &mut [f64], dq: &mut [f64]| -> f64 {
            grid.weights(axes, mu, sd, q, dq);
            (0..nodes).map(|j| q[j] * e[j]).sum()
        };
        if m == 1 {
            // the smoothed interpolant bends only near grid nodes: try the
            // ends and the nodes inside the range, then refine unless the
            // best end is a one-sided minimum
            let half = h * r[0] * n;
            let ax = axes[0];
            let slope = |q: &[f64], dq: &[f64]| -> f64 {
                let _ = q;
                (0..nodes).map(|j| dq[j] * e[j]).sum()
            };
            let mut best = (0.0, c0);
            let mut at_end = None;
            for (k, s) in [-half, half].into_iter().enumerate() {
                let v = value(&[a[0] + s], q, dq);
                if v < best.1 {
                    best = (s, v);
                    at_end = Some((k, slope(q, dq)));
                }
            }
            if ax.step > 0.0 {
                for j in 0..nodes {
                    let s = ax.node(j) - a[0];
                    if abs(s) < half {
                        let v = value(&[a[0] + s], q, dq);
                        if v < best.1 {
                            best = (s, v);
                            at_end = None;
                        }
                    }
                }
            }
            let settled = match at_end {
                Some((0, d)) => d >= 0.0,
                Some((_, d)) => d <= 0.0,
                None => false,
            };
            if !settled && self.shift_iters > 0 {
                let w = max_f(ax.step, 3.0 * sd[0]);
                let (lo, hi) = (max_f(-half, best.0 - w), min_f(half, best.0 + w));
                let (_, v) = golden_min(|s| value(&[a[0] + s], q, dq), lo, hi, self.shift_iters);
                if v < best.1 {
                    best.1 = v;
                }
            }
            return best.1;
        }
        // several channel modes: line search along the steepest descent ray,
        // then once more from the best point, projected on the ball
        let mut best = c0;
        alpha.iter_mut().for_each(|v| *v = 0.0);
        let mut dir: Vec<f64> = gamma[..m].iter().map(|g| -g).collect();
        let mut mu = vec![0.0; m];
        for _round in 0..2 {
            let gn = norm(&dir);
            if !(gn > 0.0) {
                break;
            }
            let start = alpha.clone();
            let mut trial = vec![0.0; m];
            let mut f = |t: f64| {
                for j in 0..m {
                    trial[j] = start[j] + t * n * dir[j] / gn;
                }
                project_ball(&mut trial, n);
                for j in 0..m {
                    mu[j] = a[j] + h * r[j] * trial[j];
                }
                value(&mu, q, dq)
            };
            let (t, v) = grid_then_golden(&mut f, 0.0, 1.0, self.shift_pts, self.shift_iters);
            if v < best {
                best = v;
                for j in 0..m {
                    alpha[j] = start[j] + t * n * dir[j] / gn;
                }
                project_ball(alpha, n);
            }
            for j in 0..m {
                mu[j] = a[j] + h * r[j] * alpha[j];
            }
            value(&mu, q, dq);
            for (c, d) in dir.iter_mut().enumerate() {
                *d = -r[c] * (0..nodes).map(|j| dq[j * m + c] * e[j]).sum::<f64>();
            }
        }
        best
    }

    fn infinite_step(&self, x: &[f64], a: &[f64], next: &StepFit, sc: &mut Scratch) -> (f64, f64) {
        let (h, nx, m) = (self.st.h, self.basis.n_x, self.st.m);
        self.x_means(x, a, sc);
        self.basis.tables(&next.boxes, &sc.mean, &sc.sd, self.gh, &mut sc.ws);
        let c_ch = self.basis.expect_grad(&next.y, &mut sc.ws, &mut sc.grad);
        for k in 0..nx {
            sc.z[k] = self.z_gain[k] * sc.grad[k];
        }
        sc.gamma.iter_mut().for_each(|g| *g = 0.0);
        // pointwise minimiser of the linearised one-step Hamiltonian
        let p: Vec<f64> = (0..nx).map(|k| sc.grad[k] * self.st.drift_gain[k]).collect();
        let (lo, hi) = self.range;
        sc.u.iter_mut().for_each(|u| *u = 0.0);
        let sweeps = if m == 1 { 1 } else { 2 };
        for _ in 0..sweeps {
            for j in 0..m {
                let mut u = sc.u.clone();
                let buf = &mut sc.buf;
                let mut ham = |v: f64| {
                    u[j] = v;
                    self.st.remainder(self.model, x, &u, buf);
                    let mut s = h * self.model.running(x, &u);
                    for k in 0..nx {
                        s += p[k] * buf[k];
                    }
                    s
                };
                let (v, _) = grid_then_golden(&mut ham, lo, hi, self.grid_pts, self.golden);
                sc.u[j] = v;
            }
        }
        let u = sc.u.clone();
        self.x_means(x, &u, sc);
        self.basis.tables(&next.boxes, &sc.mean, &sc.sd, self.gh, &mut sc.ws);
        let c_u = self.basis.expect(&next.y, &sc.ws);
        let v_ch = h * self.model.running(x, a) + c_ch;
        let v_u = h * self.model.running(x, &u) + c_u;
        let best = min_f(v_ch, v_u);
        (best, v_ch - best)
    }
}

fn project_ball(v: &mut [f64], r: f64) {
    let n = norm(v);
    if n > r {
        v.iter_mut().for_each(|x| *x *= r / n);
    }
}

/// Coarse grid search followed by golden section in the best bracket.
fn grid_then_golden<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64, pts: usize, iters: usize) -> (f64, f64) {
    if !(hi > lo) {
        return (lo, f(lo));
    }
    let step = (hi - lo) / (pts - 1) as f64;
    let mut best = (lo, f64::INFINITY);
    let mut bi = 0;
    for i in 0..pts {
        let s = if i + 1 == pts { hi } else { lo + i as f64 * step };
        let v = f(s);
        if v < best.1 {
            best = (s, v);
            bi = i;
        }
    }
    if iters > 0 {
        let a = lo + (bi.saturating_sub(1)) as f64 * step;
        let b = min_f(hi, lo + (bi + 1) as f64 * step);
        let (s, v) = golden_min(&mut *f, a, b, iters);
        if v < best.1 {
            best = (s, v);
        }
    }
    best
}

/// Forward samples of the randomized pair, kept as block checkpoints.
struct Forward<'a> {
    run: PathRun<'a>,
    n_paths: usize,
    n: usize,
    m: usize,
    n_steps: usize,
    /// `[block][path][n + m]` at nodes `b * BLOCK`.
    checkpoints: Vec<f64>,
    /// States at the last node, `[path][n + m]`.
    last: Vec<f64>,
}

impl<'a> Forward<'a> {
    fn new(model: &'a ModelInstance, grid: &'a TimeGrid, policy: &'a ControlPolicy, x0: &[f64], a0: &[f64], cfg: &BsdeConfig) -> Result<Self> {
        let (n, m) = (model.n_modes(), model.m_controls());
        let dim = n + m;
        let n_steps = grid.n_steps;
        let n_blocks = n_steps.div_ceil(BLOCK);
        let run = PathRun::new(model, grid, cfg.seed, Driver::Randomized(policy));
        let np = cfg.n_paths;
        let chunks = par::map_chunks(np, |range| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut cps = Vec::with_capacity(range.len() * n_blocks * dim);
            let mut last = Vec::with_capacity(range.len() * dim);
            for p in range {
                let (xs, as_) = initial_state(cfg, x0, a0, p);
                cps.extend_from_slice(&xs);
                cps.extend_from_slice(&as_);
                let mut fin = vec![0.0; dim];
                run.run(p, 0, n_steps, &xs, &as_, None, |tr| {
                    let node = tr.step + 1;
                    if node % BLOCK == 0 && node < n_steps {
                        cps.extend_from_slice(tr.x_next);
                        cps.extend_from_slice(tr.channel_next);
                    }
                    if node == n_steps {
                        fin[..n].copy_from_slice(tr.x_next);
                        fin[n..].copy_from_slice(tr.channel_next);
                    }
                })?;
                last.extend_from_slice(&fin);
            }
            Ok((cps, last))
        });
        let mut checkpoints = vec![0.0; n_blocks * np * dim];
        let mut last = Vec::with_capacity(np * dim);
        let mut p0 = 0;
        for c in chunks {
            let (cps, l) = c?;
            let cnt = l.len() / dim;
            for i in 0..cnt {
                for b in 0..n_blocks {
                    let src = &cps[(i * n_blocks + b) * dim..(i * n_blocks + b + 1) * dim];
                    let off = (b * np + p0 + i) * dim;
                    checkpoints[off..off + dim].copy_from_slice(src);
                }
            }
            last.extend_from_slice(&l);
            p0 += cnt;
        }
        Ok(Forward { run, n_paths: np, n, m, n_steps, checkpoints, last })
    }

    fn dim(&self) -> usize {
        self.n + self.m
    }

    /// States at nodes `b*BLOCK ..= end` for all paths, `[node][path][dim]`.
    fn block(&self, b: usize) -> Result<Vec<f64>> {
        let dim = self.dim();
        let np = self.n_paths;
        let start = b * BLOCK;
        let end = ((b + 1) * BLOCK).min(self.n_steps);
        let len = end - start + 1;
        let chunks = par::map_chunks(np, |range| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(range.len() * len * dim);
            for p in range {
                let cp = &self.checkpoints[(b * np + p) * dim..(b * np + p + 1) * dim];
                out.extend_from_slice(cp);
                self.run.run(p, start, end, &cp[..self.n], &cp[self.n..], None, |tr| {
                    out.extend_from_slice(tr.x_next);
                    out.extend_from_slice(tr.channel_next);
                })?;
            }
            Ok(out)
        });
        let mut data = vec![0.0; len * np * dim];
        let mut p0 = 0;
        for c in chunks {
            let c = c?;
            let cnt = c.len() / (len * dim);
            for i in 0..cnt {
                for j in 0..len {
                    let src = &c[(i * len + j) * dim..(i * len + j + 1) * dim];
                    let off = (j * np + p0 + i) * dim;
                    data[off..off + dim].copy_from_slice(src);
                }
            }
            p0 += cnt;
        }
        Ok(data)
    }
}

fn initial_state(cfg: &BsdeConfig, x0: &[f64], a0: &[f64], path: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(cfg.seed, purpose::INITIAL, 0, path as u64);
    let xs = x0.iter().map(|x| x + cfg.x_spread * (2.0 * rng::uniform(&mut r) - 1.0)).collect();
    let as_ = a0.iter().map(|a| a + cfg.a_spread * (2.0 * rng::uniform(&mut r) - 1.0)).collect();
    (xs, as_)
}

/// Reduction over one chunk of samples at a node.
struct ChunkAcc {
    gram: Vec<f64>,
    rhs: Vec<f64>,
    rows: Vec<f64>,
    targets: Vec<f64>,
    dk: Vec<f64>,
    clips: usize,
    y_abs: f64,
    z_sup: f64,
    gamma_abs: f64,
    growth: f64,
    y_sum: f64,
}

/// Solves one backward recursion.
pub fn solve(problem: &BsdeProblem<'_>, cfg: &BsdeConfig) -> Result<BsdeSolution> {
    let model = problem.model;
    model.check_shapes()?;
    let (n, m) = (model.n_modes(), model.m_controls());
    if problem.x0.len() != n {
        return Err(Error::Dimension { what: "x0", expected: n, got: problem.x0.len() });
    }
    if problem.a0.len() != m {
        return Err(Error::Dimension { what: "a0", expected: m, got: problem.a0.len() });
    }
    if cfg.n_paths < 2 || !(cfg.h > 0.0) {
        return Err(Error::InvalidArgument("need at least two paths and a positive step".into()));
    }
    if !(problem.beta >= 0.0) {
        return Err(Error::InvalidArgument("discount must be nonnegative".into()));
    }
    let finite = matches!(problem.penalization, Penalization::Finite(_));
    let n_nodes = if finite { ChannelGrid::new(m, cfg.channel_nodes).len() } else { 1 };
    if n_nodes > MAX_CHANNEL_NODES {
        return Err(Error::InvalidArgument(alloc::format!(
            "channel grid has {n_nodes} nodes, more than {MAX_CHANNEL_NODES}"
        )));
    }
    let basis = bsde_basis(cfg.basis, n, m);
    let p = basis.len();
    let nx = basis.n_x;
    let na = if finite { m } else { 0 };
    let grid = problem.grid;
    let h = grid.h();
    let horizon = grid.t_end - grid.t0;
    let beta = problem.beta;
    let m_ell = model.cost.m_ell;
    let tail_budget = match problem.terminal {
        Terminal::Zero if beta > 0.0 => m_ell * exp(-beta * horizon) / beta,
        _ => 0.0,
    };
    let clip = match problem.terminal {
        Terminal::Cost(_) => None,
        _ if beta > 0.0 => Some(m_ell / beta),
        _ => None,
    };
    let st = Stepper::new(model, h);
    let gh = GaussHermite::new(cfg.quad_nodes);
    let ctx = Ctx::new(model, &st, &basis, &gh, beta, problem.penalization, cfg, problem.forced_k_rate, clip);
    let zero = ControlPolicy::zero(m);
    let fwd = Forward::new(model, &grid, &zero, problem.x0, problem.a0, cfg)?;
    let np = cfg.n_paths;
    let dim = n + m;
    let n_steps = grid.n_steps;
    let n_blocks = n_steps.div_ceil(BLOCK);
    // targets per channel node: Y, Z for the leading modes, Γ
    let per_node = 1 + nx + na;
    let n_cols = n_nodes * per_node;

    let mut fits: Vec<StepFit> = vec![StepFit::default(); n_steps + 1];
    let mut stats: Vec<StepStat> = vec![
        StepStat { t: 0.0, mean_y: 0.0, sup_z: 0.0, mean_abs_gamma: 0.0, mean_k: 0.0, condition: 1.0 };
        n_steps + 1
    ];
    let mut diag = Diagnostics {
        y_bound: clip.unwrap_or(f64::INFINITY),
        z_bound: model.cost.l_ell * model.noise.norm() / model.drift.dissipativity,
        z_bound_sharp: model.cost.l_ell / (model.drift.dissipativity + beta),
        tail_budget,
        max_condition: 1.0,
        ..Default::default()
    };

    // terminal node
    {
        let samples = &fwd.last;
        let (boxes, axes) = node_geometry(&basis, samples, np, n, m, finite, cfg);
        let mut fit = StepFit {
            boxes,
            axes,
            y: vec![0.0; n_nodes * p],
            z: vec![0.0; n_nodes * nx * p],
            gamma: vec![0.0; n_nodes * na * p],
        };
        match problem.terminal {
            Terminal::Zero => {}
            Terminal::Fitted(f) => {
                if f.y.len() != n_nodes * p || f.axes.len() != na {
                    return Err(Error::Dimension { what: "terminal fit", expected: n_nodes * p, got: f.y.len() });
                }
                fit = f.clone();
            }
            Terminal::Cost(phi) => {
                let mut ws = basis.workspace();
                let mut row = vec![0.0; p];
                let mut gram = vec![0.0; p * p];
                let mut rhs = vec![0.0; p];
                for i in 0..np {
                    let s = &samples[i * dim..(i + 1) * dim];
                    basis.design_row(&fit.boxes, &s[..nx], &mut row, &mut ws);
                    accumulate(&mut gram, &mut rhs, &row, &[phi.eval(&s[..n])], p);
                }
                mirror(&mut gram, p);
                let cond = normal_solve(&gram, p, &mut rhs, 1, cfg.ridge).unwrap_or(f64::INFINITY);
                if !(cond <= cfg.condition_limit) {
                    return Err(Error::IllConditioned { step: n_steps, cond });
                }
                for j in 0..n_nodes {
                    fit.y[j * p..(j + 1) * p].copy_from_slice(&rhs);
                }
            }
        }
        let mean_t: f64 = match problem.terminal {
            Terminal::Cost(phi) => (0..np).map(|i| phi.eval(&samples[i * dim..i * dim + n])).sum::<f64>() / np as f64,
            _ => 0.0,
        };
        stats[n_steps] = StepStat { t: grid.node(n_steps), mean_y: mean_t, sup_z: 0.0, mean_abs_gamma: 0.0, mean_k: 0.0, condition: 1.0 };
        fits[n_steps] = fit;
    }

    let mut suffix = vec![0.0; np];
    let mut suffix_mean = vec![0.0; n_steps + 1];
    let mut k_snap: Vec<(usize, Vec<f64>)> = Vec::new();
    let stride = cfg.k_stride.max(1);
    k_snap.push((n_steps, suffix.clone()));
    let mut gamma_integral = 0.0;

    for b in (0..n_blocks).rev() {
        let data = fwd.block(b)?;
        let start = b * BLOCK;
        let end = ((b + 1) * BLOCK).min(n_steps);
        for step in (start..end).rev() {
            let j0 = step - start;
            let samples = &data[j0 * np * dim..(j0 + 1) * np * dim];
            let (boxes, axes) = node_geometry(&basis, samples, np, n, m, finite, cfg);
            let next = &fits[step + 1];
            let (boxes_ref, axes_ref) = (&boxes, &axes);
            let chunks = par::map_chunks(np, |range| {
                let mut sc = Scratch::new(&ctx);
                let cg = ChannelGrid::new(m, cfg.channel_nodes);
                let mut ws = basis.workspace();
                let mut row = vec![0.0; p];
                let mut acc = ChunkAcc {
                    gram: vec![0.0; p * p],
                    rhs: vec![0.0; n_cols * p],
                    rows: Vec::with_capacity(range.len() * p),
                    targets: Vec::with_capacity(range.len() * n_cols),
                    dk: Vec::with_capacity(range.len()),
                    clips: 0,
                    y_abs: 0.0,
                    z_sup: 0.0,
                    gamma_abs: 0.0,
                    growth: 0.0,
                    y_sum: 0.0,
                };
                let mut tgt = vec![0.0; n_cols];
                let mut an = vec![0.0; m];
                for i in range {
                    let s = &samples[i * dim..(i + 1) * dim];
                    let (x, a) = (&s[..n], &s[n..]);
                    // along the path: K increment and statistics
                    let out = ctx.solve_point(x, a, next, &mut sc);
                    acc.dk.push(out.dk);
                    acc.clips += out.clipped as usize;
                    acc.y_abs = max_f(acc.y_abs, abs(out.y));
                    acc.z_sup = max_f(acc.z_sup, norm(&sc.z));
                    acc.gamma_abs += norm(&sc.gamma[..m]);
                    acc.growth = max_f(acc.growth, abs(out.y) / (1.0 + norm(x)));
                    acc.y_sum += out.y;
                    if finite {
                        for j in 0..n_nodes {
                            cg.point(axes_ref, j, &mut an);
                            let o = ctx.solve_point(x, &an, next, &mut sc);
                            let t = &mut tgt[j * per_node..(j + 1) * per_node];
                            t[0] = o.y;
                            t[1..1 + nx].copy_from_slice(&sc.z);
                            t[1 + nx..].copy_from_slice(&sc.gamma[..m]);
                            acc.clips += o.clipped as usize;
                            acc.y_abs = max_f(acc.y_abs, abs(o.y));
                        }
                    } else {
                        tgt[0] = out.y;
                        tgt[1..1 + nx].copy_from_slice(&sc.z);
                    }
                    basis.design_row(boxes_ref, &x[..nx], &mut row, &mut ws);
                    accumulate(&mut acc.gram, &mut acc.rhs, &row, &tgt, p);
                    acc.rows.extend_from_slice(&row);
                    acc.targets.extend_from_slice(&tgt);
                }
                acc
            });
            let mut gram = vec![0.0; p * p];
            let mut rhs = vec![0.0; n_cols * p];
            let (mut y_sum, mut z_sup, mut gamma_abs) = (0.0, 0.0f64, 0.0);
            let mut idx = 0;
            for c in &chunks {
                for (g, v) in gram.iter_mut().zip(&c.gram) {
                    *g += v;
                }
                for (g, v) in rhs.iter_mut().zip(&c.rhs) {
                    *g += v;
                }
                for d in &c.dk {
                    suffix[idx] += d;
                    idx += 1;
                }
                diag.clip_events += c.clips;
                diag.y_abs_max = max_f(diag.y_abs_max, c.y_abs);
                diag.growth_constant = max_f(diag.growth_constant, c.growth);
                z_sup = max_f(z_sup, c.z_sup);
                gamma_abs += c.gamma_abs;
                y_sum += c.y_sum;
            }
            diag.evaluations += np * (1 + if finite { n_nodes } else { 0 });
            mirror(&mut gram, p);
            let cond = normal_solve(&gram, p, &mut rhs, n_cols, cfg.ridge).unwrap_or(f64::INFINITY);
            if !(cond <= cfg.condition_limit) {
                return Err(Error::IllConditioned { step, cond });
            }
            let col = |k: usize| &rhs[k * p..(k + 1) * p];
            // fitted values and the Z regression error
            let mut z_res = 0.0;
            for c in &chunks {
                for i in 0..c.dk.len() {
                    let row = &c.rows[i * p..(i + 1) * p];
                    let t = &c.targets[i * n_cols..(i + 1) * n_cols];
                    for j in 0..n_nodes {
                        let yf: f64 = row.iter().zip(col(j * per_node)).map(|(r, c)| r * c).sum();
                        diag.y_fit_abs_max = max_f(diag.y_fit_abs_max, abs(yf));
                        for k in 0..nx {
                            let zf: f64 = row.iter().zip(col(j * per_node + 1 + k)).map(|(r, c)| r * c).sum();
                            let e = t[j * per_node + 1 + k] - zf;
                            z_res += e * e;
                        }
                    }
                }
            }
            let z_se = sqrt(z_res / (np * n_nodes * nx.max(1)) as f64) / sqrt(np as f64);
            diag.z_regression_se = max_f(diag.z_regression_se, z_se);
            diag.z_sup = max_f(diag.z_sup, z_sup);
            diag.max_condition = max_f(diag.max_condition, cond);
            let mean_gamma = gamma_abs / np as f64;
            gamma_integral += h * mean_gamma;
            suffix_mean[step] = suffix.iter().sum::<f64>() / np as f64;
            if step % stride == 0 || step == 0 {
                k_snap.push((step, suffix.clone()));
            }
            stats[step] = StepStat {
                t: grid.node(step),
                mean_y: y_sum / np as f64,
                sup_z: z_sup,
                mean_abs_gamma: mean_gamma,
                mean_k: 0.0,
                condition: cond,
            };
            let mut fit = StepFit {
                boxes,
                axes,
                y: Vec::with_capacity(n_nodes * p),
                z: Vec::with_capacity(n_nodes * nx * p),
                gamma: Vec::with_capacity(n_nodes * na * p),
            };
            for j in 0..n_nodes {
                fit.y.extend_from_slice(col(j * per_node));
                for k in 0..nx {
                    fit.z.extend_from_slice(col(j * per_node + 1 + k));
                }
                for c in 0..na {
                    fit.gamma.extend_from_slice(col(j * per_node + 1 + nx + c));
                }
            }
            fits[step] = fit;
        }
    }

    // K_t = S_0 - S_t along each path
    k_snap.reverse();
    let s0 = k_snap.first().map(|(_, s)| s.clone()).unwrap_or_else(|| vec![0.0; np]);
    let nt = k_snap.len();
    let mut values = vec![0.0; np * nt];
    for (r, (_, s)) in k_snap.iter().enumerate() {
        for i in 0..np {
            values[i * nt + r] = s0[i] - s[i];
        }
    }
    let k_path = KPath { times: k_snap.iter().map(|(t, _)| grid.node(*t)).collect(), n_paths: np, values };
    for (stat, s) in stats.iter_mut().zip(&suffix_mean) {
        stat.mean_k = suffix_mean[0] - s;
    }
    stats[n_steps].mean_k = suffix_mean[0];
    diag.gamma_integral = gamma_integral;
    diag.k_monotone = k_path.is_monotone();
    diag.k_final_mean = k_path.final_mean();

    let mut sc = Scratch::new(&ctx);
    let y0 = ctx.solve_point(problem.x0, problem.a0, &fits[1.min(n_steps)], &mut sc).y;
    let mut solution = BsdeSolution {
        y0,
        y0_regression: 0.0,
        x0: problem.x0.to_vec(),
        a0: problem.a0.to_vec(),
        penalization: problem.penalization,
        discount: beta,
        horizon,
        grid,
        config: cfg.clone(),
        forced_k_rate: problem.forced_k_rate,
        fits,
        k_path,
        stats,
        diagnostics: diag,
    };
    solution.y0_regression = solution.fitted(model, 0, problem.x0, problem.a0);
    Ok(solution)
}

/// State boxes, radial centres and channel axes at one node.
fn node_geometry(basis: &Basis, samples: &[f64], np: usize, n: usize, m: usize, finite: bool, cfg: &BsdeConfig) -> (Boxes, Vec<Axis>) {
    let dim = n + m;
    let mut cols: Vec<Vec<f64>> = (0..basis.n_x).map(|k| (0..np).map(|i| samples[i * dim + k]).collect()).collect();
    let mut boxes = basis.boxes_from(&mut cols, cfg.box_quantile);
    place_centers(basis, &mut boxes, samples, np, dim);
    let axes = if finite {
        (0..m)
            .map(|c| {
                let mut v: Vec<f64> = (0..np).map(|i| samples[i * dim + n + c]).collect();
                Axis::from_samples(&mut v, cfg.box_quantile, cfg.channel_nodes)
            })
            .collect()
    } else {
        Vec::new()
    };
    (boxes, axes)
}

fn place_centers(basis: &Basis, boxes: &mut Boxes, samples: &[f64], np: usize, dim: usize) {
    let r = basis.spec.radial;
    boxes.centers = Vec::with_capacity(r * basis.n_x);
    for c in 0..r {
        let i = (c * np) / r.max(1) + np / (2 * r.max(1));
        let i = i.min(np - 1);
        boxes.centers.extend_from_slice(&samples[i * dim..i * dim + basis.n_x]);
    }
}

/// Adds `row ⊗ row` to the upper triangle of `gram` and `row · t_k` to every
/// right-hand side.
#[inline]
fn accumulate(gram: &mut [f64], rhs: &mut [f64], row: &[f64], targets: &[f64], p: usize) {
    for a in 0..p {
        let ra = row[a];
        if ra == 0.0 {
            continue;
        }
        let g = &mut gram[a * p..(a + 1) * p];
        for b in a..p {
            g[b] += ra * row[b];
        }
        for (k, t) in targets.iter().enumerate() {
            rhs[k * p + a] += ra * t;
        }
    }
}

fn mirror(gram: &mut [f64], p: usize) {
    for a in 0..p {
        for b in 0..a {
            gram[a * p + b] = gram[b * p + a];
        }
    }
}

/// `[0, T]` grid whose discounted tail is within the configured tolerance.
pub fn discounted_grid(model: &ModelInstance, beta: f64, cfg: &BsdeConfig) -> Result<TimeGrid> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("discount must be positive".into()));
    }
    let t = truncation_horizon(model.cost.m_ell, beta, cfg.tail_tol).max(cfg.h);
    TimeGrid::with_step(t, cfg.h)
}

fn check_tail(model: &ModelInstance, beta: f64, grid: &TimeGrid, tol: f64) -> Result<()> {
    let t = grid.t_end - grid.t0;
    if model.cost.m_ell * exp(-beta * t) / beta > tol {
        return Err(Error::TailTolerance { required: truncation_horizon(model.cost.m_ell, beta, tol), t_end: t });
    }
    Ok(())
}

/// Penalized infinite-horizon BSDE with terminal value 0 at the truncation
/// horizon.
pub fn solve_penalized(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    beta: f64,
    n: Penalization,
    grid: &TimeGrid,
    cfg: &BsdeConfig,
) -> Result<BsdeSolution> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("discount must be positive".into()));
    }
    check_tail(model, beta, grid, cfg.tail_tol)?;
    solve(
        &BsdeProblem { model, x0, a0, beta, penalization: n, terminal: Terminal::Zero, grid: *grid, forced_k_rate: 0.0 },
        cfg,
    )
}

/// Penalized BSDE on `[0, T]` with terminal value `φ(X_T)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_finite_horizon(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    beta: f64,
    phi: &TerminalCost,
    n: Penalization,
    grid: &TimeGrid,
    cfg: &BsdeConfig,
) -> Result<BsdeSolution> {
    solve(
        &BsdeProblem { model, x0, a0, beta, penalization: n, terminal: Terminal::Cost(phi), grid: *grid, forced_k_rate: 0.0 },
        cfg,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LadderEntry {
    pub n: u32,
    pub y0: f64,
    pub gamma_integral: f64,
    pub k_final_mean: f64,
    pub clip_rate: f64,
    pub k_monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MonotonicityReport {
    pub entries: Vec<LadderEntry>,
    pub y0_limit: f64,
    pub tolerance: f64,
    /// Largest `Y₀(n₂) - Y₀(n₁)` over finite `n₁ < n₂`.
    pub max_violation: f64,
    /// Largest `Y₀(∞) - Y₀(n)`; informational.
    pub limit_excess: f64,
    pub monotone: bool,
    /// First `n` with `|Y₀(n) - Y₀(next)| < saturation tolerance`.
    pub saturated_at: Option<u32>,
    pub saturation_tol: f64,
    /// `E ∫|Γ|` never increases along the ladder (beyond the tolerance).
    pub gamma_trend_decreasing: bool,
    pub k_monotone: bool,
}

impl MonotonicityReport {
    fn build(entries: Vec<LadderEntry>, limit: &BsdeSolution, tolerance: f64) -> Self {
        let mut ys: Vec<f64> = entries.iter().map(|e| e.y0).collect();
        let limit_excess = ys.iter().map(|y| limit.y0 - y).fold(f64::NEG_INFINITY, max_f);
        let mut max_violation = f64::NEG_INFINITY;
        for i in 0..ys.len() {
            for j in i + 1..ys.len() {
                max_violation = max_f(max_violation, ys[j] - ys[i]);
            }
        }
        ys.push(limit.y0);
        let saturation_tol = 10.0 * tolerance;
        let saturated_at = (0..entries.len())
            .find(|&i| abs(ys[i] - ys[i + 1]) < saturation_tol)
            .map(|i| entries[i].n);
        let gamma_trend_decreasing = entries
            .windows(2)
            .all(|w| w[1].gamma_integral <= w[0].gamma_integral + tolerance);
        let k_monotone = entries.iter().all(|e| e.k_monotone) && limit.diagnostics.k_monotone;
        MonotonicityReport {
            y0_limit: limit.y0,
            monotone: max_violation <= tolerance,
            max_violation,
            limit_excess,
            tolerance,
            saturated_at,
            saturation_tol,
            gamma_trend_decreasing,
            k_monotone,
            entries,
        }
    }

    pub fn failure(&self) -> Option<alloc::string::String> {
        if !self.monotone {
            Some(alloc::format!(
                "Y0 increases by {:.3e} along the penalization ladder (tolerance {:.1e}); regression bias suspected",
                self.max_violation, self.tolerance
            ))
        } else if !self.k_monotone {
            Some("a reconstructed K path decreases".into())
        } else {
            None
        }
    }
}

fn ladder(
    problem: &BsdeProblem<'_>,
    n_ladder: &[u32],
    cfg: &BsdeConfig,
    tolerance: f64,
) -> Result<(BsdeSolution, MonotonicityReport)> {
    if n_ladder.is_empty() || n_ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("penalization ladder must be nonempty and increasing".into()));
    }
    let limit = solve(&BsdeProblem { penalization: Penalization::Infinite, ..problem.clone() }, cfg)?;
    let mut entries = Vec::with_capacity(n_ladder.len());
    for &n in n_ladder {
        let sol = solve(&BsdeProblem { penalization: Penalization::Finite(n), ..problem.clone() }, cfg)?;
        entries.push(LadderEntry {
            n,
            y0: sol.y0,
            gamma_integral: sol.diagnostics.gamma_integral,
            k_final_mean: sol.diagnostics.k_final_mean,
            clip_rate: sol.diagnostics.clip_rate(),
            k_monotone: sol.diagnostics.k_monotone,
        });
    }
    let report = MonotonicityReport::build(entries, &limit, tolerance);
    Ok((limit, report))
}

/// Runs the penalization ladder with common random numbers and the `n = ∞`
/// limit on the discounted problem. The tolerance is `10⁻³ M_ℓ/β`.
pub fn constrained_limit(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    beta: f64,
    n_ladder: &[u32],
    cfg: &BsdeConfig,
) -> Result<(BsdeSolution, MonotonicityReport)> {
    let grid = discounted_grid(model, beta, cfg)?;
    let problem = BsdeProblem {
        model,
        x0,
        a0,
        beta,
        penalization: Penalization::Infinite,
        terminal: Terminal::Zero,
        grid,
        forced_k_rate: 0.0,
    };
    ladder(&problem, n_ladder, cfg, 1e-3 * model.cost.m_ell / beta)
}

/// Finite-horizon version of [`constrained_limit`], tolerance
/// `10⁻³ (M_ℓ T + C_φ)`.
#[allow(clippy::too_many_arguments)]
pub fn constrained_limit_finite(
    model: &ModelInstance,
    x0: &[f64],
    a0: &[f64],
    beta: f64,
    phi: &TerminalCost,
    grid: &TimeGrid,
    n_ladder: &[u32],
    cfg: &BsdeConfig,
) -> Result<(BsdeSolution, MonotonicityReport)> {
    let problem = BsdeProblem {
        model,
        x0,
        a0,
        beta,
        penalization: Penalization::Infinite,
        terminal: Terminal::Cost(phi),
        grid: *grid,
        forced_k_rate: 0.0,
    };
    let t = grid.t_end - grid.t0;
    ladder(&problem, n_ladder, cfg, 1e-3 * (model.cost.m_ell * t + model.cost.c_phi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaximalityReport {
    /// `Y₀(reference) - Y₀(candidate)`.
    pub y0_margin: f64,
    /// Smallest `Y(reference) - Y(candidate)` over the probe points.
    pub min_margin: f64,
    pub n_points: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the fitted `Y` of two solutions on a common grid at Halton
/// points of the reference boxes, every `k_stride` nodes. The reference is
/// maximal when no margin falls below `-tol`.
pub fn maximality_probe(
    model: &ModelInstance,
    candidate: &BsdeSolution,
    reference: &BsdeSolution,
    tol: f64,
) -> Result<MaximalityReport> {
    if candidate.grid != reference.grid || candidate.fits.len() != reference.fits.len() {
        return Err(Error::InvalidArgument("solutions live on different grids".into()));
    }
    let (n, m) = (model.n_modes(), model.m_controls());
    let rb = reference.basis(model);
    let stride = reference.config.k_stride.max(1);
    let mut min_margin = f64::INFINITY;
    let mut count = 0;
    const POINTS: usize = 32;
    let mut node = 0;
    while node <= reference.grid.n_steps {
        let boxes = &reference.fits[node].boxes;
        for q in 0..POINTS {
            let mut x = reference.x0.clone();
            let mut a = reference.a0.clone();
            for (c, (ctr, half)) in boxes.boxes.iter().enumerate().take(rb.n_x) {
                x[c] = ctr + half * (2.0 * halton((q + 1) as u64, c) - 1.0);
            }
            let span = reference.config.channel_nodes.saturating_sub(1) as f64;
            for (c, ax) in reference.fits[node].axes.iter().enumerate() {
                a[c] = ax.lo + ax.step * span * halton((q + 1) as u64, rb.n_x + c);
            }
            debug_assert_eq!((x.len(), a.len()), (n, m));
            let margin = reference.fitted(model, node, &x, &a) - candidate.fitted(model, node, &x, &a);
            min_margin = min_f(min_margin, margin);
            count += 1;
        }
        node += stride;
    }
    let y0_margin = reference.y0 - candidate.y0;
    min_margin = min_f(min_margin, y0_margin);
    Ok(MaximalityReport { y0_margin, min_margin, n_points: count, tolerance: tol, passed: min_margin >= -tol })
}

/// Sample mean and standard error of a value list, for callers comparing
/// ladder entries.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    mean_se(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_desk_model, RunningCost};

    fn small_cfg() -> BsdeConfig {
        let mut cfg = BsdeConfig::new(0.05, 400, BasisSpec::polynomial(6, 0, 6), 11);
        cfg.x_spread = 1.5;
        cfg.a_spread = 1.5;
        cfg
    }

    #[test]
    fn constant_cost_discounted_is_exact() {
        let mut model = build_desk_model(0.1).unwrap();
        model.cost.running = RunningCost::Constant { c: 0.7 };
        let cfg = small_cfg();
        let beta = 0.5;
        let grid = discounted_grid(&model, beta, &cfg).unwrap();
        let sol = solve_penalized(&model, &[0.0], &[0.0], beta, Penalization::Finite(4), &grid, &cfg).unwrap();
        let h = grid.h();
        // the implicit step gives y_k = (h c + y_{k+1})/(1 + βh) exactly
        let mut y = 0.0;
        for _ in 0..grid.n_steps {
            y = (h * 0.7 + y) / (1.0 + beta * h);
        }
        assert!((sol.y0 - y).abs() < 1e-9, "{} vs {}", sol.y0, y);
        let t = grid.t_end;
        assert!((sol.y0 - 0.7 * (1.0 - (-beta * t).exp()) / beta).abs() < 1e-2);
        assert!(sol.diagnostics.k_final_mean.abs() < 1e-9);
        assert!(sol.diagnostics.gamma_integral < 1e-9);
    }

    #[test]
    fn k_paths_are_monotone_and_start_at_zero() {
        let model = build_desk_model(0.1).unwrap();
        let cfg = small_cfg();
        let grid = TimeGrid::with_step(3.0, cfg.h).unwrap();
        let phi = TerminalCost::Zero;
        let sol = solve_finite_horizon(&model, &[0.0], &[1.0], 0.5, &phi, Penalization::Finite(8), &grid, &cfg).unwrap();
        assert!(sol.k_path.is_monotone());
        assert!(sol.k_path.final_mean() > 0.0);
        assert_eq!(sol.k_path.times.first().copied(), Some(0.0));
    }

    #[test]
    fn forced_k_lowers_the_value() {
        let model = build_desk_model(0.1).unwrap();
        let cfg = small_cfg();
        let grid = TimeGrid::with_step(2.0, cfg.h).unwrap();
        let base = BsdeProblem {
            model: &model,
            x0: &[0.0],
            a0: &[0.0],
            beta: 0.5,
            penalization: Penalization::Infinite,
            terminal: Terminal::Zero,
            grid,
            forced_k_rate: 0.0,
            };
        let reference = solve(&base, &cfg).unwrap();
        let candidate = solve(&BsdeProblem { forced_k_rate: 0.05, ..base.clone() }, &cfg).unwrap();
        let rep = maximality_probe(&model, &candidate, &reference, 1e-9).unwrap();
        assert!(rep.y0_margin > 0.0);
        assert!(rep.passed);
        let same = maximality_probe(&model, &reference, &reference, 1e-12).unwrap();
        assert_eq!(same.min_margin, 0.0);
    }

    #[test]
    fn grid_then_golden_finds_interior_minimum() {
        let mut f = |x: f64| (x - 0.37) * (x - 0.37);
        let (x, _) = grid_then_golden(&mut f, -1.0, 1.0, 9, 40);
        assert!((x - 0.37).abs() < 1e-6);
    }
}
