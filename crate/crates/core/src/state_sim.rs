//! Forward simulation of the mild state equation by exponential Euler with
//! exact per-mode stochastic convolution.
//!
//! Any part of the drift that is linear in the state (`-κx` in the catalog
//! forms) is moved into the generator before stepping, so the scheme
//! integrates `A - κ` exactly and only the nonlinear remainder is frozen
//! over a step.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{abs, ceil, conv_variance, exp, mean_se, norm, phi1, powf, sqrt};
use crate::model::{DriftForm, ModelInstance};
use crate::par;
use crate::rng::{self, purpose, BLOCK};

/// Uniform time grid on `[t0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(t_end > t0) {
            return Err(Error::InvalidArgument("time grid needs t_end > t0 and n_steps > 0".into()));
        }
        Ok(TimeGrid { t0, t_end, n_steps })
    }

    /// Grid on `[0, t_end]` whose step is the largest not exceeding `h`.
    pub fn with_step(t_end: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("step must be positive".into()));
        }
        let n = ceil(t_end / h - 1e-9).max(1.0) as usize;
        TimeGrid::new(0.0, t_end, n)
    }

    #[inline]
    pub fn h(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.h()
        }
    }
}

/// What a feedback policy sees at a grid node.
pub struct PolicyInput<'a> {
    pub t: f64,
    pub step: usize,
    pub x: &'a [f64],
    /// Current randomized channel `I_t`; empty for ordinary controls.
    pub channel: &'a [f64],
}

type FeedbackFn = dyn Fn(&PolicyInput<'_>, &mut [f64]) + Send + Sync;
type EtaFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Source of the step height `η` in a latched step intensity.
#[derive(Clone)]
pub enum EtaSource {
    Fixed(Vec<f64>),
    /// `η` as a function of the state observed at the latch time.
    OfState(Arc<EtaFn>),
}

/// `gain · 1_{[t0, t1)}(t) · scale ⊙ η`, with `η` frozen at the first node
/// `≥ t0`.
#[derive(Clone)]
pub struct StepIntensity {
    pub t0: f64,
    pub t1: f64,
    pub gain: f64,
    pub scale: Vec<f64>,
    pub eta: EtaSource,
}

#[derive(Clone)]
pub enum PolicyKind {
    Constant(Vec<f64>),
    /// One control vector per grid step.
    OpenLoop(Vec<Vec<f64>>),
    Feedback(Arc<FeedbackFn>),
    Step(StepIntensity),
}

/// A control (or randomizing intensity) with an optional sup-norm cap.
#[derive(Clone)]
pub struct ControlPolicy {
    pub kind: PolicyKind,
    pub bound: Option<f64>,
}

impl core::fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let kind = match &self.kind {
            PolicyKind::Constant(_) => "constant",
            PolicyKind::OpenLoop(_) => "open_loop",
            PolicyKind::Feedback(_) => "feedback",
            PolicyKind::Step(_) => "step",
        };
        f.debug_struct("ControlPolicy").field("kind", &kind).field("bound", &self.bound).finish()
    }
}

impl ControlPolicy {
    pub fn constant(u: Vec<f64>) -> Self {
        ControlPolicy { kind: PolicyKind::Constant(u), bound: None }
    }

    pub fn zero(m: usize) -> Self {
        Self::constant(vec![0.0; m])
    }

    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(&PolicyInput<'_>, &mut [f64]) + Send + Sync + 'static,
    {
        ControlPolicy { kind: PolicyKind::Feedback(Arc::new(f)), bound: None }
    }

    pub fn open_loop(path: Vec<Vec<f64>>) -> Self {
        ControlPolicy { kind: PolicyKind::OpenLoop(path), bound: None }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub(crate) fn eval(&self, input: &PolicyInput<'_>, latch: &mut Option<Vec<f64>>, out: &mut [f64]) {
        match &self.kind {
            PolicyKind::Constant(u) => out.copy_from_slice(u),
            PolicyKind::OpenLoop(path) => {
                let row = &path[input.step.min(path.len() - 1)];
                out.copy_from_slice(row);
            }
            PolicyKind::Feedback(f) => f(input, out),
            PolicyKind::Step(s) => {
                let eps = 1e-9 * (1.0 + abs(input.t));
                if input.t + eps >= s.t0 && latch.is_none() {
                    let mut eta = vec![0.0; out.len()];
                    match &s.eta {
                        EtaSource::Fixed(v) => {
                            for (e, v) in eta.iter_mut().zip(v) {
                                *e = *v;
                            }
                        }
                        EtaSource::OfState(f) => f(input.x, &mut eta),
                    }
                    *latch = Some(eta);
                }
                let active = input.t + eps >= s.t0 && input.t + eps < s.t1;
                match (active, latch.as_ref()) {
                    (true, Some(eta)) => {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o = s.gain * s.scale[j] * eta[j];
                        }
                    }
                    _ => out.iter_mut().for_each(|o| *o = 0.0),
                }
            }
        }
        if let Some(b) = self.bound {
            let n = norm(out);
            if n > b {
                let f = b / n;
                out.iter_mut().for_each(|o| *o *= f);
            }
        }
    }
}

/// Linear part absorbed into the generator: returns `κ` with `F = -κx + F̃`.
pub(crate) fn absorbed_kappa(form: &DriftForm) -> f64 {
    match form {
        DriftForm::Linear { kappa } | DriftForm::TanhControl { kappa, .. } | DriftForm::Field { kappa, .. } => *kappa,
        DriftForm::Zero | DriftForm::Custom(_) => 0.0,
    }
}

/// Per-step constants of the exponential Euler scheme.
#[derive(Debug, Clone)]
pub(crate) struct Stepper {
    pub n: usize,
    pub m: usize,
    pub h: f64,
    pub kappa: f64,
    /// `e^{λ'h}` with `λ' = λ - κ`.
    pub decay: Vec<f64>,
    /// `h φ₁(λ'h)`.
    pub drift_gain: Vec<f64>,
    /// Standard deviation of `g_k ∫ e^{λ'(h-s)} dW_s`.
    pub noise_sd: Vec<f64>,
    /// `r_j √h`.
    pub channel_sd: Vec<f64>,
}

impl Stepper {
    pub fn new(model: &ModelInstance, h: f64) -> Self {
        let kappa = absorbed_kappa(&model.drift.form);
        let lam: Vec<f64> = model.operator.eigenvalues.iter().map(|l| l - kappa).collect();
        let conv_sd: Vec<f64> = lam.iter().map(|l| sqrt(conv_variance(*l, h))).collect();
        Stepper {
            n: model.n_modes(),
            m: model.m_controls(),
            h,
            kappa,
            decay: lam.iter().map(|l| exp(l * h)).collect(),
            drift_gain: lam.iter().map(|l| h * phi1(l * h)).collect(),
            noise_sd: conv_sd.iter().zip(&model.noise.gains).map(|(s, g)| s * g).collect(),
            channel_sd: model.randomization.weights.iter().map(|r| r * sqrt(h)).collect(),
        }
    }

    /// Nonlinear drift remainder `F(x, a) + κx`.
    #[inline]
    pub fn remainder(&self, model: &ModelInstance, x: &[f64], a: &[f64], out: &mut [f64]) {
        model.drift_into(x, a, out);
        if self.kappa != 0.0 {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += self.kappa * xi;
            }
        }
    }

    /// Conditional mean of the next state given `(x, a)`, using `buf` for `F̃`.
    #[inline]
    pub fn mean(&self, model: &ModelInstance, x: &[f64], a: &[f64], buf: &mut [f64], out: &mut [f64]) {
        self.remainder(model, x, a, buf);
        for k in 0..self.n {
            out[k] = self.decay[k] * x[k] + self.drift_gain[k] * buf[k];
        }
    }
}

/// One transition as seen by a path visitor.
pub(crate) struct Transition<'a> {
    pub step: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub channel: &'a [f64],
    /// Standardised convolution increments, one per mode.
    pub zeta: &'a [f64],
    /// Channel Brownian increments `ΔW²` (empty for ordinary controls).
    pub dw2: &'a [f64],
    pub x_next: &'a [f64],
    pub channel_next: &'a [f64],
}

pub(crate) enum Driver<'a> {
    /// Ordinary control `u = policy(t, x)`.
    Ordinary(&'a ControlPolicy),
    /// Randomized channel: `u = I`, `dI = R α dt + R dW²`.
    Randomized(&'a ControlPolicy),
}

pub(crate) struct PathRun<'a> {
    pub model: &'a ModelInstance,
    pub grid: &'a TimeGrid,
    pub seed: u64,
    pub driver: Driver<'a>,
    pub stepper: Stepper,
}

pub(crate) const BLOWUP: f64 = 1e12;

impl<'a> PathRun<'a> {
    pub fn new(model: &'a ModelInstance, grid: &'a TimeGrid, seed: u64, driver: Driver<'a>) -> Self {
        let stepper = Stepper::new(model, grid.h());
        PathRun { model, grid, seed, driver, stepper }
    }

    /// Runs steps `[start, end)` of one path from the given node state.
    /// `start` must be a multiple of [`BLOCK`] so that the random stream can
    /// be regenerated independently of earlier steps.
    pub fn run<F>(
        &self,
        path: usize,
        start: usize,
        end: usize,
        x_start: &[f64],
        channel_start: &[f64],
        noise: Option<&[f64]>,
        mut visit: F,
    ) -> Result<()>
    where
        F: FnMut(&Transition<'_>),
    {
        debug_assert!(start.is_multiple_of(BLOCK) || noise.is_some());
        let st = &self.stepper;
        let (n, m) = (st.n, st.m);
        let randomized = matches!(self.driver, Driver::Randomized(_));
        let mut x = x_start.to_vec();
        let mut xn = vec![0.0; n];
        let mut ch = channel_start.to_vec();
        let mut chn = ch.clone();
        let mut u = vec![0.0; m];
        let mut alpha = vec![0.0; m];
        let mut buf = vec![0.0; n];
        let mut zeta = vec![0.0; n];
        let mut dw2 = vec![0.0; if randomized { m } else { 0 }];
        let mut latch: Option<Vec<f64>> = None;
        let mut rng_x = None;
        let mut rng_i = None;
        let weights = &self.model.randomization.weights;
        for step in start..end {
            let t = self.grid.node(step);
            if noise.is_none() && (step % BLOCK == 0 || rng_x.is_none()) {
                let block = (step / BLOCK) as u64;
                rng_x = Some(rng::stream(self.seed, purpose::STATE_NOISE, block, path as u64));
                if randomized {
                    rng_i = Some(rng::stream(self.seed, purpose::CHANNEL_NOISE, block, path as u64));
                }
            }
            match &self.driver {
                Driver::Ordinary(p) => {
                    let input = PolicyInput { t, step, x: &x, channel: &[] };
                    p.eval(&input, &mut latch, &mut u);
                }
                Driver::Randomized(p) => {
                    u.copy_from_slice(&ch);
                    let input = PolicyInput { t, step, x: &x, channel: &ch };
                    p.eval(&input, &mut latch, &mut alpha);
                }
            }
            match noise {
                Some(src) => zeta.copy_from_slice(&src[(step - start) * n..(step - start + 1) * n]),
                None => {
                    let r = rng_x.as_mut().unwrap();
                    zeta.iter_mut().for_each(|z| *z = rng::normal(r));
                }
            }
            st.mean(self.model, &x, &u, &mut buf, &mut xn);
            let mut bad = false;
            for k in 0..n {
                xn[k] += st.noise_sd[k] * zeta[k];
                if !(abs(xn[k]) <= BLOWUP) {
                    bad = true;
                }
            }
            if bad {
                return Err(Error::NonFinite { path, step: step + 1 });
            }
            if randomized {
                let r = rng_i.as_mut().unwrap();
                for j in 0..m {
                    dw2[j] = sqrt(st.h) * rng::normal(r);
                    chn[j] = ch[j] + st.h * weights[j] * alpha[j] + weights[j] * dw2[j];
                }
            }
            visit(&Transition {
                step,
                t,
                x: &x,
                u: &u,
                channel: &ch,
                zeta: &zeta,
                dw2: &dw2,
                x_next: &xn,
                channel_next: &chn,
            });
            core::mem::swap(&mut x, &mut xn);
            if randomized {
                core::mem::swap(&mut ch, &mut chn);
            }
        }
        Ok(())
    }
}

/// Trajectories of a simulated ensemble, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n_modes: usize,
    pub m_controls: usize,
    /// `[path][node 0..=n_steps][mode]`.
    pub states: Vec<f64>,
    /// `[path][step 0..n_steps][control]`, the control held on each step.
    pub controls: Vec<f64>,
    /// `[path][step][mode]`, standardised convolution increments driving `W¹`.
    pub noise1: Vec<f64>,
    /// `[path][step][control]`, Brownian increments of `W²` (randomized runs).
    pub noise2: Vec<f64>,
    pub master_seed: u64,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let per = (self.grid.n_steps + 1) * self.n_modes;
        let off = path * per + node * self.n_modes;
        &self.states[off..off + self.n_modes]
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.grid.n_steps + step) * self.m_controls;
        &self.controls[off..off + self.m_controls]
    }

    pub fn noise1_path(&self, path: usize) -> &[f64] {
        let per = self.grid.n_steps * self.n_modes;
        &self.noise1[path * per..(path + 1) * per]
    }
}

pub(crate) struct PathRecord {
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub noise1: Vec<f64>,
    pub noise2: Vec<f64>,
    pub channel: Vec<f64>,
}

pub(crate) fn record_path(
    run: &PathRun<'_>,
    path: usize,
    x0: &[f64],
    a0: &[f64],
    noise: Option<&[f64]>,
) -> Result<PathRecord> {
    let n_steps = run.grid.n_steps;
    let (n, m) = (run.stepper.n, run.stepper.m);
    let randomized = matches!(run.driver, Driver::Randomized(_));
    let mut rec = PathRecord {
        states: Vec::with_capacity((n_steps + 1) * n),
        controls: Vec::with_capacity(n_steps * m),
        noise1: Vec::with_capacity(n_steps * n),
        noise2: Vec::new(),
        channel: Vec::new(),
    };
    rec.states.extend_from_slice(x0);
    if randomized {
        rec.channel.extend_from_slice(a0);
    }
    run.run(path, 0, n_steps, x0, a0, noise, |tr| {
        rec.states.extend_from_slice(tr.x_next);
        rec.controls.extend_from_slice(tr.u);
        rec.noise1.extend_from_slice(tr.zeta);
        if randomized {
            rec.noise2.extend_from_slice(tr.dw2);
            rec.channel.extend_from_slice(tr.channel_next);
        }
    })?;
    Ok(rec)
}

pub(crate) fn collect_paths<F>(n_paths: usize, f: F) -> Result<Vec<PathRecord>>
where
    F: Fn(usize) -> Result<PathRecord> + Sync + Send,
{
    let chunks = par::map_chunks(n_paths, |range| range.map(&f).collect::<Result<Vec<_>>>());
    let mut out = Vec::with_capacity(n_paths);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub(crate) fn assemble(
    grid: &TimeGrid,
    n: usize,
    m: usize,
    seed: u64,
    records: Vec<PathRecord>,
) -> (PathEnsemble, Vec<f64>) {
    let n_paths = records.len();
    let mut ens = PathEnsemble {
        grid: *grid,
        n_paths,
        n_modes: n,
        m_controls: m,
        states: Vec::with_capacity(n_paths * (grid.n_steps + 1) * n),
        controls: Vec::with_capacity(n_paths * grid.n_steps * m),
        noise1: Vec::with_capacity(n_paths * grid.n_steps * n),
        noise2: Vec::new(),
        master_seed: seed,
    };
    let mut channel = Vec::new();
    for r in records {
        ens.states.extend(r.states);
        ens.controls.extend(r.controls);
        ens.noise1.extend(r.noise1);
        ens.noise2.extend(r.noise2);
        channel.extend(r.channel);
    }
    (ens, channel)
}

fn check_dims(model: &ModelInstance, x0: &[f64]) -> Result<()> {
    model.check_shapes()?;
    if x0.len() != model.n_modes() {
        return Err(Error::Dimension { what: "initial state", expected: model.n_modes(), got: x0.len() });
    }
    Ok(())
}

/// Simulates `n_paths` controlled trajectories from `x0`.
pub fn simulate_state(
    model: &ModelInstance,
    x0: &[f64],
    policy: &ControlPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_dims(model, x0)?;
    let run = PathRun::new(model, grid, seed, Driver::Ordinary(policy));
    let m = model.m_controls();
    let a0 = vec![0.0; m];
    let recs = collect_paths(n_paths, |p| record_path(&run, p, x0, &a0, None))?;
    Ok(assemble(grid, model.n_modes(), m, seed, recs).0)
}

/// Re-runs paths from given initial states with prescribed standardised
/// convolution increments (`[path][step][mode]`).
pub fn replay_state(
    model: &ModelInstance,
    x0s: &[Vec<f64>],
    policy: &ControlPolicy,
    grid: &TimeGrid,
    noise1: &[f64],
) -> Result<PathEnsemble> {
    let n = model.n_modes();
    let per = grid.n_steps * n;
    if noise1.len() != x0s.len() * per {
        return Err(Error::Dimension { what: "noise increments", expected: x0s.len() * per, got: noise1.len() });
    }
    for x0 in x0s {
        check_dims(model, x0)?;
    }
    let run = PathRun::new(model, grid, 0, Driver::Ordinary(policy));
    let m = model.m_controls();
    let a0 = vec![0.0; m];
    let recs = collect_paths(x0s.len(), |p| {
        record_path(&run, p, &x0s[p], &a0, Some(&noise1[p * per..(p + 1) * per]))
    })?;
    Ok(assemble(grid, n, m, 0, recs).0)
}

/// Per-step coupling statistics: `max_paths |X_t - X'_t| / (e^{-μt} |x0 - x0'|)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GapStat {
    pub t: f64,
    pub max_ratio: f64,
}

/// Couples two runs through shared noise; the second run applies the
/// controls chosen along the first.
pub fn contraction_gap(
    model: &ModelInstance,
    x0: &[f64],
    x0_prime: &[f64],
    policy: &ControlPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<GapStat>> {
    check_dims(model, x0)?;
    check_dims(model, x0_prime)?;
    let ens = simulate_state(model, x0, policy, grid, n_paths, seed)?;
    let d0 = crate::math::dist(x0, x0_prime);
    let mu = model.drift.dissipativity;
    let n = model.n_modes();
    let chunks = par::map_chunks(n_paths, |range| -> Result<Vec<f64>> {
        let mut ratios = vec![0.0f64; grid.n_steps + 1];
        for p in range {
            let controls: Vec<Vec<f64>> = (0..grid.n_steps).map(|s| ens.control(p, s).to_vec()).collect();
            let open = ControlPolicy::open_loop(controls);
            let run = PathRun::new(model, grid, seed, Driver::Ordinary(&open));
            let a0 = vec![0.0; model.m_controls()];
            let rec = record_path(&run, p, x0_prime, &a0, Some(ens.noise1_path(p)))?;
            if d0 == 0.0 {
                continue;
            }
            for (node, r) in ratios.iter_mut().enumerate() {
                let b = &rec.states[node * n..(node + 1) * n];
                let gap = crate::math::dist(ens.state(p, node), b);
                let t = grid.node(node) - grid.t0;
                *r = r.max(gap / (exp(-mu * t) * d0));
            }
        }
        Ok(ratios)
    });
    let mut ratios = vec![0.0f64; grid.n_steps + 1];
    for c in chunks {
        for (r, v) in ratios.iter_mut().zip(c?) {
            *r = r.max(v);
        }
    }
    Ok((0..=grid.n_steps).map(|i| GapStat { t: grid.node(i), max_ratio: ratios[i] }).collect())
}

/// Monte Carlo moment table of an ensemble.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MomentReport {
    /// `(p, E sup_t |X_t|^p, standard error, fitted κ_p)` where
    /// `κ_p = E sup|X|^p / (1 + E|X_0|^p)`.
    pub sup_moments: Vec<(f64, f64, f64, f64)>,
    /// `(t, E|X_t|, standard error)` per node.
    pub mean_abs: Vec<(f64, f64, f64)>,
    /// Fitted uniform bound on `E|X_t|`: the maximum over the first half.
    pub first_moment_bound: f64,
    /// Set when `E|X_t|` in the second half exceeds the first-half bound by
    /// more than three standard errors and 10%.
    pub growth_flag: bool,
}

pub fn moment_report(ens: &PathEnsemble, p_list: &[f64]) -> Result<MomentReport> {
    if ens.n_paths == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let nodes = ens.grid.n_steps + 1;
    let mut sup_moments = Vec::new();
    for &p in p_list {
        let sups: Vec<f64> = (0..ens.n_paths)
            .map(|i| (0..nodes).map(|k| powf(norm(ens.state(i, k)), p)).fold(0.0, f64::max))
            .collect();
        let init: Vec<f64> = (0..ens.n_paths).map(|i| powf(norm(ens.state(i, 0)), p)).collect();
        let (m, se) = mean_se(&sups);
        let (m0, _) = mean_se(&init);
        sup_moments.push((p, m, se, m / (1.0 + m0)));
    }
    let mut mean_abs = Vec::with_capacity(nodes);
    let mut col = vec![0.0; ens.n_paths];
    for k in 0..nodes {
        for (i, c) in col.iter_mut().enumerate() {
            *c = norm(ens.state(i, k));
        }
        let (m, se) = mean_se(&col);
        mean_abs.push((ens.grid.node(k), m, se));
    }
    let half = nodes / 2;
    let first_moment_bound = mean_abs[..half.max(1)].iter().fold(0.0f64, |a, r| a.max(r.1));
    let growth_flag = mean_abs[half..]
        .iter()
        .any(|r| r.1 > 1.1 * first_moment_bound + 3.0 * r.2 + 1e-12);
    Ok(MomentReport { sup_moments, mean_abs, first_moment_bound, growth_flag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn ou(lambda: f64, g: f64) -> ModelInstance {
        let mut m = build_desk_model(0.0).unwrap();
        m.operator.eigenvalues = vec![lambda];
        m.noise.gains = vec![g];
        m.drift.form = DriftForm::Zero;
        m
    }

    #[test]
    fn noiseless_zero_drift_is_the_semigroup() {
        let m = ou(-1.3, 0.0);
        let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let e = simulate_state(&m, &[1.5], &ControlPolicy::zero(1), &grid, 3, 1).unwrap();
        for k in 0..=40 {
            let want = 1.5 * exp(-1.3 * grid.node(k));
            assert!((e.state(2, k)[0] - want).abs() < 1e-14 * (1.0 + want));
        }
    }

    #[test]
    fn step_policy_latches_state() {
        let p = ControlPolicy {
            kind: PolicyKind::Step(StepIntensity {
                t0: 0.5,
                t1: 0.7,
                gain: 2.0,
                scale: vec![1.0],
                eta: EtaSource::OfState(Arc::new(|x, out| out[0] = x[0])),
            }),
            bound: None,
        };
        let mut latch = None;
        let mut out = [0.0];
        p.eval(&PolicyInput { t: 0.4, step: 0, x: &[3.0], channel: &[] }, &mut latch, &mut out);
        assert_eq!(out[0], 0.0);
        p.eval(&PolicyInput { t: 0.5, step: 1, x: &[3.0], channel: &[] }, &mut latch, &mut out);
        assert_eq!(out[0], 6.0);
        p.eval(&PolicyInput { t: 0.6, step: 2, x: &[-1.0], channel: &[] }, &mut latch, &mut out);
        assert_eq!(out[0], 6.0);
        p.eval(&PolicyInput { t: 0.7, step: 3, x: &[-1.0], channel: &[] }, &mut latch, &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn bound_caps_the_norm() {
        let p = ControlPolicy::constant(vec![3.0, 4.0]).with_bound(1.0);
        let mut out = [0.0; 2];
        p.eval(&PolicyInput { t: 0.0, step: 0, x: &[0.0], channel: &[] }, &mut None, &mut out);
        assert!((norm(&out) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blowup_is_reported_with_step() {
        let mut m = ou(0.0, 0.0);
        m.drift.form = DriftForm::Custom(Arc::new(|x, _, out| out[0] = x[0] * x[0]));
        let grid = TimeGrid::new(0.0, 10.0, 100).unwrap();
        let err = simulate_state(&m, &[10.0], &ControlPolicy::zero(1), &grid, 2, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { path: 0, .. }));
    }
}
