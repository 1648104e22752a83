//! Deterministic reference solvers for one-dimensional reductions: upwind
//! finite differences with policy iteration for the discounted, ergodic and
//! finite-horizon HJB equations, and exhaustive open-loop enumeration on a
//! Gauss–Hermite scenario tree for tiny instances.
//!
//! The upwind generator is a birth–death chain on the grid with rates
//! `σ²/(2dx²) + b±/dx` and reflecting ends.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{abs, erfc, exp, interp, ln, sqrt};
use crate::model::ModelInstance;
use crate::quadrature::GaussHermite;
use crate::state_sim::Stepper;

pub type ScalarFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

const MAX_SWEEPS: usize = 500;
const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone)]
pub struct Oracle1DModel {
    pub drift: Arc<ScalarFn>,
    pub sigma: f64,
    pub cost: Arc<ScalarFn>,
    pub controls: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
}

impl core::fmt::Debug for Oracle1DModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Oracle1DModel")
            .field("sigma", &self.sigma)
            .field("controls", &self.controls.len())
            .field("x_min", &self.x_min)
            .field("x_max", &self.x_max)
            .field("n_x", &self.n_x)
            .finish()
    }
}

/// `k` equally spaced controls on `[lo, hi]`.
pub fn uniform_controls(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

impl Oracle1DModel {
    pub fn new<B, L>(drift: B, sigma: f64, cost: L, controls: Vec<f64>, x_min: f64, x_max: f64, n_x: usize) -> Result<Self>
    where
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        L: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        if controls.is_empty() || n_x < 3 || !(x_max > x_min) || !(sigma >= 0.0) {
            return Err(Error::InvalidArgument("oracle needs controls, three nodes, x_max > x_min and σ ≥ 0".into()));
        }
        Ok(Oracle1DModel { drift: Arc::new(drift), sigma, cost: Arc::new(cost), controls, x_min, x_max, n_x })
    }

    /// The single-mode reduction `b = λ₁x + F(x, a)`, `σ = g₁`.
    pub fn from_model(model: &ModelInstance, controls: Vec<f64>, x_min: f64, x_max: f64, n_x: usize) -> Result<Self> {
        if model.n_modes() != 1 || model.m_controls() != 1 {
            return Err(Error::InvalidModel(format!(
                "oracle reduction needs one state and one control mode, got {} and {}",
                model.n_modes(),
                model.m_controls()
            )));
        }
        let lam = model.operator.eigenvalues[0];
        let m1 = model.clone();
        let m2 = model.clone();
        let drift = move |x: f64, a: f64| {
            let mut out = [0.0];
            m1.drift_into(&[x], &[a], &mut out);
            lam * x + out[0]
        };
        let cost = move |x: f64, a: f64| m2.running(&[x], &[a]);
        Oracle1DModel::new(drift, model.noise.gains[0], cost, controls, x_min, x_max, n_x)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_x).map(|i| if i + 1 == self.n_x { self.x_max } else { self.x_min + i as f64 * dx }).collect()
    }

    /// Smallest sampled `-(b(x,a) - b(y,a))/(x - y)` over grid neighbours.
    pub fn sampled_dissipativity(&self) -> f64 {
        let xs = self.grid();
        let mut mu = f64::INFINITY;
        for a in &self.controls {
            for w in xs.windows(2) {
                let s = -((self.drift)(w[1], *a) - (self.drift)(w[0], *a)) / (w[1] - w[0]);
                mu = mu.min(s);
            }
        }
        mu
    }

    /// Gaussian estimate `σ²/(2μ)` of the stationary mass beyond the nearer
    /// grid edge.
    pub fn mass_outside(&self) -> f64 {
        let mu = self.sampled_dissipativity();
        if !(mu > 0.0) {
            return 1.0;
        }
        if self.sigma == 0.0 {
            return 0.0;
        }
        let sd = self.sigma / sqrt(2.0 * mu);
        let edge = self.x_min.abs().min(self.x_max.abs());
        erfc(edge / (sd * core::f64::consts::SQRT_2))
    }

    /// Checks dissipativity, bounded cost and the outside mass.
    pub fn check(&self) -> Result<()> {
        let mu = self.sampled_dissipativity();
        if !(mu > 0.0) {
            return Err(Error::InvalidModel(format!("sampled dissipativity {mu} is not positive")));
        }
        for x in self.grid() {
            for a in &self.controls {
                if !(self.cost)(x, *a).is_finite() {
                    return Err(Error::InvalidModel(format!("cost not finite at ({x}, {a})")));
                }
            }
        }
        let mass = self.mass_outside();
        if mass > 1e-6 {
            return Err(Error::InvalidModel(format!("stationary mass {mass:.2e} outside the grid")));
        }
        Ok(())
    }

    /// Rate tables `[node][control]` of the upwind chain and the cost.
    fn tables(&self) -> Tables {
        let (n, k) = (self.n_x, self.controls.len());
        let xs = self.grid();
        let dx = self.dx();
        let diff = self.sigma * self.sigma / (2.0 * dx * dx);
        let mut up = vec![0.0; n * k];
        let mut down = vec![0.0; n * k];
        let mut cost = vec![0.0; n * k];
        for i in 0..n {
            for (c, a) in self.controls.iter().enumerate() {
                let b = (self.drift)(xs[i], *a);
                let u = diff + b.max(0.0) / dx;
                let d = diff + (-b).max(0.0) / dx;
                up[i * k + c] = if i + 1 == n { 0.0 } else { u };
                down[i * k + c] = if i == 0 { 0.0 } else { d };
                cost[i * k + c] = (self.cost)(xs[i], *a);
            }
        }
        Tables { n, k, up, down, cost, xs }
    }
}

struct Tables {
    n: usize,
    k: usize,
    up: Vec<f64>,
    down: Vec<f64>,
    cost: Vec<f64>,
    xs: Vec<f64>,
}

impl Tables {
    #[inline]
    fn q(&self, i: usize, c: usize, v: &[f64]) -> f64 {
        let j = i * self.k + c;
        let mut s = self.cost[j];
        if i + 1 < self.n {
            s += self.up[j] * (v[i + 1] - v[i]);
        }
        if i > 0 {
            s += self.down[j] * (v[i - 1] - v[i]);
        }
        s
    }

    /// Greedy policy update keeping the current action unless another one is
    /// strictly better. Returns whether anything changed.
    fn improve(&self, v: &[f64], policy: &mut [usize]) -> bool {
        let mut changed = false;
        for i in 0..self.n {
            let cur = self.q(i, policy[i], v);
            let mut best = (policy[i], cur);
            for c in 0..self.k {
                let q = self.q(i, c, v);
                if q < best.1 - 1e-13 * (1.0 + abs(cur)) {
                    best = (c, q);
                }
            }
            if best.0 != policy[i] {
                policy[i] = best.0;
                changed = true;
            }
        }
        changed
    }

    fn hamiltonian(&self, v: &[f64], i: usize) -> f64 {
        (0..self.k).map(|c| self.q(i, c, v)).fold(f64::INFINITY, f64::min)
    }

    fn greedy_cost_policy(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                let row = &self.cost[i * self.k..(i + 1) * self.k];
                let mut best = 0;
                for c in 1..self.k {
                    if row[c] < row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Solves `(β + 1/dt + up + down) v - up v₊ - down v₋ = ℓ + extra/dt`.
    fn evaluate(&self, policy: &[usize], beta: f64, inv_dt: f64, extra: Option<&[f64]>) -> Vec<f64> {
        let n = self.n;
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let j = i * self.k + policy[i];
            sub[i] = -self.down[j];
            sup[i] = -self.up[j];
            diag[i] = beta + inv_dt + self.up[j] + self.down[j];
            rhs[i] = self.cost[j] + extra.map_or(0.0, |e| e[i] * inv_dt);
        }
        crate::linalg::thomas(&sub, &diag, &sup, &rhs)
    }

    fn controls_of(&self, policy: &[usize], controls: &[f64]) -> Vec<f64> {
        policy.iter().map(|c| controls[*c]).collect()
    }
}

/// Value function on the grid with its minimising feedback.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleValue {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub policy: Vec<f64>,
    pub sweeps: usize,
    pub residual: f64,
}

impl OracleValue {
    pub fn at(&self, x: f64) -> f64 {
        interp(&self.x, &self.v, x)
    }

    pub fn feedback(&self, x: f64) -> f64 {
        interp(&self.x, &self.policy, x)
    }
}

/// Average-cost pair `(λ, v̂)` with `v̂(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleErgodic {
    pub lambda: f64,
    pub x: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub policy: Vec<f64>,
    pub sweeps: usize,
    pub residual: f64,
}

impl OracleErgodic {
    pub fn at(&self, x: f64) -> f64 {
        interp(&self.x, &self.v_hat, x)
    }

    pub fn feedback(&self, x: f64) -> f64 {
        interp(&self.x, &self.policy, x)
    }
}

/// Stationary HJB `βv = min_a [ℓ + L^a v]` by Howard policy iteration.
pub fn hjb_discounted(model: &Oracle1DModel, beta: f64) -> Result<OracleValue> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("discount must be positive".into()));
    }
    let t = model.tables();
    let mut policy = t.greedy_cost_policy();
    for sweep in 1..=MAX_SWEEPS {
        let v = t.evaluate(&policy, beta, 0.0, None);
        if !t.improve(&v, &mut policy) {
            let residual = (0..t.n).map(|i| abs(beta * v[i] - t.hamiltonian(&v, i))).fold(0.0, f64::max);
            if residual > RESIDUAL_TOL * (1.0 + v.iter().fold(0.0f64, |m, x| m.max(abs(*x)))) {
                return Err(Error::NoConvergence { sweeps: sweep, residual });
            }
            let policy = t.controls_of(&policy, &model.controls);
            return Ok(OracleValue { x: t.xs.clone(), v, policy, sweeps: sweep, residual });
        }
    }
    let v = t.evaluate(&policy, beta, 0.0, None);
    let residual = (0..t.n).map(|i| abs(beta * v[i] - t.hamiltonian(&v, i))).fold(0.0, f64::max);
    Err(Error::NoConvergence { sweeps: MAX_SWEEPS, residual })
}

/// Average cost and relative value of a fixed policy through the
/// stationary law of the birth–death chain.
fn evaluate_average(t: &Tables, policy: &[usize]) -> Option<(f64, Vec<f64>)> {
    let n = t.n;
    let up: Vec<f64> = (0..n).map(|i| t.up[i * t.k + policy[i]]).collect();
    let down: Vec<f64> = (0..n).map(|i| t.down[i * t.k + policy[i]]).collect();
    let cost: Vec<f64> = (0..n).map(|i| t.cost[i * t.k + policy[i]]).collect();
    // detailed balance π_{i+1} down_{i+1} = π_i up_i
    let mut lp = vec![0.0; n];
    for i in 0..n - 1 {
        if !(up[i] > 0.0) || !(down[i + 1] > 0.0) {
            return None;
        }
        lp[i + 1] = lp[i] + ln(up[i]) - ln(down[i + 1]);
    }
    let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mode = lp.iter().position(|v| *v == top).unwrap_or(0);
    let w: Vec<f64> = lp.iter().map(|v| exp(v - top)).collect();
    let z: f64 = w.iter().sum();
    let lambda = w.iter().zip(&cost).map(|(p, c)| p * c).sum::<f64>() / z;
    // increments d_i = v_{i+1} - v_i from the flux identity, summed from the
    // lighter tail so that nothing cancels
    let mut d = vec![0.0; n - 1];
    let mut acc = 0.0;
    for i in 0..mode.min(n - 1) {
        acc = if i == 0 { 0.0 } else { acc * down[i] / up[i - 1] } + (lambda - cost[i]);
        d[i] = acc / up[i];
    }
    let mut acc = 0.0;
    for i in (mode..n - 1).rev() {
        acc = up[i] / down[i + 1] * (lambda - cost[i + 1] + acc);
        d[i] = -acc / up[i];
    }
    let mut v = vec![0.0; n];
    for i in 0..n - 1 {
        v[i + 1] = v[i] + d[i];
    }
    Some((lambda, v))
}

/// Average-cost HJB `λ = min_a [ℓ + L^a v̂]` by policy iteration on the
/// stationary law; with `σ = 0` it falls back to the discounted solver at
/// `β = 10⁻⁴`. `v̂` is pinned to 0 at `x = 0`.
pub fn hjb_ergodic(model: &Oracle1DModel) -> Result<OracleErgodic> {
    let t = model.tables();
    let pin = |v: &[f64]| -> Vec<f64> {
        let v0 = interp(&t.xs, v, 0.0);
        v.iter().map(|x| x - v0).collect()
    };
    if model.sigma == 0.0 {
        let beta = 1e-4;
        let d = hjb_discounted(model, beta)?;
        let lambda = beta * interp(&d.x, &d.v, 0.0);
        return Ok(OracleErgodic {
            lambda,
            x: d.x.clone(),
            v_hat: pin(&d.v),
            policy: d.policy,
            sweeps: d.sweeps,
            residual: d.residual,
        });
    }
    let mut policy = t.greedy_cost_policy();
    let mut last = None;
    for sweep in 1..=MAX_SWEEPS {
        let (lambda, v) = evaluate_average(&t, &policy)
            .ok_or_else(|| Error::InvalidModel("upwind chain is not irreducible".into()))?;
        if !t.improve(&v, &mut policy) {
            let residual = (0..t.n).map(|i| abs(lambda - t.hamiltonian(&v, i))).fold(0.0, f64::max);
            if residual > RESIDUAL_TOL * (1.0 + abs(lambda)) {
                return Err(Error::NoConvergence { sweeps: sweep, residual });
            }
            return Ok(OracleErgodic {
                lambda,
                x: t.xs.clone(),
                v_hat: pin(&v),
                policy: t.controls_of(&policy, &model.controls),
                sweeps: sweep,
                residual,
            });
        }
        last = Some(lambda);
    }
    Err(Error::NoConvergence { sweeps: MAX_SWEEPS, residual: last.unwrap_or(f64::NAN) })
}

/// Finite-horizon value `v^{β,T}` with terminal `φ` by implicit Euler in
/// time-to-go, with policy iteration inside every step.
pub fn hjb_parabolic<P: Fn(f64) -> f64>(model: &Oracle1DModel, beta: f64, horizon: f64, phi: P, n_t: usize) -> Result<OracleValue> {
    if !(horizon >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidArgument("horizon and discount must be nonnegative".into()));
    }
    let t = model.tables();
    let mut v: Vec<f64> = t.xs.iter().map(|x| phi(*x)).collect();
    let mut policy = t.greedy_cost_policy();
    if horizon == 0.0 || n_t == 0 {
        let policy = t.controls_of(&policy, &model.controls);
        return Ok(OracleValue { x: t.xs.clone(), v, policy, sweeps: 0, residual: 0.0 });
    }
    let inv_dt = n_t as f64 / horizon;
    let mut total = 0;
    let mut residual = 0.0f64;
    for _ in 0..n_t {
        let prev = v.clone();
        let mut done = false;
        for _ in 0..MAX_SWEEPS {
            total += 1;
            v = t.evaluate(&policy, beta, inv_dt, Some(&prev));
            if !t.improve(&v, &mut policy) {
                done = true;
                break;
            }
        }
        let r = (0..t.n)
            .map(|i| abs((beta + inv_dt) * v[i] - prev[i] * inv_dt - t.hamiltonian(&v, i)))
            .fold(0.0, f64::max);
        residual = residual.max(r);
        if !done {
            return Err(Error::NoConvergence { sweeps: total, residual: r });
        }
    }
    let policy = t.controls_of(&policy, &model.controls);
    Ok(OracleValue { x: t.xs.clone(), v, policy, sweeps: total, residual })
}

/// Result of exhaustive open-loop enumeration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BruteForce {
    pub value: f64,
    /// Indices into the control grid, one per step.
    pub best_sequence: Vec<usize>,
    pub sequences: usize,
}

/// Minimum over open-loop control sequences of
/// `E[Σ_k e^{-βt_k} h ℓ(X_k, u_k) + e^{-βT} φ(X_T)]`, with the expectation
/// taken on the Gauss–Hermite tree of the exponential Euler step. This is an
/// upper bound on the feedback value of the same discrete problem.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_value(
    model: &ModelInstance,
    x0: &[f64],
    controls: &[Vec<f64>],
    beta: f64,
    horizon: f64,
    steps: usize,
    q: usize,
) -> Result<BruteForce> {
    let n = model.n_modes();
    if n > 2 {
        return Err(Error::InvalidArgument("enumeration supports at most two modes".into()));
    }
    if steps == 0 || steps > 6 || controls.is_empty() || q == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("need 1..=6 steps, controls, nodes and a positive horizon".into()));
    }
    if x0.len() != n || controls.iter().any(|u| u.len() != model.m_controls()) {
        return Err(Error::Dimension { what: "brute force inputs", expected: n, got: x0.len() });
    }
    let k = controls.len() as f64;
    let sequences = crate::math::powf(k, steps as f64);
    let tree = crate::math::powf(q as f64, (n * steps) as f64);
    if sequences > 1e6 {
        return Err(Error::Budget(format!("{sequences} control sequences exceed 10^6")));
    }
    if sequences * tree > 5e7 {
        return Err(Error::Budget(format!("{:.2e} tree evaluations exceed 5·10^7", sequences * tree)));
    }
    let h = horizon / steps as f64;
    let st = Stepper::new(model, h);
    let gh = GaussHermite::new(q);
    let mut seq = vec![0usize; steps];
    let mut best = (f64::INFINITY, seq.clone());
    let total = sequences as usize;
    for s in 0..total {
        let mut r = s;
        for slot in seq.iter_mut() {
            *slot = r % controls.len();
            r /= controls.len();
        }
        let v = tree_value(model, &st, &gh, controls, &seq, beta, h, 0, x0);
        if v < best.0 {
            best = (v, seq.clone());
        }
    }
    Ok(BruteForce { value: best.0, best_sequence: best.1, sequences: total })
}

#[allow(clippy::too_many_arguments)]
fn tree_value(
    model: &ModelInstance,
    st: &Stepper,
    gh: &GaussHermite,
    controls: &[Vec<f64>],
    seq: &[usize],
    beta: f64,
    h: f64,
    k: usize,
    x: &[f64],
) -> f64 {
    let disc = exp(-beta * h * k as f64);
    if k == seq.len() {
        return disc * model.terminal(x);
    }
    let u = &controls[seq[k]];
    let n = x.len();
    let mut buf = vec![0.0; n];
    let mut mean = vec![0.0; n];
    st.mean(model, x, u, &mut buf, &mut mean);
    let mut total = disc * h * model.running(x, u);
    let mut xn = vec![0.0; n];
    let q = gh.len();
    let nodes = q.pow(n as u32);
    for idx in 0..nodes {
        let mut w = 1.0;
        let mut r = idx;
        for i in 0..n {
            let j = r % q;
            r /= q;
            w *= gh.weights[j];
            xn[i] = mean[i] + st.noise_sd[i] * gh.nodes[j];
        }
        total += w * tree_value(model, st, gh, controls, seq, beta, h, k + 1, &xn);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(n_x: usize) -> Oracle1DModel {
        Oracle1DModel::new(
            |x, a| -x + libm::tanh(a),
            0.7,
            |x, a| libm::tanh(x).powi(2) + 0.1 * libm::tanh(a).powi(2),
            uniform_controls(-4.0, 4.0, 161),
            -4.0,
            4.0,
            n_x,
        )
        .unwrap()
    }

    #[test]
    fn constant_cost_discounted() {
        let m = Oracle1DModel::new(|x, a| -x + a, 0.5, |_, _| 0.3, vec![-1.0, 0.0, 1.0], -3.0, 3.0, 61).unwrap();
        let v = hjb_discounted(&m, 0.5).unwrap();
        assert!(v.v.iter().all(|x| (x - 0.6).abs() < 1e-8));
    }

    #[test]
    fn control_only_cost_ergodic() {
        let m = Oracle1DModel::new(|x, a| -x + a, 0.5, |_, a| libm::tanh(a).powi(2), vec![-1.0, 0.0, 1.0], -3.0, 3.0, 61)
            .unwrap();
        let e = hjb_ergodic(&m).unwrap();
        assert!(e.lambda.abs() < 1e-12);
        assert!(e.v_hat.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn desk_reference_values() {
        let m = desk(801);
        m.check().unwrap();
        let e = hjb_ergodic(&m).unwrap();
        let d = hjb_discounted(&m, 1e-3).unwrap();
        let lam_d = 1e-3 * d.at(0.0);
        assert!((e.lambda - lam_d).abs() <= 1e-3 * e.lambda.abs() + 1e-4, "{} {}", e.lambda, lam_d);
        assert!((e.lambda - 0.1047).abs() < 5e-4, "{}", e.lambda);
        let v = hjb_discounted(&m, 0.25).unwrap();
        assert!((v.at(0.0) - 0.40137).abs() < 5e-4, "{}", v.at(0.0));
    }

    #[test]
    fn parabolic_limits() {
        let m = desk(201);
        let v = hjb_parabolic(&m, 0.0, 0.0, |x| x.abs(), 10).unwrap();
        assert!(v.v.iter().zip(&v.x).all(|(a, x)| (a - x.abs()).abs() < 1e-15));
        let c = Oracle1DModel::new(|x, a| -x + a, 0.5, |_, _| 0.3, vec![0.0, 1.0], -3.0, 3.0, 61).unwrap();
        let v = hjb_parabolic(&c, 0.0, 2.0, |_| 0.0, 20).unwrap();
        assert!(v.v.iter().all(|x| (x - 0.6).abs() < 1e-10));
    }

    #[test]
    fn refining_controls_never_raises_the_value() {
        let coarse = Oracle1DModel { controls: uniform_controls(-4.0, 4.0, 9), ..desk(201) };
        let fine = Oracle1DModel { controls: uniform_controls(-4.0, 4.0, 17), ..desk(201) };
        let a = hjb_discounted(&coarse, 0.5).unwrap();
        let b = hjb_discounted(&fine, 0.5).unwrap();
        assert!(a.v.iter().zip(&b.v).all(|(x, y)| *y <= x + 1e-12));
    }

    #[test]
    fn solvers_are_deterministic() {
        let a = hjb_ergodic(&desk(201)).unwrap();
        let b = hjb_ergodic(&desk(201)).unwrap();
        assert_eq!(a, b);
    }
}
