//! Piecewise-linear representation of a function of the channel `a` on a
//! uniform node grid per coordinate, flat outside the grid.
//!
//! Gaussian expectations of the interpolant are exact. With `Y ~ N(μ, σ²)`
//! and `c(t) = E(Y - t)₊`, the 1-D interpolant through values `v_j` has
//!
//! ```text
//! E L(Y) = v_1 + Σ_j (v_{j+1} - v_j) (c(a_j) - c(a_{j+1})) / Δ
//! ```
//!
//! so the expectation is a convex combination of node values. A minimum of
//! it over shifts of `μ` can never undershoot the smallest node value.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{erfc, exp};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Node layout of one channel coordinate at one time node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Axis {
    pub lo: f64,
    /// Node spacing; 0 collapses the axis onto its first node.
    pub step: f64,
}

impl Axis {
    /// `nodes` points spanning the `q`..`1-q` sample quantiles, widened by
    /// 5% on each side.
    pub fn from_samples(values: &mut [f64], q: f64, nodes: usize) -> Axis {
        values.sort_by(f64::total_cmp);
        let k = values.len();
        let i_lo = ((q * k as f64) as usize).min(k - 1);
        let (lo, hi) = (values[i_lo], values[k - 1 - i_lo]);
        let (c, half) = (0.5 * (lo + hi), 0.5 * (hi - lo) * 1.05);
        if !(half > 1e-12) || nodes < 2 {
            return Axis { lo: c, step: 0.0 };
        }
        Axis { lo: c - half, step: 2.0 * half / (nodes - 1) as f64 }
    }

    pub fn node(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.step
    }
}

fn big_phi(d: f64) -> f64 {
    0.5 * erfc(-d / core::f64::consts::SQRT_2)
}

/// Weights `q_j` with `E L(μ + σZ) = Σ q_j v_j`, and `dq_j = ∂q_j/∂μ`.
/// `σ = 0` gives plain interpolation weights.
pub fn axis_weights(ax: &Axis, nodes: usize, mu: f64, sd: f64, q: &mut [f64], dq: &mut [f64]) {
    q[..nodes].iter_mut().for_each(|v| *v = 0.0);
    dq[..nodes].iter_mut().for_each(|v| *v = 0.0);
    if ax.step == 0.0 || nodes < 2 {
        q[0] = 1.0;
        return;
    }
    let dlt = ax.step;
    if !(sd > 0.0) {
        let u = ((mu - ax.lo) / dlt).clamp(0.0, (nodes - 1) as f64);
        let j = (u as usize).min(nodes - 2);
        let t = u - j as f64;
        q[j] = 1.0 - t;
        q[j + 1] = t;
        let inside = mu > ax.lo && mu < ax.node(nodes - 1);
        if inside {
            dq[j] = -1.0 / dlt;
            dq[j + 1] = 1.0 / dlt;
        }
        return;
    }
    // c(t) and Φ((μ - t)/σ) at every node; beyond 9σ both are exact to
    // double precision without special functions
    let mut prev_c = 0.0;
    let mut prev_p = 0.0;
    for j in 0..nodes {
        let u = mu - ax.node(j);
        let d = u / sd;
        let (p, c) = if d > 9.0 {
            (1.0, u)
        } else if d < -9.0 {
            (0.0, 0.0)
        } else {
            let p = big_phi(d);
            (p, u * p + sd * INV_SQRT_2PI * exp(-0.5 * d * d))
        };
        if j > 0 {
            let dd = (prev_c - c) / dlt;
            let ddp = (prev_p - p) / dlt;
            q[j - 1] -= dd;
            q[j] += dd;
            dq[j - 1] -= ddp;
            dq[j] += ddp;
        }
        prev_c = c;
        prev_p = p;
    }
    q[0] += 1.0;
}

/// Tensor grid over `m` channel coordinates with `nodes` points each.
#[derive(Debug, Clone)]
pub struct ChannelGrid {
    pub m: usize,
    pub nodes: usize,
    q1: Vec<f64>,
    dq1: Vec<f64>,
}

impl ChannelGrid {
    pub fn new(m: usize, nodes: usize) -> Self {
        let nodes = nodes.max(1);
        ChannelGrid { m, nodes, q1: vec![0.0; m * nodes], dq1: vec![0.0; m * nodes] }
    }

    /// Total number of tensor nodes.
    pub fn len(&self) -> usize {
        self.nodes.pow(self.m as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of tensor node `j`; the first coordinate varies fastest.
    pub fn point(&self, axes: &[Axis], j: usize, out: &mut [f64]) {
        let mut r = j;
        for (c, ax) in axes.iter().enumerate() {
            out[c] = ax.node(r % self.nodes);
            r /= self.nodes;
        }
    }

    /// Tensor weights `q` (length `len()`) and their gradients `dq`
    /// (`len() x m`, node-major) at mean `mu` with per-coordinate `sd`.
    pub fn weights(&mut self, axes: &[Axis], mu: &[f64], sd: &[f64], q: &mut [f64], dq: &mut [f64]) {
        let (m, nn) = (self.m, self.nodes);
        for c in 0..m {
            axis_weights(&axes[c], nn, mu[c], sd[c], &mut self.q1[c * nn..(c + 1) * nn], &mut self.dq1[c * nn..(c + 1) * nn]);
        }
        if m == 1 {
            q[..nn].copy_from_slice(&self.q1[..nn]);
            dq[..nn].copy_from_slice(&self.dq1[..nn]);
            return;
        }
        for j in 0..self.len() {
            let mut r = j;
            let mut w = 1.0;
            for c in 0..m {
                w *= self.q1[c * nn + r % nn];
                r /= nn;
            }
            q[j] = w;
            for c in 0..m {
                let mut r = j;
                let mut g = 1.0;
                for c2 in 0..m {
                    let i = r % nn;
                    g *= if c2 == c { self.dq1[c2 * nn + i] } else { self.q1[c2 * nn + i] };
                    r /= nn;
                }
                dq[j * m + c] = g;
            }
        }
    }
}
