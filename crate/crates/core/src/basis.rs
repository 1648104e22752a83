//! Tensor regression features on `(state modes, channel modes)` with
//! per-step coordinate boxes, and their expectations under the Gaussian
//! one-step law of the exponential Euler scheme.
//!
//! Univariate factors are Legendre polynomials of the clamped, box-scaled
//! coordinate; outside the box a feature is flat. Optional radial features
//! are products of Gaussians in the state coordinates, whose Gaussian
//! expectations are available in closed form.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, sqrt};
use crate::quadrature::GaussHermite;

/// Shape of the regression basis.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BasisSpec {
    /// Maximum Legendre degree per state coordinate.
    pub x_degree: usize,
    /// Maximum degree per channel coordinate; 0 drops the channel.
    pub a_degree: usize,
    /// Cap on the total degree of a tensor feature.
    pub total_degree: usize,
    /// Only the leading state modes enter the basis.
    pub max_x_modes: usize,
    /// Number of Gaussian radial features (0 for none).
    pub radial: usize,
    /// Radial width as a fraction of each box half-width.
    pub radial_width: f64,
}

impl BasisSpec {
    pub fn polynomial(x_degree: usize, a_degree: usize, total_degree: usize) -> Self {
        BasisSpec { x_degree, a_degree, total_degree, max_x_modes: 4, radial: 0, radial_width: 0.5 }
    }
}

/// Per-step geometry: the coordinate boxes and radial centres.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Boxes {
    /// `(centre, half-width)` per coordinate; a zero half-width marks a
    /// coordinate with no spread on which only the constant factor survives.
    pub boxes: Vec<(f64, f64)>,
    /// Radial centres, `radial x n_x` row-major.
    pub centers: Vec<f64>,
}

/// Enumerated feature set for a given model size.
#[derive(Debug, Clone)]
pub struct Basis {
    pub spec: BasisSpec,
    pub n_x: usize,
    pub n_a: usize,
    /// Multi-indices, `n_poly x n_coords` row-major.
    index: Vec<u16>,
    n_poly: usize,
}

/// Legendre values `P_0..=P_d` and derivatives at `u ∈ [-1, 1]`.
#[inline]
fn legendre(u: f64, d: usize, p: &mut [f64], dp: &mut [f64]) {
    p[0] = 1.0;
    dp[0] = 0.0;
    if d == 0 {
        return;
    }
    p[1] = u;
    dp[1] = 1.0;
    for j in 1..d {
        let jf = j as f64;
        p[j + 1] = ((2.0 * jf + 1.0) * u * p[j] - jf * p[j - 1]) / (jf + 1.0);
        dp[j + 1] = dp[j - 1] + (2.0 * jf + 1.0) * p[j];
    }
}

impl Basis {
    pub fn new(spec: BasisSpec, n_modes: usize, m_controls: usize) -> Self {
        let n_x = n_modes.min(spec.max_x_modes.max(1));
        let n_a = if spec.a_degree > 0 { m_controls } else { 0 };
        let nc = n_x + n_a;
        let caps: Vec<usize> = (0..nc)
            .map(|c| if c < n_x { spec.x_degree } else { spec.a_degree })
            .collect();
        let mut index = Vec::new();
        let mut cur = vec![0usize; nc];
        // graded enumeration: by total degree, then lexicographic
        for total in 0..=spec.total_degree {
            enumerate(&caps, total, 0, &mut cur, &mut |idx| {
                index.extend(idx.iter().map(|v| *v as u16));
            });
        }
        let n_poly = index.len().checked_div(nc).unwrap_or(1);
        if nc == 0 {
            index.clear();
        }
        Basis { spec, n_x, n_a, index, n_poly }
    }

    pub fn n_coords(&self) -> usize {
        self.n_x + self.n_a
    }

    pub fn n_poly(&self) -> usize {
        self.n_poly
    }

    pub fn len(&self) -> usize {
        self.n_poly + self.spec.radial
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn degree(&self, c: usize) -> usize {
        if c < self.n_x {
            self.spec.x_degree
        } else {
            self.spec.a_degree
        }
    }

    #[inline]
    fn idx(&self, f: usize, c: usize) -> usize {
        self.index[f * self.n_coords() + c] as usize
    }

    /// Boxes and centres fitted to a sample cloud given as coordinate rows
    /// (`coords[c][i]`).
    pub fn boxes_from(&self, coords: &mut [Vec<f64>], lo_q: f64) -> Boxes {
        let mut boxes = Vec::with_capacity(coords.len());
        for col in coords.iter_mut() {
            let n = col.len();
            if n == 0 {
                boxes.push((0.0, 0.0));
                continue;
            }
            let k_lo = ((lo_q * n as f64) as usize).min(n - 1);
            let k_hi = n - 1 - k_lo;
            let lo = *col.select_nth_unstable_by(k_lo, f64::total_cmp).1;
            let hi = *col.select_nth_unstable_by(k_hi, f64::total_cmp).1;
            let c = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * 1.05;
            let half = if half > 1e-10 * (1.0 + crate::math::abs(c)) { half } else { 0.0 };
            boxes.push((c, half));
        }
        Boxes { boxes, centers: Vec::new() }
    }

    /// Values of every feature at one point.
    pub fn design_row(&self, b: &Boxes, z: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let nc = self.n_coords();
        for c in 0..nc {
            let d = self.degree(c);
            let (ctr, half) = b.boxes[c];
            let row = &mut ws.vals[c * ws.stride..c * ws.stride + d + 1];
            if half == 0.0 {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[0] = 1.0;
            } else {
                let u = crate::math::clamp((z[c] - ctr) / half, -1.0, 1.0);
                legendre(u, d, row, &mut ws.tmp_d[..d + 1]);
            }
        }
        for f in 0..self.n_poly {
            let mut v = 1.0;
            for c in 0..nc {
                v *= ws.vals[c * ws.stride + self.idx(f, c)];
            }
            out[f] = v;
        }
        for r in 0..self.spec.radial {
            let mut v = 1.0;
            for k in 0..self.n_x {
                let w = self.spec.radial_width * b.boxes[k].1;
                if w == 0.0 {
                    continue;
                }
                let d = z[k] - b.centers[r * self.n_x + k];
                v *= exp(-d * d / (2.0 * w * w));
            }
            out[self.n_poly + r] = v;
        }
    }

    /// Fills the univariate expectation tables for `N(mean_c, sd_c²)` per
    /// coordinate; derivatives are with respect to the mean.
    pub fn tables(&self, b: &Boxes, mean: &[f64], sd: &[f64], gh: &GaussHermite, ws: &mut Workspace) {
        let nc = self.n_coords();
        let s = ws.stride;
        for c in 0..nc {
            let d = self.degree(c);
            let (ctr, half) = b.boxes[c];
            let (t, dt) = (&mut ws.t[c * s..c * s + d + 1], &mut ws.dt[c * s..c * s + d + 1]);
            t.iter_mut().for_each(|v| *v = 0.0);
            dt.iter_mut().for_each(|v| *v = 0.0);
            if half == 0.0 {
                t[0] = 1.0;
                continue;
            }
            let inv = 1.0 / half;
            for (zq, wq) in gh.nodes.iter().zip(&gh.weights) {
                let u = (mean[c] + sd[c] * zq - ctr) * inv;
                let inside = u > -1.0 && u < 1.0;
                let uc = crate::math::clamp(u, -1.0, 1.0);
                legendre(uc, d, &mut ws.p[..d + 1], &mut ws.dp[..d + 1]);
                for j in 0..=d {
                    t[j] += wq * ws.p[j];
                    if inside {
                        dt[j] += wq * ws.dp[j] * inv;
                    }
                }
            }
        }
        if self.spec.radial > 0 {
            for r in 0..self.spec.radial {
                let mut v = 1.0;
                for k in 0..self.n_x {
                    let w = self.spec.radial_width * b.boxes[k].1;
                    ws.rad_grad[r * self.n_x + k] = 0.0;
                    if w == 0.0 {
                        continue;
                    }
                    let v2 = w * w + sd[k] * sd[k];
                    let d = mean[k] - b.centers[r * self.n_x + k];
                    v *= w / sqrt(v2) * exp(-d * d / (2.0 * v2));
                    ws.rad_grad[r * self.n_x + k] = -d / v2;
                }
                ws.rad_val[r] = v;
            }
        }
    }

    /// Replaces the tables of one coordinate (used to shift the channel).
    pub fn coord_table(&self, b: &Boxes, c: usize, mean: f64, sd: f64, gh: &GaussHermite, ws: &mut Workspace) {
        let d = self.degree(c);
        let s = ws.stride;
        let (ctr, half) = b.boxes[c];
        let (t, dt) = (&mut ws.t[c * s..c * s + d + 1], &mut ws.dt[c * s..c * s + d + 1]);
        t.iter_mut().for_each(|v| *v = 0.0);
        dt.iter_mut().for_each(|v| *v = 0.0);
        if half == 0.0 {
            t[0] = 1.0;
            return;
        }
        let inv = 1.0 / half;
        for (zq, wq) in gh.nodes.iter().zip(&gh.weights) {
            let u = (mean + sd * zq - ctr) * inv;
            let inside = u > -1.0 && u < 1.0;
            legendre(crate::math::clamp(u, -1.0, 1.0), d, &mut ws.p[..d + 1], &mut ws.dp[..d + 1]);
            for j in 0..=d {
                t[j] += wq * ws.p[j];
                if inside {
                    dt[j] += wq * ws.dp[j] * inv;
                }
            }
        }
    }

    /// `E[Σ θ_f φ_f]` from the current tables.
    pub fn expect(&self, theta: &[f64], ws: &Workspace) -> f64 {
        let nc = self.n_coords();
        let s = ws.stride;
        let mut total = 0.0;
        for f in 0..self.n_poly {
            let th = theta[f];
            if th == 0.0 {
                continue;
            }
            let mut v = th;
            for c in 0..nc {
                v *= ws.t[c * s + self.idx(f, c)];
            }
            total += v;
        }
        for r in 0..self.spec.radial {
            total += theta[self.n_poly + r] * ws.rad_val[r];
        }
        total
    }

    /// `E[Σ θ_f φ_f]` and its gradient with respect to every coordinate mean.
    pub fn expect_grad(&self, theta: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        let nc = self.n_coords();
        let s = ws.stride;
        grad[..nc].iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for f in 0..self.n_poly {
            let th = theta[f];
            if th == 0.0 {
                continue;
            }
            // prefix products, then a backward sweep with suffix products
            let mut pre = th;
            for c in 0..nc {
                ws.prefix[c] = pre;
                pre *= ws.t[c * s + self.idx(f, c)];
            }
            total += pre;
            let mut suf = 1.0;
            for c in (0..nc).rev() {
                let j = self.idx(f, c);
                grad[c] += ws.prefix[c] * ws.dt[c * s + j] * suf;
                suf *= ws.t[c * s + j];
            }
        }
        for r in 0..self.spec.radial {
            let v = theta[self.n_poly + r] * ws.rad_val[r];
            total += v;
            for k in 0..self.n_x {
                grad[k] += v * ws.rad_grad[r * self.n_x + k];
            }
        }
        total
    }

    pub fn workspace(&self) -> Workspace {
        let nc = self.n_coords().max(1);
        let stride = self.spec.x_degree.max(self.spec.a_degree) + 1;
        Workspace {
            stride,
            vals: vec![0.0; nc * stride],
            t: vec![0.0; nc * stride],
            dt: vec![0.0; nc * stride],
            p: vec![0.0; stride],
            dp: vec![0.0; stride],
            tmp_d: vec![0.0; stride],
            prefix: vec![0.0; nc],
            rad_val: vec![0.0; self.spec.radial],
            rad_grad: vec![0.0; self.spec.radial * self.n_x.max(1)],
        }
    }
}

fn enumerate(caps: &[usize], remaining: usize, c: usize, cur: &mut [usize], emit: &mut dyn FnMut(&[usize])) {
    if c == caps.len() {
        if remaining == 0 {
            emit(cur);
        }
        return;
    }
    let hi = caps[c].min(remaining);
    for v in (0..=hi).rev() {
        cur[c] = v;
        enumerate(caps, remaining - v, c + 1, cur, emit);
    }
    cur[c] = 0;
}

/// Scratch buffers for basis evaluation.
#[derive(Debug, Clone)]
pub struct Workspace {
    stride: usize,
    vals: Vec<f64>,
    t: Vec<f64>,
    dt: Vec<f64>,
    p: Vec<f64>,
    dp: Vec<f64>,
    tmp_d: Vec<f64>,
    prefix: Vec<f64>,
    rad_val: Vec<f64>,
    rad_grad: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_respect_caps() {
        let b = Basis::new(BasisSpec::polynomial(3, 2, 4), 2, 1);
        // all (i, j, k) with i, j <= 3, k <= 2, i + j + k <= 4
        let mut n = 0;
        for i in 0..=3 {
            for j in 0..=3 {
                for k in 0..=2 {
                    if i + j + k <= 4 {
                        n += 1;
                    }
                }
            }
        }
        assert_eq!(b.len(), n);
        assert_eq!(Basis::new(BasisSpec::polynomial(12, 0, 12), 1, 1).len(), 13);
    }

    #[test]
    fn legendre_recurrence() {
        let mut p = [0.0; 4];
        let mut dp = [0.0; 4];
        legendre(0.3, 3, &mut p, &mut dp);
        assert!((p[2] - 0.5 * (3.0 * 0.09 - 1.0)).abs() < 1e-15);
        assert!((p[3] - 0.5 * (5.0 * 0.027 - 3.0 * 0.3)).abs() < 1e-15);
        assert!((dp[3] - 0.5 * (15.0 * 0.09 - 3.0)).abs() < 1e-14);
    }

    #[test]
    fn expectation_of_polynomial_inside_box_is_exact() {
        let basis = Basis::new(BasisSpec::polynomial(2, 0, 2), 1, 1);
        let b = Boxes { boxes: vec![(0.0, 100.0)], centers: vec![] };
        let gh = GaussHermite::new(10);
        let mut ws = basis.workspace();
        basis.tables(&b, &[1.0], &[0.5], &gh, &mut ws);
        // P2(u) = (3u^2 - 1)/2 with u = z/100; E z^2 = 1.25
        let theta = [0.0, 0.0, 1.0];
        let want = (3.0 * 1.25 / 1e4 - 1.0) / 2.0;
        let mut g = [0.0];
        let v = basis.expect_grad(&theta, &mut ws, &mut g);
        assert!((v - want).abs() < 1e-14);
        assert!((g[0] - 3.0 * 1.0 / 1e4).abs() < 1e-14);
    }

    #[test]
    fn radial_expectation_matches_quadrature() {
        let mut spec = BasisSpec::polynomial(0, 0, 0);
        spec.radial = 1;
        let basis = Basis::new(spec, 1, 1);
        let b = Boxes { boxes: vec![(0.0, 2.0)], centers: vec![0.3] };
        let gh = GaussHermite::new(40);
        let mut ws = basis.workspace();
        basis.tables(&b, &[0.1], &[0.7], &gh, &mut ws);
        let v = basis.expect(&[0.0, 1.0], &ws);
        let w = 0.5 * 2.0;
        let q = gh.expect(|z| {
            let d: f64 = 0.1 + 0.7 * z - 0.3;
            (-d * d / (2.0 * w * w)).exp()
        });
        assert!((v - q).abs() < 1e-12);
    }
}
