//! Gauss–Hermite rules for expectations of functions of a standard normal,
//! and a Halton sequence for deterministic sampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{abs, powf, sqrt, PI};

/// Nodes and weights with `E f(Z) ≈ Σ w_i f(z_i)` for `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds the `q`-point rule by Newton iteration on the physicists'
    /// Hermite polynomials, then rescales to the standard normal.
    pub fn new(q: usize) -> Self {
        assert!(q >= 1, "need at least one node");
        let mut x = vec![0.0; q];
        let mut w = vec![0.0; q];
        let m = q.div_ceil(2);
        let nf = q as f64;
        let pim4 = 1.0 / powf(PI, 0.25);
        let mut z = 0.0;
        for i in 0..m {
            z = match i {
                0 => sqrt(2.0 * nf + 1.0) - 1.85575 * powf(2.0 * nf + 1.0, -1.0 / 6.0),
                1 => z - 1.14 * powf(nf, 0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..q {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * sqrt(2.0 / (j as f64 + 1.0)) * p2 - sqrt(j as f64 / (j as f64 + 1.0)) * p3;
                }
                pp = sqrt(2.0 * nf) * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if abs(z - z1) <= 1e-15 * (1.0 + abs(z)) {
                    break;
                }
            }
            x[i] = z;
            x[q - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[q - 1 - i] = w[i];
        }
        let s = sqrt(PI);
        let nodes = x.iter().rev().map(|v| v * core::f64::consts::SQRT_2).collect();
        let weights = w.iter().rev().map(|v| v / s).collect();
        GaussHermite { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(*z)).sum()
    }
}

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Radical inverse of `i` in the `dim`-th prime base (`dim < 24`).
pub fn halton(i: u64, dim: usize) -> f64 {
    let b = PRIMES[dim % PRIMES.len()];
    let mut f = 1.0;
    let mut r = 0.0;
    let mut n = i;
    while n > 0 {
        f /= b as f64;
        r += f * (n % b) as f64;
        n /= b;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_standard_normal() {
        let gh = GaussHermite::new(10);
        assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(gh.expect(|z| z).abs() < 1e-13);
        assert!((gh.expect(|z| z * z) - 1.0).abs() < 1e-12);
        assert!((gh.expect(|z| z.powi(4)) - 3.0).abs() < 1e-11);
        assert!((gh.expect(|z| z.powi(8)) - 105.0).abs() < 1e-8);
    }

    #[test]
    fn one_and_two_point_rules() {
        let g1 = GaussHermite::new(1);
        assert!(g1.nodes[0].abs() < 1e-15 && (g1.weights[0] - 1.0).abs() < 1e-14);
        let g2 = GaussHermite::new(2);
        assert!((g2.nodes[1] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn halton_base_two() {
        assert_eq!(halton(1, 0), 0.5);
        assert_eq!(halton(3, 0), 0.75);
        assert!((halton(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }
}
