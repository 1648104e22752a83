//! Small dense and tridiagonal solvers.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::sqrt;

/// In-place Cholesky factorisation of a row-major SPD matrix (lower triangle).
/// Returns `None` if a pivot is not strictly positive.
pub fn cholesky(a: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = sqrt(d);
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Some(())
}

/// Solves `L L^T x = b` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Spectral condition number of the SPD matrix `a` with Cholesky factor `l`,
/// by power iteration on `a` and on its inverse.
pub fn spd_condition(a: &[f64], l: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    const ITERS: usize = 60;
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut hi = 0.0;
    for _ in 0..ITERS {
        for i in 0..n {
            w[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
        }
        let nw = sqrt(w.iter().map(|x| x * x).sum());
        if !(nw > 0.0) {
            return f64::INFINITY;
        }
        hi = nw;
        for i in 0..n {
            v[i] = w[i] / nw;
        }
    }
    // alternate signs so the start is not orthogonal to smooth eigenvectors
    let mut v: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -0.7 }).collect();
    let mut inv = 0.0;
    for _ in 0..ITERS {
        let mut b = v.clone();
        cholesky_solve(l, n, &mut b);
        let nb = sqrt(b.iter().map(|x| x * x).sum());
        if !(nb.is_finite()) || nb == 0.0 {
            return f64::INFINITY;
        }
        inv = nb;
        for i in 0..n {
            v[i] = b[i] / nb;
        }
    }
    hi * inv
}

/// Least squares through the normal equations with Jacobi scaling.
///
/// `gram` is the `p x p` Gram matrix `Φ^T Φ` and `rhs` holds `k` right-hand
/// sides of length `p` stacked contiguously. Columns whose diagonal is below
/// `inactive` (relative to the largest) are dropped and get zero
/// coefficients. Returns the condition number of the scaled active block; a zero `ridge`
/// solves the plain system.
pub fn normal_solve(gram: &[f64], p: usize, rhs: &mut [f64], k: usize, ridge: f64) -> Option<f64> {
    let dmax = (0..p).map(|i| gram[i * p + i]).fold(0.0f64, f64::max);
    if !(dmax > 0.0) {
        rhs.iter_mut().for_each(|v| *v = 0.0);
        return Some(1.0);
    }
    let active: Vec<usize> = (0..p).filter(|&i| gram[i * p + i] > 1e-13 * dmax).collect();
    let q = active.len();
    let scale: Vec<f64> = active.iter().map(|&i| 1.0 / sqrt(gram[i * p + i])).collect();
    let mut a = vec![0.0; q * q];
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            a[r * q + c] = gram[i * p + j] * scale[r] * scale[c];
        }
    }
    let mut l = a.clone();
    let cond = match cholesky(&mut l, q) {
        Some(()) => spd_condition(&a, &l, q),
        None => f64::INFINITY,
    };
    if ridge > 0.0 {
        for r in 0..q {
            a[r * q + r] += ridge;
        }
        cholesky(&mut a, q)?;
    } else {
        if !cond.is_finite() {
            return None;
        }
        a = l;
    }
    let mut b = vec![0.0; q];
    for s in 0..k {
        let col = &mut rhs[s * p..(s + 1) * p];
        for (r, &i) in active.iter().enumerate() {
            b[r] = col[i] * scale[r];
        }
        cholesky_solve(&a, q, &mut b);
        col.iter_mut().for_each(|v| *v = 0.0);
        for (r, &i) in active.iter().enumerate() {
            col[i] = b[r] * scale[r];
        }
    }
    Some(cond)
}

/// Thomas algorithm for `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]`.
/// `sub[0]` and `sup[n-1]` are ignored. Requires diagonal dominance.
pub fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = if n > 1 { sup[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n.saturating_sub(1)).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}
