//! Lanczos estimate of the smallest eigenvalue of a Hermitian matrix.
//!
//! Positivity checks on large density matrices only need the extremal
//! eigenvalue; a short Lanczos run on the dense matrix is orders of
//! magnitude cheaper than a full diagonalization.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;

use crate::{QpError, Result};

const MAX_ITERS: usize = 120;
const RESTARTS: usize = 2;

fn matvec(m: &Array2<C64>, v: &Array1<C64>) -> Array1<C64> {
    m.dot(v)
}

fn tridiag_eigenvalues(alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    // bisection on the Sturm sequence; sizes here are tiny (<= MAX_ITERS)
    let n = alpha.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let b_prev = if i > 0 { beta[i - 1].abs() } else { 0.0 };
        let b_next = if i < n - 1 { beta[i].abs() } else { 0.0 };
        lo = lo.min(alpha[i] - b_prev - b_next);
        hi = hi.max(alpha[i] + b_prev + b_next);
    }
    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut d = 1.0f64;
        for i in 0..n {
            let b2 = if i > 0 { beta[i - 1] * beta[i - 1] } else { 0.0 };
            if d.abs() < 1e-300 {
                d = if d < 0.0 { -1e-300 } else { 1e-300 };
            }
            d = alpha[i] - x - b2 / d;
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    let mut vals = Vec::with_capacity(n);
    for k in 0..n {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if count_below(mid) > k {
                b = mid;
            } else {
                a = mid;
            }
        }
        vals.push(0.5 * (a + b));
    }
    vals
}

/// Smallest eigenvalue of a dense Hermitian matrix via restarted Lanczos.
pub(crate) fn lanczos_min_eigenvalue(m: &Array2<C64>) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(QpError::DimensionMismatch("Lanczos needs a square matrix".into()));
    }
    let mut best = f64::INFINITY;
    for restart in 0..RESTARTS {
        // deterministic pseudo-random start vector
        let mut v = Array1::zeros(n);
        let mut s: u64 = 0x9e3779b97f4a7c15u64.wrapping_mul(restart as u64 + 1);
        for z in v.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let re = ((s >> 33) as f64 / 2f64.powi(30)) - 2.0;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let im = ((s >> 33) as f64 / 2f64.powi(30)) - 2.0;
            *z = C64::new(re, im);
        }
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.mapv_inplace(|z| z / norm);

        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        let mut v_prev: Option<Array1<C64>> = None;
        let iters = MAX_ITERS.min(n);
        for _ in 0..iters {
            let mut w = matvec(m, &v);
            let a: C64 = v.iter().zip(w.iter()).map(|(x, y)| x.conj() * y).sum();
            alpha.push(a.re);
            for (wk, vk) in w.iter_mut().zip(v.iter()) {
                *wk -= a * vk;
            }
            if let Some(prev) = &v_prev {
                let b = *beta.last().unwrap_or(&0.0);
                for (wk, pk) in w.iter_mut().zip(prev.iter()) {
                    *wk -= C64::new(b, 0.0) * pk;
                }
            }
            let b = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if b < 1e-12 {
                break;
            }
            beta.push(b);
            v_prev = Some(v);
            v = w.mapv(|z| z / b);
        }
        if beta.len() >= alpha.len() {
            beta.truncate(alpha.len().saturating_sub(1));
        }
        let vals = tridiag_eigenvalues(&alpha, &beta);
        if let Some(&min) = vals.iter().min_by(|a, b| a.partial_cmp(b).unwrap()) {
            best = best.min(min);
        }
    }
    Ok(best)
}
