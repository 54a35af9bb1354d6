//! Internal numerical kernels: sparse operator application, Hermitian
//! transpose tiles, spline resampling and a Lanczos extremal-eigenvalue
//! estimator for large density matrices.

mod csr;
mod lanczos;
mod spline;

pub(crate) use csr::{CsrMatrix, CsrBuilder};
pub(crate) use lanczos::lanczos_min_eigenvalue;
pub(crate) use spline::CubicSpline;

use crate::C64;

/// Tile edge for cache-blocked transpose passes.
pub(crate) const TILE: usize = 64;

/// `out[i, j] += w * conj(src[j, i])` over the full matrix, tiled.
pub(crate) fn add_adjoint_scaled(out: &mut [C64], src: &[C64], w: C64, dim: usize) {
    for i0 in (0..dim).step_by(TILE) {
        let i1 = (i0 + TILE).min(dim);
        for j0 in (0..dim).step_by(TILE) {
            let j1 = (j0 + TILE).min(dim);
            for i in i0..i1 {
                let row = i * dim;
                for j in j0..j1 {
                    out[row + j] += w * src[j * dim + i].conj();
                }
            }
        }
    }
}

/// `out[i, j] = conj(src[j, i])`, tiled.
pub(crate) fn adjoint_into(out: &mut [C64], src: &[C64], dim: usize) {
    for i0 in (0..dim).step_by(TILE) {
        let i1 = (i0 + TILE).min(dim);
        for j0 in (0..dim).step_by(TILE) {
            let j1 = (j0 + TILE).min(dim);
            for i in i0..i1 {
                let row = i * dim;
                for j in j0..j1 {
                    out[row + j] = src[j * dim + i].conj();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjoint_round_trip() {
        let dim = 97;
        let mut m = vec![C64::new(0.0, 0.0); dim * dim];
        for (k, v) in m.iter_mut().enumerate() {
            *v = C64::new(k as f64, (k % 7) as f64);
        }
        let mut t = vec![C64::new(0.0, 0.0); dim * dim];
        let mut back = vec![C64::new(0.0, 0.0); dim * dim];
        adjoint_into(&mut t, &m, dim);
        adjoint_into(&mut back, &t, dim);
        assert_eq!(m, back);
    }

    #[test]
    fn add_adjoint_scaled_matches_naive() {
        let dim = 70;
        let mut src = vec![C64::new(0.0, 0.0); dim * dim];
        for (k, v) in src.iter_mut().enumerate() {
            *v = C64::new((k % 13) as f64 * 0.1, (k % 5) as f64 - 2.0);
        }
        let w = C64::new(0.5, -0.25);
        let mut out = vec![C64::new(1.0, 1.0); dim * dim];
        let mut naive = out.clone();
        add_adjoint_scaled(&mut out, &src, w, dim);
        for i in 0..dim {
            for j in 0..dim {
                naive[i * dim + j] += w * src[j * dim + i].conj();
            }
        }
        assert_eq!(out, naive);
    }
}
