//! Compressed-sparse-row complex matrices and their application to dense,
//! row-major matrices.
//!
//! Generator operators (Hamiltonians, Lindblad operators and their products)
//! are sums of embedded ladder operators with only a few nonzeros per row,
//! so applying them to a dense density matrix costs `O(nnz · dim)` instead
//! of a dense `O(dim³)` product. Applications are blocked over column panels
//! and the panels are processed in parallel.

use num_complex::Complex64 as C64;
use rayon::prelude::*;

/// Column-panel width; one input panel should stay cache-resident.
const PANEL: usize = 256;
/// Below this dimension the rayon dispatch overhead dominates.
const PAR_MIN_DIM: usize = 192;

/// Triplet accumulator; duplicate positions are summed.
pub(crate) struct CsrBuilder {
    dim: usize,
    entries: Vec<(u32, u32, C64)>,
}

impl CsrBuilder {
    pub fn new(dim: usize) -> Self {
        CsrBuilder { dim, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: C64) {
        debug_assert!(row < self.dim && col < self.dim);
        if value.norm_sqr() > 0.0 {
            self.entries.push((row as u32, col as u32, value));
        }
    }

    /// Add `weight * dense` for every nonzero of a dense matrix slice.
    pub fn push_dense(&mut self, dense: &ndarray::Array2<C64>, weight: C64) {
        for ((i, j), v) in dense.indexed_iter() {
            if v.norm_sqr() > 0.0 {
                self.push(i, j, weight * v);
            }
        }
    }

    pub fn build(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.dim + 1];
        let mut col = Vec::with_capacity(self.entries.len());
        let mut val: Vec<C64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *val.last_mut().expect("entry exists") += v;
            } else {
                col.push(c);
                val.push(v);
                row_ptr[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix { dim: self.dim, row_ptr, col, val }
    }
}

/// Sparse complex square matrix in CSR form.
#[derive(Clone, Debug)]
pub(crate) struct CsrMatrix {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<u32>,
    pub val: Vec<C64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    /// Dense copy, for inspection and small-scale tests.
    pub fn to_dense(&self) -> ndarray::Array2<C64> {
        let mut m = ndarray::Array2::zeros((self.dim, self.dim));
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.col[k] as usize)] += self.val[k];
            }
        }
        m
    }

    /// Adjoint as a new CSR matrix.
    pub fn adjoint(&self) -> CsrMatrix {
        let mut b = CsrBuilder::new(self.dim);
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                b.push(self.col[k] as usize, r, self.val[k].conj());
            }
        }
        b.build()
    }

    /// CSR product `self · rhs` (used for the small `L†L` blocks at setup).
    pub fn matmul(&self, rhs: &CsrMatrix) -> CsrMatrix {
        let mut b = CsrBuilder::new(self.dim);
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let mid = self.col[k] as usize;
                let w = self.val[k];
                for k2 in rhs.row_ptr[mid]..rhs.row_ptr[mid + 1] {
                    b.push(r, rhs.col[k2] as usize, w * rhs.val[k2]);
                }
            }
        }
        b.build()
    }

    /// `y = A · x` with `x`, `y` dense row-major `dim × dim`.
    ///
    /// `values` overrides the stored numeric values (same sparsity); pass
    /// `None` to use `self.val`. Panels are processed in parallel.
    pub fn apply(&self, values: Option<&[C64]>, x: &[C64], y: &mut [C64]) {
        let dim = self.dim;
        debug_assert_eq!(x.len(), dim * dim);
        debug_assert_eq!(y.len(), dim * dim);
        let val = values.unwrap_or(&self.val);
        debug_assert_eq!(val.len(), self.nnz());

        if dim < PAR_MIN_DIM {
            self.apply_panel(val, x, y, 0, dim);
            return;
        }
        // Parallel over disjoint column stripes of the output.
        let n_panels = dim.div_ceil(PANEL);
        struct Ptr(*mut C64);
        unsafe impl Send for Ptr {}
        unsafe impl Sync for Ptr {}
        let yp = Ptr(y.as_mut_ptr());
        (0..n_panels).into_par_iter().for_each(|p| {
            let c0 = p * PANEL;
            let c1 = ((p + 1) * PANEL).min(dim);
            // stripes are disjoint in the output; reconstruct the slice locally
            let y_all = unsafe { std::slice::from_raw_parts_mut((&yp).0, dim * dim) };
            self.apply_panel(val, x, y_all, c0, c1);
        });
    }

    fn apply_panel(&self, val: &[C64], x: &[C64], y: &mut [C64], c0: usize, c1: usize) {
        let dim = self.dim;
        let w = c1 - c0;
        for i in 0..dim {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let out = &mut y[i * dim + c0..i * dim + c0 + w];
            out.fill(C64::new(0.0, 0.0));
            for k in s..e {
                let v = val[k];
                let j = self.col[k] as usize;
                let src = &x[j * dim + c0..j * dim + c0 + w];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// `Σ_i ⟨row_i| x |row_i⟩`-style quadratic form: returns
    /// `Tr(A† A x) = Σ_i (A x A†)_{ii}` for a Hermitian `x`.
    pub fn trace_ada_rho(&self, values: Option<&[C64]>, x: &[C64]) -> C64 {
        let dim = self.dim;
        let val = values.unwrap_or(&self.val);
        let mut total = C64::new(0.0, 0.0);
        for i in 0..dim {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for ka in s..e {
                for kb in s..e {
                    // conj(A_{i,ja}) A_{i,jb} x_{jb,ja}
                    let ja = self.col[ka] as usize;
                    let jb = self.col[kb] as usize;
                    total += val[ka].conj() * val[kb] * x[jb * dim + ja];
                }
            }
        }
        total
    }

    /// `Tr(A† x) = Σ_{nz} conj(a_{ij}) x_{ij}`.
    pub fn trace_adjoint_times(&self, values: Option<&[C64]>, x: &[C64]) -> C64 {
        let dim = self.dim;
        let val = values.unwrap_or(&self.val);
        let mut total = C64::new(0.0, 0.0);
        for i in 0..dim {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                total += val[k].conj() * x[i * dim + self.col[k] as usize];
            }
        }
        total
    }
}
