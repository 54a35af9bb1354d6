//! Truncated Fock/qubit tensor spaces, dense operators and states.
//!
//! All operators and states record the [`TensorSpace`] they live on; the
//! factor order is fixed at construction and every embedding, expectation
//! value and partial trace respects it.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};

use crate::{C64, QpError, Result};

/// One subsystem of a tensor-product space.
#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    /// Bosonic mode truncated at Fock level `cutoff` (dimension `cutoff + 1`).
    Oscillator { label: String, cutoff: usize },
    /// Generic d-level system (qubit, Λ atom, ...).
    NLevel { label: String, levels: usize },
}

impl Factor {
    pub fn oscillator(label: impl Into<String>, cutoff: usize) -> Self {
        Factor::Oscillator { label: label.into(), cutoff }
    }

    pub fn nlevel(label: impl Into<String>, levels: usize) -> Self {
        Factor::NLevel { label: label.into(), levels }
    }

    pub fn qubit(label: impl Into<String>) -> Self {
        Factor::NLevel { label: label.into(), levels: 2 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Oscillator { cutoff, .. } => cutoff + 1,
            Factor::NLevel { levels, .. } => *levels,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Factor::Oscillator { label, .. } => label,
            Factor::NLevel { label, .. } => label,
        }
    }

    pub fn is_oscillator(&self) -> bool {
        matches!(self, Factor::Oscillator { .. })
    }
}

/// Ordered tensor product of subsystem factors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpace {
    factors: Vec<Factor>,
    total_dim: usize,
}

impl TensorSpace {
    pub fn new(factors: Vec<Factor>) -> Result<Arc<Self>> {
        if factors.is_empty() {
            return Err(QpError::InvalidDimension("space needs at least one factor".into()));
        }
        for f in &factors {
            if f.dim() < 2 {
                return Err(QpError::InvalidDimension(format!(
                    "factor '{}' has dimension {} < 2",
                    f.label(),
                    f.dim()
                )));
            }
        }
        let total_dim = factors.iter().map(Factor::dim).product();
        Ok(Arc::new(TensorSpace { factors, total_dim }))
    }

    /// Single oscillator space, mostly for tests and reduced states.
    pub fn single(cutoff: usize) -> Arc<Self> {
        TensorSpace::new(vec![Factor::oscillator("mode", cutoff)]).expect("cutoff >= 1")
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn factor_dim(&self, index: usize) -> Result<usize> {
        self.factors
            .get(index)
            .map(Factor::dim)
            .ok_or(QpError::FactorOutOfRange { index, count: self.factors.len() })
    }

    /// Index of the factor with the given label.
    pub fn factor_index(&self, label: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.label() == label)
    }

    /// Stride of factor `index` in the row-major composite index.
    pub fn stride(&self, index: usize) -> usize {
        self.factors[index + 1..].iter().map(Factor::dim).product()
    }

    /// Decompose a composite basis index into per-factor indices.
    pub fn unravel(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for (slot, f) in out.iter_mut().zip(&self.factors).rev().map(|(s, f)| (s, f.dim())) {
            *slot = idx % f;
            idx /= f;
        }
        out
    }

    fn check_same(&self, other: &TensorSpace) -> Result<()> {
        if self != other {
            return Err(QpError::DimensionMismatch(
                "operands live on different tensor spaces".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for TensorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.factors.iter().map(|x| format!("{}:{}", x.label(), x.dim())).collect();
        write!(f, "[{}] (dim {})", parts.join(" ⊗ "), self.total_dim)
    }
}

/// Dense complex operator on a [`TensorSpace`].
#[derive(Clone, Debug)]
pub struct Operator {
    pub space: Arc<TensorSpace>,
    pub data: Array2<C64>,
}

impl Operator {
    pub fn new(space: Arc<TensorSpace>, data: Array2<C64>) -> Result<Self> {
        let d = space.total_dim();
        if data.nrows() != d || data.ncols() != d {
            return Err(QpError::DimensionMismatch(format!(
                "operator is {}x{} but space dimension is {}",
                data.nrows(),
                data.ncols(),
                d
            )));
        }
        Ok(Operator { space, data })
    }

    pub fn zeros(space: Arc<TensorSpace>) -> Self {
        let d = space.total_dim();
        Operator { space, data: Array2::zeros((d, d)) }
    }

    pub fn identity(space: Arc<TensorSpace>) -> Self {
        let d = space.total_dim();
        Operator { space, data: Array2::eye(d) }
    }

    pub fn dim(&self) -> usize {
        self.space.total_dim()
    }

    pub fn dagger(&self) -> Operator {
        Operator { space: self.space.clone(), data: self.data.t().mapv(|z| z.conj()) }
    }

    pub fn matmul(&self, rhs: &Operator) -> Result<Operator> {
        self.space.check_same(&rhs.space)?;
        Ok(Operator { space: self.space.clone(), data: self.data.dot(&rhs.data) })
    }

    pub fn scale(&self, s: C64) -> Operator {
        Operator { space: self.space.clone(), data: self.data.mapv(|z| z * s) }
    }

    pub fn add(&self, rhs: &Operator) -> Result<Operator> {
        self.space.check_same(&rhs.space)?;
        Ok(Operator { space: self.space.clone(), data: &self.data + &rhs.data })
    }

    pub fn sub(&self, rhs: &Operator) -> Result<Operator> {
        self.space.check_same(&rhs.space)?;
        Ok(Operator { space: self.space.clone(), data: &self.data - &rhs.data })
    }

    /// Commutator `[self, rhs]`.
    pub fn commutator(&self, rhs: &Operator) -> Result<Operator> {
        Ok(self.matmul(rhs)?.sub(&rhs.matmul(self)?)?)
    }

    /// Largest deviation from Hermiticity, `max |A - A†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                let d = (self.data[(i, j)] - self.data[(j, i)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() <= tol
    }

    /// Largest deviation of `A†A` from the identity.
    pub fn unitarity_defect(&self) -> f64 {
        let prod = self.dagger().matmul(self).expect("same space");
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                worst = worst.max((prod.data[(i, j)] - want).norm());
            }
        }
        worst
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_defect() <= tol
    }
}

/// Lowering (annihilation) matrix on a single `dim`-dimensional factor:
/// entries `√n` at `(n-1, n)`.
pub fn annihilation(dim: usize) -> Result<Array2<C64>> {
    if dim < 2 {
        return Err(QpError::InvalidDimension(format!(
            "annihilation operator needs dim >= 2, got {dim}"
        )));
    }
    let mut a = Array2::zeros((dim, dim));
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(a)
}

/// Raising matrix, the adjoint of [`annihilation`].
pub fn creation(dim: usize) -> Result<Array2<C64>> {
    Ok(annihilation(dim)?.t().mapv(|z| z.conj()))
}

/// Number operator `a†a` on a single factor.
pub fn number(dim: usize) -> Result<Array2<C64>> {
    let mut n = Array2::zeros((dim, dim));
    for k in 0..dim {
        n[(k, k)] = C64::new(k as f64, 0.0);
    }
    let _ = dim; // diagonal by construction
    Ok(n)
}

/// Matrix unit `|i⟩⟨j|` on a single factor.
pub fn transition(dim: usize, i: usize, j: usize) -> Result<Array2<C64>> {
    if i >= dim || j >= dim {
        return Err(QpError::InvalidDimension(format!(
            "transition |{i}⟩⟨{j}| outside dimension {dim}"
        )));
    }
    let mut m = Array2::zeros((dim, dim));
    m[(i, j)] = C64::new(1.0, 0.0);
    Ok(m)
}

/// Embed a single-factor matrix at position `index` of `space`:
/// `1 ⊗ ... ⊗ op ⊗ ... ⊗ 1` in declared factor order.
pub fn embed(op: &Array2<C64>, index: usize, space: &Arc<TensorSpace>) -> Result<Operator> {
    let fdim = space.factor_dim(index)?;
    if op.nrows() != fdim || op.ncols() != fdim {
        return Err(QpError::DimensionMismatch(format!(
            "operator is {}x{} but factor {} has dimension {}",
            op.nrows(),
            op.ncols(),
            index,
            fdim
        )));
    }
    let post: usize = space.factors()[index + 1..].iter().map(Factor::dim).product();
    let pre: usize = space.factors()[..index].iter().map(Factor::dim).product();
    let total = space.total_dim();
    let mut data = Array2::zeros((total, total));
    for a in 0..pre {
        for (i, j) in op.indexed_iter().filter(|(_, v)| v.norm_sqr() > 0.0).map(|(ij, _)| ij) {
            let v = op[(i, j)];
            let row0 = (a * fdim + i) * post;
            let col0 = (a * fdim + j) * post;
            for b in 0..post {
                data[(row0 + b, col0 + b)] = v;
            }
        }
    }
    Operator::new(space.clone(), data)
}

/// Pure state on a [`TensorSpace`].
#[derive(Clone, Debug)]
pub struct KetState {
    pub space: Arc<TensorSpace>,
    pub amplitudes: Array1<C64>,
}

impl KetState {
    /// Build from raw amplitudes; renormalizes and rejects the zero vector.
    pub fn new(space: Arc<TensorSpace>, amplitudes: Array1<C64>) -> Result<Self> {
        if amplitudes.len() != space.total_dim() {
            return Err(QpError::DimensionMismatch(format!(
                "state has {} amplitudes but space dimension is {}",
                amplitudes.len(),
                space.total_dim()
            )));
        }
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-14 {
            return Err(QpError::InvalidState("zero state vector".into()));
        }
        Ok(KetState { space, amplitudes: amplitudes.mapv(|z| z / norm) })
    }

    /// Basis (Fock/level) state of a single-factor space.
    pub fn basis(space: Arc<TensorSpace>, index: usize) -> Result<Self> {
        let d = space.total_dim();
        if index >= d {
            return Err(QpError::InvalidDimension(format!("basis index {index} >= dim {d}")));
        }
        let mut amp = Array1::zeros(d);
        amp[index] = C64::new(1.0, 0.0);
        KetState::new(space, amp)
    }

    /// Tensor product of per-factor pure states, one per factor of `space`.
    pub fn product(space: Arc<TensorSpace>, parts: &[Array1<C64>]) -> Result<Self> {
        if parts.len() != space.n_factors() {
            return Err(QpError::DimensionMismatch(format!(
                "{} factor states supplied for {} factors",
                parts.len(),
                space.n_factors()
            )));
        }
        for (k, p) in parts.iter().enumerate() {
            if p.len() != space.factor_dim(k)? {
                return Err(QpError::DimensionMismatch(format!(
                    "factor {} state has {} amplitudes, factor dimension is {}",
                    k,
                    p.len(),
                    space.factor_dim(k)?
                )));
            }
        }
        let mut amp = Array1::from_elem(1, C64::new(1.0, 0.0));
        for p in parts {
            let mut next = Array1::zeros(amp.len() * p.len());
            for (i, a) in amp.iter().enumerate() {
                for (j, b) in p.iter().enumerate() {
                    next[i * p.len() + j] = a * b;
                }
            }
            amp = next;
        }
        KetState::new(space, amp)
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn to_density(&self) -> DensityMatrix {
        let n = self.amplitudes.len();
        let mut data = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                data[(i, j)] = self.amplitudes[i] * self.amplitudes[j].conj();
            }
        }
        DensityMatrix { space: self.space.clone(), data }
    }

    pub fn overlap(&self, other: &KetState) -> Result<C64> {
        self.space.check_same(&other.space)?;
        Ok(self
            .amplitudes
            .iter()
            .zip(other.amplitudes.iter())
            .map(|(a, b)| a.conj() * b)
            .sum())
    }
}

/// Amplitudes of a coherent state `|α⟩` on `dim` Fock levels, before
/// renormalization. Returns the truncated-norm deficit alongside.
fn coherent_amplitudes(dim: usize, alpha: C64) -> (Array1<C64>, f64) {
    let mut amp = Array1::zeros(dim);
    let mut term = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    amp[0] = term;
    for n in 1..dim {
        term = term * alpha / C64::new((n as f64).sqrt(), 0.0);
        amp[n] = term;
    }
    let norm_sq: f64 = amp.iter().map(|z| z.norm_sqr()).sum();
    (amp, 1.0 - norm_sq)
}

/// Truncated coherent state `|α⟩`, renormalized on the cutoff.
///
/// Fails when the truncated-norm deficit exceeds `1e-6`.
pub fn coherent_state(dim: usize, alpha: C64) -> Result<KetState> {
    let (amp, deficit) = coherent_amplitudes(dim, alpha);
    if deficit > 1e-6 {
        return Err(QpError::TruncationOverflow(format!(
            "coherent state |α|² = {:.3} loses {:.2e} of its norm at cutoff {}",
            alpha.norm_sqr(),
            deficit,
            dim - 1
        )));
    }
    KetState::new(TensorSpace::single(dim - 1), amp)
}

/// Even cat state `N (|β⟩ + |−β⟩)` with the exact normalization
/// `N = 1/√(2(1+e^{−2|β|²}))`, renormalized on the truncation.
pub fn cat_state(dim: usize, beta: C64) -> Result<KetState> {
    let (plus, d1) = coherent_amplitudes(dim, beta);
    let (minus, d2) = coherent_amplitudes(dim, -beta);
    let deficit = d1.max(d2);
    if deficit > 1e-6 {
        return Err(QpError::TruncationOverflow(format!(
            "cat state |β|² = {:.3} loses {:.2e} of its norm at cutoff {}",
            beta.norm_sqr(),
            deficit,
            dim - 1
        )));
    }
    let norm = 1.0 / (2.0 * (1.0 + (-2.0 * beta.norm_sqr()).exp())).sqrt();
    let amp = (&plus + &minus).mapv(|z| z * norm);
    KetState::new(TensorSpace::single(dim - 1), amp)
}

/// Truncated thermal state with mean occupation `nbar`, renormalized so the
/// finite geometric distribution sums to one.
pub fn thermal_state(dim: usize, nbar: f64) -> Result<DensityMatrix> {
    if nbar < 0.0 {
        return Err(QpError::InvalidState(format!("thermal occupation {nbar} < 0")));
    }
    let space = TensorSpace::single(dim - 1);
    let mut data = Array2::zeros((dim, dim));
    let ratio = nbar / (nbar + 1.0);
    let mut p = 1.0;
    let mut total = 0.0;
    for n in 0..dim {
        data[(n, n)] = C64::new(p, 0.0);
        total += p;
        p *= ratio;
    }
    for n in 0..dim {
        data[(n, n)] /= total;
    }
    Ok(DensityMatrix { space, data })
}

/// Dense density matrix on a [`TensorSpace`].
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub space: Arc<TensorSpace>,
    pub data: Array2<C64>,
}

impl DensityMatrix {
    /// Build from raw data, checking trace and Hermiticity.
    pub fn new(space: Arc<TensorSpace>, data: Array2<C64>) -> Result<Self> {
        let d = space.total_dim();
        if data.nrows() != d || data.ncols() != d {
            return Err(QpError::DimensionMismatch(format!(
                "density matrix is {}x{} but space dimension is {}",
                data.nrows(),
                data.ncols(),
                d
            )));
        }
        let rho = DensityMatrix { space, data };
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
            return Err(QpError::InvalidState(format!("trace {tr} differs from 1")));
        }
        if rho.hermiticity_defect() > 1e-10 {
            return Err(QpError::InvalidState("density matrix is not Hermitian".into()));
        }
        Ok(rho)
    }

    pub fn from_pure(ket: &KetState) -> Self {
        ket.to_density()
    }

    /// Tensor product of per-factor density matrices.
    pub fn product(space: Arc<TensorSpace>, parts: &[Array2<C64>]) -> Result<Self> {
        if parts.len() != space.n_factors() {
            return Err(QpError::DimensionMismatch(format!(
                "{} factor states supplied for {} factors",
                parts.len(),
                space.n_factors()
            )));
        }
        let mut data = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        for (k, p) in parts.iter().enumerate() {
            let fd = space.factor_dim(k)?;
            if p.nrows() != fd || p.ncols() != fd {
                return Err(QpError::DimensionMismatch(format!(
                    "factor {} state is {}x{}, factor dimension is {}",
                    k,
                    p.nrows(),
                    p.ncols(),
                    fd
                )));
            }
            let (m, n) = (data.nrows(), p.nrows());
            let mut next = Array2::zeros((m * n, m * n));
            for i in 0..m {
                for j in 0..m {
                    let block = data[(i, j)];
                    if block.norm_sqr() == 0.0 {
                        continue;
                    }
                    for a in 0..n {
                        for b in 0..n {
                            next[(i * n + a, j * n + b)] = block * p[(a, b)];
                        }
                    }
                }
            }
            data = next;
        }
        DensityMatrix::new(space, data)
    }

    pub fn dim(&self) -> usize {
        self.space.total_dim()
    }

    pub fn trace(&self) -> C64 {
        self.data.diag().iter().sum()
    }

    pub fn purity(&self) -> f64 {
        // Tr ρ² = Σ_ij ρ_ij ρ_ji
        let n = self.dim();
        let mut s = C64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                s += self.data[(i, j)] * self.data[(j, i)];
            }
        }
        s.re
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Smallest eigenvalue; direct for small matrices, Lanczos above.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        if self.dim() <= 600 {
            let (vals, _) = self
                .data
                .eigh(UPLO::Lower)
                .map_err(|e| QpError::Linalg(format!("eigh failed: {e}")))?;
            Ok(vals.iter().cloned().fold(f64::INFINITY, f64::min))
        } else {
            crate::linalg::lanczos_min_eigenvalue(&self.data)
        }
    }

    /// Check trace, Hermiticity and positivity against explicit tolerances.
    pub fn validate(&self, trace_tol: f64, herm_tol: f64, pos_tol: f64) -> Result<()> {
        let tr = self.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(QpError::InvalidState(format!("trace {tr} drifted from 1")));
        }
        if self.hermiticity_defect() > herm_tol {
            return Err(QpError::InvalidState("Hermiticity lost".into()));
        }
        let min = self.min_eigenvalue()?;
        if min < -pos_tol {
            return Err(QpError::InvalidState(format!("negative eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    /// Dominant eigenvalue and eigenvector.
    pub fn dominant_eigenvector(&self) -> Result<(f64, Array1<C64>)> {
        let (vals, vecs) = self
            .data
            .eigh(UPLO::Lower)
            .map_err(|e| QpError::Linalg(format!("eigh failed: {e}")))?;
        let (k, &val) = vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("nonempty spectrum");
        Ok((val, vecs.column(k).to_owned()))
    }
}

/// `Tr(ρ · op)`.
pub fn expectation(rho: &DensityMatrix, op: &Operator) -> Result<C64> {
    rho.space.check_same(&op.space)?;
    let n = rho.dim();
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            s += rho.data[(i, j)] * op.data[(j, i)];
        }
    }
    Ok(s)
}

/// Reduced density matrix on the kept factors (ascending index order).
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let nf = rho.space.n_factors();
    if keep.is_empty() {
        return Err(QpError::InvalidDimension("keep set must be nonempty".into()));
    }
    let mut keep = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    for &k in &keep {
        if k >= nf {
            return Err(QpError::FactorOutOfRange { index: k, count: nf });
        }
    }
    let kept_factors: Vec<Factor> = keep.iter().map(|&k| rho.space.factors()[k].clone()).collect();
    let reduced_space = TensorSpace::new(kept_factors)?;
    let rd = reduced_space.total_dim();
    let mut data = Array2::zeros((rd, rd));

    let dims: Vec<usize> = rho.space.factors().iter().map(Factor::dim).collect();
    let n = rho.dim();
    // reduced index of a full multi-index restricted to the kept factors
    let reduce = |multi: &[usize]| -> usize {
        let mut r = 0;
        for &k in &keep {
            r = r * dims[k] + multi[k];
        }
        r
    };
    for row in 0..n {
        let mrow = rho.space.unravel(row);
        for col in 0..n {
            let mcol = rho.space.unravel(col);
            // traced factors must match on both sides
            if (0..nf).filter(|f| !keep.contains(f)).any(|f| mrow[f] != mcol[f]) {
                continue;
            }
            data[(reduce(&mrow), reduce(&mcol))] += rho.data[(row, col)];
        }
    }
    DensityMatrix::new(reduced_space, data)
}
