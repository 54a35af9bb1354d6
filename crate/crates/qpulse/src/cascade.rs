//! Compile a declarative cascaded network into the time-dependent
//! Hamiltonian `H(t)` and Lindblad operators `{L_k(t)}` of its master
//! equation.
//!
//! A network is an ordered chain of ports per output channel: an optional
//! thermal source, the input virtual cavities (outermost first), the
//! scatterer, and the output virtual cavities. Every ordered pair of ports
//! `(a, b)` in a chain contributes the exchange term
//! `(i/2)(L_a† L_b − L_b† L_a)` and each channel contributes the collective
//! jump operator `L = Σ ports`. A two-sided scatterer adds a transmission
//! channel with its own capture cavity.
//!
//! Generators are compiled once into merged sparse operators with
//! per-sample coefficient plans; evaluation at a grid sample only rebuilds
//! the numeric values, never the sparsity pattern, so repeated evaluation
//! is deterministic and cheap.

use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::hilbert::{DensityMatrix, Factor, Operator, TensorSpace};
use crate::linalg::{CsrBuilder, CsrMatrix};
use crate::pulses::{CouplingFunction, ModeBundle, TimeGrid};
use crate::{C64, QpError, Result};

/// Localized quantum system at the center of the cascade.
#[derive(Clone, Debug)]
pub enum ScattererKind {
    /// Empty cavity with detuning `omega_c` and phase-noise rate `gamma_p`
    /// (adds the Lindblad `√γ_p a†a`).
    EmptyCavity { omega_c: f64, gamma_p: f64, cutoff: usize },
    /// Resonant two-level emitter; the coupling operator is `σ₋`.
    TwoLevelAtom,
    /// Two-level atom in a cavity, `H_s = g(aσ₊ + a†σ₋)`. With
    /// `two_sided`, both mirrors couple at rate `kappa` (the network gamma)
    /// and a transmission channel becomes available.
    JaynesCummings { g: f64, two_sided: bool, cutoff: usize },
    /// Kerr parametric oscillator,
    /// `H_s(t) = p(t)/2 ((a†)² + a²) − K/2 (a†)² a² + Δ a†a`;
    /// the pump `p(t)` is a precomputed series on the network grid.
    Kpo { kerr: f64, detuning: f64, pump: Vec<f64>, cutoff: usize },
    /// Λ system (levels `g1`, `g2`, `e`) in a one-sided cavity; both
    /// transitions couple to the cavity mode with strength `g`, the
    /// `g2 ↔ e` transition detuned by `omega12`.
    LambdaSystem { g: f64, omega12: f64, cutoff: usize },
}

/// Operator on the scatterer factors, used for extra Lindblad terms.
#[derive(Clone, Debug)]
pub enum ScattererOp {
    /// `a†a` on the scatterer's oscillator factor.
    Number,
    /// `a` on the scatterer's oscillator factor.
    Annihilation,
    /// `|lower⟩⟨upper|` on the scatterer's discrete factor.
    Lowering { lower: usize, upper: usize },
}

/// Scatterer specification: kind, emission rate γ into the waveguide and
/// any additional local Lindblad operators `(op, rate)`.
#[derive(Clone, Debug)]
pub struct ScattererSpec {
    pub kind: ScattererKind,
    pub gamma: f64,
    pub extra_lindblads: Vec<(ScattererOp, f64)>,
}

impl ScattererSpec {
    pub fn new(kind: ScattererKind, gamma: f64) -> Self {
        ScattererSpec { kind, gamma, extra_lindblads: Vec::new() }
    }

    fn factors(&self) -> Vec<Factor> {
        match &self.kind {
            ScattererKind::EmptyCavity { cutoff, .. } => {
                vec![Factor::oscillator("c", *cutoff)]
            }
            ScattererKind::TwoLevelAtom => vec![Factor::qubit("atom")],
            ScattererKind::JaynesCummings { cutoff, .. } => {
                vec![Factor::oscillator("c", *cutoff), Factor::qubit("atom")]
            }
            ScattererKind::Kpo { cutoff, .. } => vec![Factor::oscillator("c", *cutoff)],
            ScattererKind::LambdaSystem { cutoff, .. } => {
                vec![Factor::oscillator("c", *cutoff), Factor::nlevel("atom", 3)]
            }
        }
    }

    fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(QpError::InvalidNetwork(format!("gamma = {} < 0", self.gamma)));
        }
        for (_, rate) in &self.extra_lindblads {
            if *rate < 0.0 {
                return Err(QpError::InvalidNetwork(format!("lindblad rate {rate} < 0")));
            }
        }
        match &self.kind {
            ScattererKind::EmptyCavity { gamma_p, .. } if *gamma_p < 0.0 => {
                Err(QpError::InvalidNetwork(format!("gamma_p = {gamma_p} < 0")))
            }
            ScattererKind::Kpo { pump, .. } if pump.len() != grid.n_samples() => {
                Err(QpError::InvalidNetwork(format!(
                    "pump series has {} samples, grid has {}",
                    pump.len(),
                    grid.n_samples()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Thermal source cavity: out-coupling κ, bath rate κ′ and bath occupation
/// Ñ. The stationary cavity occupation is `N = Ñ/(1 + κ/κ′)`.
#[derive(Clone, Copy, Debug)]
pub struct ThermalSourceSpec {
    pub kappa: f64,
    pub kappa_prime: f64,
    pub n_tilde: f64,
}

impl ThermalSourceSpec {
    pub fn occupation(&self) -> f64 {
        self.n_tilde / (1.0 + self.kappa / self.kappa_prime)
    }

    /// Bath occupation Ñ that yields a wanted cavity occupation `n`.
    pub fn n_tilde_for(kappa: f64, kappa_prime: f64, n: f64) -> f64 {
        n * (1.0 + kappa / kappa_prime)
    }
}

/// Initial state of a single factor.
#[derive(Clone, Debug)]
pub enum FactorState {
    /// Fock/level basis state.
    Basis(usize),
    /// Arbitrary pure state (renormalized).
    Ket(Array1<C64>),
    /// Mixed state, e.g. a thermal occupation.
    Density(Array2<C64>),
}

impl FactorState {
    fn density(&self, dim: usize) -> Result<Array2<C64>> {
        match self {
            FactorState::Basis(n) => {
                if *n >= dim {
                    return Err(QpError::InvalidState(format!(
                        "basis level {n} outside factor dimension {dim}"
                    )));
                }
                let mut m = Array2::zeros((dim, dim));
                m[(*n, *n)] = C64::new(1.0, 0.0);
                Ok(m)
            }
            FactorState::Ket(amp) => {
                if amp.len() != dim {
                    return Err(QpError::DimensionMismatch(format!(
                        "factor state has {} amplitudes, factor dimension {dim}",
                        amp.len()
                    )));
                }
                let norm: f64 = amp.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if norm < 1e-14 {
                    return Err(QpError::InvalidState("zero factor state".into()));
                }
                let mut m = Array2::zeros((dim, dim));
                for i in 0..dim {
                    for j in 0..dim {
                        m[(i, j)] = amp[i] * amp[j].conj() / (norm * norm);
                    }
                }
                Ok(m)
            }
            FactorState::Density(d) => {
                if d.nrows() != dim || d.ncols() != dim {
                    return Err(QpError::DimensionMismatch(format!(
                        "factor density is {}x{}, factor dimension {dim}",
                        d.nrows(),
                        d.ncols()
                    )));
                }
                Ok(d.clone())
            }
        }
    }
}

/// Declarative network: input cavities, optional thermal source, optional
/// scatterer, output cavities and an optional transmission capture.
#[derive(Clone, Debug)]
pub struct CascadeNetwork {
    pub grid: TimeGrid,
    pub inputs: ModeBundle,
    pub input_cutoffs: Vec<usize>,
    pub input_states: Vec<FactorState>,
    pub thermal: Option<(ThermalSourceSpec, usize)>,
    pub scatterer: Option<ScattererSpec>,
    pub scatterer_states: Vec<FactorState>,
    pub outputs: ModeBundle,
    pub output_cutoffs: Vec<usize>,
    pub transmission: Option<(CouplingFunction, usize)>,
}

impl CascadeNetwork {
    /// Network with nothing but a grid; fill in the sections needed.
    pub fn empty(grid: TimeGrid) -> Self {
        CascadeNetwork {
            grid,
            inputs: ModeBundle::empty(grid),
            input_cutoffs: Vec::new(),
            input_states: Vec::new(),
            thermal: None,
            scatterer: None,
            scatterer_states: Vec::new(),
            outputs: ModeBundle::empty(grid),
            output_cutoffs: Vec::new(),
            transmission: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.input_cutoffs.len()
            || self.inputs.len() != self.input_states.len()
        {
            return Err(QpError::InvalidNetwork(
                "inputs, cutoffs and initial states must have equal length".into(),
            ));
        }
        if self.outputs.len() != self.output_cutoffs.len() {
            return Err(QpError::InvalidNetwork(
                "outputs and cutoffs must have equal length".into(),
            ));
        }
        for c in &self.inputs.couplings {
            c.grid.check_same(&self.grid)?;
        }
        for c in &self.outputs.couplings {
            c.grid.check_same(&self.grid)?;
        }
        if let Some((w, _)) = &self.transmission {
            w.grid.check_same(&self.grid)?;
        }
        if let Some(s) = &self.scatterer {
            s.validate(&self.grid)?;
            if !self.scatterer_states.is_empty()
                && self.scatterer_states.len() != s.factors().len()
            {
                return Err(QpError::InvalidNetwork(format!(
                    "{} scatterer states for {} scatterer factors",
                    self.scatterer_states.len(),
                    s.factors().len()
                )));
            }
        }
        if let Some((th, _)) = &self.thermal {
            if th.kappa < 0.0 || th.kappa_prime < 0.0 || th.n_tilde < 0.0 {
                return Err(QpError::InvalidNetwork("thermal rates must be nonnegative".into()));
            }
        }
        if self.transmission.is_some() {
            match &self.scatterer {
                Some(ScattererSpec { kind: ScattererKind::JaynesCummings { two_sided, .. }, .. })
                    if *two_sided => {}
                _ => {
                    return Err(QpError::InvalidNetwork(
                        "a transmission channel requires a two-sided scatterer".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Tensor space in the declared factor order: inputs, thermal source,
    /// scatterer factors, outputs, transmission.
    pub fn space(&self) -> Result<Arc<TensorSpace>> {
        self.validate()?;
        let mut factors = Vec::new();
        for (i, cut) in self.input_cutoffs.iter().enumerate() {
            factors.push(Factor::oscillator(format!("u{}", i + 1), *cut));
        }
        if let Some((_, cut)) = &self.thermal {
            factors.push(Factor::oscillator("in", *cut));
        }
        if let Some(s) = &self.scatterer {
            factors.extend(s.factors());
        }
        for (i, cut) in self.output_cutoffs.iter().enumerate() {
            factors.push(Factor::oscillator(format!("v{}", i + 1), *cut));
        }
        if let Some((_, cut)) = &self.transmission {
            factors.push(Factor::oscillator("w", *cut));
        }
        TensorSpace::new(factors)
    }

    /// Product initial state: declared input/scatterer states, the thermal
    /// source in its stationary occupation, capture cavities in vacuum.
    pub fn initial_state(&self) -> Result<DensityMatrix> {
        let space = self.space()?;
        let mut parts: Vec<Array2<C64>> = Vec::new();
        for (i, st) in self.input_states.iter().enumerate() {
            parts.push(st.density(self.input_cutoffs[i] + 1)?);
        }
        if let Some((th, cut)) = &self.thermal {
            let dim = cut + 1;
            let rho = crate::hilbert::thermal_state(dim, th.occupation())?;
            parts.push(rho.data);
        }
        if let Some(s) = &self.scatterer {
            let sf = s.factors();
            for (k, f) in sf.iter().enumerate() {
                let st =
                    self.scatterer_states.get(k).cloned().unwrap_or(FactorState::Basis(0));
                parts.push(st.density(f.dim())?);
            }
        }
        for cut in &self.output_cutoffs {
            parts.push(FactorState::Basis(0).density(cut + 1)?);
        }
        if let Some((_, cut)) = &self.transmission {
            parts.push(FactorState::Basis(0).density(cut + 1)?);
        }
        DensityMatrix::product(space, &parts)
    }
}

// ---------------------------------------------------------------------------
// compiled generators
// ---------------------------------------------------------------------------

/// Time-dependent complex coefficient: a constant or a sampled series.
#[derive(Clone, Debug)]
pub(crate) enum Amp {
    Const(C64),
    Series(usize),
}

/// Coefficient plan: `scale · f(a) · f(b)` where each optional part is an
/// amplitude, possibly conjugated.
#[derive(Clone, Debug)]
struct Coeff {
    scale: C64,
    a: Option<(Amp, bool)>,
    b: Option<(Amp, bool)>,
}

impl Coeff {
    fn constant(scale: C64) -> Self {
        Coeff { scale, a: None, b: None }
    }

    fn single(scale: C64, amp: Amp, conj: bool) -> Self {
        Coeff { scale, a: Some((amp, conj)), b: None }
    }

    fn pair(scale: C64, a: (Amp, bool), b: (Amp, bool)) -> Self {
        Coeff { scale, a: Some(a), b: Some(b) }
    }

    fn conjugated(&self) -> Self {
        Coeff {
            scale: self.scale.conj(),
            a: self.a.as_ref().map(|(amp, c)| (amp.clone(), !c)),
            b: self.b.as_ref().map(|(amp, c)| (amp.clone(), !c)),
        }
    }

    fn eval(&self, series: &[Vec<C64>], k: usize) -> C64 {
        let part = |p: &Option<(Amp, bool)>| -> C64 {
            match p {
                None => C64::new(1.0, 0.0),
                Some((Amp::Const(z), false)) => *z,
                Some((Amp::Const(z), true)) => z.conj(),
                Some((Amp::Series(id), false)) => series[*id][k],
                Some((Amp::Series(id), true)) => series[*id][k].conj(),
            }
        };
        self.scale * part(&self.a) * part(&self.b)
    }
}

/// One sparse term of a merged operator with its coefficient plan and the
/// scatter map from term entries into merged value slots.
struct Term {
    coeff: Coeff,
    slots: Vec<u32>,
    weights: Vec<C64>,
}

/// Sum of sparse terms with time-dependent coefficients sharing one merged
/// sparsity pattern.
pub(crate) struct MergedOp {
    pattern: CsrMatrix,
    terms: Vec<Term>,
}

impl MergedOp {
    fn build(dim: usize, parts: Vec<(CsrMatrix, Coeff)>) -> MergedOp {
        let mut b = CsrBuilder::new(dim);
        for (m, _) in &parts {
            for r in 0..dim {
                for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                    // pattern only; values are overwritten at evaluation
                    b.push(r, m.col[k] as usize, C64::new(1.0, 0.0));
                }
            }
        }
        let pattern = b.build();
        let find_slot = |row: usize, col: u32| -> u32 {
            let lo = pattern.row_ptr[row];
            let hi = pattern.row_ptr[row + 1];
            let idx = pattern.col[lo..hi].binary_search(&col).expect("slot exists") + lo;
            idx as u32
        };
        let terms = parts
            .into_iter()
            .map(|(m, coeff)| {
                let mut slots = Vec::with_capacity(m.nnz());
                let mut weights = Vec::with_capacity(m.nnz());
                for r in 0..dim {
                    for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                        slots.push(find_slot(r, m.col[k]));
                        weights.push(m.val[k]);
                    }
                }
                Term { coeff, slots, weights }
            })
            .collect();
        MergedOp { pattern, terms }
    }

    pub(crate) fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    pub(crate) fn dim(&self) -> usize {
        self.pattern.dim
    }

    /// Fill `values` (length `nnz`) with the numeric entries at sample `k`.
    pub(crate) fn eval_values(&self, series: &[Vec<C64>], k: usize, values: &mut [C64]) {
        values.fill(C64::new(0.0, 0.0));
        for term in &self.terms {
            let c = term.coeff.eval(series, k);
            if c.norm_sqr() == 0.0 {
                continue;
            }
            for (slot, w) in term.slots.iter().zip(&term.weights) {
                values[*slot as usize] += c * w;
            }
        }
    }

    pub(crate) fn apply(&self, values: &[C64], x: &[C64], y: &mut [C64]) {
        self.pattern.apply(Some(values), x, y);
    }

    pub(crate) fn trace_ada_rho(&self, values: &[C64], x: &[C64]) -> C64 {
        self.pattern.trace_ada_rho(Some(values), x)
    }

    pub(crate) fn trace_adjoint_times(&self, values: &[C64], x: &[C64]) -> C64 {
        self.pattern.trace_adjoint_times(Some(values), x)
    }

    /// Dense matrix at sample `k` (tests, inspection).
    pub(crate) fn to_dense(&self, series: &[Vec<C64>], k: usize) -> Array2<C64> {
        let mut values = vec![C64::new(0.0, 0.0); self.nnz()];
        self.eval_values(series, k, &mut values);
        let mut m = Array2::zeros((self.dim(), self.dim()));
        for r in 0..self.dim() {
            for idx in self.pattern.row_ptr[r]..self.pattern.row_ptr[r + 1] {
                m[(r, self.pattern.col[idx] as usize)] = values[idx];
            }
        }
        m
    }
}

/// Hamiltonian and jump operators evaluated at one time.
#[derive(Clone, Debug)]
pub struct GeneratorAt {
    pub time: f64,
    pub h: Operator,
    pub lindblads: Vec<Operator>,
}

/// Compiled network: merged sparse `H(t)`, effective non-Hermitian
/// `H_eff(t) = H − (i/2)ΣL†L` and the Lindblad channels, all with
/// coefficients sampled on the grid.
pub struct CompiledGenerator {
    pub space: Arc<TensorSpace>,
    pub grid: TimeGrid,
    pub(crate) series: Vec<Vec<C64>>,
    pub(crate) ham: MergedOp,
    pub(crate) h_eff: MergedOp,
    pub(crate) lindblads: Vec<(String, MergedOp)>,
}

impl CompiledGenerator {
    pub fn n_lindblads(&self) -> usize {
        self.lindblads.len()
    }

    pub fn lindblad_names(&self) -> Vec<&str> {
        self.lindblads.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn lindblad_index(&self, name: &str) -> Option<usize> {
        self.lindblads.iter().position(|(n, _)| n == name)
    }

    /// Dense generator at grid sample `k`.
    pub fn at(&self, k: usize) -> Result<GeneratorAt> {
        if k >= self.grid.n_samples() {
            return Err(QpError::InvalidNetwork(format!(
                "sample {k} outside grid of {} samples",
                self.grid.n_samples()
            )));
        }
        let h = Operator::new(self.space.clone(), self.ham.to_dense(&self.series, k))?;
        let lindblads = self
            .lindblads
            .iter()
            .map(|(_, op)| Operator::new(self.space.clone(), op.to_dense(&self.series, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorAt { time: self.grid.time(k), h, lindblads })
    }
}

// ---------------------------------------------------------------------------
// compilation
// ---------------------------------------------------------------------------

fn annihilation_triplets(dim: usize) -> Vec<(usize, usize, C64)> {
    (1..dim).map(|n| (n - 1, n, C64::new((n as f64).sqrt(), 0.0))).collect()
}

fn number_triplets(dim: usize) -> Vec<(usize, usize, C64)> {
    (1..dim).map(|n| (n, n, C64::new(n as f64, 0.0))).collect()
}

fn embed_triplets(
    trip: &[(usize, usize, C64)],
    fdim: usize,
    index: usize,
    space: &TensorSpace,
) -> CsrMatrix {
    let post: usize = space.factors()[index + 1..].iter().map(Factor::dim).product();
    let pre: usize = space.factors()[..index].iter().map(Factor::dim).product();
    let mut b = CsrBuilder::new(space.total_dim());
    for a in 0..pre {
        for &(i, j, v) in trip {
            let row0 = (a * fdim + i) * post;
            let col0 = (a * fdim + j) * post;
            for off in 0..post {
                b.push(row0 + off, col0 + off, v);
            }
        }
    }
    b.build()
}

fn csr_sum(dim: usize, parts: &[&CsrMatrix]) -> CsrMatrix {
    let mut b = CsrBuilder::new(dim);
    for m in parts {
        for r in 0..dim {
            for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                b.push(r, m.col[k] as usize, m.val[k]);
            }
        }
    }
    b.build()
}

/// One port of a cascade chain: the embedded system operator and its
/// (possibly time-dependent) amplitude, so that `L_port = amp(t) · op`.
struct Port {
    op: CsrMatrix,
    amp: Amp,
}

struct Compilation {
    space: Arc<TensorSpace>,
    series: Vec<Vec<C64>>,
    ham_parts: Vec<(CsrMatrix, Coeff)>,
    lindblads: Vec<(String, Vec<Port>)>,
}

impl Compilation {
    fn add_series(&mut self, samples: Vec<C64>) -> Amp {
        self.series.push(samples);
        Amp::Series(self.series.len() - 1)
    }

    /// Hermitian pair `coeff · M + conj(coeff) · M†`.
    fn push_pair(&mut self, m: CsrMatrix, coeff: Coeff) {
        let adj = m.adjoint();
        self.ham_parts.push((m, coeff.clone()));
        self.ham_parts.push((adj, coeff.conjugated()));
    }

    /// Cascade exchange terms for an ordered chain of ports:
    /// `(i/2)(L_a† L_b − h.c.)` for every upstream/downstream pair.
    fn push_chain_hamiltonian(&mut self, ports: &[Port]) {
        for a in 0..ports.len() {
            for b in a + 1..ports.len() {
                let m = ports[a].op.adjoint().matmul(&ports[b].op);
                let coeff = Coeff::pair(
                    C64::new(0.0, 0.5),
                    (ports[a].amp.clone(), true),
                    (ports[b].amp.clone(), false),
                );
                self.push_pair(m, coeff);
            }
        }
    }
}

/// Compile a validated network into its generator.
pub fn compile(network: &CascadeNetwork) -> Result<CompiledGenerator> {
    network.validate()?;
    let space = network.space()?;
    let grid = network.grid;
    let mut comp = Compilation {
        space: space.clone(),
        series: Vec::new(),
        ham_parts: Vec::new(),
        lindblads: Vec::new(),
    };

    let n_in = network.inputs.len();
    let thermal_idx = if network.thermal.is_some() { Some(n_in) } else { None };
    let scatterer_idx = n_in + usize::from(network.thermal.is_some());
    let n_scatter = network.scatterer.as_ref().map(|s| s.factors().len()).unwrap_or(0);
    let out_idx0 = scatterer_idx + n_scatter;
    let w_idx = out_idx0 + network.outputs.len();

    let osc = |comp: &Compilation, idx: usize| -> CsrMatrix {
        let d = comp.space.factor_dim(idx).expect("factor index valid");
        embed_triplets(&annihilation_triplets(d), d, idx, &comp.space)
    };

    // main cascade chain, upstream to downstream
    let mut chain: Vec<Port> = Vec::new();
    if let Some((th, _)) = &network.thermal {
        let idx = thermal_idx.expect("thermal factor present");
        chain.push(Port { op: osc(&comp, idx), amp: Amp::Const(C64::new(th.kappa.sqrt(), 0.0)) });
    }
    // input cavities: the outermost (largest index) cavity is most upstream
    for i in (0..n_in).rev() {
        let amp = comp.add_series(network.inputs.couplings[i].samples.clone());
        chain.push(Port { op: osc(&comp, i), amp });
    }

    // scatterer: coupling operator and local Hamiltonian
    let mut transmission_source: Option<Port> = None;
    if let Some(spec) = &network.scatterer {
        let gamma_amp = Amp::Const(C64::new(spec.gamma.sqrt(), 0.0));
        let c_op = build_scatterer(&mut comp, spec, scatterer_idx)?;
        if spec.gamma > 0.0 {
            chain.push(Port { op: c_op.clone(), amp: gamma_amp.clone() });
        }
        if network.transmission.is_some() {
            transmission_source = Some(Port { op: c_op, amp: gamma_amp });
        }
    }

    // output capture cavities
    for (i, g) in network.outputs.couplings.iter().enumerate() {
        let amp = comp.add_series(g.samples.clone());
        chain.push(Port { op: osc(&comp, out_idx0 + i), amp });
    }

    comp.push_chain_hamiltonian(&chain);
    if !chain.is_empty() {
        comp.lindblads.insert(0, ("channel".into(), chain));
    }

    // transmission channel: second mirror into the w capture cavity
    if let Some((gw, _)) = &network.transmission {
        let src = transmission_source.expect("validated two-sided scatterer");
        let amp = comp.add_series(gw.samples.clone());
        let t_chain = vec![src, Port { op: osc(&comp, w_idx), amp }];
        comp.push_chain_hamiltonian(&t_chain);
        let pos = usize::from(!comp.lindblads.is_empty());
        comp.lindblads.insert(pos.min(comp.lindblads.len()), ("transmission".into(), t_chain));
    }

    // thermal bath raising / lowering on the source cavity
    if let Some((th, _)) = &network.thermal {
        let idx = thermal_idx.expect("thermal factor present");
        let a_in = osc(&comp, idx);
        let up = Port {
            op: a_in.adjoint(),
            amp: Amp::Const(C64::new((th.n_tilde * th.kappa_prime).sqrt(), 0.0)),
        };
        let down = Port {
            op: a_in,
            amp: Amp::Const(C64::new(((th.n_tilde + 1.0) * th.kappa_prime).sqrt(), 0.0)),
        };
        comp.lindblads.push(("thermal_up".into(), vec![up]));
        comp.lindblads.push(("thermal_down".into(), vec![down]));
    }

    // assemble merged operators
    let dim = space.total_dim();
    let ham = MergedOp::build(dim, comp.ham_parts.clone());
    let mut heff_parts = comp.ham_parts;
    let mut lindblad_ops = Vec::new();
    for (name, ports) in comp.lindblads {
        let mut parts = Vec::new();
        for p in &ports {
            parts.push((p.op.clone(), Coeff::single(C64::new(1.0, 0.0), p.amp.clone(), false)));
        }
        // −(i/2) L†L contributions to H_eff
        for a in &ports {
            for b in &ports {
                let m = a.op.adjoint().matmul(&b.op);
                heff_parts.push((
                    m,
                    Coeff::pair(
                        C64::new(0.0, -0.5),
                        (a.amp.clone(), true),
                        (b.amp.clone(), false),
                    ),
                ));
            }
        }
        lindblad_ops.push((name, MergedOp::build(dim, parts)));
    }
    let h_eff = MergedOp::build(dim, heff_parts);

    Ok(CompiledGenerator { space, grid, series: comp.series, ham, h_eff, lindblads: lindblad_ops })
}

/// Scatterer Hamiltonian terms and extra Lindblads; returns the embedded
/// coupling operator ĉ.
fn build_scatterer(
    comp: &mut Compilation,
    spec: &ScattererSpec,
    base_idx: usize,
) -> Result<CsrMatrix> {
    let space = comp.space.clone();
    let one = C64::new(1.0, 0.0);

    let c_op = match &spec.kind {
        ScattererKind::EmptyCavity { omega_c, gamma_p, cutoff } => {
            let d = cutoff + 1;
            let a = embed_triplets(&annihilation_triplets(d), d, base_idx, &space);
            if *omega_c != 0.0 {
                let n = embed_triplets(&number_triplets(d), d, base_idx, &space);
                comp.ham_parts.push((n, Coeff::constant(C64::new(*omega_c, 0.0))));
            }
            if *gamma_p > 0.0 {
                let n = embed_triplets(&number_triplets(d), d, base_idx, &space);
                comp.lindblads.push((
                    "phase_noise".into(),
                    vec![Port { op: n, amp: Amp::Const(C64::new(gamma_p.sqrt(), 0.0)) }],
                ));
            }
            a
        }
        ScattererKind::TwoLevelAtom => embed_triplets(&[(0, 1, one)], 2, base_idx, &space),
        ScattererKind::JaynesCummings { g, cutoff, .. } => {
            let d = cutoff + 1;
            let a = embed_triplets(&annihilation_triplets(d), d, base_idx, &space);
            let sm = embed_triplets(&[(0, 1, one)], 2, base_idx + 1, &space);
            // g (a σ₊ + a† σ₋)
            let a_sp = a.matmul(&sm.adjoint());
            comp.push_pair(a_sp, Coeff::constant(C64::new(*g, 0.0)));
            a
        }
        ScattererKind::Kpo { kerr, detuning, pump, cutoff } => {
            let d = cutoff + 1;
            let a = embed_triplets(&annihilation_triplets(d), d, base_idx, &space);
            let a_sq = a.matmul(&a);
            // pump: p(t)/2 ((a†)² + a²)
            let pump_series = comp.add_series(pump.iter().map(|p| C64::new(*p, 0.0)).collect());
            comp.ham_parts.push((
                a_sq.adjoint(),
                Coeff::single(C64::new(0.5, 0.0), pump_series.clone(), false),
            ));
            comp.ham_parts
                .push((a_sq.clone(), Coeff::single(C64::new(0.5, 0.0), pump_series, false)));
            // −K/2 (a†)² a²
            let kerr_op = a_sq.adjoint().matmul(&a_sq);
            comp.ham_parts.push((kerr_op, Coeff::constant(C64::new(-kerr / 2.0, 0.0))));
            if *detuning != 0.0 {
                let n = embed_triplets(&number_triplets(d), d, base_idx, &space);
                comp.ham_parts.push((n, Coeff::constant(C64::new(*detuning, 0.0))));
            }
            a
        }
        ScattererKind::LambdaSystem { g, omega12, cutoff } => {
            let d = cutoff + 1;
            let a = embed_triplets(&annihilation_triplets(d), d, base_idx, &space);
            // atom levels: |g1⟩ = 0, |g2⟩ = 1, |e⟩ = 2
            let s1 = embed_triplets(&[(0, 2, one)], 3, base_idx + 1, &space);
            let s2 = embed_triplets(&[(1, 2, one)], 3, base_idx + 1, &space);
            let sigma = csr_sum(space.total_dim(), &[&s1, &s2]);
            // g a† (σ₁₋ + σ₂₋) + h.c.
            let coupling = a.adjoint().matmul(&sigma);
            comp.push_pair(coupling, Coeff::constant(C64::new(*g, 0.0)));
            if *omega12 != 0.0 {
                let p2 = embed_triplets(&[(1, 1, one)], 3, base_idx + 1, &space);
                comp.ham_parts.push((p2, Coeff::constant(C64::new(*omega12, 0.0))));
            }
            a
        }
    };

    // extra local Lindblads
    for (li, (op, rate)) in spec.extra_lindblads.iter().enumerate() {
        if *rate == 0.0 {
            continue;
        }
        let m = match op {
            ScattererOp::Number => {
                let d = space.factor_dim(base_idx)?;
                embed_triplets(&number_triplets(d), d, base_idx, &space)
            }
            ScattererOp::Annihilation => {
                let d = space.factor_dim(base_idx)?;
                embed_triplets(&annihilation_triplets(d), d, base_idx, &space)
            }
            ScattererOp::Lowering { lower, upper } => {
                let disc_idx = base_idx + spec.factors().len() - 1;
                let d = space.factor_dim(disc_idx)?;
                embed_triplets(&[(*lower, *upper, one)], d, disc_idx, &space)
            }
        };
        comp.lindblads.push((
            format!("extra_{li}"),
            vec![Port { op: m, amp: Amp::Const(C64::new(rate.sqrt(), 0.0)) }],
        ));
    }
    Ok(c_op)
}

// ---------------------------------------------------------------------------
// named builders for the network shapes used by the scenarios
// ---------------------------------------------------------------------------

/// Single input, at most one capture cavity (no transmission channel).
pub fn build_single(network: &CascadeNetwork) -> Result<CompiledGenerator> {
    if network.inputs.len() > 1 || network.outputs.len() > 1 || network.transmission.is_some() {
        return Err(QpError::InvalidNetwork(
            "build_single expects n ≤ 1 inputs, m ≤ 1 outputs and no transmission channel".into(),
        ));
    }
    compile(network)
}

/// General multimode network (n, m ≤ 4).
pub fn build_multi(network: &CascadeNetwork) -> Result<CompiledGenerator> {
    compile(network)
}

/// Two-sided Jaynes-Cummings scatterer with reflection and transmission
/// capture cavities.
pub fn build_blockade(network: &CascadeNetwork) -> Result<CompiledGenerator> {
    match &network.scatterer {
        Some(ScattererSpec { kind: ScattererKind::JaynesCummings { two_sided: true, .. }, .. }) => {
        }
        _ => {
            return Err(QpError::InvalidNetwork(
                "build_blockade expects a two-sided Jaynes-Cummings scatterer".into(),
            ))
        }
    }
    if network.transmission.is_none() {
        return Err(QpError::InvalidNetwork(
            "build_blockade expects a transmission capture cavity".into(),
        ));
    }
    compile(network)
}

/// Cascade preceded by a thermally occupied source cavity.
pub fn build_thermal(network: &CascadeNetwork) -> Result<CompiledGenerator> {
    if network.thermal.is_none() {
        return Err(QpError::InvalidNetwork("build_thermal expects a thermal source".into()));
    }
    compile(network)
}
