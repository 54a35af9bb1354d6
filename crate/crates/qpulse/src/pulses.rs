//! Temporal modes on a uniform time grid and the time-dependent couplings
//! that make a virtual cavity emit or absorb exactly one chosen mode.
//!
//! For a single mode the couplings follow from the mode envelope and its
//! cumulative norm. With several modes per side, each pulse is reshaped by
//! reflections off the other virtual cavities; the reshaped envelopes are
//! obtained from small classical amplitude ODEs integrated on the grid, and
//! the couplings are then computed from the reshaped modes.

use crate::linalg::CubicSpline;
use crate::{C64, QpError, Result};

/// Uniform time grid `t_k = t0 + k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) {
            return Err(QpError::InvalidMode(format!("empty time interval [{t0}, {t1}]")));
        }
        if n_steps < 16 {
            return Err(QpError::InvalidMode(format!("grid needs at least 16 steps, got {n_steps}")));
        }
        Ok(TimeGrid { t0, t1, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn n_samples(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_samples()).map(move |k| self.time(k))
    }

    /// Trapezoidal quadrature weight of sample `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            self.dt() / 2.0
        } else {
            self.dt()
        }
    }

    fn close_to(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps
            && (self.t0 - other.t0).abs() < 1e-12 * (1.0 + self.t0.abs())
            && (self.t1 - other.t1).abs() < 1e-12 * (1.0 + self.t1.abs())
    }

    pub(crate) fn check_same(&self, other: &TimeGrid) -> Result<()> {
        if !self.close_to(other) {
            return Err(QpError::DimensionMismatch("time grids differ".into()));
        }
        Ok(())
    }
}

/// Complex pulse envelope `u(t_k)`, unit-normalized under trapezoidal
/// quadrature. An optional carrier detuning δ stands for a factor
/// `e^{−iδt}` which [`Self::carrier_samples`] materializes.
#[derive(Clone, Debug)]
pub struct TemporalMode {
    pub grid: TimeGrid,
    pub samples: Vec<C64>,
    pub carrier_detuning: f64,
    pub warnings: Vec<String>,
}

impl TemporalMode {
    /// Normalize raw samples on the grid.
    pub fn from_samples(grid: TimeGrid, samples: Vec<C64>, carrier_detuning: f64) -> Result<Self> {
        if samples.len() != grid.n_samples() {
            return Err(QpError::InvalidMode(format!(
                "{} samples for a grid of {} points",
                samples.len(),
                grid.n_samples()
            )));
        }
        let norm_sq: f64 =
            samples.iter().enumerate().map(|(k, z)| grid.weight(k) * z.norm_sqr()).sum();
        if norm_sq < 1e-300 {
            return Err(QpError::InvalidMode("zero mode envelope".into()));
        }
        let scale = 1.0 / norm_sq.sqrt();
        let samples = samples.into_iter().map(|z| z * scale).collect();
        Ok(TemporalMode { grid, samples, carrier_detuning, warnings: Vec::new() })
    }

    /// Squared norm under trapezoidal quadrature (1 after construction).
    pub fn norm_sq(&self) -> f64 {
        self.samples
            .iter()
            .enumerate()
            .map(|(k, z)| self.grid.weight(k) * z.norm_sqr())
            .sum()
    }

    /// Samples with the carrier factor `e^{−iδ t}` applied.
    pub fn carrier_samples(&self) -> Vec<C64> {
        if self.carrier_detuning == 0.0 {
            return self.samples.clone();
        }
        let delta = self.carrier_detuning;
        self.samples
            .iter()
            .enumerate()
            .map(|(k, z)| z * C64::from_polar(1.0, -delta * self.grid.time(k)))
            .collect()
    }

    /// The same mode with the carrier factor folded into the samples.
    pub fn with_carrier_applied(&self) -> TemporalMode {
        TemporalMode {
            grid: self.grid,
            samples: self.carrier_samples(),
            carrier_detuning: 0.0,
            warnings: self.warnings.clone(),
        }
    }

    /// Trapezoidal inner product `⟨self, other⟩ = ∫ self*(t) other(t) dt`.
    pub fn overlap(&self, other: &TemporalMode) -> Result<C64> {
        self.grid.check_same(&other.grid)?;
        let a = self.carrier_samples();
        let b = other.carrier_samples();
        Ok(a.iter()
            .zip(b.iter())
            .enumerate()
            .map(|(k, (x, y))| self.grid.weight(k) * x.conj() * y)
            .sum())
    }

    /// Resample onto another grid with a cubic spline, then renormalize.
    /// Times outside the source grid are set to zero.
    pub fn resample(&self, grid: TimeGrid) -> Result<TemporalMode> {
        let src = self.carrier_samples();
        let spline = CubicSpline::fit(self.grid.t0, self.grid.dt(), &src);
        let eps = 1e-9 * (self.grid.t1 - self.grid.t0);
        let samples: Vec<C64> = grid
            .times()
            .map(|t| {
                if t < self.grid.t0 - eps || t > self.grid.t1 + eps {
                    C64::new(0.0, 0.0)
                } else {
                    spline.eval(t)
                }
            })
            .collect();
        TemporalMode::from_samples(grid, samples, 0.0)
    }
}

/// Gaussian wave packet of duration `tau` arriving at `t_p`, with the
/// `1/(√τ π^{1/4})` prefactor before grid renormalization.
pub fn gaussian_mode(grid: TimeGrid, tau: f64, t_p: f64, detuning: f64) -> Result<TemporalMode> {
    if tau <= 0.0 {
        return Err(QpError::InvalidMode(format!("gaussian duration tau = {tau} must be positive")));
    }
    let pref = 1.0 / (tau.sqrt() * std::f64::consts::PI.powf(0.25));
    let samples: Vec<C64> = grid
        .times()
        .map(|t| {
            let arg = -(t - t_p) * (t - t_p) / (2.0 * tau * tau);
            C64::new(pref * arg.exp(), 0.0)
        })
        .collect();
    let mut mode = TemporalMode::from_samples(grid, samples, detuning)?;
    if t_p - grid.t0 < 4.0 * tau || grid.t1 - t_p < 4.0 * tau {
        mode.warnings.push(format!(
            "gaussian at t_p = {t_p} with tau = {tau} is clipped by the grid [{}, {}]",
            grid.t0, grid.t1
        ));
    }
    Ok(mode)
}

/// Decaying exponential `√γ e^{−γ(t−t0)/2}`, the emission mode of a system
/// with constant decay rate γ.
pub fn exponential_mode(grid: TimeGrid, gamma: f64) -> Result<TemporalMode> {
    if gamma <= 0.0 {
        return Err(QpError::InvalidMode(format!("decay rate gamma = {gamma} must be positive")));
    }
    let samples: Vec<C64> = grid
        .times()
        .map(|t| C64::new(gamma.sqrt() * (-gamma * (t - grid.t0) / 2.0).exp(), 0.0))
        .collect();
    TemporalMode::from_samples(grid, samples, 0.0)
}

/// Default cutoff on the radicand of the coupling denominators.
pub const DEFAULT_EPSILON_CUT: f64 = 1e-6;

/// Time-sampled virtual-cavity coupling `g(t_k)` with a validity mask where
/// the defining denominator fell below the cutoff.
#[derive(Clone, Debug)]
pub struct CouplingFunction {
    pub grid: TimeGrid,
    pub samples: Vec<C64>,
    pub valid_mask: Vec<bool>,
    pub epsilon_cut: f64,
}

impl CouplingFunction {
    /// A coupling that is identically zero (absent channel).
    pub fn zero(grid: TimeGrid) -> Self {
        CouplingFunction {
            grid,
            samples: vec![C64::new(0.0, 0.0); grid.n_samples()],
            valid_mask: vec![false; grid.n_samples()],
            epsilon_cut: DEFAULT_EPSILON_CUT,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn cumulative_norm(grid: &TimeGrid, samples: &[C64]) -> Vec<f64> {
    let dt = grid.dt();
    let mut cum = Vec::with_capacity(samples.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for k in 1..samples.len() {
        acc += dt * 0.5 * (samples[k - 1].norm_sqr() + samples[k].norm_sqr());
        cum.push(acc);
    }
    cum
}

/// Release coupling `g_u(t) = u*(t)/√(1 − ∫₀ᵗ|u|²)`, masked to zero where
/// the radicand drops below `epsilon_cut`.
pub fn coupling_in(u: &TemporalMode) -> CouplingFunction {
    coupling_in_with_cut(u, DEFAULT_EPSILON_CUT)
}

pub fn coupling_in_with_cut(u: &TemporalMode, epsilon_cut: f64) -> CouplingFunction {
    let samples = u.carrier_samples();
    let cum = cumulative_norm(&u.grid, &samples);
    let mut g = Vec::with_capacity(samples.len());
    let mut mask = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let radicand = 1.0 - cum[k];
        if radicand < epsilon_cut {
            g.push(C64::new(0.0, 0.0));
            mask.push(false);
        } else {
            g.push(s.conj() / radicand.sqrt());
            mask.push(true);
        }
    }
    CouplingFunction { grid: u.grid, samples: g, valid_mask: mask, epsilon_cut }
}

/// Capture coupling `g_v(t) = −v*(t)/√(∫₀ᵗ|v|²)`, masked at early times.
pub fn coupling_out(v: &TemporalMode) -> CouplingFunction {
    coupling_out_with_cut(v, DEFAULT_EPSILON_CUT)
}

pub fn coupling_out_with_cut(v: &TemporalMode, epsilon_cut: f64) -> CouplingFunction {
    let samples = v.carrier_samples();
    let cum = cumulative_norm(&v.grid, &samples);
    let mut g = Vec::with_capacity(samples.len());
    let mut mask = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let radicand = cum[k];
        if radicand < epsilon_cut {
            g.push(C64::new(0.0, 0.0));
            mask.push(false);
        } else {
            g.push(-s.conj() / radicand.sqrt());
            mask.push(true);
        }
    }
    CouplingFunction { grid: v.grid, samples: g, valid_mask: mask, epsilon_cut }
}

/// A set of modes with their cavity couplings; `reshaped[i][j]` holds the
/// intermediate envelope of mode `i` after `j + 1` reflections.
#[derive(Clone, Debug)]
pub struct ModeBundle {
    pub modes: Vec<TemporalMode>,
    pub couplings: Vec<CouplingFunction>,
    pub reshaped: Vec<Vec<TemporalMode>>,
    pub renorm_deviation: Vec<f64>,
}

impl ModeBundle {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn empty(grid: TimeGrid) -> Self {
        let _ = grid;
        ModeBundle {
            modes: Vec::new(),
            couplings: Vec::new(),
            reshaped: Vec::new(),
            renorm_deviation: Vec::new(),
        }
    }
}

const MAX_MODES: usize = 4;
const ORTHO_TOL: f64 = 1e-4;

fn check_mode_set(modes: &[TemporalMode]) -> Result<()> {
    if modes.is_empty() {
        return Err(QpError::InvalidMode("empty mode list".into()));
    }
    if modes.len() > MAX_MODES {
        return Err(QpError::InvalidMode(format!(
            "at most {MAX_MODES} simultaneous modes are supported, got {}",
            modes.len()
        )));
    }
    for w in modes.windows(2) {
        w[0].grid.check_same(&w[1].grid)?;
    }
    for i in 0..modes.len() {
        for j in 0..i {
            let ov = modes[i].overlap(&modes[j])?.norm();
            if ov > ORTHO_TOL {
                return Err(QpError::InvalidMode(format!(
                    "modes {j} and {i} are not orthogonal (|overlap| = {ov:.2e})"
                )));
            }
        }
    }
    Ok(())
}

/// Classical RK4 over two grid cells per step (midpoint = odd sample), with
/// cubic-Hermite fill of the odd samples. `rhs(k, y, dy)` evaluates the
/// system derivative at sample index `k`.
fn rk4_on_grid<F>(grid: &TimeGrid, n_vars: usize, rhs: F) -> Result<Vec<Vec<C64>>>
where
    F: Fn(usize, &[C64], &mut [C64]),
{
    let n = grid.n_steps;
    if n % 2 != 0 {
        return Err(QpError::InvalidMode(
            "grid step count must be even for half-step RK4 sampling".into(),
        ));
    }
    let h = 2.0 * grid.dt();
    let mut out = vec![vec![C64::new(0.0, 0.0); grid.n_samples()]; n_vars];
    let mut y = vec![C64::new(0.0, 0.0); n_vars];
    let mut k1 = vec![C64::new(0.0, 0.0); n_vars];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    let mut deriv_start = k1.clone();

    for step in 0..n / 2 {
        let k0 = 2 * step;
        rhs(k0, &y, &mut k1);
        deriv_start.copy_from_slice(&k1);
        for i in 0..n_vars {
            tmp[i] = y[i] + k1[i] * (h / 2.0);
        }
        rhs(k0 + 1, &tmp, &mut k2);
        for i in 0..n_vars {
            tmp[i] = y[i] + k2[i] * (h / 2.0);
        }
        rhs(k0 + 1, &tmp, &mut k3);
        for i in 0..n_vars {
            tmp[i] = y[i] + k3[i] * h;
        }
        rhs(k0 + 2, &tmp, &mut k4);
        let mut y_next = vec![C64::new(0.0, 0.0); n_vars];
        for i in 0..n_vars {
            y_next[i] = y[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
        }
        rhs(k0 + 2, &y_next, &mut tmp); // derivative at the step end
        for i in 0..n_vars {
            out[i][k0] = y[i];
            // 4th-order Hermite value at the midpoint sample
            out[i][k0 + 1] =
                (y[i] + y_next[i]) * 0.5 + (deriv_start[i] - tmp[i]) * (h / 8.0);
            out[i][k0 + 2] = y_next[i];
        }
        y = y_next;
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(QpError::Unstable {
                time: grid.time(k0 + 2),
                detail: "classical mode amplitude diverged".into(),
            });
        }
    }
    Ok(out)
}

fn add_scaled(dst: &mut [C64], src: &[C64], weights: &[C64]) {
    for ((d, s), w) in dst.iter_mut().zip(src).zip(weights) {
        *d += w.conj() * s;
    }
}

/// Couplings for `m ≤ 4` orthogonal output (capture) modes.
///
/// Mode `i` is reshaped by reflections off cavities `1..i-1`; the reshaped
/// envelope defines the capture coupling of cavity `i`.
pub fn multimode_output_couplings(modes: &[TemporalMode]) -> Result<ModeBundle> {
    multimode_output_couplings_with_cut(modes, DEFAULT_EPSILON_CUT)
}

pub fn multimode_output_couplings_with_cut(
    modes: &[TemporalMode],
    epsilon_cut: f64,
) -> Result<ModeBundle> {
    check_mode_set(modes)?;
    let grid = modes[0].grid;
    let mut couplings: Vec<CouplingFunction> = Vec::with_capacity(modes.len());
    let mut reshaped_all: Vec<Vec<TemporalMode>> = Vec::with_capacity(modes.len());
    let mut renorm = Vec::with_capacity(modes.len());

    for (i, mode) in modes.iter().enumerate() {
        let vi = mode.carrier_samples();
        if i == 0 {
            couplings.push(coupling_out_with_cut(mode, epsilon_cut));
            reshaped_all.push(Vec::new());
            renorm.push(0.0);
            continue;
        }
        // amplitudes α^{(j)} in the j-th upstream cavity, j = 0..i-1
        let gs: Vec<&CouplingFunction> = couplings.iter().collect();
        let alphas = rk4_on_grid(&grid, i, |k, y, dy| {
            for j in 0..i {
                let gj = gs[j].samples[k];
                let mut drive = vi[k];
                for l in 0..j {
                    drive += gs[l].samples[k].conj() * y[l];
                }
                dy[j] = -gj * drive - y[j] * (gj.norm_sqr() / 2.0);
            }
        })?;
        // intermediate envelopes v_i^{(j)} = v_i + Σ_{k<=j} g*_k α^{(k)}
        let mut inter = Vec::with_capacity(i);
        let mut current = vi.clone();
        for j in 0..i {
            let g_samples = &couplings[j].samples;
            add_scaled(&mut current, &alphas[j], g_samples);
            inter.push(TemporalMode {
                grid,
                samples: current.clone(),
                carrier_detuning: 0.0,
                warnings: Vec::new(),
            });
        }
        let raw_norm: f64 =
            current.iter().enumerate().map(|(k, z)| grid.weight(k) * z.norm_sqr()).sum();
        renorm.push((raw_norm.sqrt() - 1.0).abs());
        let reshaped = TemporalMode::from_samples(grid, current, 0.0)?;
        couplings.push(coupling_out_with_cut(&reshaped, epsilon_cut));
        reshaped_all.push(inter);
    }

    Ok(ModeBundle {
        modes: modes.to_vec(),
        couplings,
        reshaped: reshaped_all,
        renorm_deviation: renorm,
    })
}

/// Couplings for `n ≤ 4` orthogonal input modes.
///
/// Cavity `i` must emit the pre-distorted envelope `u_i^{(i−1)}` so that the
/// reflections off cavities `i−1..1` turn it into `u_i` at the scatterer.
/// The amplitude equations carry a `+|g|²/2` growth term because they
/// propagate the required emission backwards through the reflections.
pub fn multimode_input_couplings(modes: &[TemporalMode]) -> Result<ModeBundle> {
    multimode_input_couplings_with_cut(modes, DEFAULT_EPSILON_CUT)
}

pub fn multimode_input_couplings_with_cut(
    modes: &[TemporalMode],
    epsilon_cut: f64,
) -> Result<ModeBundle> {
    check_mode_set(modes)?;
    let grid = modes[0].grid;
    let mut couplings: Vec<CouplingFunction> = Vec::with_capacity(modes.len());
    let mut reshaped_all: Vec<Vec<TemporalMode>> = Vec::with_capacity(modes.len());
    let mut renorm = Vec::with_capacity(modes.len());

    for (i, mode) in modes.iter().enumerate() {
        let ui = mode.carrier_samples();
        if i == 0 {
            couplings.push(coupling_in_with_cut(mode, epsilon_cut));
            reshaped_all.push(Vec::new());
            renorm.push(0.0);
            continue;
        }
        let gs: Vec<&CouplingFunction> = couplings.iter().collect();
        let alphas = rk4_on_grid(&grid, i, |k, y, dy| {
            for j in 0..i {
                let gj = gs[j].samples[k];
                let mut drive = ui[k];
                for l in 0..j {
                    drive -= gs[l].samples[k].conj() * y[l];
                }
                // note the positive damping term: backward-propagated amplitude
                dy[j] = -gj * drive + y[j] * (gj.norm_sqr() / 2.0);
            }
        })?;
        let mut inter = Vec::with_capacity(i);
        let mut current = ui.clone();
        for j in 0..i {
            let g_samples: Vec<C64> = couplings[j].samples.iter().map(|z| -z).collect();
            add_scaled(&mut current, &alphas[j], &g_samples);
            inter.push(TemporalMode {
                grid,
                samples: current.clone(),
                carrier_detuning: 0.0,
                warnings: Vec::new(),
            });
        }
        let raw_norm: f64 =
            current.iter().enumerate().map(|(k, z)| grid.weight(k) * z.norm_sqr()).sum();
        renorm.push((raw_norm.sqrt() - 1.0).abs());
        let reshaped = TemporalMode::from_samples(grid, current, 0.0)?;
        couplings.push(coupling_in_with_cut(&reshaped, epsilon_cut));
        reshaped_all.push(inter);
    }

    Ok(ModeBundle {
        modes: modes.to_vec(),
        couplings,
        reshaped: reshaped_all,
        renorm_deviation: renorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(t1: f64, n: usize) -> TimeGrid {
        TimeGrid::new(0.0, t1, n).unwrap()
    }

    /// Classical release oracle: a cavity with initial amplitude 1 and
    /// vacuum input emits φ(t) = g*(t) e^{−½∫₀ᵗ|g|²}.
    fn classical_release(g: &CouplingFunction) -> Vec<C64> {
        let dt = g.grid.dt();
        let mut out = Vec::with_capacity(g.samples.len());
        let mut integral = 0.0;
        let mut prev_sq = g.samples[0].norm_sqr();
        for (k, gk) in g.samples.iter().enumerate() {
            let cur_sq = gk.norm_sqr();
            if k > 0 {
                integral += dt * 0.5 * (prev_sq + cur_sq);
            }
            prev_sq = cur_sq;
            out.push(gk.conj() * (-integral / 2.0).exp());
        }
        out
    }

    /// Classical reflection oracle: incident amplitude φ_in scatters off a
    /// cavity with coupling g; β̇ = −gφ_in − |g|²β/2, φ_out = φ_in + g*β.
    fn classical_reflection(phi_in: &[C64], g: &CouplingFunction) -> Vec<C64> {
        let out = rk4_on_grid(&g.grid, 1, |k, y, dy| {
            dy[0] = -g.samples[k] * phi_in[k] - y[0] * (g.samples[k].norm_sqr() / 2.0);
        })
        .unwrap();
        phi_in
            .iter()
            .zip(out[0].iter().zip(g.samples.iter()))
            .map(|(p, (b, gk))| p + gk.conj() * b)
            .collect()
    }

    fn l2_distance(grid: &TimeGrid, a: &[C64], b: &[C64]) -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(k, (x, y))| grid.weight(k) * (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn gaussian_norm_and_peak() {
        let g = grid(12.0, 1200);
        let m = gaussian_mode(g, 1.0, 4.0, 0.0).unwrap();
        assert_abs_diff_eq!(m.norm_sq(), 1.0, epsilon = 1e-8);
        assert!(m.warnings.is_empty());
        // peak value before renormalization correction
        let peak = m.samples.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, 1.0 / std::f64::consts::PI.powf(0.25), epsilon = 1e-4);
    }

    #[test]
    fn gaussian_rejects_bad_tau_and_warns_on_clipping() {
        let g = grid(12.0, 600);
        assert!(gaussian_mode(g, -1.0, 4.0, 0.0).is_err());
        let clipped = gaussian_mode(g, 2.0, 1.0, 0.0).unwrap();
        assert!(!clipped.warnings.is_empty());
    }

    #[test]
    fn distant_gaussians_are_orthogonal() {
        let g = grid(40.0, 4000);
        let a = gaussian_mode(g, 1.0, 10.0, 0.0).unwrap();
        let b = gaussian_mode(g, 1.0, 30.0, 0.0).unwrap();
        assert!(a.overlap(&b).unwrap().norm() < 1e-10);
    }

    #[test]
    fn coupling_in_exponential_is_constant() {
        // u = √γ e^{−γt/2} gives g_u = √γ until the mask engages.
        let gamma = 1.0;
        let g = grid(20.0, 2000);
        let u = exponential_mode(g, gamma).unwrap();
        let cp = coupling_in(&u);
        for k in 0..g.n_samples() {
            if cp.valid_mask[k] && g.time(k) < 10.0 {
                assert_abs_diff_eq!(cp.samples[k].re, gamma.sqrt(), epsilon = 2e-3);
                assert_abs_diff_eq!(cp.samples[k].im, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn coupling_in_gaussian_monotone_after_peak() {
        let g = grid(12.0, 2400);
        let u = gaussian_mode(g, 1.0, 4.0, 0.0).unwrap();
        let cp = coupling_in(&u);
        let kp = (4.0 / g.dt()) as usize;
        let mut prev = cp.samples[kp].norm();
        for k in kp + 1..g.n_samples() {
            if !cp.valid_mask[k] {
                break;
            }
            let cur = cp.samples[k].norm();
            assert!(cur + 1e-12 >= prev, "not monotone at k={k}");
            prev = cur;
        }
    }

    #[test]
    fn coupling_out_exponential_matches_closed_form() {
        let gamma = 1.0;
        let g = grid(16.0, 3200);
        let v = exponential_mode(g, gamma).unwrap();
        let cp = coupling_out(&v);
        for k in (0..g.n_samples()).step_by(37) {
            if !cp.valid_mask[k] {
                continue;
            }
            let t = g.time(k);
            let want = -gamma.sqrt() * (-gamma * t / 2.0).exp() / (1.0 - (-gamma * t).exp()).sqrt();
            // quadrature-limited agreement with the analytic antiderivative
            assert_abs_diff_eq!(cp.samples[k].re, want, epsilon = 5e-3 * want.abs().max(1.0));
        }
    }

    #[test]
    fn release_reproduces_envelope() {
        // coupling_in followed by the classical release oracle returns u(t),
        // up to the tail clamped by the epsilon cut (norm² < epsilon_cut).
        let g = grid(12.0, 2400);
        for mode in [
            gaussian_mode(g, 1.0, 4.0, 0.0).unwrap(),
            gaussian_mode(g, 0.7, 5.0, 2.0).unwrap().with_carrier_applied(),
            exponential_mode(g, 1.3).unwrap(),
        ] {
            let cp = coupling_in(&mode);
            let released = classical_release(&cp);
            let target = mode.carrier_samples();
            let mut err_valid = 0.0;
            let mut tail = 0.0;
            for k in 0..g.n_samples() {
                if cp.valid_mask[k] {
                    err_valid += g.weight(k) * (released[k] - target[k]).norm_sqr();
                } else {
                    tail += g.weight(k) * target[k].norm_sqr();
                }
            }
            assert!(err_valid.sqrt() < 5e-4, "valid-region L2 error {}", err_valid.sqrt());
            assert!(tail < 1.5 * cp.epsilon_cut, "clamped tail norm² {tail}");
            assert!((err_valid + tail).sqrt() < 1.1e-3);
        }
    }

    #[test]
    fn multimode_single_reduces_to_plain_couplings() {
        let g = grid(12.0, 1200);
        let u = gaussian_mode(g, 1.0, 4.0, 0.0).unwrap();
        let bi = multimode_input_couplings(std::slice::from_ref(&u)).unwrap();
        let plain = coupling_in(&u);
        assert_eq!(bi.couplings[0].samples, plain.samples);
        let bo = multimode_output_couplings(std::slice::from_ref(&u)).unwrap();
        let plain = coupling_out(&u);
        assert_eq!(bo.couplings[0].samples, plain.samples);
    }

    #[test]
    fn multimode_rejects_overlapping_modes() {
        let g = grid(12.0, 1200);
        let a = gaussian_mode(g, 1.0, 5.0, 0.0).unwrap();
        let b = gaussian_mode(g, 1.0, 5.5, 0.0).unwrap();
        assert!(multimode_input_couplings(&[a, b]).is_err());
    }

    #[test]
    fn multimode_input_delivers_second_mode() {
        // Release |1⟩ from cavity 2 (vacuum in cavity 1): the emitted,
        // reshaped pulse must arrive at the scatterer as u₂ after reflecting
        // off cavity 1. Forward classical propagation is the oracle.
        let g = grid(28.0, 5600);
        let u1 = gaussian_mode(g, 1.0, 8.0, 0.0).unwrap();
        let u2 = gaussian_mode(g, 1.0, 17.0, 0.0).unwrap();
        let bundle = multimode_input_couplings(&[u1, u2.clone()]).unwrap();

        // cavity 2 emits its reshaped envelope
        let emitted = classical_release(&bundle.couplings[1]);
        // ... which reflects off cavity 1
        let delivered = classical_reflection(&emitted, &bundle.couplings[0]);
        let target = u2.carrier_samples();
        let fidelity: C64 = delivered
            .iter()
            .zip(target.iter())
            .enumerate()
            .map(|(k, (a, b))| g.weight(k) * b.conj() * a)
            .sum();
        assert!(fidelity.norm_sqr() > 0.999, "fidelity² = {}", fidelity.norm_sqr());
    }

    #[test]
    fn multimode_input_energy_conserved() {
        let g = grid(28.0, 5600);
        let u1 = gaussian_mode(g, 1.0, 8.0, 0.0).unwrap();
        let u2 = gaussian_mode(g, 1.0, 17.0, 0.0).unwrap();
        let bundle = multimode_input_couplings(&[u1, u2]).unwrap();
        // emitted envelope of cavity 2 carries unit norm: reflections are unitary
        let emitted = bundle.reshaped[1].last().unwrap();
        let norm: f64 = emitted
            .samples
            .iter()
            .enumerate()
            .map(|(k, z)| g.weight(k) * z.norm_sqr())
            .sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6 + bundle.renorm_deviation[1] * 2.0 + 1e-4);
    }

    #[test]
    fn multimode_output_gram_preserved() {
        // The reshaped envelopes that each cavity actually absorbs stay
        // orthonormal: reflections are unitary.
        let g = grid(44.0, 8800);
        let v1 = gaussian_mode(g, 1.0, 9.0, 0.0).unwrap();
        let v2 = gaussian_mode(g, 1.0, 18.0, 0.0).unwrap();
        let v3 = gaussian_mode(g, 1.0, 27.0, 0.0).unwrap();
        let bundle = multimode_output_couplings(&[v1.clone(), v2, v3]).unwrap();

        let mut arriving: Vec<TemporalMode> = vec![v1];
        for i in 1..3 {
            arriving.push(bundle.reshaped[i].last().unwrap().clone());
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = arriving[i].overlap(&arriving[j]).unwrap();
                assert!(
                    (got.norm() - want).abs() < 1e-3,
                    "gram({i},{j}) = {got} (renorm dev {:?})",
                    bundle.renorm_deviation
                );
            }
        }
    }

    #[test]
    fn resample_preserves_shape() {
        let g = grid(12.0, 300);
        let fine = grid(12.0, 2400);
        let m = gaussian_mode(g, 1.0, 5.0, 0.0).unwrap();
        let r = m.resample(fine).unwrap();
        let want = gaussian_mode(fine, 1.0, 5.0, 0.0).unwrap();
        let err = l2_distance(&fine, &r.samples, &want.samples);
        assert!(err < 1e-5, "resample error {err}");
    }
}
