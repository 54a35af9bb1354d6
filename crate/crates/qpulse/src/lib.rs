//! Simulation of travelling pulses of quantum radiation interacting with
//! localized quantum systems.
//!
//! Incoming and outgoing wave packets are represented by virtual cavities
//! with time-dependent couplings, cascaded around the scatterer. The joint
//! density matrix evolves under a Lindblad master equation; two-time
//! correlations of the output field and their eigenmode decomposition
//! identify the occupied temporal modes.
//!
//! The crate is organized along the pipeline:
//!
//! * [`hilbert`] — truncated Fock/qubit tensor spaces, operators, states
//! * [`pulses`] — temporal modes on a time grid and virtual-cavity couplings
//! * [`cascade`] — compilation of a cascaded network into `H(t)`, `{L_k(t)}`
//! * [`evolve`] — fixed-step RK4 integration of the master equation
//! * [`correlations`] — `g1` kernels and temporal-mode decomposition
//! * [`analysis`] — Wigner functions, pump shaping, analytic references
//! * [`scenarios`] — the five built-in experiments
//! * [`cli`] — batch front-end (config parsing, result directories)

pub mod analysis;
pub mod cascade;
pub mod cli;
pub mod correlations;
pub mod evolve;
pub mod hilbert;
pub mod io;
pub(crate) mod linalg;
pub mod pulses;
pub mod scenarios;

use thiserror::Error;

/// Shorthand for the complex scalar used throughout.
pub type C64 = num_complex::Complex64;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum QpError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("factor index {index} out of range (space has {count} factors)")]
    FactorOutOfRange { index: usize, count: usize },
    #[error("truncation overflow: {0}")]
    TruncationOverflow(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid mode: {0}")]
    InvalidMode(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("numerical instability at t = {time}: {detail}")]
    Unstable { time: f64, detail: String },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience result alias.
pub type Result<T> = std::result::Result<T, QpError>;
