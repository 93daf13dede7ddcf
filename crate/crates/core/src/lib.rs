//! Stochastic Schrödinger equation (SSE) and quantum master equation (QME)
//! dynamics for Anderson-Holstein impurities coupled to a wide fermionic band.
//!
//! The crate is organised bottom-up:
//!
//! * [`bath`]: band correlation functions `c±(τ)` and noise covariance kernels
//! * [`noise`]: Karhunen-Loève sampling of the complex noise `W±(t)`
//! * [`grid`]: Fourier grid, potentials, couplings and initial states
//! * [`sse`]: Markovian and memory-kernel trajectory steppers
//! * [`qme`]: block density matrix evolution and dissipator coefficients
//! * [`observables`]: transition rate, mean position, histograms
//! * [`config`] and [`ensemble`]: experiment description, presets and
//!   deterministic parallel ensembles

pub mod bath;
pub mod config;
pub mod grid;
pub mod noise;
pub mod observables;
pub mod qme;
pub mod sse;
pub mod ensemble;
pub mod error;

pub use error::{Error, Result};
