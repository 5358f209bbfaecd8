//! Atomic clock ensemble time scales.
//!
//! Models an ensemble of `m` clocks with `n`-th order stochastic dynamics
//! measured only through clock differences, and implements two ways of
//! forming an ensemble time scale from those measurements: the weighted
//! JST average and a Kalman filter. Closed-form error recursions, steady-state
//! Riccati solutions and Allan-deviation analysis are included so the two
//! algorithms can be compared against theory.
//!
//! The crate is `no_std` with `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod ckf;
pub mod dd;
pub mod error;
pub mod jst;
pub mod model;
pub mod output;
pub mod simulate;
pub mod theory;

pub use error::{Error, Result};
pub use model::{ClockSpec, CovGuess, EnsembleConfig, Sampling};
