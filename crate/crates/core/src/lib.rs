//! Desk-scale simulation and analysis of dispersive quantum non-demolition
//! probing of a nanofiber-trapped atomic ensemble.
//!
//! The crate is organised along the measurement chain:
//!
//! * [`trap`]: radial trap potential, thermal trajectories and the
//!   position-dependent probe coupling they induce.
//! * [`probe`]: synthetic single-shot phase traces (loading, microwave
//!   pulses, Zeeman-pumping response, shot noise).
//! * [`estimation`]: per-shot least-squares population estimates.
//! * [`stats`]: projection-noise scaling, covariance decomposition and
//!   correlation curves.
//! * [`filter`]: matched filtering, conditional variances and the Wineland
//!   squeezing criterion.
//! * [`qnd`]: the two-segment QND protocol built on the matched filter.
//! * [`pipeline`]: configuration, persistence and stage orchestration used by
//!   the `qndsim` binary.

pub mod error;
pub mod estimation;
pub mod filter;
pub mod lsq;
pub mod physics;
pub mod pipeline;
pub mod probe;
pub mod qnd;
pub mod rng;
pub mod stats;
pub mod trap;

pub use error::{Error, Result};
