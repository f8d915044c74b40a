//! Epigraph-form continuous-time constrained control.
//!
//! The crate bundles variable-interval environments, the auxiliary-budget
//! (epigraph) machinery, a tabular value-iteration oracle, a small dense
//! network engine, the critic/actor objectives and their training loop, and
//! an analytic LQR + barrier-function reference controller for the coupled
//! oscillator.

pub mod env;
pub mod epigraph;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod lqr;
pub mod nn;
pub mod policy;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};

/// Random stream used throughout; seeded explicitly everywhere.
pub type EpiRng = rand_chacha::ChaCha8Rng;
