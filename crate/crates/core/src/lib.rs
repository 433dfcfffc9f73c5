//! Top-K mixture-of-experts networks with exact per-sample gradients,
//! empirical-NTK spectral diagnostics, and the SPHERE isotropy regularizer
//! for continual training.

pub mod config;
pub mod diag;
pub mod entk;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod moe;
pub mod optim;
pub mod ppo;
pub mod runner;
pub mod spectral;
pub mod sphere;
pub mod verify;

pub use error::{Error, Result};
