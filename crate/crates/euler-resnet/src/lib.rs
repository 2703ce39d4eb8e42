//! Residual networks seen as explicit Euler integrators, with the step factor
//! `h` as a first-class dial.
//!
//! A residual block computes `y = x + h * F(x)`; chaining blocks is explicit
//! Euler integration of the system whose right-hand side is the block branch.
//! That one observation turns numerical-integration intuition into concrete,
//! checkable statements about deep networks: small steps train stably where
//! unit steps oscillate or blow up, gradient norms obey a closed-form bound
//! built from per-block Lipschitz certificates, and input noise is amplified
//! by at most `h` times the accumulated branch deviation.
//!
//! The crate provides the pieces to verify all of that at desk scale, with no
//! runtime dependencies and bit-reproducible runs:
//!
//! - [`tensor`]: row-major `f64` matrices, a documented deterministic RNG,
//!   Frobenius/spectral norms.
//! - [`euler`]: explicit Euler on classical IVPs, the stability benchmark.
//! - [`layers`]: affine, batch-norm, residual blocks, full networks, and
//!   their exact backward passes.
//! - [`params`]: flat binary (de)serialization of network parameters.
//! - [`data`]: the two-moon synthetic task, noise injection, splits, CSV.
//! - [`training`]: SGD with momentum, softmax cross-entropy, run records.
//! - [`diagnostics`]: gradient-norm profiles, Lipschitz certificates, noise
//!   amplification profiles, the bound checks, and a finite-difference
//!   gradient oracle.

pub mod csvfmt;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod euler;
pub mod layers;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
