//! Exemplar-free class-incremental learning with repetition.
//!
//! The crate provides an ensemble method built from frozen, self-reliant
//! feature extractors whose concatenated embeddings feed a unified linear
//! head. Missing classes are simulated by projecting real features onto
//! stored class prototypes (mean and standard deviation per extractor).
//! Around it sit the comparison baselines, deterministic stream generators
//! with and without class repetition, and the evaluation harness.

pub mod baselines;
pub mod classes;
pub mod data;
pub mod extractor;
pub mod harness;
pub mod head;
pub mod horde;
pub mod nn;
pub mod prototypes;
pub mod rng;

mod error;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
