//! Curriculum-masked autoencoder pretraining on small image sets.
//!
//! A masking module and a masked autoencoder are trained in alternation:
//! the masking module proposes per-patch visibility, the autoencoder learns
//! to reconstruct hidden patches, and a signed schedule turns the masking
//! module from a helpful partner into an adversary over the course of
//! training. Everything runs on a small self-contained f64 autodiff engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod mae;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;
