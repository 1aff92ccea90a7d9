//! Desk-scale laboratory for embedding-space adversarial training of small
//! text classifiers.
//!
//! The crate is organized around a minimal reverse-mode autodiff engine
//! ([`tensor`]), small embedding models ([`models`]), the two adversarial
//! training variants ([`advtrain`]), closed-form one-dimensional sanity
//! checks ([`oracle1d`]), robustness evaluation ([`attacks`]), and neuron
//! association analysis ([`lca`]).
//!
//! Everything here is `no_std`-compatible (with `alloc`); IO, file formats,
//! and the command-line harness live in the companion `advlab-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod advtrain;
pub mod attacks;
pub mod error;
mod fmath;
pub mod lca;
pub mod models;
pub mod oracle1d;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
