//! Shadow-token obfuscation of training text against gradient inversion.
//!
//! The pipeline has two stages. [`shadow_search`] builds, for every token of a
//! vocabulary, a list of embedding-proximate tokens that fail three similarity
//! tests (neighbor overlap, mutual neighborhood, shared lemma). [`shadow_select`]
//! then picks one shadow per position with a beam search that keeps the hidden
//! states of a reference model close to those of the original sentence.
//!
//! Everything needed to check the defense end to end lives here too: a small
//! transformer classifier with exact gradients ([`model`]), a FedSGD simulator
//! with noise and pruning baselines ([`fedsim`]), token-recovery attacks
//! ([`attacks`]), text metrics ([`metrics`]), deviation analysis ([`theory`]) and
//! a seeded corpus generator ([`synth`]). [`experiments`] wires them into the
//! reproducible reports used by the CLI and the acceptance suite.

pub mod attacks;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod fedsim;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod shadow_search;
pub mod shadow_select;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
