//! Toy-scale laboratory for intent-modulated sequence generation.
//!
//! The crate is organized bottom-up:
//!
//! - [`grad`]: reverse-mode differentiation and the finite-difference oracle
//! - [`vib`]: posterior encoder, OU-prior KL and the β schedule
//! - [`fusion`]: AdaLN intent modulation and the ablation fusion strategies
//! - [`toy`]: synthetic expressive-sequence task, toy model, Stage 1/2 training
//! - [`reward`]: rubric scoring, WER gate, rollout collection and replay buffer
//! - [`uapo`]: utility-anchored preference optimization
//! - [`harness`]: configuration, pipeline orchestration, evaluation and reports

pub mod calls;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod harness;
pub mod reward;
pub mod rng;
pub mod toy;
pub mod uapo;
pub mod vib;

pub use error::{Error, Result};
