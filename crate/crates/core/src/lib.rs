//! Concept-driven rule learning over motion features.
//!
//! The crate trains a small neurosymbolic classifier end to end on synthetic
//! skeleton-style worlds with planted rules, then reads the learned rules
//! back out as logic expressions:
//!
//! * [`concept_bank`]: motion-concept vocabularies, action-concept
//!   association matrices, and the clustering used to build them.
//! * [`synthetic`]: planted-rule worlds that emit feature tensors with known
//!   ground-truth concepts, so recovery is checkable.
//! * [`decoder`]: spatio-temporal concept decoder (decoupled pooling,
//!   cross-attention, grouped projections).
//! * [`logic`]: differentiable conjunction/disjunction switchboards with a
//!   discrete forward pass and grafted gradients.
//! * [`rules`]: linear rule head, plus extraction of the learned switchboards
//!   into readable logic expressions.
//! * [`trainer`]: losses, AdamW, the staggered training schedule, and the
//!   full training loop.
//! * [`analysis`]: test-time concept intervention and concept statistics.
//! * [`gradcheck`]: finite-difference verification of every differentiable
//!   component.
//!
//! The `reason` binary exposes the same functionality as subcommands.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod concept_bank;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod logic;
pub mod model;
pub mod rng;
pub mod rules;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

/// Version stamped into every JSON artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
