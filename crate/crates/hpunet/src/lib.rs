//! Hierarchical probabilistic U-Net for segmentation with an ambiguity-aware
//! latent hierarchy, trained on synthetic tasks with known distributions.
//!
//! The crate is organized around a small differentiable array engine
//! ([`backend`]), the model itself ([`model`]), its constrained variational
//! objectives ([`objectives`]), a deterministic trainer ([`trainer`]),
//! distribution-agreement metrics ([`metrics`]), sample clustering into
//! instance maps ([`clustering`]), synthetic dataset generators
//! ([`synthdata`]) and bit-exact persistence plus the CLI ([`io`], [`cli`]).

pub mod backend;
pub mod cli;
pub mod clustering;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synthdata;
pub mod trainer;
