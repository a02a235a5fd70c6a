//! The hierarchical segmentation network: a U-Net whose decoder interleaves
//! a coarse-to-fine hierarchy of spatial Gaussian latent grids, plus a
//! separate posterior network used during training.
//!
//! Latent grids are ordered global to local: scale 0 is a single position at
//! the coarsest resolution, and each later scale doubles the grid extent.
//! Sampling is ancestral — each scale's distribution is predicted from
//! decoder features that already contain all coarser-scale samples.

pub mod config;
pub mod net;
pub mod params;

pub use config::ModelConfig;
pub use net::{
    argmax_labels, decode_with_latents, decode_with_prior, posterior_forward, predict_labels,
    reconstruct, reconstruct_labels, unet_encode, ForwardOutput, LatentDirective, LatentPlan,
    PosteriorMode, ScaleDistribution,
};
pub use params::{architecture, build_parameters, BoundParams, ConvSpec, ParameterStore};

use crate::backend::BackendError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {message}")]
    InvalidConfig { message: String },
    #[error("input extent {h}x{w} is not divisible by 2^{halvings}")]
    IndivisibleInput { h: usize, w: usize, halvings: usize },
    #[error("input has {got} channels, model expects {want}")]
    InputChannels { want: usize, got: usize },
    #[error("one-hot target has {got} channels, model has {want} classes")]
    TargetChannels { want: usize, got: usize },
    #[error("bad input: {message}")]
    BadInput { message: String },
    #[error("latent plan covers {got} scales, model has {want} enabled latent scales")]
    PlanLength { want: usize, got: usize },
    #[error("latent for scale {scale} has shape {got:?}, expected {want:?}")]
    InjectShape {
        scale: usize,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter {name:?}")]
    MissingParameter { name: String },
    #[error("duplicate parameter {name:?}")]
    DuplicateParameter { name: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}
