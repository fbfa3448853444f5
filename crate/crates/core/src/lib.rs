//! Volumetric segmentation through point clouds.
//!
//! The pipeline has three stages:
//!
//! 1. [`saliency`]: a small 3D CNN predicts a per-voxel foreground probability.
//! 2. [`sampling`]: every voxel whose probability clears a threshold becomes a
//!    foreground point; the remaining budget is filled with random background
//!    voxels.
//! 3. [`pointseg`]: a point encoder/decoder network labels the cloud. Labels of
//!    foreground points are written straight back into the voxel grid.
//!
//! [`metrics`] scores the result (Dice, HD95) and drives the threshold sweep,
//! ablation and benchmark experiments. Everything differentiable runs on the
//! small autodiff engine in [`tensor`].

pub mod error;
mod io;
pub mod knn;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pointseg;
pub mod rng;
pub mod saliency;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/point-network.md")]
    mod point_network {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
