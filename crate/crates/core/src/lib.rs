//! Dense image alignment over convolutional feature pyramids.
//!
//! The crate swaps the Gaussian image pyramid of coarse-to-fine Lucas-Kanade
//! for the stack of activations produced by a VGG-style conv network, and
//! ships the harnesses used to measure what that buys: exhaustive cost
//! surfaces, convergence-basin sweeps, feature-channel selection and a
//! rotation-only spherical mosaicer.
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`] | image / feature-volume containers, sampling, gradients, FTNS files |
//! | [`warp`] | SO(3) exponential, rotation and translation warps, intrinsics |
//! | [`featext`] | conv+ReLU+pool forward pass, CWTS weights, RGB and CONV pyramids |
//! | [`lk`] | inverse-compositional solver, coarse-to-fine driver, cost surfaces |
//! | [`featsel`] | texturedness / stability scores and channel masks |
//! | [`basin`] | convergence-basin sweeps |
//! | [`mosaic`] | keyframe tracker and equirectangular panorama |
//! | [`synth`] | procedural scenes and photometric perturbations for experiments |
//!
//! Data-parallel inner loops run on rayon when the default `parallel` feature
//! is enabled and fall back to plain iterators otherwise. Every reduction is
//! combined in a fixed order, so results are bit-identical for any thread
//! count and for both builds.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod basin;
mod error;
pub mod featext;
pub mod featsel;
pub mod image_io;
pub mod lk;
pub mod mosaic;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{FeaturePyramid, FeatureVolume, Image, SampleResult};
pub use warp::{Intrinsics, RotationWarp, TranslationWarp, Warp};
