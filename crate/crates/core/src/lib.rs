//! Self-supervised depth objectives for colonoscopy-like video.
//!
//! The crate evaluates the photometric, feature, depth-consistency,
//! normal-consistency, orthogonality and smoothness objectives over frame
//! pairs, differentiates them exactly, and minimises them directly over
//! depth and normal fields. A procedural colon renderer supplies ground
//! truth for every check.

pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod refine;
pub mod ssim;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{
    backproject, bilinear_sample, normals_from_depth, project_pixel, warp_image, DepthField,
    Image, Intrinsics, Mask, NormalField, PoseSE3, ScalarField,
};
pub use objectives::{Frame, FramePair, LossBreakdown, LossWeights};
