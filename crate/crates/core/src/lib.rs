//! Propagation-based volumetric segmentation: volumes and phantoms,
//! ROI preprocessing, the Box2Mask and PropMask networks, the slice
//! propagation engine, training, and evaluation metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod phantom;
pub mod preprocess;
pub mod rle;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Axis, Image2D, Mask2D, Mask3D, Plane, Volume};
