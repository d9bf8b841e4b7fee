//! Intensity standardization versus affine registration: scenes, synthetic
//! phantoms, bias correction, landmark standardization, non-standardness
//! injection, SSD affine registration and win/loss evaluation.

// `!(x > 0.0)` is the intended way to reject NaN along with non-positives;
// small fixed-size matrix code reads better with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod correct;
pub mod error;
pub mod evaluate;
pub mod interp;
pub mod linalg;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod scalar;
pub mod scene;
pub mod standardize;
pub mod transform;

pub use error::{Error, Result};
pub use scalar::Real;
pub use scene::{BoundingBox, Histogram, Scene};

pub type Affine = transform::AffineParams<f64>;
pub type Affine32 = transform::AffineParams<f32>;
pub type Matrix4 = linalg::Mat4<f64>;
pub type Matrix4f32 = linalg::Mat4<f32>;
pub type BiasField = correct::BiasModel<f64>;
