//! Deformable Gabor convolution (DGConv) layers and the weakly-supervised
//! multi-instance heads built on them, on a small dense `f64` tensor.
//!
//! Gradients are derived by hand per layer; [`gradcheck::grad_check`] compares
//! them against central finite differences.

// `!(x > 0.0)` is meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod data;
pub mod dataset;
pub mod deform;
pub mod dgconv;
pub mod error;
pub mod experiments;
pub mod gabor;
pub mod gradcheck;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use archive::TensorArchive;
pub use deform::{bilinear_sample, OffsetField, OffsetPredictor};
pub use dgconv::{BackwardMode, DGConvParams, LayerShape, OrientedFeature, ParamCount};
pub use error::{Error, Result};
pub use gabor::GaborBank;
pub use model::{ModelSpec, Network};
pub use tensor::Tensor;
