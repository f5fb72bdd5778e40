//! Binary blood-cell classification (parasitized vs. uninfected) with a
//! from-scratch CNN, reverse-mode autodiff, and three explanation methods:
//! gradient saliency, LIME and Kernel SHAP.
//!
//! Everything runs on the CPU in 64-bit floats. Module map:
//!
//! - [`tensor`] / [`autodiff`]: dense tensors and the gradient tape
//! - [`layers`]: convolution, batch norm, pooling, dense, dropout, softmax
//! - [`model`]: the custom CNN graph, parameter counting, forward passes
//! - [`data`]: dataset indexing, stratified splits, preprocessing, synthetic cells
//! - [`train`]: loss, Adamax, plateau scheduling, early stopping, epoch loop
//! - [`metrics`]: confusion matrix and classification report
//! - [`xai`]: saliency, segmentation, LIME, Kernel SHAP, overlays
//! - [`weights`]: the `MCNN1` checkpoint format

pub mod autodiff;
pub mod data;
mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod xai;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ArchitectureConfig, Head, ModelGraph};
pub use tensor::Tensor;

/// Train/inference switch shared by batch norm, dropout and the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
