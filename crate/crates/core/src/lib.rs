//! Pixel-accurate anomaly segmentation by penalized regression.
//!
//! Given an image and a feature-based anomaly-scoring backend, the library
//! decomposes the image into a non-defective part plus a sparse anomalous
//! part by minimizing a feature-space anomaly loss regularized with a
//! nonconvex sparsity penalty, a mixture-of-Gaussians pixel prior, and total
//! variation, solved with bilateral gradient sharing and adaptive Adan
//! steps. The anomaly mask is read directly off the recovered anomalous
//! part at full image resolution.

pub mod autodiff;
pub mod backends;
pub mod datasynth;
pub mod error;
pub mod evalkit;
pub mod extractor;
pub mod imageio;
pub mod inpaint;
pub mod linalg;
pub mod mask;
pub mod modelio;
pub mod optimizer;
pub mod pipeline;
pub mod regularizers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
