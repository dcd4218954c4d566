//! Adversarial attacks against a small convolutional segmentation network and
//! their detection from image-level uncertainty features.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`] provide the numeric substrate (dense `f32`
//!   tensors, a reverse-mode tape over convolution, ReLU and softmax
//!   cross-entropy).
//! * [`refmodel`] is the segmentation network `f(x; w)` with training and the
//!   input-gradient entry point used by every attack.
//! * [`synthdata`] generates deterministic synthetic scenes.
//! * [`attacks`] implements FGSM, I-FGSM (plain and least-likely targeted),
//!   universal stationary-mask noise, dynamic nearest-neighbour class hiding
//!   and translation-EOT patches.
//! * [`uncertainty`] turns softmax maps into dispersion features.
//! * [`detectors`] fits the entropy, LASSO, one-class SVM and ellipse
//!   detectors, and [`evalmetrics`] scores them.
//! * [`container`] and [`heatmap`] are the on-disk formats.

pub mod attacks;
pub mod autodiff;
pub mod container;
pub mod detectors;
pub mod error;
pub mod evalmetrics;
pub mod heatmap;
pub mod refmodel;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{LabelMap, ProbabilityMap, Tensor};
