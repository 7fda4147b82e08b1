//! Volumetric dense-convolutional glaucoma classifier toolkit.
//!
//! The crate covers the whole desk-scale workflow on synthetic OCT-like
//! volumes: hand-written 3D layers with analytic backward passes, the dense
//! block network, AdamW training with best-on-validation selection, data
//! augmentation, Grad-CAM saliency, evaluation statistics (ROC/AUC, F2
//! threshold, DeLong, kappa) and the region-discovery pipeline that tests
//! whether a cropped region alone carries diagnostic signal.

pub mod augment;
pub mod diagfind;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod saliency;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{Network, NetworkConfig, Prediction};
pub use tensor::{Scalar, Shape, Tensor};
