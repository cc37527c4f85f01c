//! Selective-scan UNet for enhancing low-coverage Hi-C contact maps.
//!
//! The crate is organized bottom-up:
//!
//! - [`ssm`]: diagonal state space models and the input-selective scan
//! - [`autodiff`]: reverse-mode tape used for training and saliency
//! - [`nn`]: named parameter storage and convolution/normalization layers
//! - [`vision`]: cross-scan/merge, 2-D selective scan, LEFN and the
//!   holistic scan block
//! - [`network`]: the UNet autoencoder, FLOP accounting, receptive fields
//!   and checkpoints
//! - [`data`]: contact maps, balancing, read downsampling, patching and a
//!   synthetic contact map generator
//! - [`training`]: L1 objective, Adam, the training loop and gradient checks
//! - [`metrics`]: SSIM, PSNR, PCC, SRCC and the loop weighted score

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;
