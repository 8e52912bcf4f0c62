//! A desk-scale hybrid convolution/self-attention U-shaped segmentation
//! network built on a minimal reverse-mode autodiff core, with a training
//! and evaluation harness, analytic parameter/MAC accounting, and a
//! self-verification suite.

pub mod complexity;
pub mod dtype;
pub mod error;
pub mod evt1;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod nn;
pub mod ops;
pub mod runconfig;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod verify;

pub use dtype::{Dtype, Scalar};
pub use error::{Error, Result};
pub use model::{EvitUnet, EvitUnetConfig};
pub use runconfig::RunConfig;
pub use ops::Mode;
pub use tape::Tape;
pub use tensor::Tensor;
