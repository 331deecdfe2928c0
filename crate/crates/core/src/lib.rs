//! Atrous-convolution lung segmentation: a small reverse-mode autograd
//! engine, the segmentation network, network-wise cascaded training,
//! boundary-aware metrics and the data tooling around them.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod segnet;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
