//! Layer implementations recorded on a [`Graph`](crate::autograd::Graph).

pub mod basic;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod residual;
pub mod resize;

pub use batchnorm::{BatchNormState, BnMode};
pub use conv::ConvSpec;
pub use loss::softmax_channels;
pub use residual::{BnVars, ConvVars, ResidualOutput, ResidualVars};
pub use resize::{bilinear_adjoint, bilinear_resize};
