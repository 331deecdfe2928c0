//! The deep-and-thin atrous segmentation network: three stem convolutions,
//! six residual blocks (two of them strided, the final two dilated with
//! rate 3), a 1×1 two-class head, and bilinear upsampling back to the
//! input resolution.

pub mod checkpoint;
pub mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{BlockConvs, BlockSpec, ModelConfig};
pub use model::{layout, CountPolicy, ForwardOutput, Model, ParamKind, ParamSpec, ParameterCount, Phase, Registered};

/// Weight count reported for the reference architecture.
pub const REFERENCE_WEIGHT_COUNT: usize = 120_672;
