//! Samples, graymap I/O, synthetic phantoms and dataset manifests.

mod dataset;
pub mod pgm;
pub mod phantom;

pub use dataset::{
    load_dataset, resize_sample, split_odd_even, synth_dataset, trailing_index, write_dataset, DatasetManifest,
    ManifestEntry, Split,
};
pub use pgm::{read_pgm, write_pgm, Graymap};
pub use phantom::synth_phantom;

use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `(1,1,H,W)`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    /// Length per pixel, when known.
    pub spacing: Option<f64>,
}

impl SegmentationSample {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }
}
