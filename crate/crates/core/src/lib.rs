//! Binary road segmentation toolkit.
//!
//! * [`mask_ops`]: color-keyed label binarization, dilation-based lane
//!   repair, overlays.
//! * [`datasets`]: KITTI road / comma10k / synthetic manifests, seeded
//!   70/15/15 splits, sample decoding and batching.
//! * [`models`]: VGG-16 encoder + transposed-conv decoder, and U-Net.
//! * [`training`]: BCE-with-logits, Adam, the epoch loop.
//! * [`metrics`]: confusion counts and everything derived from them.
//! * [`evaluation`]: cross-dataset evaluation, tables, curves, galleries.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod mask_ops;
pub mod metrics;
pub mod models;
pub mod training;

pub use candle_core::DType;
pub use error::{Error, Result};
