//! Attention-guided translation of low-contrast MR slices into
//! high-tissue-contrast (HTC) images, and the cascaded binary segmentation
//! that consumes them.

pub mod attention_cyclegan;
pub mod checkpoint;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod grid;
pub mod htc_target;
pub mod metrics;
pub mod montage;
pub mod pipeline;
pub mod segmentation;
pub mod tensor_io;

pub use error::{Error, Result};
pub use grid::{Grid, Image, LabelMap, Mask};
