//! Online reflective test-time adaptation for image segmentation.
//!
//! A segmentor turns an image into class probabilities and a differentiable
//! intensity heatmap; a synthesizer renders a proxy image from that heatmap
//! and an edge sketch of the input; structural similarity between input and
//! proxy (windowed NCC plus Parzen mutual information, weighted by the
//! heatmap) is minimised per test image to repair the segmentation.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod reflect;
pub mod segmentor;
pub mod similarity;
pub mod sketch;
pub mod synthesizer;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use mask::LabelMask;
pub use reflect::{adapt_dataset, adapt_image, AdaptConfig, AdaptReport};
pub use segmentor::{LabelIntensities, ProbMap, Segmentor, SegmentorConfig};
pub use similarity::{LossKind, SimilarityConfig};
pub use synthesizer::{SynthConfig, Synthesizer};
