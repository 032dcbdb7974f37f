//! Alignment of wedge-stroke prototype skeletons to scanned sign images.
//!
//! The pipeline runs in three stages: dense descriptor similarity and
//! best-buddy matching, a RANSAC affine fit over several runs, and a
//! per-stroke projective refinement driven by similarity and saliency.

/// Crate version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod correspondence;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod global_align;
pub mod pipeline;
pub mod refine;
pub mod saliency;
pub mod synth;

pub use correspondence::{best_buddies, Correspondence};
pub use eval::{evaluate_corpus, Annotation, MetricReport};
pub use features::{FeatureMap, SimilarityVolume};
pub use geometry::{AffineTransform, Point, Skeleton, Stroke, StrokeTransform};
pub use global_align::{global_align, RansacConfig};
pub use pipeline::{align_sign, AlignmentResult, PipelineConfig};
pub use refine::{refine, RefineConfig};
pub use saliency::{compute_saliency, SaliencyMap};
