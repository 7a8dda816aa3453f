//! Batch quantification of glomeruli on whole-slide images.
//!
//! The crate covers the non-neural part of a detect-classify-segment
//! pipeline: slide tiling, circle-detection decoding and merging,
//! false-positive filtering, patch geometry, the five-class GGS taxonomy,
//! training-objective kernels, evaluation metrics, patient-grouped
//! cross-validation splits, and ImageScope-compatible annotation output.
//! Neural inference sits behind the [`backends`] traits; deterministic
//! mock backends driven by synthetic phantom slides make the whole
//! pipeline testable without any trained model.

pub mod annotations;
pub mod backends;
pub mod detection;
pub mod geometry;
pub mod learnkit;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod splits;
pub mod taxonomy;
pub mod wsi;

pub use geometry::{Circle, CircleDetection, PatchTransform};
pub use mask::Mask;
pub use taxonomy::GlomClass;
