//! The inference-backend boundary.
//!
//! Pipelines talk to detectors, classifiers, and segmenters exclusively
//! through these traits. Two families implement them: deterministic mocks
//! driven by phantom ground truth (for tests and pipeline verification —
//! they read the answer key, so they say nothing about model quality), and
//! external processes speaking a newline-delimited JSON wire protocol over
//! stdin/stdout, which is how real models plug in.

pub mod conformance;
mod external;
mod mock;
pub mod wire;

pub use external::{ExternalBackend, SpawnSpec};
pub use mock::{MockClassifier, MockDetector, MockSegmenter, NoisePolicy};

use thiserror::Error;

use crate::detection::HeadMaps;
use crate::geometry::CircleDetection;
use crate::mask::Mask;
use crate::wsi::Tile;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("tile is not from a supported source: {0}")]
    UnsupportedSource(String),
    #[error("backend response shape invalid: {0}")]
    Shape(String),
    #[error("wire protocol error: {0}")]
    Protocol(String),
    #[error("backend timed out waiting for response to request {id}")]
    Timeout { id: u64 },
    #[error("backend process failed: {0}")]
    Process(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Detector output: either raw head grids (decoded downstream) or already
/// decoded detections, both in tile pixel coordinates.
#[derive(Debug, Clone)]
pub enum DetectorOutput {
    Heads(HeadMaps),
    Detections(Vec<CircleDetection>),
}

/// Per-tile object detector.
pub trait DetectorBackend: Send + Sync {
    fn detect(&self, tile: &Tile) -> Result<DetectorOutput, BackendError>;
    /// Stable identity string recorded in run manifests.
    fn identity(&self) -> String;
}

/// Five-class patch classifier; probabilities follow the canonical class
/// order and sum to 1 within 1e-6.
pub trait ClassifierBackend: Send + Sync {
    fn classify(&self, patch: &Tile) -> Result<Vec<f64>, BackendError>;
    fn identity(&self) -> String;
}

/// Binary patch segmenter; the mask dimensions equal the input patch.
pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, patch: &Tile) -> Result<Mask, BackendError>;
    fn identity(&self) -> String;
}

/// Validate a classifier probability vector against the contract.
pub fn check_probs(probs: &[f64]) -> Result<(), BackendError> {
    if probs.len() != crate::taxonomy::GlomClass::COUNT {
        return Err(BackendError::Shape(format!(
            "probs has {} entries, expected {}",
            probs.len(),
            crate::taxonomy::GlomClass::COUNT
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(BackendError::Shape("probability outside [0, 1]".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(BackendError::Shape(format!("probabilities sum to {sum}")));
    }
    Ok(())
}
