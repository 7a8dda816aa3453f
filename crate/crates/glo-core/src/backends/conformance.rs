//! Shared conformance checks that any backend implementation must pass:
//! output shapes, probability normalization, and determinism on repeated
//! input. Mock and external backends run through the same suite.

use super::{BackendError, ClassifierBackend, SegmenterBackend};
use crate::wsi::Tile;

/// Assert the classifier contract on the given patches: five properly
/// normalized probabilities, identical on repeated calls.
pub fn check_classifier(
    backend: &dyn ClassifierBackend,
    patches: &[Tile],
) -> Result<(), BackendError> {
    for patch in patches {
        let first = backend.classify(patch)?;
        super::check_probs(&first)?;
        let second = backend.classify(patch)?;
        if first != second {
            return Err(BackendError::Shape(
                "classifier output differs on repeated identical input".into(),
            ));
        }
    }
    Ok(())
}

/// Assert the segmenter contract: mask dimensions equal the input patch,
/// identical on repeated calls.
pub fn check_segmenter(
    backend: &dyn SegmenterBackend,
    patches: &[Tile],
) -> Result<(), BackendError> {
    for patch in patches {
        let first = backend.segment(patch)?;
        if first.width() != patch.width || first.height() != patch.height {
            return Err(BackendError::Shape(format!(
                "mask is {}x{} for a {}x{} patch",
                first.width(),
                first.height(),
                patch.width,
                patch.height
            )));
        }
        if backend.segment(patch)? != first {
            return Err(BackendError::Shape(
                "segmenter output differs on repeated identical input".into(),
            ));
        }
    }
    Ok(())
}
