//! Newline-delimited JSON wire protocol for external inference backends.
//!
//! Requests flow to the child's stdin, responses come back on stdout, one
//! JSON object per line, matched by `id`. Responses may arrive out of
//! order. Pixel payloads are base64-encoded raw 8-bit buffers.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::geometry::{Circle, CircleDetection};
use crate::mask::Mask;
use crate::wsi::Tile;

pub const ENCODING_RGB: &str = "raw8-rgb-base64";
pub const ENCODING_GRAY: &str = "raw8-gray-base64";

/// Operation selector carried in every request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireOp {
    Detect,
    Classify,
    Segment,
}

/// One request frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub op: WireOp,
    pub width: u32,
    pub height: u32,
    pub encoding: String,
    /// Base64 of row-major RGB8 pixels.
    pub pixels: String,
}

impl WireRequest {
    pub fn from_tile(id: u64, op: WireOp, tile: &Tile) -> Self {
        WireRequest {
            id,
            op,
            width: tile.width,
            height: tile.height,
            encoding: ENCODING_RGB.to_string(),
            pixels: BASE64.encode(&tile.pixels),
        }
    }

    pub fn decode_pixels(&self) -> Result<Vec<u8>, BackendError> {
        if self.encoding != ENCODING_RGB {
            return Err(BackendError::Protocol(format!(
                "unsupported request encoding `{}`",
                self.encoding
            )));
        }
        let pixels = BASE64
            .decode(&self.pixels)
            .map_err(|e| BackendError::Protocol(format!("pixels field not base64: {e}")))?;
        let expected = self.width as usize * self.height as usize * 3;
        if pixels.len() != expected {
            return Err(BackendError::Protocol(format!(
                "pixel payload is {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(pixels)
    }
}

/// One detection in a detector response, in patch coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireDetection {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
}

/// One response frame; exactly one payload field must be present and it
/// must match the op of the request with the same id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<WireDetection>>,
}

impl WireResponse {
    pub fn parse_line(line: &str) -> Result<Self, BackendError> {
        serde_json::from_str(line)
            .map_err(|e| BackendError::Protocol(format!("malformed response frame: {e}")))
    }

    pub fn probs(self) -> Result<Vec<f64>, BackendError> {
        let probs = self
            .probs
            .ok_or_else(|| BackendError::Protocol("response missing `probs` field".into()))?;
        super::check_probs(&probs).map_err(|e| match e {
            BackendError::Shape(s) => BackendError::Protocol(format!("probs field invalid: {s}")),
            other => other,
        })?;
        Ok(probs)
    }

    pub fn mask(self, width: u32, height: u32) -> Result<Mask, BackendError> {
        let data = self
            .mask
            .ok_or_else(|| BackendError::Protocol("response missing `mask` field".into()))?;
        let bytes = BASE64
            .decode(&data)
            .map_err(|e| BackendError::Protocol(format!("mask field not base64: {e}")))?;
        Mask::from_bytes(width, height, &bytes).ok_or_else(|| {
            BackendError::Protocol(format!(
                "mask field has {} bytes, expected {}x{} = {}",
                bytes.len(),
                width,
                height,
                width as usize * height as usize
            ))
        })
    }

    pub fn detections(self) -> Result<Vec<CircleDetection>, BackendError> {
        let dets = self
            .detections
            .ok_or_else(|| BackendError::Protocol("response missing `detections` field".into()))?;
        dets.into_iter()
            .map(|d| {
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(BackendError::Protocol(format!(
                        "detection score {} outside [0, 1]",
                        d.score
                    )));
                }
                let circle = Circle::new(d.cx, d.cy, d.r)
                    .map_err(|e| BackendError::Protocol(format!("detection field invalid: {e}")))?;
                Ok(CircleDetection::new(circle, d.score))
            })
            .collect()
    }
}

/// Encode a mask response payload (0/255 gray plane).
pub fn encode_mask(mask: &Mask) -> String {
    BASE64.encode(mask.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let tile = Tile {
            level: 0,
            origin: (0, 0),
            downsample: 1.0,
            width: 2,
            height: 2,
            pixels: vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
        };
        let req = WireRequest::from_tile(7, WireOp::Classify, &tile);
        assert_eq!(req.encoding, ENCODING_RGB);
        assert_eq!(req.decode_pixels().unwrap(), tile.pixels);
        let line = serde_json::to_string(&req).unwrap();
        assert!(line.contains("\"op\":\"classify\""));
    }

    #[test]
    fn response_field_validation() {
        let resp = WireResponse::parse_line(r#"{"id":1,"probs":[0.2,0.2,0.2,0.2,0.2]}"#).unwrap();
        assert_eq!(resp.id, 1);
        resp.probs().unwrap();

        let short = WireResponse::parse_line(r#"{"id":1,"probs":[0.5,0.5]}"#).unwrap();
        assert!(matches!(short.probs(), Err(BackendError::Protocol(_))));

        let missing = WireResponse::parse_line(r#"{"id":1}"#).unwrap();
        assert!(matches!(missing.probs(), Err(BackendError::Protocol(_))));

        assert!(WireResponse::parse_line("not json").is_err());
    }

    #[test]
    fn mask_payload_round_trip() {
        let mask = Mask::from_fn(4, 3, |x, y| (x + y) % 2 == 0);
        let payload = encode_mask(&mask);
        let resp = WireResponse { id: 1, probs: None, mask: Some(payload), detections: None };
        assert_eq!(resp.mask(4, 3).unwrap(), mask);
        let resp = WireResponse { id: 1, probs: None, mask: Some(encode_mask(&mask)), detections: None };
        assert!(resp.mask(5, 3).is_err());
    }

    #[test]
    fn detections_payload_validated() {
        let ok = WireResponse::parse_line(
            r#"{"id":3,"detections":[{"cx":10.0,"cy":12.0,"r":4.0,"score":0.8}]}"#,
        )
        .unwrap();
        let dets = ok.detections().unwrap();
        assert_eq!(dets.len(), 1);
        let bad = WireResponse::parse_line(
            r#"{"id":3,"detections":[{"cx":10.0,"cy":12.0,"r":-4.0,"score":0.8}]}"#,
        )
        .unwrap();
        assert!(bad.detections().is_err());
    }
}
