//! Decode circle-detection head outputs into detections, merge per-tile
//! results to slide level, and apply the classifier-driven false-positive
//! filter plus the score-based curation rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonical_detection_order, circle_nms, Circle, CircleDetection, GeometryError};
use crate::taxonomy::GlomClass;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Raw output grids of a circle-detection network head.
///
/// The heatmap scores object centers per cell, the offset grids refine the
/// center to sub-cell precision, and the radius grid predicts the circle
/// radius in head cells. `stride` is the number of input-tile pixels per
/// head cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadMaps {
    pub width: usize,
    pub height: usize,
    pub stride: f64,
    /// Row-major center scores in [0, 1].
    pub heatmap: Vec<f64>,
    /// Row-major sub-cell x corrections.
    pub offset_dx: Vec<f64>,
    /// Row-major sub-cell y corrections.
    pub offset_dy: Vec<f64>,
    /// Row-major radius predictions in head cells, >= 0.
    pub radius: Vec<f64>,
}

impl HeadMaps {
    /// Validate grid shapes and value ranges.
    pub fn validate(&self) -> Result<(), DetectionError> {
        if self.width == 0 || self.height == 0 {
            return Err(DetectionError::Shape("empty head grid".into()));
        }
        let n = self.width * self.height;
        for (name, grid) in [
            ("heatmap", &self.heatmap),
            ("offset_dx", &self.offset_dx),
            ("offset_dy", &self.offset_dy),
            ("radius", &self.radius),
        ] {
            if grid.len() != n {
                return Err(DetectionError::Shape(format!(
                    "{name} has {} cells, expected {}x{} = {n}",
                    grid.len(),
                    self.width,
                    self.height
                )));
            }
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return Err(DetectionError::Shape(format!("stride {} must be > 0", self.stride)));
        }
        if let Some(v) = self.heatmap.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DetectionError::Shape(format!("heatmap value {v} outside [0, 1]")));
        }
        if let Some(v) = self.radius.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(DetectionError::Shape(format!("radius value {v} must be >= 0")));
        }
        Ok(())
    }

    pub fn at(&self, grid: &[f64], x: usize, y: usize) -> f64 {
        grid[y * self.width + x]
    }

    pub fn read_json(bytes: &[u8]) -> Result<Self, DetectionError> {
        let maps: HeadMaps = serde_json::from_slice(bytes)
            .map_err(|e| DetectionError::Shape(format!("head-map fixture: {e}")))?;
        maps.validate()?;
        Ok(maps)
    }

    /// A cell is a peak iff its score strictly exceeds every 3x3 neighbor,
    /// with plateau ties resolved toward the lexicographically smallest
    /// `(y, x)` so a flat plateau reports exactly one peak.
    fn is_peak(&self, x: usize, y: usize) -> bool {
        let v = self.at(&self.heatmap, x, y);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
                    continue;
                }
                let nv = self.at(&self.heatmap, nx as usize, ny as usize);
                if nv > v || (nv == v && (ny as usize, nx as usize) < (y, x)) {
                    return false;
                }
            }
        }
        true
    }
}

/// Decode head grids into detections in tile pixel coordinates.
///
/// Peaks are 3x3 strict local maxima of the heatmap; the top `k` peaks by
/// score become detections with `center = ((x + dx) * stride, (y + dy) *
/// stride)`, `radius = radius[y, x] * stride`, `score = heatmap[y, x]`.
/// Detections below `score_min` or with non-positive radius are dropped.
/// Output is score-descending.
pub fn decode_heads(
    maps: &HeadMaps,
    k: usize,
    score_min: f64,
) -> Result<Vec<CircleDetection>, DetectionError> {
    if k == 0 {
        return Err(DetectionError::Config("k must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&score_min) {
        return Err(DetectionError::Config(format!("score_min {score_min} outside [0, 1]")));
    }
    maps.validate()?;

    let mut peaks: Vec<(usize, usize)> = Vec::new();
    for y in 0..maps.height {
        for x in 0..maps.width {
            if maps.is_peak(x, y) {
                peaks.push((x, y));
            }
        }
    }
    // Top-k by score, deterministic tie-break by (y, x).
    peaks.sort_by(|&(ax, ay), &(bx, by)| {
        maps.at(&maps.heatmap, bx, by)
            .total_cmp(&maps.at(&maps.heatmap, ax, ay))
            .then(ay.cmp(&by))
            .then(ax.cmp(&bx))
    });
    peaks.truncate(k);

    let mut dets = Vec::new();
    for (x, y) in peaks {
        let score = maps.at(&maps.heatmap, x, y);
        let radius = maps.at(&maps.radius, x, y) * maps.stride;
        if score < score_min || radius <= 0.0 {
            continue;
        }
        let cx = (x as f64 + maps.at(&maps.offset_dx, x, y)) * maps.stride;
        let cy = (y as f64 + maps.at(&maps.offset_dy, x, y)) * maps.stride;
        dets.push(CircleDetection::new(Circle::new(cx, cy, radius)?, score));
    }
    dets.sort_by(canonical_detection_order);
    Ok(dets)
}

/// Per-tile detections with the tile's level-0 origin. Detection
/// coordinates must already be scaled to level-0 pixels by the caller.
pub type TileDetections = ((f64, f64), Vec<CircleDetection>);

/// Translate per-tile detections into slide space and collapse duplicates
/// from overlapping tiles with circle NMS. The pooled set is sorted
/// canonically first, so the result is independent of tile order.
pub fn merge_tiles(
    per_tile: &[TileDetections],
    nms_iou: f64,
) -> Result<Vec<CircleDetection>, DetectionError> {
    let mut pooled = Vec::new();
    for ((ox, oy), dets) in per_tile {
        for d in dets {
            let mut moved = d.clone();
            moved.circle.cx += ox;
            moved.circle.cy += oy;
            pooled.push(moved);
        }
    }
    pooled.sort_by(canonical_detection_order);
    Ok(circle_nms(&pooled, nms_iou)?)
}

/// Drop detections the patch classifier calls non-glomerular; survivors
/// carry their argmax class. Geometry and scores are never touched and
/// relative order is preserved.
pub fn filter_false_positives(
    dets: &[CircleDetection],
    probs: &[Vec<f64>],
) -> Result<Vec<CircleDetection>, DetectionError> {
    if dets.len() != probs.len() {
        return Err(DetectionError::Shape(format!(
            "{} detections but {} probability vectors",
            dets.len(),
            probs.len()
        )));
    }
    let mut kept = Vec::new();
    for (det, p) in dets.iter().zip(probs) {
        if p.len() != GlomClass::COUNT {
            return Err(DetectionError::Shape(format!(
                "probability vector has {} entries, expected {}",
                p.len(),
                GlomClass::COUNT
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DetectionError::Shape(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.total_cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("five entries");
        let class = GlomClass::from_index(argmax).expect("argmax < 5");
        if class == GlomClass::NonGlomerular {
            continue;
        }
        let mut out = det.clone();
        out.label = Some(class);
        kept.push(out);
    }
    Ok(kept)
}

/// Keep candidate ids whose detection score reaches the curation
/// threshold (boundary kept: exactly `threshold` passes). Order is stable.
pub fn curate_by_score<I: Clone>(candidates: &[(I, f64)], threshold: f64) -> Vec<I> {
    candidates
        .iter()
        .filter(|(_, score)| *score >= threshold)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Default curation threshold for web-mined candidate images.
pub const CURATION_THRESHOLD: f64 = 0.7;
