//! Circle primitives, exact circle IoU, circle NMS, and the crop/resize
//! coordinate algebra shared by detection and detect-then-segment.
//!
//! All coordinates are level-0 slide pixels: x grows rightward, y grows
//! downward, origin at the slide's top-left.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::GlomClass;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("window ({x0},{y0})..({x1},{y1}) lies fully outside the {w}x{h} slide")]
    OutOfBounds { x0: i64, y0: i64, x1: i64, y1: i64, w: u32, h: u32 },
}

/// A circle in level-0 slide coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    pub fn new(cx: f64, cy: f64, r: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && r.is_finite()) {
            return Err(GeometryError::InvalidGeometry(format!(
                "non-finite circle ({cx}, {cy}, r={r})"
            )));
        }
        if r <= 0.0 {
            return Err(GeometryError::InvalidGeometry(format!("radius {r} must be > 0")));
        }
        Ok(Circle { cx, cy, r })
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.r * self.r
    }

    pub fn center_distance(&self, other: &Circle) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

/// One detected object: circle, confidence, and (once classified) a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleDetection {
    pub circle: Circle,
    /// Confidence in [0, 1]; larger means stronger belief in a glomerulus.
    pub score: f64,
    /// Absent until the classification stage assigns one.
    pub label: Option<GlomClass>,
}

impl CircleDetection {
    pub fn new(circle: Circle, score: f64) -> Self {
        CircleDetection { circle, score, label: None }
    }

    pub fn with_label(circle: Circle, score: f64, label: GlomClass) -> Self {
        CircleDetection { circle, score, label: Some(label) }
    }
}

/// Area of the intersection of two circles (circular-lens formula).
///
/// Near-tangent configurations clamp the acos argument to [-1, 1] so
/// rounding in the distance computation cannot produce NaN.
fn intersection_area(a: &Circle, b: &Circle) -> f64 {
    let d = a.center_distance(b);
    if d >= a.r + b.r {
        return 0.0;
    }
    if d <= (a.r - b.r).abs() {
        let r = a.r.min(b.r);
        return std::f64::consts::PI * r * r;
    }
    let (r1, r2) = (a.r, b.r);
    let cos1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0);
    let cos2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0);
    let tri = 0.5
        * ((r1 + r2 - d) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
            .max(0.0)
            .sqrt();
    r1 * r1 * cos1.acos() + r2 * r2 * cos2.acos() - tri
}

/// Intersection-over-union of two circles. Symmetric; 1 for identical
/// circles; exactly 0 once the center distance reaches the radius sum.
pub fn circle_iou(a: &Circle, b: &Circle) -> Result<f64, GeometryError> {
    for c in [a, b] {
        if !(c.cx.is_finite() && c.cy.is_finite() && c.r.is_finite()) || c.r <= 0.0 {
            return Err(GeometryError::InvalidGeometry(format!(
                "circle ({}, {}, r={}) is not valid for IoU",
                c.cx, c.cy, c.r
            )));
        }
    }
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Score-descending order with a deterministic `(cy, cx, r)` tie-break.
pub(crate) fn canonical_detection_order(a: &CircleDetection, b: &CircleDetection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.circle.cy.total_cmp(&b.circle.cy))
        .then(a.circle.cx.total_cmp(&b.circle.cx))
        .then(a.circle.r.total_cmp(&b.circle.r))
}

/// Greedy per-label non-maximum suppression.
///
/// Detections are visited in score-descending order (ties broken by
/// `(cy, cx, r)`); one is kept iff its IoU with every already-kept
/// detection of the same label stays below `iou_threshold`. The output is
/// a subset of the input in score-descending order.
pub fn circle_nms(
    dets: &[CircleDetection],
    iou_threshold: f64,
) -> Result<Vec<CircleDetection>, GeometryError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(GeometryError::Config(format!(
            "NMS IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut sorted: Vec<&CircleDetection> = dets.iter().collect();
    sorted.sort_by(|a, b| canonical_detection_order(a, b));

    let mut kept: Vec<CircleDetection> = Vec::new();
    for det in sorted {
        let mut suppressed = false;
        for k in &kept {
            if k.label != det.label {
                continue;
            }
            if circle_iou(&k.circle, &det.circle)? >= iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(det.clone());
        }
    }
    Ok(kept)
}

/// How window pixels map onto the output patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformMode {
    /// The window is resampled to fill the whole output patch.
    BilinearResize,
    /// The window is copied at native scale, centered on the output canvas,
    /// with the remainder filled by a constant.
    ConstantPad,
}

/// Invertible mapping between a level-0 crop window and a resized patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchTransform {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    pub out_w: u32,
    pub out_h: u32,
    pub mode: TransformMode,
    /// Microns per pixel at level 0, carried for physical-size bookkeeping.
    pub mpp: f64,
}

impl PatchTransform {
    pub fn new(
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        out_w: u32,
        out_h: u32,
        mode: TransformMode,
        mpp: f64,
    ) -> Result<Self, GeometryError> {
        if x1 <= x0 || y1 <= y0 {
            return Err(GeometryError::InvalidGeometry(format!(
                "degenerate window ({x0},{y0})..({x1},{y1})"
            )));
        }
        if out_w == 0 || out_h == 0 {
            return Err(GeometryError::InvalidGeometry("zero output patch size".into()));
        }
        Ok(PatchTransform { x0, y0, x1, y1, out_w, out_h, mode, mpp })
    }

    pub fn window_w(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn window_h(&self) -> i64 {
        self.y1 - self.y0
    }

    fn scale(&self) -> (f64, f64) {
        match self.mode {
            TransformMode::BilinearResize => (
                self.out_w as f64 / self.window_w() as f64,
                self.out_h as f64 / self.window_h() as f64,
            ),
            TransformMode::ConstantPad => (1.0, 1.0),
        }
    }

    fn patch_offset(&self) -> (f64, f64) {
        match self.mode {
            TransformMode::BilinearResize => (0.0, 0.0),
            TransformMode::ConstantPad => (
                ((self.out_w as i64 - self.window_w()) / 2) as f64,
                ((self.out_h as i64 - self.window_h()) / 2) as f64,
            ),
        }
    }

    /// Map a patch coordinate to level-0 slide coordinates. The affine law
    /// extends beyond the window; callers clamp when they need containment.
    pub fn map_to_slide(&self, px: f64, py: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        let (ox, oy) = self.patch_offset();
        (self.x0 as f64 + (px - ox) / sx, self.y0 as f64 + (py - oy) / sy)
    }

    /// Map level-0 slide coordinates into the patch grid.
    pub fn map_to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        let (ox, oy) = self.patch_offset();
        ((x - self.x0 as f64) * sx + ox, (y - self.y0 as f64) * sy + oy)
    }
}

/// Default padding added around a detection before patch extraction.
pub const DEFAULT_PATCH_PAD: u32 = 50;
/// Default output patch edge length.
pub const DEFAULT_PATCH_SIZE: u32 = 256;

/// Build the crop window for a detection: the circle's bounding box grown
/// by `pad` on each side, rounded outward to integers, clamped to the
/// slide. Clamping shrinks the window rather than shifting it, so the
/// center stays aligned when no edge is hit.
pub fn detection_to_window(
    det: &CircleDetection,
    pad: u32,
    slide_w: u32,
    slide_h: u32,
    mpp: f64,
) -> Result<PatchTransform, GeometryError> {
    let c = &det.circle;
    if c.r <= 0.0 || !c.r.is_finite() {
        return Err(GeometryError::InvalidGeometry(format!("radius {} must be > 0", c.r)));
    }
    let pad = pad as f64;
    let x0 = (c.cx - c.r - pad).floor() as i64;
    let y0 = (c.cy - c.r - pad).floor() as i64;
    let x1 = (c.cx + c.r + pad).ceil() as i64;
    let y1 = (c.cy + c.r + pad).ceil() as i64;
    if x1 <= 0 || y1 <= 0 || x0 >= slide_w as i64 || y0 >= slide_h as i64 {
        return Err(GeometryError::OutOfBounds { x0, y0, x1, y1, w: slide_w, h: slide_h });
    }
    let x0 = x0.max(0);
    let y0 = y0.max(0);
    let x1 = x1.min(slide_w as i64);
    let y1 = y1.min(slide_h as i64);
    PatchTransform::new(
        x0,
        y0,
        x1,
        y1,
        DEFAULT_PATCH_SIZE,
        DEFAULT_PATCH_SIZE,
        TransformMode::BilinearResize,
        mpp,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(cx: f64, cy: f64, r: f64) -> Circle {
        Circle::new(cx, cy, r).unwrap()
    }

    fn det(cx: f64, cy: f64, r: f64, score: f64) -> CircleDetection {
        CircleDetection::new(c(cx, cy, r), score)
    }

    /// Monte-Carlo IoU estimate plus its delta-method standard error.
    /// Samples the joint bounding box; IoU is the hit-ratio of
    /// intersection over union indicators.
    pub(crate) fn monte_carlo_iou(a: &Circle, b: &Circle, n: u64, seed: u64) -> (f64, f64) {
        let x_min = (a.cx - a.r).min(b.cx - b.r);
        let x_max = (a.cx + a.r).max(b.cx + b.r);
        let y_min = (a.cy - a.r).min(b.cy - b.r);
        let y_max = (a.cy + a.r).max(b.cy + b.r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut inter, mut union) = (0u64, 0u64);
        for _ in 0..n {
            let x: f64 = rng.gen_range(x_min..x_max);
            let y: f64 = rng.gen_range(y_min..y_max);
            let in_a = (x - a.cx).hypot(y - a.cy) <= a.r;
            let in_b = (x - b.cx).hypot(y - b.cy) <= b.r;
            if in_a && in_b {
                inter += 1;
            }
            if in_a || in_b {
                union += 1;
            }
        }
        if union == 0 {
            return (0.0, 0.0);
        }
        let nf = n as f64;
        let p = inter as f64 / nf;
        let q = union as f64 / nf;
        let ratio = p / q;
        // Delta-method variance of the ratio estimator; cov(1_inter, 1_union)
        // = p(1-q) because the intersection is contained in the union. The
        // variance uses half-hit smoothed counts so a sliver overlap with
        // zero observed hits still reports a nonzero standard error.
        let ps = (inter as f64 + 0.5) / (nf + 1.0);
        let qs = (union as f64 + 0.5) / (nf + 1.0);
        let rs = ps / qs;
        let var = (ps * (1.0 - ps) / (qs * qs) + rs * rs * (1.0 - qs) / qs
            - 2.0 * rs * ps * (1.0 - qs) / (qs * qs))
            / nf;
        (ratio, var.max(0.0).sqrt())
    }

    #[test]
    fn iou_identity() {
        let a = c(0.0, 0.0, 5.0);
        assert_eq!(circle_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        assert_eq!(circle_iou(&c(0.0, 0.0, 1.0), &c(3.0, 0.0, 1.0)).unwrap(), 0.0);
        // Exactly touching circles have zero intersection.
        assert_eq!(circle_iou(&c(0.0, 0.0, 1.0), &c(2.0, 0.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_contained() {
        let got = circle_iou(&c(0.0, 0.0, 1.0), &c(0.0, 0.0, 2.0)).unwrap();
        assert!((got - 0.25).abs() < 1e-12);
    }

    #[test]
    fn iou_partial_overlap_matches_lens_arithmetic() {
        // d=1, r1=r2=1: lens = 2*acos(0.5) - sqrt(3)/2, union = 2*pi - lens.
        let lens = 2.0 * (0.5f64).acos() - 0.75f64.sqrt();
        let want = lens / (2.0 * std::f64::consts::PI - lens);
        let got = circle_iou(&c(0.0, 0.0, 1.0), &c(1.0, 0.0, 1.0)).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.2430).abs() < 5e-5);
    }

    #[test]
    fn iou_partial_overlap_matches_monte_carlo() {
        let a = c(0.0, 0.0, 1.0);
        let b = c(1.0, 0.0, 1.0);
        let (est, se) = monte_carlo_iou(&a, &b, 1_000_000, 17);
        let got = circle_iou(&a, &b).unwrap();
        assert!((got - est).abs() <= 3.0 * se, "got {got}, MC {est} +- {se}");
    }

    #[test]
    fn iou_rejects_bad_radius() {
        let bad = Circle { cx: 0.0, cy: 0.0, r: -1.0 };
        assert!(circle_iou(&bad, &c(0.0, 0.0, 1.0)).is_err());
        let nan = Circle { cx: f64::NAN, cy: 0.0, r: 1.0 };
        assert!(circle_iou(&nan, &c(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let dets = vec![det(0.0, 0.0, 5.0, 0.8), det(0.0, 0.0, 5.0, 0.9)];
        let kept = circle_nms(&dets, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint() {
        // Disjoint circles have IoU 0, strictly below every positive
        // threshold, so both survive.
        let dets = vec![det(0.0, 0.0, 5.0, 0.8), det(100.0, 0.0, 5.0, 0.9)];
        for thr in [0.05, 0.3, 1.0] {
            assert_eq!(circle_nms(&dets, thr).unwrap().len(), 2);
        }
    }

    #[test]
    fn nms_three_circle_example() {
        let a = det(0.0, 0.0, 10.0, 0.9);
        let b = det(2.0, 0.0, 10.0, 0.8);
        let cdet = det(40.0, 0.0, 10.0, 0.7);
        // a-b overlap clearly above 0.5; confirm with the MC oracle.
        let (est, se) = monte_carlo_iou(&a.circle, &b.circle, 200_000, 3);
        assert!(est - 3.0 * se > 0.5);
        let kept = circle_nms(&[a.clone(), b, cdet.clone()], 0.5).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].circle, a.circle);
        assert_eq!(kept[1].circle, cdet.circle);
    }

    #[test]
    fn nms_is_label_aware() {
        let mut a = det(0.0, 0.0, 5.0, 0.9);
        let mut b = det(0.0, 0.0, 5.0, 0.8);
        a.label = Some(GlomClass::Normal);
        b.label = Some(GlomClass::Obsolescent);
        assert_eq!(circle_nms(&[a, b], 0.5).unwrap().len(), 2);
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        assert!(circle_nms(&[], 1.5).is_err());
        assert!(circle_nms(&[], -0.1).is_err());
    }

    #[test]
    fn window_from_detection() {
        let d = det(1000.0, 2000.0, 100.0, 0.9);
        let t = detection_to_window(&d, 50, 10_000, 10_000, 0.25).unwrap();
        assert_eq!((t.x0, t.y0, t.x1, t.y1), (850, 1850, 1150, 2150));
        assert_eq!((t.out_w, t.out_h), (256, 256));
        assert_eq!(t.mode, TransformMode::BilinearResize);
        assert_eq!(t.mpp, 0.25);
        // 300x300 -> 256x256: patch center maps back to the detection center.
        let (sx, sy) = t.map_to_slide(128.0, 128.0);
        assert!((sx - 1000.0).abs() < 1e-9);
        assert!((sy - 2000.0).abs() < 1e-9);
        let (px, py) = t.map_to_patch(850.0, 1850.0);
        assert!((px - 0.0).abs() < 1e-9 && (py - 0.0).abs() < 1e-9);
    }

    #[test]
    fn window_zero_pad() {
        let d = det(10.0, 10.0, 10.0, 0.9);
        let t = detection_to_window(&d, 0, 100, 100, 0.25).unwrap();
        assert_eq!((t.x0, t.y0, t.x1, t.y1), (0, 0, 20, 20));
    }

    #[test]
    fn window_clamps_at_corner() {
        let d = det(5.0, 5.0, 10.0, 0.9);
        let t = detection_to_window(&d, 50, 10_000, 10_000, 0.25).unwrap();
        assert_eq!((t.x0, t.y0), (0, 0));
        assert_eq!((t.x1, t.y1), (65, 65));
        // Mapped patch corners stay inside the slide.
        for &(px, py) in &[(0.0, 0.0), (255.0, 255.0)] {
            let (sx, sy) = t.map_to_slide(px, py);
            assert!(sx >= 0.0 && sy >= 0.0 && sx <= 10_000.0 && sy <= 10_000.0);
        }
    }

    #[test]
    fn window_fully_outside_errors() {
        let d = det(-500.0, -500.0, 10.0, 0.9);
        assert!(matches!(
            detection_to_window(&d, 50, 1000, 1000, 0.25),
            Err(GeometryError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn constant_pad_mapping_centers_window() {
        let t = PatchTransform::new(100, 200, 356, 456, 512, 512, TransformMode::ConstantPad, 0.25)
            .unwrap();
        // 256-wide window centered on a 512 canvas: offset 128.
        let (px, py) = t.map_to_patch(100.0, 200.0);
        assert_eq!((px, py), (128.0, 128.0));
        let (sx, sy) = t.map_to_slide(128.0, 128.0);
        assert_eq!((sx, sy), (100.0, 200.0));
    }

    #[test]
    fn random_pairs_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..500 {
            let a = c(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.5..8.0));
            let b = c(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.5..8.0));
            let (est, se) = monte_carlo_iou(&a, &b, 40_000, 1000 + i);
            let got = circle_iou(&a, &b).unwrap();
            // Disjoint pairs have zero variance and an exact closed form.
            let slack = 3.0 * se + 1e-12;
            assert!((got - est).abs() <= slack, "pair {i}: got {got}, MC {est} +- {se}");
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric(ax in -50.0..50.0f64, ay in -50.0..50.0f64, ar in 0.1..20.0f64,
                         bx in -50.0..50.0f64, by in -50.0..50.0f64, br in 0.1..20.0f64) {
            let a = c(ax, ay, ar);
            let b = c(bx, by, br);
            let ab = circle_iou(&a, &b).unwrap();
            let ba = circle_iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            // Zero exactly when the centers are at least r1+r2 apart.
            let disjoint = a.center_distance(&b) >= ar + br;
            prop_assert_eq!(ab == 0.0, disjoint);
        }

        #[test]
        fn nms_scores_non_increasing_and_suppressed_justified(
            seed in 0u64..1000,
            n in 1usize..20,
            thr in 0.05..0.95f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<CircleDetection> = (0..n)
                .map(|_| det(
                    rng.gen_range(0.0..60.0),
                    rng.gen_range(0.0..60.0),
                    rng.gen_range(1.0..12.0),
                    rng.gen_range(0.0..1.0),
                ))
                .collect();
            let kept = circle_nms(&dets, thr).unwrap();
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            // Every suppressed input overlaps some kept detection of equal
            // label at or above the threshold.
            for d in &dets {
                if kept.iter().any(|k| k == d) {
                    continue;
                }
                let justified = kept.iter().any(|k| {
                    k.label == d.label && circle_iou(&k.circle, &d.circle).unwrap() >= thr
                });
                prop_assert!(justified);
            }
        }

        #[test]
        fn map_round_trip(
            x0 in -500i64..500, y0 in -500i64..500,
            w in 1i64..800, h in 1i64..800,
            out_w in 1u32..600, out_h in 1u32..600,
            px in 0.0..600.0f64, py in 0.0..600.0f64,
            pad_mode in proptest::bool::ANY,
        ) {
            let mode = if pad_mode { TransformMode::ConstantPad } else { TransformMode::BilinearResize };
            let t = PatchTransform::new(x0, y0, x0 + w, y0 + h, out_w, out_h, mode, 0.25).unwrap();
            let (sx, sy) = t.map_to_slide(px, py);
            let (qx, qy) = t.map_to_patch(sx, sy);
            prop_assert!((qx - px).abs() < 1e-9);
            prop_assert!((qy - py).abs() < 1e-9);
        }

        #[test]
        fn window_recovers_center(
            cx in 100.0..900.0f64, cy in 100.0..900.0f64, r in 1.0..40.0f64,
            pad in 0u32..60,
        ) {
            let d = det(cx, cy, r, 0.5);
            let t = detection_to_window(&d, pad, 1000, 1000, 0.25).unwrap();
            // No clamping occurred by construction; the patch center maps
            // back to within a pixel of the detection center (outward
            // rounding shifts the window center by less than one pixel).
            let (sx, sy) = t.map_to_slide(t.out_w as f64 / 2.0, t.out_h as f64 / 2.0);
            prop_assert!((sx - cx).abs() <= 1.0);
            prop_assert!((sy - cy).abs() <= 1.0);
        }
    }
}
