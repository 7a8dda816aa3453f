//! Deterministic mock backends driven by phantom ground truth.
//!
//! These exist to exercise pipeline plumbing and metrics without any
//! trained model. The detector reads the phantom's answer key (optionally
//! jittered); the classifier and segmenter decode the intensity bands the
//! phantom generator painted. They are not a scientific baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{BackendError, ClassifierBackend, DetectorBackend, DetectorOutput, SegmenterBackend};
use crate::geometry::{Circle, CircleDetection};
use crate::mask::Mask;
use crate::taxonomy::GlomClass;
use crate::wsi::{class_from_intensity, PhantomTruth, Tile, OBJECT_INTENSITY_MAX};

/// Jitter and false-positive policy for the mock detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePolicy {
    /// Std-dev of the Gaussian jitter applied to centers and radii, in
    /// level-0 pixels. Zero reproduces the truth exactly.
    pub sigma: f64,
    /// Expected number of spurious detections per tile (Poisson).
    pub fp_rate: f64,
    pub seed: u64,
}

impl NoisePolicy {
    pub fn noiseless(seed: u64) -> Self {
        NoisePolicy { sigma: 0.0, fp_rate: 0.0, seed }
    }
}

/// Emits the phantom truth circles that intersect a tile, jittered per
/// policy, in tile pixel coordinates. Jitter derives from a hash of
/// `(seed, circle index, tile origin)`, so results never depend on tile
/// processing order.
pub struct MockDetector {
    truth: PhantomTruth,
    policy: NoisePolicy,
}

fn derive_rng(seed: u64, salt: &[u8]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt);
    let digest = hasher.finalize();
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key))
}

impl MockDetector {
    pub fn new(truth: PhantomTruth, policy: NoisePolicy) -> Self {
        MockDetector { truth, policy }
    }

    fn check_source(&self, tile: &Tile) -> Result<(), BackendError> {
        // A phantom tile must fall inside the phantom's level-0 extent.
        let (w, h) = (self.truth.width as i64, self.truth.height as i64);
        if tile.origin.0 >= w || tile.origin.1 >= h || tile.origin.0 < 0 || tile.origin.1 < 0 {
            return Err(BackendError::UnsupportedSource(format!(
                "tile origin {:?} outside the {w}x{h} phantom",
                tile.origin
            )));
        }
        Ok(())
    }
}

impl DetectorBackend for MockDetector {
    fn detect(&self, tile: &Tile) -> Result<DetectorOutput, BackendError> {
        self.check_source(tile)?;
        let ds = tile.downsample;
        let tile_x0 = tile.origin.0 as f64;
        let tile_y0 = tile.origin.1 as f64;
        let tile_x1 = tile_x0 + tile.width as f64 * ds;
        let tile_y1 = tile_y0 + tile.height as f64 * ds;

        let mut dets = Vec::new();
        for (i, tc) in self.truth.circles.iter().enumerate() {
            // Intersects the tile window at all?
            let nearest_x = tc.cx.clamp(tile_x0, tile_x1);
            let nearest_y = tc.cy.clamp(tile_y0, tile_y1);
            if (tc.cx - nearest_x).hypot(tc.cy - nearest_y) > tc.r {
                continue;
            }
            let (mut cx, mut cy, mut r) = (tc.cx, tc.cy, tc.r);
            let mut score = 1.0;
            if self.policy.sigma > 0.0 {
                let mut salt = Vec::with_capacity(24);
                salt.extend_from_slice(&(i as u64).to_le_bytes());
                salt.extend_from_slice(&tile.origin.0.to_le_bytes());
                salt.extend_from_slice(&tile.origin.1.to_le_bytes());
                let mut rng = derive_rng(self.policy.seed, &salt);
                let normal = Normal::new(0.0, self.policy.sigma).expect("sigma > 0");
                let dx: f64 = normal.sample(&mut rng);
                let dy: f64 = normal.sample(&mut rng);
                let dr: f64 = normal.sample(&mut rng);
                cx += dx;
                cy += dy;
                r = (r + dr).max(1.0);
                score = (1.0 - (dx.hypot(dy) + dr.abs()) / tc.r).clamp(0.5, 1.0);
            }
            dets.push(CircleDetection::new(
                Circle::new((cx - tile_x0) / ds, (cy - tile_y0) / ds, r / ds)
                    .map_err(|e| BackendError::Shape(e.to_string()))?,
                score,
            ));
        }

        if self.policy.fp_rate > 0.0 {
            let mut salt = Vec::with_capacity(18);
            salt.extend_from_slice(b"fp");
            salt.extend_from_slice(&tile.origin.0.to_le_bytes());
            salt.extend_from_slice(&tile.origin.1.to_le_bytes());
            let mut rng = derive_rng(self.policy.seed, &salt);
            // Knuth Poisson sampler; fp_rate stays small in practice.
            let mut n = 0usize;
            let threshold = (-self.policy.fp_rate).exp();
            let mut p = rng.gen_range(0.0..1.0f64);
            while p > threshold {
                n += 1;
                p *= rng.gen_range(0.0..1.0f64);
            }
            for _ in 0..n {
                let r = rng.gen_range(8.0..24.0) / ds;
                let cx = rng.gen_range(0.0..tile.width as f64);
                let cy = rng.gen_range(0.0..tile.height as f64);
                dets.push(CircleDetection::new(
                    Circle::new(cx, cy, r).map_err(|e| BackendError::Shape(e.to_string()))?,
                    rng.gen_range(0.1..0.6),
                ));
            }
        }
        Ok(DetectorOutput::Detections(dets))
    }

    fn identity(&self) -> String {
        format!(
            "mock-detector(seed={},sigma={},fp_rate={})",
            self.policy.seed, self.policy.sigma, self.policy.fp_rate
        )
    }
}

/// Fraction of patch pixels that must be object-dark before the patch is
/// treated as containing an object at all.
const MIN_OBJECT_FRACTION: f64 = 0.01;

fn object_pixel_stats(patch: &Tile) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0u64;
    let total = (patch.width * patch.height) as f64;
    for y in 0..patch.height {
        for x in 0..patch.width {
            let [r, g, b] = patch.rgb(x, y);
            let mean = (r as f64 + g as f64 + b as f64) / 3.0;
            if mean < OBJECT_INTENSITY_MAX as f64 {
                sum += mean;
                count += 1;
            }
        }
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (sum / count as f64, count as f64 / total)
    }
}

/// Decodes the phantom's intensity band into a probability vector: 0.9 on
/// the decoded class, 0.025 elsewhere. Patches without enough dark pixels
/// decode to non-glomerular.
#[derive(Debug, Clone, Default)]
pub struct MockClassifier;

impl ClassifierBackend for MockClassifier {
    fn classify(&self, patch: &Tile) -> Result<Vec<f64>, BackendError> {
        let (mean, fraction) = object_pixel_stats(patch);
        let class = if fraction < MIN_OBJECT_FRACTION {
            GlomClass::NonGlomerular
        } else {
            class_from_intensity(mean)
        };
        let mut probs = vec![0.025; GlomClass::COUNT];
        probs[class.index()] = 0.9;
        Ok(probs)
    }

    fn identity(&self) -> String {
        "mock-classifier(intensity-band)".into()
    }
}

/// Thresholds the object intensity band into a binary mask.
#[derive(Debug, Clone, Default)]
pub struct MockSegmenter;

impl SegmenterBackend for MockSegmenter {
    fn segment(&self, patch: &Tile) -> Result<Mask, BackendError> {
        Ok(Mask::from_fn(patch.width, patch.height, |x, y| {
            let [r, g, b] = patch.rgb(x, y);
            (r as f64 + g as f64 + b as f64) / 3.0 < OBJECT_INTENSITY_MAX as f64
        }))
    }

    fn identity(&self) -> String {
        "mock-segmenter(intensity-threshold)".into()
    }
}
