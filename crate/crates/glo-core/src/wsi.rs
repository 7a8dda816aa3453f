//! Multi-resolution slide abstraction, tile iteration, a directory-based
//! test pyramid format, and a synthetic phantom-slide generator with
//! embedded ground truth.
//!
//! The on-disk pyramid is deliberately vendor-free: a directory holding
//! `manifest.json` plus one PNG per level. Production readers for native
//! WSI formats can implement the same [`SlidePyramid`] reading contract.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Circle;
use crate::mask::Mask;
use crate::taxonomy::GlomClass;

/// Default physical resolution when a manifest omits `mpp` (40x scans).
pub const DEFAULT_MPP: f64 = 0.25;

/// Background pixels are white glass; out-of-bounds reads use the same fill.
pub const BACKGROUND_FILL: [u8; 3] = [255, 255, 255];

#[derive(Debug, Error)]
pub enum WsiError {
    #[error("pyramid format error in `{field}`: {detail}")]
    Format { field: String, detail: String },
    #[error("level {0} out of range (pyramid has {1} levels)")]
    InvalidLevel(usize, usize),
    #[error("tiling config error: {0}")]
    Config(String),
    #[error("could not place {placed} of {requested} phantom circles within {attempts} attempts")]
    Placement { requested: usize, placed: usize, attempts: usize },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One pyramid level as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub w: u32,
    pub h: u32,
    pub downsample: f64,
    pub file: String,
}

/// `manifest.json` schema for the test pyramid directory format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PyramidManifest {
    /// Microns per pixel at level 0; defaults to 0.25 when absent.
    pub mpp: Option<f64>,
    pub levels: Vec<LevelInfo>,
}

impl PyramidManifest {
    /// Validate level ordering and dimensions.
    pub fn validate(&self) -> Result<(), WsiError> {
        if self.levels.is_empty() {
            return Err(WsiError::Format {
                field: "levels".into(),
                detail: "at least one level required".into(),
            });
        }
        if let Some(mpp) = self.mpp {
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(WsiError::Format {
                    field: "mpp".into(),
                    detail: format!("must be positive, got {mpp}"),
                });
            }
        }
        if self.levels[0].downsample != 1.0 {
            return Err(WsiError::Format {
                field: "levels[0].downsample".into(),
                detail: format!("level 0 must have downsample 1, got {}", self.levels[0].downsample),
            });
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.w == 0 || level.h == 0 {
                return Err(WsiError::Format {
                    field: format!("levels[{i}]"),
                    detail: "zero dimension".into(),
                });
            }
            if !(level.downsample.is_finite() && level.downsample >= 1.0) {
                return Err(WsiError::Format {
                    field: format!("levels[{i}].downsample"),
                    detail: format!("must be finite and >= 1, got {}", level.downsample),
                });
            }
            if i > 0 {
                if level.downsample <= self.levels[i - 1].downsample {
                    return Err(WsiError::Format {
                        field: format!("levels[{i}].downsample"),
                        detail: "downsample factors must be strictly increasing".into(),
                    });
                }
                if level.w > self.levels[i - 1].w || level.h > self.levels[i - 1].h {
                    return Err(WsiError::Format {
                        field: format!("levels[{i}]"),
                        detail: format!(
                            "level {i} ({}x{}) larger than level {} ({}x{})",
                            level.w,
                            level.h,
                            i - 1,
                            self.levels[i - 1].w,
                            self.levels[i - 1].h
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// An open multi-resolution slide. Level images load lazily and the
/// structure is read-only after open, so concurrent `read_region` calls
/// are safe.
pub struct SlidePyramid {
    dir: PathBuf,
    mpp: f64,
    levels: Vec<LevelInfo>,
    planes: Vec<OnceLock<RgbImage>>,
}

impl std::fmt::Debug for SlidePyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlidePyramid")
            .field("dir", &self.dir)
            .field("mpp", &self.mpp)
            .field("levels", &self.levels)
            .finish()
    }
}

/// A rectangular pixel read: `size` pixels at `level`, whose top-left
/// corresponds to `origin` in level-0 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub level: usize,
    /// Level-0 coordinates of the tile's top-left corner.
    pub origin: (i64, i64),
    /// Pixels per level pixel relative to level 0.
    pub downsample: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 8-bit RGB, length `width * height * 3`.
    pub pixels: Vec<u8>,
}

impl Tile {
    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("tile buffer length matches dimensions")
    }

    pub fn from_image(level: usize, origin: (i64, i64), downsample: f64, img: &RgbImage) -> Self {
        Tile {
            level,
            origin,
            downsample,
            width: img.width(),
            height: img.height(),
            pixels: img.as_raw().clone(),
        }
    }
}

/// Open a slide stored in the test pyramid directory format.
pub fn open_slide(dir: &Path) -> Result<SlidePyramid, WsiError> {
    let manifest_path = dir.join("manifest.json");
    let data = std::fs::read(&manifest_path).map_err(|e| WsiError::Format {
        field: "manifest.json".into(),
        detail: format!("{}: {e}", manifest_path.display()),
    })?;
    let manifest: PyramidManifest = serde_json::from_slice(&data).map_err(|e| WsiError::Format {
        field: "manifest.json".into(),
        detail: e.to_string(),
    })?;
    manifest.validate()?;
    let mpp = match manifest.mpp {
        Some(v) => v,
        None => {
            log::warn!(
                "{}: manifest has no mpp; assuming {} um/px",
                dir.display(),
                DEFAULT_MPP
            );
            DEFAULT_MPP
        }
    };
    let planes = manifest.levels.iter().map(|_| OnceLock::new()).collect();
    Ok(SlidePyramid { dir: dir.to_path_buf(), mpp, levels: manifest.levels, planes })
}

impl SlidePyramid {
    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    /// Level-0 dimensions.
    pub fn dimensions(&self) -> (u32, u32) {
        (self.levels[0].w, self.levels[0].h)
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Index of the level with the largest downsample not exceeding the
    /// requested factor; level 0 when every level is finer.
    pub fn best_level_for_downsample(&self, downsample: f64) -> usize {
        let mut best = 0;
        for (i, level) in self.levels.iter().enumerate() {
            if level.downsample <= downsample {
                best = i;
            }
        }
        best
    }

    fn plane(&self, level: usize) -> Result<&RgbImage, WsiError> {
        if level >= self.levels.len() {
            return Err(WsiError::InvalidLevel(level, self.levels.len()));
        }
        if let Some(img) = self.planes[level].get() {
            return Ok(img);
        }
        let info = &self.levels[level];
        let path = self.dir.join(&info.file);
        let img = image::open(&path)
            .map_err(|e| WsiError::Format {
                field: format!("levels[{level}].file"),
                detail: format!("{}: {e}", path.display()),
            })?
            .into_rgb8();
        if img.width() != info.w || img.height() != info.h {
            return Err(WsiError::Format {
                field: format!("levels[{level}].file"),
                detail: format!(
                    "image is {}x{} but manifest says {}x{}",
                    img.width(),
                    img.height(),
                    info.w,
                    info.h
                ),
            });
        }
        let _ = self.planes[level].set(img);
        Ok(self.planes[level].get().expect("plane just set"))
    }

    /// Read `size` pixels at `level` starting at `origin_level0` (level-0
    /// coordinates). Out-of-bounds pixels are filled with white.
    pub fn read_region(
        &self,
        level: usize,
        origin_level0: (i64, i64),
        size: (u32, u32),
    ) -> Result<Tile, WsiError> {
        let plane = self.plane(level)?;
        let ds = self.levels[level].downsample;
        let lx0 = (origin_level0.0 as f64 / ds).floor() as i64;
        let ly0 = (origin_level0.1 as f64 / ds).floor() as i64;
        let (w, h) = size;
        let mut pixels = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let px = lx0 + x;
                let py = ly0 + y;
                let rgb = if px >= 0
                    && py >= 0
                    && (px as u32) < plane.width()
                    && (py as u32) < plane.height()
                {
                    plane.get_pixel(px as u32, py as u32).0
                } else {
                    BACKGROUND_FILL
                };
                pixels.extend_from_slice(&rgb);
            }
        }
        Ok(Tile { level, origin: origin_level0, downsample: ds, width: w, height: h, pixels })
    }
}

/// One tile window produced by [`iter_tiles`], in level pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileWindow {
    pub level: usize,
    /// Top-left in level pixels.
    pub x: u32,
    pub y: u32,
    /// Extent in level pixels; edge windows are truncated at the slide edge.
    pub w: u32,
    pub h: u32,
}

impl TileWindow {
    /// Top-left in level-0 coordinates given the level downsample.
    pub fn origin_level0(&self, downsample: f64) -> (i64, i64) {
        (
            (self.x as f64 * downsample).round() as i64,
            (self.y as f64 * downsample).round() as i64,
        )
    }
}

/// Row-major tile windows covering a level with the given overlap. The
/// stride is `tile_size - overlap`; the final row/column is truncated at
/// the slide edge so every pixel is covered at least once.
pub fn iter_tiles(
    slide: &SlidePyramid,
    level: usize,
    tile_size: u32,
    overlap: u32,
) -> Result<Vec<TileWindow>, WsiError> {
    if level >= slide.level_count() {
        return Err(WsiError::InvalidLevel(level, slide.level_count()));
    }
    if overlap >= tile_size {
        return Err(WsiError::Config(format!(
            "overlap {overlap} must be smaller than tile size {tile_size}"
        )));
    }
    let info = &slide.levels()[level];
    let stride = (tile_size - overlap) as u64;
    let positions = |extent: u32| -> Vec<u32> {
        if extent <= tile_size {
            return vec![0];
        }
        let span = (extent - tile_size) as u64;
        let n = span.div_ceil(stride) + 1;
        (0..n).map(|i| (i * stride) as u32).collect()
    };
    let mut windows = Vec::new();
    for &y in &positions(info.h) {
        for &x in &positions(info.w) {
            windows.push(TileWindow {
                level,
                x,
                y,
                w: tile_size.min(info.w - x),
                h: tile_size.min(info.h - y),
            });
        }
    }
    Ok(windows)
}

/// Mean interior intensity drawn for each class on phantom slides. Bands
/// are 30 levels apart so the mock classifier can decode them through
/// noise and anti-aliasing; the background sits near 243 and never drops
/// below [`OBJECT_INTENSITY_MAX`].
pub fn class_intensity(class: GlomClass) -> u8 {
    match class {
        GlomClass::Normal => 190,
        GlomClass::Obsolescent => 160,
        GlomClass::Solidified => 130,
        GlomClass::Disappearing => 100,
        GlomClass::NonGlomerular => 70,
    }
}

/// Upper bound on object-band intensity after noise; pixels darker than
/// this are object interior, pixels above are background.
pub const OBJECT_INTENSITY_MAX: u8 = 220;

/// Decode an interior mean intensity back to the nearest class band.
pub fn class_from_intensity(mean: f64) -> GlomClass {
    let mut best = GlomClass::Normal;
    let mut best_dist = f64::INFINITY;
    for class in GlomClass::ALL {
        let d = (mean - class_intensity(class) as f64).abs();
        if d < best_dist {
            best_dist = d;
            best = class;
        }
    }
    best
}

/// Ground truth embedded in a generated phantom slide.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub circles: Vec<TruthCircle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthCircle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub class: GlomClass,
    /// Per-circle binary mask file relative to the slide directory.
    pub mask: String,
}

impl TruthCircle {
    pub fn circle(&self) -> Circle {
        Circle::new(self.cx, self.cy, self.r).expect("truth circles are valid by construction")
    }
}

impl PhantomTruth {
    pub fn read(path: &Path) -> Result<Self, WsiError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Truth circles that are glomeruli (everything but the non-glomerular
    /// distractors).
    pub fn glomerular(&self) -> impl Iterator<Item = &TruthCircle> {
        self.circles.iter().filter(|c| c.class != GlomClass::NonGlomerular)
    }
}

/// Class mix for phantom generation. Defaults mirror the reference cohort
/// distribution (16/30/3/2/49).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMix(pub Vec<(GlomClass, f64)>);

impl Default for ClassMix {
    fn default() -> Self {
        ClassMix(vec![
            (GlomClass::Normal, 0.16),
            (GlomClass::Obsolescent, 0.30),
            (GlomClass::Solidified, 0.03),
            (GlomClass::Disappearing, 0.02),
            (GlomClass::NonGlomerular, 0.49),
        ])
    }
}

impl ClassMix {
    fn sample(&self, rng: &mut impl Rng) -> GlomClass {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut pick = rng.gen_range(0.0..total);
        for (class, w) in &self.0 {
            if pick < *w {
                return *class;
            }
            pick -= w;
        }
        self.0.last().map(|(c, _)| *c).unwrap_or(GlomClass::Normal)
    }
}

/// Options for [`generate_phantom`].
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub n_glom: usize,
    pub class_mix: ClassMix,
    /// Radius range in level-0 pixels.
    pub radius_range: (f64, f64),
    pub mpp: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, width: u32, height: u32, n_glom: usize) -> Self {
        PhantomSpec {
            seed,
            width,
            height,
            n_glom,
            class_mix: ClassMix::default(),
            radius_range: (32.0, 48.0),
            mpp: DEFAULT_MPP,
        }
    }
}

fn quantize_tenths(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Generate a deterministic phantom slide: anti-aliased disks whose mean
/// interior intensity encodes the class over a textured background, a
/// three-level pyramid (1x/2x/4x box downsampling), per-circle mask PNGs,
/// and a `truth.json` sidecar. Returns the parsed truth.
pub fn generate_phantom(dir: &Path, spec: &PhantomSpec) -> Result<PhantomTruth, WsiError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Rejection-sample circle placements: fully inside the slide, pairwise
    // center distance above 2.5x the maximum radius.
    let max_r = spec.radius_range.1;
    let min_sep = 2.5 * max_r;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let budget = 10 * spec.n_glom;
    let mut attempts = 0usize;
    while placed.len() < spec.n_glom {
        if attempts >= budget {
            return Err(WsiError::Placement {
                requested: spec.n_glom,
                placed: placed.len(),
                attempts,
            });
        }
        attempts += 1;
        let r = quantize_tenths(rng.gen_range(spec.radius_range.0..=spec.radius_range.1));
        let margin = r + 4.0;
        if 2.0 * margin >= spec.width as f64 || 2.0 * margin >= spec.height as f64 {
            continue;
        }
        let cx = quantize_tenths(rng.gen_range(margin..spec.width as f64 - margin));
        let cy = quantize_tenths(rng.gen_range(margin..spec.height as f64 - margin));
        if placed.iter().all(|&(x, y, _)| (x - cx).hypot(y - cy) > min_sep) {
            placed.push((cx, cy, r));
        }
    }

    let classes: Vec<GlomClass> = placed.iter().map(|_| spec.class_mix.sample(&mut rng)).collect();

    // Level-0 plane: textured background (low-frequency waves plus pixel
    // noise), then anti-aliased disks with per-class intensity bands.
    let mut level0 = RgbImage::new(spec.width, spec.height);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    for y in 0..spec.height {
        for x in 0..spec.width {
            let wave = 4.0
                * ((x as f64 * 0.013).sin() + (y as f64 * 0.017).cos())
                / 2.0;
            let noise: f64 = noise_rng.gen_range(-6.0..6.0);
            let v = (243.0 + wave + noise).clamp(231.0, 255.0) as u8;
            level0.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
    for (i, &(cx, cy, r)) in placed.iter().enumerate() {
        let band = class_intensity(classes[i]) as f64;
        let x_lo = (cx - r - 2.0).floor().max(0.0) as u32;
        let x_hi = ((cx + r + 2.0).ceil() as u32).min(spec.width - 1);
        let y_lo = (cy - r - 2.0).floor().max(0.0) as u32;
        let y_hi = ((cy + r + 2.0).ceil() as u32).min(spec.height - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                // Coverage ramp one pixel wide around the rim.
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha <= 0.0 {
                    continue;
                }
                let texture: f64 = noise_rng.gen_range(-5.0..5.0);
                let object = (band + texture).clamp(0.0, 255.0);
                let bg = level0.get_pixel(x, y).0[0] as f64;
                let v = (alpha * object + (1.0 - alpha) * bg).round().clamp(0.0, 255.0) as u8;
                level0.put_pixel(x, y, Rgb([v, v, v]));
            }
        }
    }

    // Pyramid levels via box downsampling.
    let mut levels = vec![LevelInfo {
        w: spec.width,
        h: spec.height,
        downsample: 1.0,
        file: "level_0.png".into(),
    }];
    write_png(&level0, &dir.join("level_0.png"))?;
    let mut prev = level0;
    for (idx, ds) in [(1usize, 2.0f64), (2, 4.0)] {
        let img = box_downsample_by_2(&prev);
        levels.push(LevelInfo {
            w: img.width(),
            h: img.height(),
            downsample: ds,
            file: format!("level_{idx}.png"),
        });
        write_png(&img, &dir.join(format!("level_{idx}.png")))?;
        prev = img;
    }

    let manifest = PyramidManifest { mpp: Some(spec.mpp), levels };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    // Per-circle masks over the circle's outward-rounded bounding box.
    let mut circles = Vec::with_capacity(placed.len());
    for (i, &(cx, cy, r)) in placed.iter().enumerate() {
        let mask_name = format!("mask_{i:03}.png");
        let x0 = (cx - r).floor();
        let y0 = (cy - r).floor();
        let w = ((cx + r).ceil() - x0) as u32;
        let h = ((cy + r).ceil() - y0) as u32;
        let mask = Mask::from_fn(w, h, |x, y| {
            (x0 + x as f64 + 0.5 - cx).hypot(y0 + y as f64 + 0.5 - cy) <= r
        });
        mask.write_png(&dir.join(&mask_name)).map_err(|e| match e {
            crate::mask::MaskError::Io(io) => WsiError::Io(io),
            crate::mask::MaskError::Image(img) => WsiError::Image(img),
            crate::mask::MaskError::ShapeMismatch(..) => unreachable!("fresh mask"),
        })?;
        circles.push(TruthCircle { cx, cy, r, class: classes[i], mask: mask_name });
    }

    let truth = PhantomTruth { seed: spec.seed, width: spec.width, height: spec.height, circles };
    std::fs::write(dir.join("truth.json"), serde_json::to_vec_pretty(&truth)?)?;
    Ok(truth)
}

fn write_png(img: &RgbImage, path: &Path) -> Result<(), WsiError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    std::fs::write(path, buf.into_inner())?;
    Ok(())
}

/// 2x box downsample; partial edge blocks average the available pixels.
fn box_downsample_by_2(img: &RgbImage) -> RgbImage {
    let w = img.width().div_ceil(2);
    let h = img.height().div_ceil(2);
    RgbImage::from_fn(w, h, |x, y| {
        let mut sum = [0u32; 3];
        let mut n = 0u32;
        for dy in 0..2 {
            for dx in 0..2 {
                let sx = x * 2 + dx;
                let sy = y * 2 + dy;
                if sx < img.width() && sy < img.height() {
                    let p = img.get_pixel(sx, sy).0;
                    for c in 0..3 {
                        sum[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
        }
        Rgb([
            ((sum[0] as f64 / n as f64).round()) as u8,
            ((sum[1] as f64 / n as f64).round()) as u8,
            ((sum[2] as f64 / n as f64).round()) as u8,
        ])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_phantom(dir: &Path, seed: u64, n: usize) -> PhantomTruth {
        let mut spec = PhantomSpec::new(seed, 512, 512, n);
        spec.radius_range = (20.0, 30.0);
        generate_phantom(dir, &spec).unwrap()
    }

    #[test]
    fn open_round_trips_generator_manifest() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 7, 2);
        let slide = open_slide(dir.path()).unwrap();
        assert_eq!(slide.dimensions(), (512, 512));
        assert_eq!(slide.level_count(), 3);
        assert_eq!(slide.levels()[1].downsample, 2.0);
        assert_eq!(slide.levels()[2].downsample, 4.0);
        assert_eq!(slide.mpp(), DEFAULT_MPP);
    }

    #[test]
    fn manifest_rejects_growing_levels() {
        let manifest = PyramidManifest {
            mpp: Some(0.25),
            levels: vec![
                LevelInfo { w: 100, h: 100, downsample: 1.0, file: "a.png".into() },
                LevelInfo { w: 200, h: 200, downsample: 2.0, file: "b.png".into() },
            ],
        };
        let err = manifest.validate().unwrap_err();
        assert!(matches!(err, WsiError::Format { field, .. } if field == "levels[1]"));
    }

    #[test]
    fn manifest_missing_mpp_defaults() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 7, 0);
        // Rewrite the manifest without mpp.
        let raw = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&raw).unwrap();
        v.as_object_mut().unwrap().remove("mpp");
        std::fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&v).unwrap()).unwrap();
        let slide = open_slide(dir.path()).unwrap();
        assert_eq!(slide.mpp(), DEFAULT_MPP);
    }

    #[test]
    fn full_coarse_read_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 3, 3);
        let slide = open_slide(dir.path()).unwrap();
        let info = slide.levels()[2].clone();
        let tile = slide.read_region(2, (0, 0), (info.w, info.h)).unwrap();
        let stored = image::open(dir.path().join(&info.file)).unwrap().into_rgb8();
        assert_eq!(tile.pixels, stored.as_raw().as_slice());
    }

    #[test]
    fn out_of_bounds_fills_white() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 3, 0);
        let slide = open_slide(dir.path()).unwrap();
        // Read half off the right edge at level 0.
        let tile = slide.read_region(0, (512 - 8, 0), (16, 4)).unwrap();
        for y in 0..4 {
            for x in 8..16 {
                assert_eq!(tile.rgb(x, y), BACKGROUND_FILL);
            }
        }
    }

    #[test]
    fn invalid_level_errors() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 3, 0);
        let slide = open_slide(dir.path()).unwrap();
        assert!(matches!(
            slide.read_region(9, (0, 0), (4, 4)),
            Err(WsiError::InvalidLevel(9, 3))
        ));
    }

    #[test]
    fn disk_radius_halves_at_level_1() {
        let dir = tempfile::tempdir().unwrap();
        let truth = tiny_phantom(dir.path(), 11, 1);
        let slide = open_slide(dir.path()).unwrap();
        let c = &truth.circles[0];
        // Count object pixels in a window around the disk at both levels.
        let count_dark = |level: usize, ds: f64| {
            let r_ext = c.r + 8.0;
            let size = (2.0 * r_ext / ds).ceil() as u32;
            let tile = slide
                .read_region(
                    level,
                    ((c.cx - r_ext) as i64, (c.cy - r_ext) as i64),
                    (size, size),
                )
                .unwrap();
            let mut n = 0u32;
            for y in 0..tile.height {
                for x in 0..tile.width {
                    if tile.rgb(x, y)[0] < OBJECT_INTENSITY_MAX {
                        n += 1;
                    }
                }
            }
            n as f64
        };
        let area0 = count_dark(0, 1.0);
        let area1 = count_dark(1, 2.0);
        // Area scales by 1/4, so the apparent radius halves.
        let ratio = (area0 / area1).sqrt();
        assert!((ratio - 2.0).abs() < 0.1, "radius ratio {ratio}");
    }

    #[test]
    fn pyramid_levels_match_box_downsampled_level0() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 5, 2);
        let slide = open_slide(dir.path()).unwrap();
        let full = slide.read_region(0, (0, 0), slide.dimensions()).unwrap();
        let img0 = full.to_image();
        let down = box_downsample_by_2(&box_downsample_by_2(&img0));
        let info = slide.levels()[2].clone();
        let lvl2 = slide.read_region(2, (0, 0), (info.w, info.h)).unwrap();
        for y in 0..info.h {
            for x in 0..info.w {
                let a = lvl2.rgb(x, y);
                let b = down.get_pixel(x, y).0;
                for ch in 0..3 {
                    assert!(
                        (a[ch] as i32 - b[ch] as i32).abs() <= 2,
                        "level-2 pixel ({x},{y}) {a:?} vs {b:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn tiles_1024_512_no_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = PhantomSpec::new(1, 1024, 1024, 0);
        spec.radius_range = (20.0, 30.0);
        generate_phantom(dir.path(), &spec).unwrap();
        let slide = open_slide(dir.path()).unwrap();
        let tiles = iter_tiles(&slide, 0, 512, 0).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.w == 512 && t.h == 512));
    }

    #[test]
    fn tiles_1000_512_overlap_64() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = PhantomSpec::new(1, 1000, 1000, 0);
        spec.radius_range = (20.0, 30.0);
        generate_phantom(dir.path(), &spec).unwrap();
        let slide = open_slide(dir.path()).unwrap();
        let tiles = iter_tiles(&slide, 0, 512, 64).unwrap();
        assert_eq!(tiles.len(), 9);
        // Row-major order with stride 448; edge windows truncated.
        assert_eq!(tiles[0], TileWindow { level: 0, x: 0, y: 0, w: 512, h: 512 });
        assert_eq!(tiles[1].x, 448);
        assert_eq!(tiles[2], TileWindow { level: 0, x: 896, y: 0, w: 104, h: 512 });
        // Coverage: every pixel in some window.
        let mut covered = vec![false; 1000];
        for t in &tiles {
            if t.y == 0 {
                for x in t.x..t.x + t.w {
                    covered[x as usize] = true;
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn tile_larger_than_slide() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = PhantomSpec::new(1, 300, 200, 0);
        spec.radius_range = (20.0, 30.0);
        generate_phantom(dir.path(), &spec).unwrap();
        let slide = open_slide(dir.path()).unwrap();
        let tiles = iter_tiles(&slide, 0, 512, 64).unwrap();
        assert_eq!(tiles, vec![TileWindow { level: 0, x: 0, y: 0, w: 300, h: 200 }]);
    }

    #[test]
    fn overlap_must_be_smaller_than_tile() {
        let dir = tempfile::tempdir().unwrap();
        tiny_phantom(dir.path(), 1, 0);
        let slide = open_slide(dir.path()).unwrap();
        assert!(matches!(iter_tiles(&slide, 0, 128, 128), Err(WsiError::Config(_))));
    }

    #[test]
    fn phantom_empty_truth() {
        let dir = tempfile::tempdir().unwrap();
        let truth = tiny_phantom(dir.path(), 7, 0);
        assert!(truth.circles.is_empty());
    }

    #[test]
    fn phantom_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut spec = PhantomSpec::new(7, 640, 640, 5);
        spec.radius_range = (20.0, 30.0);
        let t1 = generate_phantom(d1.path(), &spec).unwrap();
        let t2 = generate_phantom(d2.path(), &spec).unwrap();
        assert_eq!(serde_json::to_string(&t1).unwrap(), serde_json::to_string(&t2).unwrap());
        for file in ["level_0.png", "level_1.png", "level_2.png", "truth.json", "manifest.json"] {
            let a = std::fs::read(d1.path().join(file)).unwrap();
            let b = std::fs::read(d2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical seeds");
        }
    }

    #[test]
    fn phantom_truth_inside_slide_and_separated() {
        let dir = tempfile::tempdir().unwrap();
        let truth = tiny_phantom(dir.path(), 9, 8);
        assert_eq!(truth.circles.len(), 8);
        for c in &truth.circles {
            assert!(c.cx - c.r >= 0.0 && c.cy - c.r >= 0.0);
            assert!(c.cx + c.r <= 512.0 && c.cy + c.r <= 512.0);
        }
        for (i, a) in truth.circles.iter().enumerate() {
            for b in truth.circles.iter().skip(i + 1) {
                let d = (a.cx - b.cx).hypot(a.cy - b.cy);
                assert!(d > 2.5 * 30.0, "circles {i} too close: {d}");
            }
        }
    }

    #[test]
    fn phantom_class_mix_matches_seeded_draw() {
        // With a heavily skewed mix every circle comes out non-glomerular.
        let dir = tempfile::tempdir().unwrap();
        let mut spec = PhantomSpec::new(13, 1024, 1024, 6);
        spec.radius_range = (20.0, 30.0);
        spec.class_mix = ClassMix(vec![(GlomClass::NonGlomerular, 1.0)]);
        let truth = generate_phantom(dir.path(), &spec).unwrap();
        assert!(truth.circles.iter().all(|c| c.class == GlomClass::NonGlomerular));
    }

    #[test]
    fn placement_failure_reports_error() {
        let dir = tempfile::tempdir().unwrap();
        // Far too many circles for the area given the separation rule.
        let mut spec = PhantomSpec::new(1, 256, 256, 50);
        spec.radius_range = (20.0, 30.0);
        assert!(matches!(
            generate_phantom(dir.path(), &spec),
            Err(WsiError::Placement { .. })
        ));
    }

    #[test]
    fn intensity_bands_decode() {
        for class in GlomClass::ALL {
            assert_eq!(class_from_intensity(class_intensity(class) as f64), class);
        }
    }
}
