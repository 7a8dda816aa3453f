//! Binary masks with PNG I/O and circle rasterization.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use thiserror::Error;

use crate::geometry::{Circle, PatchTransform};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("mask image decode failed: {0}")]
    Image(#[from] image::ImageError),
    #[error("mask I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

/// A binary mask; interior pixels are `true`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask { width, height, data: vec![false; (width * height) as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().copied()
    }

    /// Decode from an 8-bit grayscale image; any value >= 128 is interior.
    pub fn from_gray(img: &GrayImage) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Raw 8-bit plane with 0/255 values, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&b| if b { 255u8 } else { 0 }).collect()
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != (width * height) as usize {
            return None;
        }
        Some(Mask { width, height, data: bytes.iter().map(|&b| b >= 128).collect() })
    }

    pub fn write_png(&self, path: &Path) -> Result<(), MaskError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, ImageFormat::Png)?;
        std::fs::write(path, buf.into_inner())?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self, MaskError> {
        let img = image::open(path)?.into_luma8();
        Ok(Mask::from_gray(&img))
    }
}

/// Rasterize a level-0 circle into the patch grid of a transform.
///
/// A patch pixel is interior iff its center maps to a slide point within
/// the circle radius. This is the reference rasterization used both by the
/// phantom generator and by segmentation evaluation.
pub fn rasterize_circle(transform: &PatchTransform, circle: &Circle) -> Mask {
    Mask::from_fn(transform.out_w, transform.out_h, |x, y| {
        let (sx, sy) = transform.map_to_slide(x as f64 + 0.5, y as f64 + 0.5);
        (sx - circle.cx).hypot(sy - circle.cy) <= circle.r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TransformMode;

    #[test]
    fn png_round_trip() {
        let m = Mask::from_fn(17, 9, |x, y| (x + y) % 3 == 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        m.write_png(&path).unwrap();
        assert_eq!(Mask::read_png(&path).unwrap(), m);
    }

    #[test]
    fn rasterized_disk_area_close_to_analytic() {
        let t = PatchTransform::new(0, 0, 256, 256, 256, 256, TransformMode::BilinearResize, 0.25)
            .unwrap();
        let c = Circle::new(128.0, 128.0, 60.0).unwrap();
        let m = rasterize_circle(&t, &c);
        let area = m.count_set() as f64;
        assert!((area - c.area()).abs() < 2.0 * std::f64::consts::PI * 60.0);
    }

    #[test]
    fn bytes_round_trip() {
        let m = Mask::from_fn(5, 4, |x, _| x % 2 == 0);
        let b = m.to_bytes();
        assert_eq!(Mask::from_bytes(5, 4, &b).unwrap(), m);
        assert!(Mask::from_bytes(5, 5, &b).is_none());
    }
}
