//! Binary shadow images: loading, saving, bounding boxes, boundaries and overlap metrics.
//!
//! Pixel `(x, y)` is column `x` in `0..width` and row `y` in `0..height`; `true` means
//! shadow (black). Pixel `(x, y)` covers `[x, x+1) x [y, y+1)` in continuous coordinates.

use std::ops::Deref;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: width * height,
                actual: mask.len(),
            });
        }
        Ok(Self { width, height, mask })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                mask.push(f(x, y));
            }
        }
        Self { width, height, mask }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Like [`get`](Self::get) but anything outside the frame is background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.mask[y * self.width + x] = v;
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Shadow pixels as `(x, y)` indices, row-major.
    pub fn shadow_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 0 } else { 255 }])
        })
    }

    pub fn from_gray(img: &GrayImage, threshold: f64) -> Self {
        let cut = threshold * 255.0;
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            (img.get_pixel(x as u32, y as u32).0[0] as f64) < cut
        })
    }

    /// Binary P5 PGM with maxval 255.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.mask.iter().map(|&b| if b { 0u8 } else { 255u8 }));
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Save as PGM or PNG depending on the extension (PGM when unknown).
    pub fn save(&self, path: &Path) -> Result<()> {
        match extension(path).as_deref() {
            Some("png") => self.save_png(path),
            _ => self.save_pgm(path),
        }
    }

    /// Copy into a larger canvas with `margin` white pixels on every side.
    pub fn padded(&self, margin: usize) -> Self {
        let (w, h) = (self.width + 2 * margin, self.height + 2 * margin);
        Self::from_fn(w, h, |x, y| {
            x >= margin && y >= margin && self.get_signed((x - margin) as i64, (y - margin) as i64)
        })
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

/// Load any grayscale PGM (P2/P5) or PNG as a mask without validating its content.
pub fn load_mask(path: &Path, threshold: f64) -> Result<BinaryImage> {
    let decode_err = |message: String| Error::ImageDecode {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path)?;
    let format = image::guess_format(&bytes).map_err(|e| decode_err(e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| decode_err(e.to_string()))?;
    Ok(BinaryImage::from_gray(&img.to_luma8(), threshold))
}

/// A validated shadow target: at least `8 x 8` and at least one shadow pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetImage(BinaryImage);

impl TargetImage {
    pub fn new(img: BinaryImage) -> Result<Self> {
        if img.width < MIN_SIDE || img.height < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                width: img.width,
                height: img.height,
            });
        }
        if img.count() == 0 {
            return Err(Error::EmptyShadow {
                path: "<memory>".into(),
                threshold: DEFAULT_THRESHOLD,
            });
        }
        Ok(Self(img))
    }

    pub fn image(&self) -> &BinaryImage {
        &self.0
    }

    pub fn into_inner(self) -> BinaryImage {
        self.0
    }
}

impl Deref for TargetImage {
    type Target = BinaryImage;
    fn deref(&self) -> &BinaryImage {
        &self.0
    }
}

pub fn load_binary_image(path: &Path, threshold: f64) -> Result<TargetImage> {
    let img = load_mask(path, threshold)?;
    TargetImage::new(img).map_err(|e| match e {
        Error::EmptyShadow { .. } => Error::EmptyShadow {
            path: path.to_path_buf(),
            threshold,
        },
        other => other,
    })
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

pub fn shadow_bbox(img: &TargetImage) -> PixelRect {
    let mut rect = PixelRect {
        x0: usize::MAX,
        y0: usize::MAX,
        x1: 0,
        y1: 0,
    };
    for (x, y) in img.shadow_pixels() {
        rect.x0 = rect.x0.min(x);
        rect.y0 = rect.y0.min(y);
        rect.x1 = rect.x1.max(x + 1);
        rect.y1 = rect.y1.max(y + 1);
    }
    rect
}

/// Image area over shadow bounding-box area for one target.
pub fn alpha_of(img: &TargetImage) -> f64 {
    (img.width() * img.height()) as f64 / shadow_bbox(img).area() as f64
}

/// Largest [`alpha_of`] over all targets; weights the rendering loss toward small shadows.
pub fn alpha_factor(images: &[TargetImage]) -> f64 {
    images.iter().map(alpha_of).fold(1.0, f64::max)
}

/// Centres of shadow pixels with at least one non-shadow 4-neighbour.
/// Pixels on the image border always count.
pub fn boundary_points(img: &BinaryImage) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !img.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let interior = img.get_signed(xi - 1, yi)
                && img.get_signed(xi + 1, yi)
                && img.get_signed(xi, yi - 1)
                && img.get_signed(xi, yi + 1);
            if !interior {
                out.push([x as f64 + 0.5, y as f64 + 0.5]);
            }
        }
    }
    out
}

fn overlap(a: &BinaryImage, b: &BinaryImage) -> Result<(usize, usize, usize)> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, na, nb))
}

/// Intersection over union. Two empty masks are identical and score 1.
pub fn iou(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Dice similarity `2|A n B| / (|A| + |B|)`.
pub fn dice(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

const SHARED: Rgb<u8> = Rgb([128, 128, 128]);
const OURS_ONLY: Rgb<u8> = Rgb([40, 110, 220]);
const INPUT_ONLY: Rgb<u8> = Rgb([240, 140, 30]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Tricolor comparison: gray where both are shadow, blue for `ours` only,
/// orange for `input` only.
pub fn overlay(ours: &BinaryImage, input: &BinaryImage) -> Result<RgbImage> {
    if ours.dims() != input.dims() {
        return Err(Error::DimensionMismatch {
            left: ours.dims(),
            right: input.dims(),
        });
    }
    Ok(RgbImage::from_fn(ours.width as u32, ours.height as u32, |x, y| {
        match (ours.get(x as usize, y as usize), input.get(x as usize, y as usize)) {
            (true, true) => SHARED,
            (true, false) => OURS_ONLY,
            (false, true) => INPUT_ONLY,
            (false, false) => BACKGROUND,
        }
    }))
}

pub fn save_overlay(ours: &BinaryImage, input: &BinaryImage, path: &Path) -> Result<()> {
    overlay(ours, input)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Filled disk of the given radius centred in the frame.
pub fn disk(width: usize, height: usize, radius: f64) -> BinaryImage {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    BinaryImage::from_fn(width, height, |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        dx * dx + dy * dy <= radius * radius
    })
}

/// Axis-aligned filled rectangle `[x0, x1) x [y0, y1)`.
pub fn rectangle(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryImage {
    BinaryImage::from_fn(width, height, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}
