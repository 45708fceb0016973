//! Binary road masks: color-keyed extraction from label images, lane-marking
//! repair by dilation, and tinted overlays for diagnostics.

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One class in a color-coded label image.
///
/// A pixel matches when every channel lies within `tolerance` of the
/// reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorSpec {
    pub r: u8,
    pub g: u8,
    pub b: u8,
    #[serde(default)]
    pub tolerance: u8,
}

impl ColorSpec {
    pub const fn exact(r: u8, g: u8, b: u8) -> Self {
        Self {
            r,
            g,
            b,
            tolerance: 0,
        }
    }

    pub const fn with_tolerance(self, tolerance: u8) -> Self {
        Self { tolerance, ..self }
    }

    pub fn rgb(&self) -> Rgb<u8> {
        Rgb([self.r, self.g, self.b])
    }

    #[inline]
    pub fn matches(&self, px: Rgb<u8>) -> bool {
        let t = self.tolerance;
        px[0].abs_diff(self.r) <= t && px[1].abs_diff(self.g) <= t && px[2].abs_diff(self.b) <= t
    }
}

/// H×W grid over {0, 1}, row-major. 1 marks road.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// True when every 1-pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v ^ 1).collect(),
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        ensure_same_dims(self, other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Nearest-neighbour resize; source index is `floor(dst * src / dst_len)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let rows: Vec<usize> = (0..height).map(|y| y * self.height / height).collect();
        let cols: Vec<usize> = (0..width).map(|x| x * self.width / width).collect();
        let mut data = Vec::with_capacity(height * width);
        for &sy in &rows {
            let row = &self.data[sy * self.width..(sy + 1) * self.width];
            data.extend(cols.iter().map(|&sx| row[sx]));
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    /// Single-channel 8-bit image with 0 for background and 255 for road.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &GrayImage) -> Result<BinaryMask> {
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| match p[0] {
                0 => Ok(0),
                255 => Ok(1),
                v => Err(Error::Domain(format!(
                    "mask image value {v} is neither 0 nor 255"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        BinaryMask::from_vec(h as usize, w as usize, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_image().save(path).map_err(|e| Error::image(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BinaryMask> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        match img {
            DynamicImage::ImageLuma8(g) => BinaryMask::from_image(&g),
            other => Err(Error::Format(format!(
                "{}: expected an 8-bit single-channel mask, found {:?}",
                path.display(),
                other.color()
            ))),
        }
    }
}

fn ensure_same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementShape {
    #[default]
    Square,
    Cross,
    Disk,
}

/// Dilation footprint centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuringElement {
    pub shape: ElementShape,
    pub radius: usize,
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self {
            shape: ElementShape::Square,
            radius: 1,
        }
    }
}

impl StructuringElement {
    pub fn new(shape: ElementShape, radius: usize) -> Result<Self> {
        let elem = Self { shape, radius };
        elem.validate()?;
        Ok(elem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::Parameter(
                "structuring element radius must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, dy: isize, dx: isize) -> bool {
        let r = self.radius as isize;
        match self.shape {
            ElementShape::Square => dy.abs() <= r && dx.abs() <= r,
            ElementShape::Cross => (dy == 0 && dx.abs() <= r) || (dx == 0 && dy.abs() <= r),
            ElementShape::Disk => dy * dy + dx * dx <= r * r,
        }
    }

    /// All (dy, dx) offsets inside the footprint, row-major.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| self.contains(dy, dx))
            .collect()
    }
}

/// Marks every pixel whose color matches `spec` with 1.
pub fn binarize_rgb(label: &RgbImage, spec: &ColorSpec) -> BinaryMask {
    let (w, h) = label.dimensions();
    BinaryMask {
        height: h as usize,
        width: w as usize,
        data: label.pixels().map(|&p| spec.matches(p) as u8).collect(),
    }
}

/// Like [`binarize_rgb`], but rejects anything that is not a 3-channel
/// 8-bit image.
pub fn binarize(label: &DynamicImage, spec: &ColorSpec) -> Result<BinaryMask> {
    match label {
        DynamicImage::ImageRgb8(rgb) => Ok(binarize_rgb(rgb, spec)),
        other => Err(Error::Format(format!(
            "label image must be 8-bit RGB, found {:?}",
            other.color()
        ))),
    }
}

/// Binary dilation; pixels outside the mask count as 0.
pub fn dilate(mask: &BinaryMask, elem: &StructuringElement) -> BinaryMask {
    let (h, w) = mask.dims();
    let offsets = elem.offsets();
    let mut out = BinaryMask::zeros(h, w);
    // Scatter each set pixel over the footprint. Footprints here are
    // symmetric, so this equals the gather definition.
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let ty = y as isize + dy;
                let tx = x as isize + dx;
                if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                    out.set(ty as usize, tx as usize, true);
                }
            }
        }
    }
    out
}

pub fn merge_masks(road: &BinaryMask, lane_dilated: &BinaryMask) -> Result<BinaryMask> {
    road.or(lane_dilated)
}

/// Grows the lane-marking mask and folds it into the road class, closing
/// the thin non-road seams that mis-annotated markings leave behind.
pub fn repair_lane_artifacts(
    road: &BinaryMask,
    lane: &BinaryMask,
    elem: &StructuringElement,
) -> Result<BinaryMask> {
    ensure_same_dims(road, lane)?;
    elem.validate()?;
    merge_masks(road, &dilate(lane, elem))
}

/// Alpha-blends `tint` into `image` wherever `mask` is set.
///
/// Channels are computed as `(1 - alpha) * orig + alpha * tint` and rounded
/// half-up.
pub fn overlay(image: &RgbImage, mask: &BinaryMask, tint: Rgb<u8>, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} is outside [0, 1]")));
    }
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != mask.dims() {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            for c in 0..3 {
                px[c] = blend_channel(px[c], tint[c], alpha);
            }
        }
    }
    Ok(out)
}

#[inline]
fn blend_channel(orig: u8, tint: u8, alpha: f64) -> u8 {
    let v = (1.0 - alpha) * orig as f64 + alpha * tint as f64;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}
