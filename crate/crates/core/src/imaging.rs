//! Raster types, 8-bit PNG I/O and ground-truth mask extraction.
//!
//! Images are held as planar `f32` in `[0, 1]` (channel-major, then rows),
//! which is also the layout the networks consume.

use std::path::Path;

use image::{ColorType, GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default difference threshold for [`extract_mask`].
pub const DEFAULT_T_DIFF: f32 = 25.0 / 255.0;
/// Default brightness threshold for [`extract_mask`].
pub const DEFAULT_T_BRIGHT: f32 = 170.0 / 255.0;
/// Connected highlight regions smaller than this are discarded.
pub const MIN_COMPONENT_AREA: usize = 16;

/// Three-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Single-channel map with values in `[0, 1]`; 1 marks highlight.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// 8-bit quantization with round-half-up.
pub fn quantize8(v: f32) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

pub fn dequantize8(b: u8) -> f32 {
    b as f32 / 255.0
}

impl ImageRgb {
    /// Builds an image from planar data, clamping values into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Config(format!(
                "planar RGB buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        data.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(clamp01(c), height * width));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
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

    /// Planar `[3, H, W]` values.
    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = clamp01(v);
    }

    /// Largest channel value at a pixel.
    pub fn max_channel(&self, y: usize, x: usize) -> f32 {
        (0..3).map(|c| self.get(c, y, x)).fold(0.0, f32::max)
    }

    /// The image after a save/load round trip through 8 bits.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| dequantize8(quantize8(v))).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| quantize8(self.get(c, y, x))))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| dequantize8(img.get_pixel(x as u32, y as u32)[c]))
    }

    /// Extends the bottom and right edges by mirroring (edge pixel not repeated).
    pub fn reflect_padded(&self, bottom: usize, right: usize) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(h + bottom, w + right, |c, y, x| {
            self.get(c, reflect_index(y, h), reflect_index(x, w))
        })
    }

    /// The top-left `height × width` region.
    pub fn cropped(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height.min(self.height), width.min(self.width), |c, y, x| self.get(c, y, x))
    }
}

impl MaskMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Config(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        data.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp01(f(y, x)));
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

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = clamp01(v);
    }

    /// Number of entries at or above one half.
    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Threshold at one half.
    pub fn binarized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Intersection over union of the binarized masks. Two empty masks score 1.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        check_dims((self.height, self.width), (other.height, other.width))?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let (a, b) = (a >= 0.5, b >= 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn cropped(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height.min(self.height), width.min(self.width), |y, x| self.get(y, x))
    }

    pub fn to_luma8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([quantize8(self.get(y as usize, x as usize))])
        })
    }
}

/// Source index for position `i` of a mirror-extended axis of length `n`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Padding that brings `n` up to the next multiple of `multiple`.
pub fn pad_to_multiple(n: usize, multiple: usize) -> usize {
    (multiple - n % multiple) % multiple
}

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoxRect {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoxRect> for [f64; 4] {
    fn from(b: BoxRect) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoxRect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        let inter = ix.max(0.0) * iy.max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn fits_inside(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }
}

/// Text boxes with one transcription each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextAnnotation {
    pub boxes: Vec<BoxRect>,
    pub transcriptions: Vec<String>,
}

impl TextAnnotation {
    pub fn new(boxes: Vec<BoxRect>, transcriptions: Vec<String>) -> Result<Self> {
        let ann = Self {
            boxes,
            transcriptions,
        };
        if ann.boxes.len() != ann.transcriptions.len() {
            return Err(Error::InvalidAnnotation(format!(
                "{} boxes but {} transcriptions",
                ann.boxes.len(),
                ann.transcriptions.len()
            )));
        }
        Ok(ann)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Checks parallel lengths and that every box lies inside the image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.boxes.len() != self.transcriptions.len() {
            return Err(Error::InvalidAnnotation(format!(
                "{} boxes but {} transcriptions",
                self.boxes.len(),
                self.transcriptions.len()
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.fits_inside(height, width)) {
            return Err(Error::InvalidAnnotation(format!(
                "box {b:?} outside {width}x{height} image"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            boxes: self.boxes.iter().map(|b| b.scaled(sx, sy)).collect(),
            transcriptions: self.transcriptions.clone(),
        }
    }
}

/// One paired training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    pub id: String,
    pub highlight: ImageRgb,
    pub clean: ImageRgb,
    pub mask: MaskMap,
    pub annotation: TextAnnotation,
}

impl SampleTriplet {
    pub fn new(
        id: impl Into<String>,
        highlight: ImageRgb,
        clean: ImageRgb,
        mask: MaskMap,
        annotation: TextAnnotation,
    ) -> Result<Self> {
        check_dims(highlight.dims(), clean.dims())?;
        check_dims(highlight.dims(), mask.dims())?;
        Ok(Self {
            id: id.into(),
            highlight,
            clean,
            mask,
            annotation,
        })
    }
}

pub(crate) fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            left_h: a.0,
            left_w: a.1,
            right_h: b.0,
            right_w: b.1,
        });
    }
    Ok(())
}

fn open_dynamic(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn unsupported(path: &Path, color: ColorType, wanted: &str) -> Error {
    let detail = format!("{color:?}, expected {wanted}");
    if color.bytes_per_pixel() / color.channel_count() != 1 {
        Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            detail,
        }
    } else {
        Error::UnsupportedChannels {
            path: path.to_path_buf(),
            detail,
        }
    }
}

/// Reads an 8-bit RGB raster and scales it to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(ImageRgb::from_rgb8(&rgb)),
        other => Err(unsupported(path, other.color(), "8-bit RGB")),
    }
}

/// Reads an 8-bit grayscale mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskMap> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => Ok(MaskMap::from_fn(
            gray.height() as usize,
            gray.width() as usize,
            |y, x| dequantize8(gray.get_pixel(x as u32, y as u32)[0]),
        )),
        other => Err(unsupported(path, other.color(), "8-bit grayscale")),
    }
}

fn save_buffer<P, C>(buf: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
}

/// Writes an 8-bit RGB PNG (round-half-up quantization).
pub fn save_image(img: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    save_buffer(&img.to_rgb8(), path.as_ref())
}

/// Writes an 8-bit grayscale PNG; 255 marks highlight.
pub fn save_mask(mask: &MaskMap, path: impl AsRef<Path>) -> Result<()> {
    save_buffer(&mask.to_luma8(), path.as_ref())
}

/// Ground-truth highlight mask from a highlight/clean pair.
///
/// A pixel is on when the largest per-channel absolute difference exceeds
/// `t_diff` and the largest channel of the highlight image exceeds
/// `t_bright`. 8-connected regions below [`MIN_COMPONENT_AREA`] pixels are
/// then dropped.
pub fn extract_mask(highlight: &ImageRgb, clean: &ImageRgb, t_diff: f32, t_bright: f32) -> Result<MaskMap> {
    check_dims(highlight.dims(), clean.dims())?;
    let (h, w) = highlight.dims();
    let mut on = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let diff = (0..3)
                .map(|c| (highlight.get(c, y, x) - clean.get(c, y, x)).abs())
                .fold(0.0f32, f32::max);
            on[y * w + x] = diff > t_diff && highlight.max_channel(y, x) > t_bright;
        }
    }
    remove_small_components(&mut on, h, w, MIN_COMPONENT_AREA);
    Ok(MaskMap {
        height: h,
        width: w,
        data: on.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    })
}

/// Clears 8-connected `true` regions with fewer than `min_area` pixels.
pub fn remove_small_components(on: &mut [bool], h: usize, w: usize, min_area: usize) {
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            component.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if component.len() < min_area {
            for &i in &component {
                on[i] = false;
            }
        }
    }
}
