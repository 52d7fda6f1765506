//! Paired synthetic data: a clean text image, its highlighted counterpart and
//! the ground-truth mask.
//!
//! Highlights are composited additively in image space. A shape silhouette
//! `S(p)` is 1 inside the shape and falls off as a Gaussian of the distance
//! to the shape outside it, with width `roughness × shape radius`. The peak
//! added luminance is `intensity / 100`. Wherever `peak · S(p)` does not
//! exceed the mask threshold the silhouette is cut to zero, so every
//! unmasked pixel stays bit-identical to the clean image.

pub mod corpus;
pub mod dataset;
pub mod font;

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, MaskMap, TextAnnotation};

pub use corpus::{load_clean_corpus, synthetic_page, CleanSource};
pub use dataset::{generate_dataset, sample_rng, synthesize_triplet, DatasetManifest, GeneratorConfig, ManifestEntry, Split};

pub const ROUGHNESS_RANGE: (f64, f64) = (0.1, 0.3);
pub const INTENSITY_RANGE: (f64, f64) = (40.0, 70.0);
/// Shape radius as a fraction of the shorter image side.
pub const RADIUS_FRACTION: (f64, f64) = (0.05, 0.18);
/// Ring thickness as a fraction of the outer radius.
pub const RING_THICKNESS: (f64, f64) = (0.2, 0.5);
/// Ellipse minor/major ratio.
pub const ELLIPSE_ASPECT: (f64, f64) = (0.4, 1.0);

const CENTER_ATTEMPTS: usize = 64;
const MIN_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HighlightShape {
    Circle { radius: f64 },
    /// Semi-axes before rotation.
    Ellipse { radius_x: f64, radius_y: f64 },
    /// Vertices relative to the center, already rotated.
    Triangle { vertices: [[f64; 2]; 3] },
    Ring { inner_radius: f64, outer_radius: f64 },
}

/// Parametric description of one synthetic highlight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighlightSpec {
    pub shape: HighlightShape,
    /// `(x, y)` in pixels.
    pub center: [f64; 2],
    pub roughness: f64,
    pub intensity: f64,
    pub rotation: f64,
}

impl HighlightShape {
    pub fn max_radius(&self) -> f64 {
        match self {
            HighlightShape::Circle { radius } => *radius,
            HighlightShape::Ellipse { radius_x, radius_y } => radius_x.max(*radius_y),
            HighlightShape::Triangle { vertices } => vertices
                .iter()
                .map(|[x, y]| x.hypot(*y))
                .fold(0.0, f64::max),
            HighlightShape::Ring { outer_radius, .. } => *outer_radius,
        }
    }

    /// Distance from a center-relative point to the shape; 0 inside.
    fn outside_distance(&self, px: f64, py: f64, rotation: f64) -> f64 {
        match self {
            HighlightShape::Circle { radius } => (px.hypot(py) - radius).max(0.0),
            HighlightShape::Ellipse { radius_x, radius_y } => {
                let (s, c) = rotation.sin_cos();
                let (x, y) = (c * px + s * py, -s * px + c * py);
                let rho = ((x / radius_x).powi(2) + (y / radius_y).powi(2)).sqrt();
                if rho <= 1.0 {
                    0.0
                } else {
                    x.hypot(y) * (1.0 - 1.0 / rho)
                }
            }
            HighlightShape::Triangle { vertices } => triangle_distance(vertices, px, py),
            HighlightShape::Ring {
                inner_radius,
                outer_radius,
            } => {
                let r = px.hypot(py);
                (inner_radius - r).max(r - outer_radius).max(0.0)
            }
        }
    }
}

fn triangle_distance(v: &[[f64; 2]; 3], px: f64, py: f64) -> f64 {
    let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
    let s = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
    if s.iter().all(|&d| d >= 0.0) || s.iter().all(|&d| d <= 0.0) {
        return 0.0;
    }
    (0..3)
        .map(|i| segment_distance(v[i], v[(i + 1) % 3], px, py))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(a: [f64; 2], b: [f64; 2], px: f64, py: f64) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (px - a[0] - t * dx).hypot(py - a[1] - t * dy)
}

impl HighlightSpec {
    /// Peak added luminance, `intensity / 100`.
    pub fn peak(&self) -> f64 {
        self.intensity / 100.0
    }

    /// Gaussian falloff width outside the shape.
    pub fn falloff_sigma(&self) -> f64 {
        self.roughness * self.shape.max_radius()
    }

    /// Untruncated silhouette at pixel-space point `(x, y)`, in `[0, 1]`.
    pub fn silhouette(&self, x: f64, y: f64) -> f64 {
        let d = self
            .shape
            .outside_distance(x - self.center[0], y - self.center[1], self.rotation);
        if d == 0.0 {
            return 1.0;
        }
        let sigma = self.falloff_sigma();
        if sigma <= 0.0 {
            return 0.0;
        }
        (-(d * d) / (2.0 * sigma * sigma)).exp()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let r = self.shape.max_radius();
        let [cx, cy] = self.center;
        if !(ROUGHNESS_RANGE.0..=ROUGHNESS_RANGE.1).contains(&self.roughness) {
            return Err(Error::GeometryOutOfBounds(format!(
                "roughness {} outside {ROUGHNESS_RANGE:?}",
                self.roughness
            )));
        }
        if !(INTENSITY_RANGE.0..=INTENSITY_RANGE.1).contains(&self.intensity) {
            return Err(Error::GeometryOutOfBounds(format!(
                "intensity {} outside {INTENSITY_RANGE:?}",
                self.intensity
            )));
        }
        if !(r > 0.0 && cx - r >= 0.0 && cy - r >= 0.0 && cx + r <= width as f64 && cy + r <= height as f64) {
            return Err(Error::GeometryOutOfBounds(format!(
                "shape of radius {r:.2} at ({cx:.2}, {cy:.2}) does not fit {width}x{height}"
            )));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    rng.gen_range(range.0..=range.1)
}

/// Draws a highlight centred inside a uniformly chosen text box.
pub fn sample_spec<R: Rng + ?Sized>(
    rng: &mut R,
    annotation: &TextAnnotation,
    height: usize,
    width: usize,
) -> Result<HighlightSpec> {
    if annotation.is_empty() {
        return Err(Error::EmptyAnnotation);
    }
    for _ in 0..CENTER_ATTEMPTS {
        let b = annotation.boxes[rng.gen_range(0..annotation.len())];
        let cx = b.x + rng.gen::<f64>() * b.w;
        let cy = b.y + rng.gen::<f64>() * b.h;
        if let Some(spec) = spec_at(rng, [cx, cy], height, width) {
            return Ok(spec);
        }
    }
    Err(Error::GeometryOutOfBounds(
        "no text box admits a highlight that fits the image".into(),
    ))
}

/// Draws a highlight with its center uniform over the image; the explicit
/// fallback for samples without text boxes.
pub fn sample_spec_uniform<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Result<HighlightSpec> {
    for _ in 0..CENTER_ATTEMPTS {
        let center = [rng.gen::<f64>() * width as f64, rng.gen::<f64>() * height as f64];
        if let Some(spec) = spec_at(rng, center, height, width) {
            return Ok(spec);
        }
    }
    Err(Error::GeometryOutOfBounds(format!(
        "{width}x{height} image too small for a highlight"
    )))
}

fn spec_at<R: Rng + ?Sized>(rng: &mut R, center: [f64; 2], height: usize, width: usize) -> Option<HighlightSpec> {
    let [cx, cy] = center;
    let border = cx.min(cy).min(width as f64 - cx).min(height as f64 - cy);
    let short = height.min(width) as f64;
    let hi = (RADIUS_FRACTION.1 * short).min(border);
    let lo = (RADIUS_FRACTION.0 * short).min(hi);
    if hi < MIN_RADIUS {
        return None;
    }
    let radius = uniform(rng, (lo.max(MIN_RADIUS), hi));
    let roughness = uniform(rng, ROUGHNESS_RANGE);
    let intensity = uniform(rng, INTENSITY_RANGE);
    let rotation = rng.gen::<f64>() * TAU;
    let shape = match rng.gen_range(0..4) {
        0 => HighlightShape::Circle { radius },
        1 => HighlightShape::Ellipse {
            radius_x: radius,
            radius_y: radius * uniform(rng, ELLIPSE_ASPECT),
        },
        2 => {
            let mut vertices = [[0.0; 2]; 3];
            for (k, v) in vertices.iter_mut().enumerate() {
                let angle = rotation + k as f64 * TAU / 3.0 + rng.gen_range(-0.3..=0.3);
                let r = if k == 0 {
                    radius
                } else {
                    radius * rng.gen_range(0.7..=1.0)
                };
                *v = [r * angle.cos(), r * angle.sin()];
            }
            HighlightShape::Triangle { vertices }
        }
        _ => HighlightShape::Ring {
            outer_radius: radius,
            inner_radius: radius * (1.0 - uniform(rng, RING_THICKNESS)),
        },
    };
    Some(HighlightSpec {
        shape,
        center,
        roughness,
        intensity,
        rotation,
    })
}

/// Composites `spec` onto `clean`; returns the highlight image and its mask.
pub fn render_highlight(clean: &ImageRgb, spec: &HighlightSpec, mask_threshold: f32) -> Result<(ImageRgb, MaskMap)> {
    spec.validate(clean.height(), clean.width())?;
    Ok(render_with_peak(clean, spec, spec.peak(), mask_threshold))
}

/// [`render_highlight`] with an explicit peak luminance, bypassing the
/// intensity range check.
pub fn render_with_peak(clean: &ImageRgb, spec: &HighlightSpec, peak: f64, mask_threshold: f32) -> (ImageRgb, MaskMap) {
    let (h, w) = clean.dims();
    let mut highlight = clean.clone();
    let mut mask = MaskMap::zeros(h, w);
    let threshold = mask_threshold as f64;
    if peak <= threshold {
        return (highlight, mask);
    }
    let sigma = spec.falloff_sigma();
    let reach = spec.shape.max_radius() + sigma * (2.0 * (peak / threshold).ln()).sqrt() + 1.0;
    let [cx, cy] = spec.center;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w);
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let added = peak * spec.silhouette(x as f64 + 0.5, y as f64 + 0.5);
            if added <= threshold {
                continue;
            }
            for c in 0..3 {
                let v = clean.get(c, y, x) + added as f32;
                highlight.set(c, y, x, v);
            }
            mask.set(y, x, 1.0);
        }
    }
    (highlight, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{BoxRect, DEFAULT_T_DIFF};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn circle(radius: f64, center: [f64; 2]) -> HighlightSpec {
        HighlightSpec {
            shape: HighlightShape::Circle { radius },
            center,
            roughness: 0.2,
            intensity: 50.0,
            rotation: 0.0,
        }
    }

    fn whole_image(size: usize) -> TextAnnotation {
        TextAnnotation::new(vec![BoxRect::new(0.0, 0.0, size as f64, size as f64)], vec!["X".into()]).unwrap()
    }

    #[test]
    fn circle_center_is_clean_plus_peak() {
        let clean = ImageRgb::filled(64, 64, [0.3; 3]);
        let (hl, mask) = render_with_peak(&clean, &circle(10.0, [32.0, 32.0]), 0.5, DEFAULT_T_DIFF);
        for c in 0..3 {
            assert!((hl.get(c, 32, 32) - 0.8).abs() < 1e-6);
        }
        assert_eq!(mask.get(32, 32), 1.0);
        assert_eq!(mask.get(0, 0), 0.0);
    }

    #[test]
    fn zero_peak_is_identity() {
        let clean = ImageRgb::from_fn(32, 32, |c, y, x| (c + y + x) as f32 / 70.0);
        let (hl, mask) = render_with_peak(&clean, &circle(8.0, [16.0, 16.0]), 0.0, DEFAULT_T_DIFF);
        assert_eq!(hl, clean);
        assert_eq!(mask.count_on(), 0);
    }

    #[test]
    fn ring_has_a_hole() {
        let spec = HighlightSpec {
            shape: HighlightShape::Ring {
                inner_radius: 16.0,
                outer_radius: 20.0,
            },
            center: [32.0, 32.0],
            roughness: 0.1,
            intensity: 60.0,
            rotation: 0.0,
        };
        // the analytic silhouette at the center: exp(-16² / (2·2²))
        assert!(spec.silhouette(32.0, 32.0) < 1e-10);
        let clean = ImageRgb::filled(64, 64, [0.4; 3]);
        let (_, mask) = render_highlight(&clean, &spec, DEFAULT_T_DIFF).unwrap();
        assert_eq!(mask.get(32, 32), 0.0);
        assert_eq!(mask.get(32, 32 + 18), 1.0);
    }

    #[test]
    fn unmasked_pixels_are_untouched() {
        let clean = ImageRgb::from_fn(64, 64, |c, y, x| 0.2 + ((c * 7 + y * 3 + x) % 11) as f32 / 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let spec = sample_spec(&mut rng, &whole_image(64), 64, 64).unwrap();
            let (hl, mask) = render_highlight(&clean, &spec, DEFAULT_T_DIFF).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    for c in 0..3 {
                        if mask.get(y, x) == 0.0 {
                            assert_eq!(hl.get(c, y, x), clean.get(c, y, x));
                        } else {
                            assert!(hl.get(c, y, x) >= clean.get(c, y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_geometry_is_rejected() {
        let clean = ImageRgb::filled(32, 32, [0.5; 3]);
        assert!(matches!(
            render_highlight(&clean, &circle(10.0, [4.0, 16.0]), DEFAULT_T_DIFF),
            Err(Error::GeometryOutOfBounds(_))
        ));
    }

    #[test]
    fn empty_annotation_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_spec(&mut rng, &TextAnnotation::default(), 64, 64),
            Err(Error::EmptyAnnotation)
        ));
        assert!(sample_spec_uniform(&mut rng, 64, 64).is_ok());
    }

    #[test]
    fn centers_land_in_boxes() {
        let ann = TextAnnotation::new(
            vec![BoxRect::new(10.0, 20.0, 30.0, 8.0), BoxRect::new(70.0, 90.0, 20.0, 10.0)],
            vec!["A".into(), "B".into()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let spec = sample_spec(&mut rng, &ann, 128, 128).unwrap();
            let [x, y] = spec.center;
            assert!(ann.boxes.iter().any(|b| x >= b.x && x <= b.x + b.w && y >= b.y && y <= b.y + b.h));
            spec.validate(128, 128).unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_spec(&mut ChaCha8Rng::seed_from_u64(42), &whole_image(128), 128, 128).unwrap();
        let b = sample_spec(&mut ChaCha8Rng::seed_from_u64(42), &whole_image(128), 128, 128).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roughness_is_uniform_on_its_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ann = whole_image(256);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_spec(&mut rng, &ann, 256, 256).unwrap().roughness)
            .collect();
        let min = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(min >= 0.1 && max <= 0.3);
        assert!((mean - 0.2).abs() <= 0.01, "mean {mean}");
    }
}
