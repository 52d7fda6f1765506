//! Clean text images: loading a user corpus, or rendering procedural pages.
//!
//! A corpus directory holds `<name>.png` images, each with a `<name>.json`
//! sidecar `{"boxes": [[x, y, w, h], ...], "transcriptions": [...]}`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{self, GLYPH_H, GLYPH_W};
use crate::error::{Error, Result};
use crate::imaging::{load_image, BoxRect, ImageRgb, TextAnnotation};

/// A clean text image with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanSource {
    pub name: String,
    pub image: ImageRgb,
    pub annotation: TextAnnotation,
}

/// Loads every `*.png` with a JSON sidecar from `dir`, sorted by file name.
pub fn load_clean_corpus(dir: impl AsRef<Path>) -> Result<Vec<CleanSource>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut pngs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    pngs.sort();
    pngs.into_iter()
        .map(|path| {
            let sidecar = path.with_extension("json");
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let annotation: TextAnnotation = serde_json::from_str(&text).map_err(|source| Error::Json {
                path: sidecar.clone(),
                source,
            })?;
            let image = load_image(&path)?;
            annotation.validate(image.height(), image.width())?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(CleanSource {
                name,
                image,
                annotation,
            })
        })
        .collect()
}

/// Writes a corpus in the layout [`load_clean_corpus`] reads.
pub fn save_clean_corpus(dir: impl AsRef<Path>, sources: &[CleanSource]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in sources {
        crate::imaging::save_image(&s.image, dir.join(format!("{}.png", s.name)))?;
        let sidecar = dir.join(format!("{}.json", s.name));
        let json = serde_json::to_string_pretty(&s.annotation).expect("annotation serializes");
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

/// Renders a page of block-letter words on a light background.
///
/// Backgrounds keep every channel at or below 0.88 so highlights have
/// headroom before clipping. Ink stays at or above 0.58 in every channel, so
/// any stroke pixel lifted past the mask threshold also passes the
/// brightness gate of mask extraction.
pub fn synthetic_page(seed: u64, size: usize) -> CleanSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.70..=0.88));
    let ink_level = rng.gen_range(0.60..=0.64);
    let ink: [f32; 3] = std::array::from_fn(|_| ink_level + rng.gen_range(-0.02..=0.02));
    let mut image = ImageRgb::filled(size, size, bg);
    let scale = (size / 128).max(1);
    let advance = (GLYPH_W + 1) * scale;
    let line_h = (GLYPH_H + 4) * scale;
    let margin = 4 * scale;
    let alphabet: Vec<char> = font::ALPHABET.chars().collect();
    let mut boxes = Vec::new();
    let mut words = Vec::new();
    let mut y = margin + rng.gen_range(0..=line_h);
    while y + GLYPH_H * scale + margin <= size {
        let mut x = margin + rng.gen_range(0..=2 * advance);
        loop {
            let len = rng.gen_range(2..=6);
            let word_w = len * advance - scale;
            if x + word_w + margin > size {
                break;
            }
            let word: String = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
            for (i, ch) in word.chars().enumerate() {
                let rows = font::glyph(ch).expect("alphabet glyph");
                let gx = x + i * advance;
                for r in 0..GLYPH_H {
                    for col in 0..GLYPH_W {
                        if !font::is_on(&rows, r, col) {
                            continue;
                        }
                        for dy in 0..scale {
                            for dx in 0..scale {
                                for (c, &v) in ink.iter().enumerate() {
                                    image.set(c, y + r * scale + dy, gx + col * scale + dx, v);
                                }
                            }
                        }
                    }
                }
            }
            let pad = scale as f64;
            let bx = BoxRect::new(
                (x as f64 - pad).max(0.0),
                (y as f64 - pad).max(0.0),
                word_w as f64 + 2.0 * pad,
                (GLYPH_H * scale) as f64 + 2.0 * pad,
            );
            boxes.push(bx);
            words.push(word);
            x += word_w + rng.gen_range(2..=4) * advance;
        }
        y += line_h + rng.gen_range(0..=2) * line_h;
    }
    let annotation = TextAnnotation::new(boxes, words).expect("parallel lists");
    CleanSource {
        name: format!("page{seed:05}"),
        image,
        annotation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pages_are_annotated_and_deterministic() {
        for size in [64, 128, 256] {
            let a = synthetic_page(9, size);
            let b = synthetic_page(9, size);
            assert_eq!(a, b);
            assert!(!a.annotation.is_empty());
            a.annotation.validate(size, size).unwrap();
            assert!(a.image.planar().iter().all(|&v| v <= 0.88 + 1e-6));
        }
        assert_ne!(synthetic_page(1, 128).image, synthetic_page(2, 128).image);
    }
}
