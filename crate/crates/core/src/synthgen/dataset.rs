use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_highlight, sample_spec, sample_spec_uniform, CleanSource};
use crate::error::{Error, Result};
use crate::imaging::{
    extract_mask, load_image, load_mask, save_image, save_mask, ImageRgb, SampleTriplet, TextAnnotation,
    DEFAULT_T_BRIGHT, DEFAULT_T_DIFF,
};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub samples_per_clean_image: usize,
    /// Output side length; clean images are resized to `size × size`.
    pub size: usize,
    pub t_diff: f32,
    pub t_bright: f32,
    pub split: Split,
    /// Place highlights uniformly when an image has no text boxes instead
    /// of failing.
    pub uniform_fallback: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples_per_clean_image: 1,
            size: 512,
            t_diff: DEFAULT_T_DIFF,
            t_bright: DEFAULT_T_BRIGHT,
            split: Split::Train,
            uniform_fallback: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Config(format!(
                "generator size {} must be a positive multiple of 8",
                self.size
            )));
        }
        for (name, t) in [("t_diff", self.t_diff), ("t_bright", self.t_bright)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} = {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub highlight_path: PathBuf,
    pub clean_path: PathBuf,
    pub mask_path: PathBuf,
    pub annotation: TextAnnotation,
}

/// On-disk index of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "manifest version {} is not {MANIFEST_VERSION}",
                manifest.version
            )));
        }
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check_unique_ids()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Fails if any referenced file is missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.highlight_path, &e.clean_path, &e.mask_path] {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn load_triplet(&self, entry: &ManifestEntry) -> Result<SampleTriplet> {
        SampleTriplet::new(
            entry.id.clone(),
            load_image(self.resolve(&entry.highlight_path))?,
            load_image(self.resolve(&entry.clean_path))?,
            load_mask(self.resolve(&entry.mask_path))?,
            entry.annotation.clone(),
        )
    }

    pub fn load_all(&self) -> Result<Vec<SampleTriplet>> {
        self.entries.iter().map(|e| self.load_triplet(e)).collect()
    }
}

fn resized(source: &CleanSource, size: usize) -> (ImageRgb, TextAnnotation) {
    let (h, w) = source.image.dims();
    if (h, w) == (size, size) {
        return (source.image.clone(), source.annotation.clone());
    }
    let rgb = image::imageops::resize(
        &source.image.to_rgb8(),
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    let mut ann = source.annotation.scaled(sx, sy);
    for b in &mut ann.boxes {
        b.x = b.x.clamp(0.0, size as f64);
        b.y = b.y.clamp(0.0, size as f64);
        b.w = b.w.min(size as f64 - b.x);
        b.h = b.h.min(size as f64 - b.y);
    }
    (ImageRgb::from_rgb8(&rgb), ann)
}

/// Per-sample random stream, derived from the sample's global index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders one triplet in memory.
pub fn synthesize_triplet(
    config: &GeneratorConfig,
    source: &CleanSource,
    sample: usize,
    index: u64,
) -> Result<SampleTriplet> {
    let (clean, annotation) = resized(source, config.size);
    let mut rng = sample_rng(config.seed, index);
    let spec = match sample_spec(&mut rng, &annotation, config.size, config.size) {
        Err(Error::EmptyAnnotation) if config.uniform_fallback => {
            sample_spec_uniform(&mut rng, config.size, config.size)?
        }
        other => other?,
    };
    let (highlight, mask) = render_highlight(&clean.quantized(), &spec, config.t_diff)?;
    SampleTriplet::new(
        format!("{}-{sample:03}", source.name),
        highlight,
        clean.quantized(),
        mask,
        annotation,
    )
}

/// Writes `samples_per_clean_image` triplets per corpus image under `out_dir`
/// plus `<split>.json`. Returns the manifest.
///
/// On any failure the files written so far are removed again.
pub fn generate_dataset(
    config: &GeneratorConfig,
    corpus: &[CleanSource],
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Dataset("clean corpus is empty".into()));
    }
    let mut names = HashSet::new();
    for s in corpus {
        if !names.insert(s.name.as_str()) {
            return Err(Error::Dataset(format!("duplicate corpus image name {}", s.name)));
        }
    }
    let out_dir = out_dir.as_ref();
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_all(config, corpus, out_dir, &mut written);
    if result.is_err() {
        for p in written.iter().rev() {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn write_all(
    config: &GeneratorConfig,
    corpus: &[CleanSource],
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetManifest> {
    let split = config.split.as_str();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut index = 0u64;
    for source in corpus {
        for sample in 0..config.samples_per_clean_image {
            let triplet = synthesize_triplet(config, source, sample, index)?;
            index += 1;
            let agreement = extract_mask(&triplet.highlight, &triplet.clean, config.t_diff, config.t_bright)?
                .iou(&triplet.mask)?;
            if agreement < 0.95 {
                log::warn!("{}: extracted mask IoU {agreement:.3} vs rendered mask", triplet.id);
            }
            let rel = |kind: &str| PathBuf::from(split).join(kind).join(format!("{}.png", triplet.id));
            let entry = ManifestEntry {
                id: triplet.id.clone(),
                highlight_path: rel("highlight"),
                clean_path: rel("clean"),
                mask_path: rel("mask"),
                annotation: triplet.annotation.clone(),
            };
            let hp = out_dir.join(&entry.highlight_path);
            written.push(hp.clone());
            save_image(&triplet.highlight, hp)?;
            let cp = out_dir.join(&entry.clean_path);
            written.push(cp.clone());
            save_image(&triplet.clean, cp)?;
            let mp = out_dir.join(&entry.mask_path);
            written.push(mp.clone());
            save_mask(&triplet.mask, mp)?;
            entries.push(entry);
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        split: config.split,
        entries,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(format!("{split}.json"));
    written.push(path.clone());
    manifest.save(&path)?;
    Ok(manifest)
}
