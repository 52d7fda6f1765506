//! Image quality and end-to-end text spotting measurements.

mod matching;
mod metrics;
mod ocr;

pub use matching::{eligibility, f_measure, match_and_score, texts_match, MatchCounts, MatchOptions};
pub use metrics::{gaussian_taps, psnr, ssim, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use ocr::{parse_response, render_response, sha256_hex, CachedOcr, CommandOcr, MockOcr, OcrEngine, OcrResult};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::load_image;
use crate::synthgen::DatasetManifest;

/// Which images are scored against the clean references.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    /// `<dir>/<id>.png` for every manifest entry.
    Directory(PathBuf),
    /// The unprocessed highlight inputs, as a baseline.
    Highlights,
}

impl ImageSource {
    pub fn path_for(&self, manifest: &DatasetManifest, entry: &crate::synthgen::ManifestEntry) -> PathBuf {
        match self {
            ImageSource::Directory(dir) => dir.join(format!("{}.png", entry.id)),
            ImageSource::Highlights => manifest.resolve(&entry.highlight_path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub method: String,
    pub dataset: String,
    pub ocr_engine: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Absent when the OCR engine failed on this image.
    pub counts: Option<MatchCounts>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub ocr_error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub counts: MatchCounts,
    pub recall: f64,
    pub precision: f64,
    pub f_measure: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Images that entered the aggregates.
    pub scored: usize,
    /// Images excluded because the OCR engine failed on them.
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ImageRow>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Corpus totals from per-image rows, folded in id order.
pub fn aggregate(rows: &[ImageRow]) -> Aggregates {
    let mut counts = MatchCounts::default();
    let (mut psnr_sum, mut ssim_sum, mut scored, mut failed) = (0.0, 0.0, 0usize, 0usize);
    for row in rows {
        match row.counts {
            Some(c) => {
                counts.add(c);
                psnr_sum += row.psnr_db;
                ssim_sum += row.ssim;
                scored += 1;
            }
            None => failed += 1,
        }
    }
    let mean = |s: f64| if scored == 0 { 0.0 } else { s / scored as f64 };
    Aggregates {
        counts,
        recall: counts.recall(),
        precision: counts.precision(),
        f_measure: counts.f_measure(),
        mean_psnr: mean(psnr_sum),
        mean_ssim: mean(ssim_sum),
        scored,
        failed,
    }
}

/// Scores every manifest entry. A missing image is an error; an OCR
/// failure marks just that image as failed.
pub fn evaluate_dataset(
    manifest: &DatasetManifest,
    source: &ImageSource,
    ocr: &dyn OcrEngine,
    options: &MatchOptions,
    metadata: ReportMetadata,
) -> Result<EvalReport> {
    let mut entries: Vec<_> = manifest.entries.iter().collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = source.path_for(manifest, entry);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let output = load_image(&path)?;
        let clean = load_image(manifest.resolve(&entry.clean_path))?;
        let psnr_db = psnr(&output, &clean, 1.0)?;
        let ssim_v = ssim(&output, &clean)?;
        let row = match ocr.recognize(&path) {
            Ok(pred) => {
                let c = match_and_score(&pred, &entry.annotation, options);
                ImageRow {
                    id: entry.id.clone(),
                    psnr_db,
                    ssim: ssim_v,
                    counts: Some(c),
                    recall: Some(c.recall()),
                    precision: Some(c.precision()),
                    ocr_error: None,
                }
            }
            Err(e) => {
                log::warn!("{}: OCR failed: {e}", entry.id);
                ImageRow {
                    id: entry.id.clone(),
                    psnr_db,
                    ssim: ssim_v,
                    counts: None,
                    recall: None,
                    precision: None,
                    ocr_error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let aggregates = aggregate(&rows);
    Ok(EvalReport {
        metadata,
        rows,
        aggregates,
    })
}

fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// One row per report: method, then Recall, Precision, F-measure, PSNR,
/// SSIM with ratios in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Method", "Recall", "Precision", "F-measure", "PSNR", "SSIM"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let a = &r.aggregates;
        rows.push(vec![
            r.metadata.method.clone(),
            percent(a.recall),
            percent(a.precision),
            percent(a.f_measure),
            format!("{:.2}", a.mean_psnr),
            percent(a.mean_ssim),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}
