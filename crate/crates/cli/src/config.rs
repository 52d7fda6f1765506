use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tashr_core::evaluator::MatchOptions;
use tashr_core::synthgen::GeneratorConfig;
use tashr_core::trainer::TrainConfig;
use tashr_core::{Error, Result};

/// Environment variable naming a directory for recorded OCR responses.
pub const OCR_CACHE_ENV: &str = "TASHR_OCR_CACHE";
/// Written into every output directory.
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Command line of the text spotter; the image path is appended.
    pub ocr_command: Option<String>,
    pub ocr_cache: Option<PathBuf>,
    pub iou_thresh: f64,
    pub case_sensitive: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let m = MatchOptions::default();
        Self {
            ocr_command: None,
            ocr_cache: None,
            iou_thresh: m.iou_thresh,
            case_sensitive: m.case_sensitive,
        }
    }
}

impl EvaluationConfig {
    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            iou_thresh: self.iou_thresh,
            case_sensitive: self.case_sensitive,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        log::info!("resolved configuration written to {}", path.display());
        Ok(())
    }
}
