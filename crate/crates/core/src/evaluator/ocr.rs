//! Text spotting engines: an external command, a content-addressed cache in
//! front of any engine, and an in-process mock.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{BoxRect, TextAnnotation};

/// Detected words as parallel lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OcrResult {
    pub boxes: Vec<BoxRect>,
    pub texts: Vec<String>,
    pub confidences: Vec<f64>,
}

impl OcrResult {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Every ground-truth word, with confidence 1.
    pub fn from_annotation(ann: &TextAnnotation) -> Self {
        Self {
            boxes: ann.boxes.clone(),
            texts: ann.transcriptions.clone(),
            confidences: vec![1.0; ann.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.texts.len() != self.boxes.len() || self.confidences.len() != self.boxes.len() {
            return Err(Error::Ocr("result lists differ in length".into()));
        }
        if let Some(c) = self.confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Ocr(format!("confidence {c} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WireWord {
    #[serde(rename = "box")]
    bbox: BoxRect,
    text: String,
    confidence: f64,
}

/// The engine's stdout document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WireResponse {
    results: Vec<WireWord>,
}

pub fn parse_response(json: &str) -> Result<OcrResult> {
    let wire: WireResponse = serde_json::from_str(json).map_err(|e| Error::Ocr(format!("bad response: {e}")))?;
    let mut out = OcrResult::default();
    for w in wire.results {
        out.boxes.push(w.bbox);
        out.texts.push(w.text);
        out.confidences.push(w.confidence);
    }
    out.validate()?;
    Ok(out)
}

pub fn render_response(result: &OcrResult) -> String {
    let wire = WireResponse {
        results: result
            .boxes
            .iter()
            .zip(&result.texts)
            .zip(&result.confidences)
            .map(|((b, t), c)| WireWord {
                bbox: *b,
                text: t.clone(),
                confidence: *c,
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("response serializes")
}

pub trait OcrEngine {
    /// Stable identifier, part of cache keys and reports.
    fn id(&self) -> String;
    fn recognize(&self, image: &Path) -> Result<OcrResult>;
}

/// Runs `program args... <image>` and reads one JSON document from stdout.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOcr {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandOcr {
    /// Splits a command line on whitespace.
    pub fn from_command_line(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty OCR command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }
}

impl OcrEngine for CommandOcr {
    fn id(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn recognize(&self, image: &Path) -> Result<OcrResult> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(image)
            .output()
            .map_err(|e| Error::Ocr(format!("{}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::Ocr(format!(
                "{} exited with {} on {}: {}",
                self.program,
                out.status,
                image.display(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        parse_response(&String::from_utf8_lossy(&out.stdout))
    }
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Answers from `dir/<hash>.json` when present, else asks `inner` and records
/// the answer. The hash covers the engine id and the image file bytes.
pub struct CachedOcr<E> {
    pub inner: E,
    pub dir: PathBuf,
}

impl<E: OcrEngine> CachedOcr<E> {
    pub fn new(inner: E, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }

    pub fn key(&self, image: &Path) -> Result<String> {
        let mut bytes = self.inner.id().into_bytes();
        bytes.push(0);
        bytes.extend(std::fs::read(image).map_err(|e| Error::io(image, e))?);
        Ok(sha256_hex(&bytes))
    }
}

impl<E: OcrEngine> OcrEngine for CachedOcr<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn recognize(&self, image: &Path) -> Result<OcrResult> {
        let path = self.dir.join(format!("{}.json", self.key(image)?));
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return parse_response(&text);
        }
        let result = self.inner.recognize(image)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        std::fs::write(&path, render_response(&result)).map_err(|e| Error::io(&path, e))?;
        Ok(result)
    }
}

/// In-process engine backed by a closure.
pub struct MockOcr<F> {
    pub name: String,
    pub respond: F,
}

impl<F: Fn(&Path) -> Result<OcrResult>> MockOcr<F> {
    pub fn new(name: impl Into<String>, respond: F) -> Self {
        Self {
            name: name.into(),
            respond,
        }
    }
}

impl<F: Fn(&Path) -> Result<OcrResult>> OcrEngine for MockOcr<F> {
    fn id(&self) -> String {
        format!("mock:{}", self.name)
    }

    fn recognize(&self, image: &Path) -> Result<OcrResult> {
        (self.respond)(image)
    }
}

impl<E: OcrEngine + ?Sized> OcrEngine for Box<E> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn recognize(&self, image: &Path) -> Result<OcrResult> {
        (**self).recognize(image)
    }
}
