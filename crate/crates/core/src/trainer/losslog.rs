//! Append-only CSV of per-step losses.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const LOSS_LOG_HEADER: &str = "step,l_netd,l_pixel,l_feature,l_gan_g,l_text,total,l_gan_d,wall_time";

pub struct LossLog {
    path: PathBuf,
    file: File,
}

impl LossLog {
    /// Opens `path` for appending. Rows for steps after `keep_through` are
    /// dropped first, so a resumed run does not duplicate them.
    pub fn open(path: impl AsRef<Path>, keep_through: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut kept = vec![LOSS_LOG_HEADER.to_string()];
        if path.exists() && keep_through > 0 {
            for row in read_rows(&path)? {
                if row.0 <= keep_through {
                    kept.push(row.1);
                }
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, kept.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, step: u64, losses: &LossBreakdown, wall_time: f64) -> Result<()> {
        let mut line = step.to_string();
        for v in losses.values() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push_str(&format!(",{wall_time:.3}\n"));
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn read_rows(path: &Path) -> Result<Vec<(u64, String)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let step = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Dataset(format!("{}: malformed row {}", path.display(), i + 1)))?;
        rows.push((step, line));
    }
    Ok(rows)
}

/// Parsed rows as `(step, losses)`; wall time is dropped.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(u64, LossBreakdown)>> {
    let path = path.as_ref();
    read_rows(path)?
        .into_iter()
        .map(|(step, line)| {
            let v: Vec<f64> = line
                .split(',')
                .skip(1)
                .take(7)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            if v.len() != 7 {
                return Err(Error::Dataset(format!("{}: short row at step {step}", path.display())));
            }
            Ok((
                step,
                LossBreakdown {
                    l_netd: v[0],
                    l_pixel: v[1],
                    l_feature: v[2],
                    l_gan_g: v[3],
                    l_text: v[4],
                    total: v[5],
                    l_gan_d: v[6],
                },
            ))
        })
        .collect()
}
