//! `tashr`: generate paired data, train, remove highlights, evaluate, report.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tashr_core::evaluator::{
    evaluate_dataset, render_table, CachedOcr, CommandOcr, EvalReport, ImageSource, OcrEngine, ReportMetadata,
};
use tashr_core::imaging::{load_image, pad_to_multiple, save_image, save_mask, ImageRgb, MaskMap};
use tashr_core::nets::ModelBundle;
use tashr_core::synthgen::{generate_dataset, load_clean_corpus, synthetic_page, DatasetManifest, Split};
use tashr_core::trainer::{load_checkpoint, run_training, RunLayout};
use tashr_core::{Error, ErrorClass, Result};

use config::{PipelineConfig, OCR_CACHE_ENV};

/// Spatial multiple images are padded to before inference.
const REMOVE_MULTIPLE: usize = 64;

#[derive(Parser)]
#[command(name = "tashr", version, about = "Specular highlight removal for text images")]
struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize highlight/clean/mask triplets and a manifest.
    Generate {
        /// Directory of clean PNGs with JSON annotation sidecars.
        #[arg(long, conflicts_with = "synthetic")]
        corpus: Option<PathBuf>,
        /// Render this many procedural text pages instead of reading a corpus.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Train both networks and the discriminator.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Train without the text-related loss.
        #[arg(long)]
        ablate_text_loss: bool,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a checkpoint on images.
    Remove {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted highlight mask as `<name>_mask.png`.
        #[arg(long)]
        dump_mask: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score images against a manifest's clean references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<id>.png` outputs.
        #[arg(long, group = "source")]
        outputs: Option<PathBuf>,
        /// Produce outputs with this checkpoint first.
        #[arg(long, group = "source")]
        checkpoint: Option<PathBuf>,
        /// Score the unprocessed highlight inputs.
        #[arg(long, group = "source")]
        highlights: bool,
        #[arg(long)]
        report: PathBuf,
        /// Row label in rendered tables.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        ocr_command: Option<String>,
        #[arg(long)]
        ocr_cache: Option<PathBuf>,
    },
    /// Render one comparison table from report files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other}; expected train or test")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = PipelineConfig::load(cli.config.as_deref()).and_then(|cfg| run(cfg, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(mut cfg: PipelineConfig, command: Command) -> Result<()> {
    match command {
        Command::Generate {
            corpus,
            synthetic,
            out,
            seed,
            samples,
            size,
            split,
        } => {
            let g = &mut cfg.generator;
            if let Some(v) = seed {
                g.seed = v;
            }
            if let Some(v) = samples {
                g.samples_per_clean_image = v;
            }
            if let Some(v) = size {
                g.size = v;
            }
            if let Some(v) = split {
                g.split = v;
            }
            g.validate()?;
            let sources = match (corpus, synthetic) {
                (Some(dir), _) => load_clean_corpus(dir)?,
                (None, Some(n)) => (0..n as u64).map(|i| synthetic_page(g.seed.wrapping_add(i), g.size)).collect(),
                (None, None) => return Err(Error::Config("generate needs --corpus or --synthetic".into())),
            };
            cfg.write_snapshot(&out)?;
            let manifest = generate_dataset(&cfg.generator, &sources, &out)?;
            println!(
                "{} ({} triplets)",
                out.join(format!("{}.json", manifest.split.as_str())).display(),
                manifest.entries.len()
            );
            Ok(())
        }
        Command::Train {
            manifest,
            out,
            resume,
            ablate_text_loss,
            max_steps,
            seed,
        } => {
            let t = &mut cfg.training;
            if ablate_text_loss {
                t.text_loss_enabled = false;
            }
            if let Some(v) = max_steps {
                t.max_steps = v;
            }
            if let Some(v) = seed {
                t.seed = v;
            }
            t.validate()?;
            let manifest = DatasetManifest::load(&manifest)?;
            manifest.check_files()?;
            let data = manifest.load_all()?;
            cfg.write_snapshot(&out)?;
            let trainer = run_training(&cfg.training, &data, &out, resume)?;
            println!("{}", RunLayout::new(&out).checkpoint.display());
            log::info!("finished at step {}", trainer.step());
            Ok(())
        }
        Command::Remove {
            checkpoint,
            out,
            dump_mask,
            inputs,
        } => {
            let (bundle, _) = load_checkpoint::<f32>(&checkpoint)?;
            cfg.write_snapshot(&out)?;
            for input in inputs {
                let image = load_image(&input)?;
                let (restored, mask) = remove_one(&bundle, &image, &input)?;
                let stem = input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                save_image(&restored, out.join(format!("{stem}.png")))?;
                if dump_mask {
                    save_mask(&mask, out.join(format!("{stem}_mask.png")))?;
                }
            }
            Ok(())
        }
        Command::Evaluate {
            manifest,
            outputs,
            checkpoint,
            highlights,
            report,
            method,
            ocr_command,
            ocr_cache,
        } => {
            let manifest_path = manifest;
            let manifest = DatasetManifest::load(&manifest_path)?;
            let ev = &mut cfg.evaluation;
            if let Some(c) = ocr_command {
                ev.ocr_command = Some(c);
            }
            if let Some(c) = ocr_cache.or_else(|| std::env::var_os(OCR_CACHE_ENV).map(PathBuf::from)) {
                ev.ocr_cache = Some(c);
            }
            let command = ev
                .ocr_command
                .as_deref()
                .ok_or_else(|| Error::Config("no OCR command configured (evaluation.ocr_command or --ocr-command)".into()))?;
            let engine = CommandOcr::from_command_line(command)?;
            let ocr: Box<dyn OcrEngine> = match &ev.ocr_cache {
                Some(dir) => Box::new(CachedOcr::new(engine, dir.clone())),
                None => Box::new(engine),
            };
            let report_dir = report.parent().map(Path::to_path_buf).unwrap_or_default();
            let (source, default_method) = match (outputs, checkpoint, highlights) {
                (Some(dir), _, _) => (ImageSource::Directory(dir), "outputs".to_string()),
                (None, Some(ckpt), _) => {
                    let dir = report_dir.join(format!(
                        "{}_outputs",
                        report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                    ));
                    render_outputs(&ckpt, &manifest, &dir)?;
                    (ImageSource::Directory(dir), ckpt.display().to_string())
                }
                (None, None, true) => (ImageSource::Highlights, "Highlight input".to_string()),
                (None, None, false) => {
                    return Err(Error::Config("evaluate needs --outputs, --checkpoint or --highlights".into()))
                }
            };
            cfg.write_snapshot(&report_dir)?;
            let metadata = ReportMetadata {
                method: method.unwrap_or(default_method),
                dataset: manifest_path.display().to_string(),
                ocr_engine: ocr.id(),
            };
            let result = evaluate_dataset(&manifest, &source, ocr.as_ref(), &cfg.evaluation.match_options(), metadata)?;
            result.save(&report)?;
            if result.aggregates.failed > 0 {
                log::warn!("OCR failed on {} image(s); they are excluded", result.aggregates.failed);
            }
            print!("{}", render_table(std::slice::from_ref(&result)));
            Ok(())
        }
        Command::Report { reports, out } => {
            let loaded = reports.iter().map(EvalReport::load).collect::<Result<Vec<_>>>()?;
            let table = render_table(&loaded);
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| Error::Io { path, source: e })?;
            }
            print!("{table}");
            Ok(())
        }
    }
}

/// Pads reflectively to a multiple of 64, runs both networks, crops back.
fn remove_one(bundle: &ModelBundle<f32>, image: &ImageRgb, name: &Path) -> Result<(ImageRgb, MaskMap)> {
    let (h, w) = image.dims();
    let (ph, pw) = (pad_to_multiple(h, REMOVE_MULTIPLE), pad_to_multiple(w, REMOVE_MULTIPLE));
    if ph + pw > 0 {
        log::warn!(
            "{}: {h}x{w} is not a multiple of {REMOVE_MULTIPLE}; padding reflectively and cropping back",
            name.display()
        );
    }
    let padded = image.reflect_padded(ph, pw);
    let mask = bundle.detect(&[&padded])?.remove(0);
    let restored = bundle.remove(&[&padded], &[&mask])?.remove(0);
    Ok((restored.cropped(h, w), mask.cropped(h, w)))
}

fn render_outputs(checkpoint: &Path, manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let (bundle, _) = load_checkpoint::<f32>(checkpoint)?;
    for entry in &manifest.entries {
        let path = manifest.resolve(&entry.highlight_path);
        let image = load_image(&path)?;
        let (restored, _) = remove_one(&bundle, &image, &path)?;
        save_image(&restored, dir.join(format!("{}.png", entry.id)))?;
    }
    Ok(())
}
