//! Checkpoint directory: one safetensors file per network (parameters,
//! optimizer moments, and for the discriminator its spectral vectors) plus
//! `meta.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Tensor};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nets::{ModelBundle, NetsConfig, ParamSet, SpectralState};
use crate::optim::AdamState;
use crate::tensorio::{read_tensors, write_tensors};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILES: [&str; 4] = [
    "detection.safetensors",
    "removal.safetensors",
    "discriminator.safetensors",
    "meta.json",
];

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";
const SPECTRAL_U: &str = "spectral.u.";
const SPECTRAL_V: &str = "spectral.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub nets: NetsConfig,
    /// Update counts of the detection, removal and discriminator optimizers.
    pub optimizer_steps: [u64; 3],
    pub running_total: Option<f64>,
    /// Training settings the checkpoint was produced with, for reference.
    pub train_config: Option<TrainConfig>,
}

impl CheckpointMeta {
    pub fn new<T>(bundle: &ModelBundle<T>, running_total: Option<f64>, train_config: Option<&TrainConfig>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            step: bundle.step,
            nets: bundle.config,
            optimizer_steps: [
                bundle.detection_opt.steps,
                bundle.removal_opt.steps,
                bundle.discriminator_opt.steps,
            ],
            running_total,
            train_config: train_config.cloned(),
        }
    }
}

fn pack<T: Real>(params: &ParamSet<T>, opt: &AdamState<T>) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    for (n, t) in params.iter() {
        out.insert(n.clone(), t.clone());
    }
    for (n, t) in opt.first.iter() {
        out.insert(format!("{FIRST_MOMENT}{n}"), t.clone());
    }
    for (n, t) in opt.second.iter() {
        out.insert(format!("{SECOND_MOMENT}{n}"), t.clone());
    }
    out
}

fn write_dir<T: Real>(dir: &Path, bundle: &ModelBundle<T>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensors(dir.join(CHECKPOINT_FILES[0]), &pack(&bundle.detection, &bundle.detection_opt))?;
    write_tensors(dir.join(CHECKPOINT_FILES[1]), &pack(&bundle.removal, &bundle.removal_opt))?;
    let mut disc = pack(&bundle.discriminator, &bundle.discriminator_opt);
    for (n, (u, v)) in bundle.spectral.iter() {
        disc.insert(format!("{SPECTRAL_U}{n}"), Tensor::new(&[u.len()], u.clone())?);
        disc.insert(format!("{SPECTRAL_V}{n}"), Tensor::new(&[v.len()], v.clone())?);
    }
    write_tensors(dir.join(CHECKPOINT_FILES[2]), &disc)?;
    let meta_path = dir.join(CHECKPOINT_FILES[3]);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

/// Writes the checkpoint next to `dir` and swaps it in, so an interrupted
/// save never destroys the previous checkpoint.
pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, bundle: &ModelBundle<T>, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = sibling(dir, ".tmp");
    let old = sibling(dir, ".old");
    for stale in [&tmp, &old] {
        if stale.exists() {
            std::fs::remove_dir_all(stale).map_err(|e| Error::io(stale, e))?;
        }
    }
    write_dir(&tmp, bundle, meta)?;
    if dir.exists() {
        std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(&tmp, e))?;
    if old.exists() {
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn unpack<T: Real>(
    mut tensors: BTreeMap<String, Tensor<T>>,
    template: &ParamSet<T>,
    what: &str,
) -> Result<(ParamSet<T>, ParamSet<T>, ParamSet<T>, BTreeMap<String, Tensor<T>>)> {
    let mut take = |prefix: &str| {
        let mut set = ParamSet::new();
        for name in template.names() {
            if let Some(t) = tensors.remove(&format!("{prefix}{name}")) {
                set.insert(name.clone(), t);
            }
        }
        set
    };
    let first = take(FIRST_MOMENT);
    let second = take(SECOND_MOMENT);
    let params = take("");
    template.check_layout(&params, what)?;
    template.check_layout(&first, &format!("{what} first moments"))?;
    template.check_layout(&second, &format!("{what} second moments"))?;
    Ok((params, first, second, tensors))
}

/// Loads and validates a checkpoint against the layout its own metadata
/// describes. Nothing is returned unless every tensor fits.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<(ModelBundle<T>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join(CHECKPOINT_FILES[3]);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(meta_path.clone()),
        _ => Error::io(&meta_path, e),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} is not {CHECKPOINT_VERSION}",
            meta.version
        )));
    }
    let template = ModelBundle::<T>::new(meta.nets, 0)?;

    let (detection, d_m, d_v, rest) = unpack(read_tensors(dir.join(CHECKPOINT_FILES[0]))?, &template.detection, "detection")?;
    ensure_consumed(&rest, "detection")?;
    let (removal, r_m, r_v, rest) = unpack(read_tensors(dir.join(CHECKPOINT_FILES[1]))?, &template.removal, "removal")?;
    ensure_consumed(&rest, "removal")?;
    let (discriminator, s_m, s_v, mut rest) = unpack(
        read_tensors(dir.join(CHECKPOINT_FILES[2]))?,
        &template.discriminator,
        "discriminator",
    )?;
    let mut vectors = BTreeMap::new();
    for (name, _) in template.spectral.iter() {
        let u = rest.remove(&format!("{SPECTRAL_U}{name}"));
        let v = rest.remove(&format!("{SPECTRAL_V}{name}"));
        match (u, v) {
            (Some(u), Some(v)) => {
                vectors.insert(name.clone(), (u.into_data(), v.into_data()));
            }
            _ => return Err(Error::Checkpoint(format!("discriminator: missing spectral vectors for {name}"))),
        }
    }
    ensure_consumed(&rest, "discriminator")?;
    let spectral = SpectralState::from_map(vectors);
    spectral.check_layout(&discriminator)?;

    let [sd, sr, ss] = meta.optimizer_steps;
    let bundle = ModelBundle {
        config: meta.nets,
        detection,
        removal,
        discriminator,
        spectral,
        detection_opt: AdamState {
            first: d_m,
            second: d_v,
            steps: sd,
        },
        removal_opt: AdamState {
            first: r_m,
            second: r_v,
            steps: sr,
        },
        discriminator_opt: AdamState {
            first: s_m,
            second: s_v,
            steps: ss,
        },
        step: meta.step,
    };
    if let Some(name) = bundle.first_non_finite() {
        return Err(Error::NonFinite(format!("checkpoint parameter {name}")));
    }
    Ok((bundle, meta))
}

fn ensure_consumed<T>(rest: &BTreeMap<String, Tensor<T>>, what: &str) -> Result<()> {
    match rest.keys().next() {
        Some(extra) => Err(Error::Checkpoint(format!("{what}: unexpected tensor {extra}"))),
        None => Ok(()),
    }
}
