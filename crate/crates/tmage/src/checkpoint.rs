//! Weight archives and training checkpoints.
//!
//! A weight archive is `TMAGEWTS`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header (model configuration plus the ordered
//! tensor names and shapes) and then every tensor as raw little-endian `f32`.
//!
//! A training checkpoint is a directory holding `student.tmw`,
//! `teacher.tmw`, `optimizer.tmw` (Adam moments) and `state.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmage_core::magenet::{Architecture, ModelConfig, WeightSet};
use tmage_core::meanteacher::{Adam, TrainState};
use tmage_core::rng::StreamState;
use tmage_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::io::{ensure_dir, read_json, write_atomic, write_json};

pub const MAGIC: &[u8; 8] = b"TMAGEWTS";
pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_PREFIX: &str = "step-";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, detail: impl Into<String>) -> AppError {
    AppError::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn encode_weights(model: &ModelConfig, weights: &WeightSet<f32>) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        tensors: weights
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * weights.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in weights.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<(ModelConfig, WeightSet<f32>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a weight archive (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + len)
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| AppError::json(path, e))?;
    let mut data = &bytes[20 + len..];
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(corrupt(path, format!("truncated data for {}", e.name)));
        }
        let values = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data = &data[4 * n..];
        names.push(e.name);
        tensors.push(Tensor::from_vec(&e.shape, values));
    }
    if !data.is_empty() {
        return Err(corrupt(path, format!("{} trailing bytes", data.len())));
    }
    Ok((header.model, WeightSet::new(names, tensors)?))
}

pub fn save_weights(path: &Path, model: &ModelConfig, weights: &WeightSet<f32>) -> Result<()> {
    write_atomic(path, &encode_weights(model, weights))
}

/// Loads an archive without checking it against a configuration.
pub fn load_weights(path: &Path) -> Result<(ModelConfig, WeightSet<f32>)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_weights(path, &bytes)
}

/// Loads an archive and checks its fingerprint against `model`.
pub fn load_weights_for(path: &Path, model: &ModelConfig) -> Result<WeightSet<f32>> {
    let (_, w) = load_weights(path)?;
    check_fingerprint(path, model, &w)?;
    Ok(w)
}

pub fn check_fingerprint(path: &Path, model: &ModelConfig, w: &WeightSet<f32>) -> Result<()> {
    let expected = Architecture::new(model)?.fingerprint();
    match expected.diff(&w.fingerprint()) {
        None => Ok(()),
        Some(diff) => Err(AppError::Mismatch {
            path: path.to_path_buf(),
            diff,
        }),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format_version: u32,
    step: u64,
    pretrain_step: u64,
    adam_t: u64,
    pretrain_adam_t: u64,
    rng: StreamState,
    config: RunConfig,
}

fn prefixed(prefix: &str, w: &WeightSet<f32>) -> (Vec<String>, Vec<Tensor<f32>>) {
    (
        w.names().iter().map(|n| format!("{prefix}/{n}")).collect(),
        w.tensors().to_vec(),
    )
}

fn optimizer_set(state: &TrainState) -> Result<WeightSet<f32>> {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, w) in [
        ("adam.m", &state.adam.m),
        ("adam.v", &state.adam.v),
        ("pretrain.m", &state.pretrain_adam.m),
        ("pretrain.v", &state.pretrain_adam.v),
    ] {
        let (n, t) = prefixed(prefix, w);
        names.extend(n);
        tensors.extend(t);
    }
    Ok(WeightSet::new(names, tensors)?)
}

fn split_optimizer(path: &Path, opt: WeightSet<f32>, like: &WeightSet<f32>) -> Result<[WeightSet<f32>; 4]> {
    let k = like.len();
    if opt.len() != 4 * k {
        return Err(corrupt(path, format!("expected {} optimizer tensors, found {}", 4 * k, opt.len())));
    }
    let tensors = opt.tensors();
    let part = |i: usize| -> Result<WeightSet<f32>> {
        let w = WeightSet::new(like.names().to_vec(), tensors[i * k..(i + 1) * k].to_vec())?;
        if let Some(d) = w.fingerprint().diff(&like.fingerprint()) {
            return Err(corrupt(path, format!("optimizer moments do not match the weights: {d}")));
        }
        Ok(w)
    };
    Ok([part(0)?, part(1)?, part(2)?, part(3)?])
}

/// Directory name of the checkpoint taken after `step` training steps.
pub fn checkpoint_name(step: u64) -> String {
    format!("{CHECKPOINT_PREFIX}{step:08}")
}

/// Writes a training checkpoint into `dir`, replacing it atomically.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &RunConfig) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    ensure_dir(parent)?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| AppError::io(&tmp, e))?;
    }
    ensure_dir(&tmp)?;
    save_weights(&tmp.join("student.tmw"), &config.model, &state.student)?;
    save_weights(&tmp.join("teacher.tmw"), &config.model, &state.teacher)?;
    save_weights(&tmp.join("optimizer.tmw"), &config.model, &optimizer_set(state)?)?;
    write_json(
        &tmp.join("state.json"),
        &StateFile {
            format_version: FORMAT_VERSION,
            step: state.step,
            pretrain_step: state.pretrain_step,
            adam_t: state.adam.t,
            pretrain_adam_t: state.pretrain_adam.t,
            rng: state.rng,
            config: config.clone(),
        },
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| AppError::io(dir, e))
}

/// Restores a training checkpoint and the configuration it was taken with.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, RunConfig)> {
    let s: StateFile = read_json(&dir.join("state.json"))?;
    if s.format_version != FORMAT_VERSION {
        return Err(corrupt(dir, format!("unsupported format version {}", s.format_version)));
    }
    let student_path = dir.join("student.tmw");
    let student = load_weights_for(&student_path, &s.config.model)?;
    let teacher = load_weights_for(&dir.join("teacher.tmw"), &s.config.model)?;
    let opt_path = dir.join("optimizer.tmw");
    let (_, opt) = load_weights(&opt_path)?;
    let [m, v, pm, pv] = split_optimizer(&opt_path, opt, &student)?;
    let state = TrainState {
        step: s.step,
        pretrain_step: s.pretrain_step,
        student,
        teacher,
        adam: Adam { t: s.adam_t, m, v },
        pretrain_adam: Adam {
            t: s.pretrain_adam_t,
            m: pm,
            v: pv,
        },
        rng: s.rng,
    };
    Ok((state, s.config))
}

/// The most advanced checkpoint under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root).map_err(|e| AppError::io(root, e))? {
        let path = entry.map_err(|e| AppError::io(root, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix(CHECKPOINT_PREFIX))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if path.join("state.json").is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
