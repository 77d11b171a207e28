//! Versioned checkpoint container.
//!
//! A single safetensors file: model parameters under `model.`, optimizer
//! moments under `opt.`, and string metadata holding the format tag, format
//! version, model config, pixel statistics and (for training checkpoints) the
//! resumable training state.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::imaging::PixelNorm;
use crate::model::{ModelConfig, Tracker};

pub const FORMAT: &str = "cycletrack";
pub const VERSION: &str = "1";

const MODEL_PREFIX: &str = "model.";
const OPT_PREFIX: &str = "opt.";

#[derive(Debug)]
pub struct Loaded {
    pub tracker: Tracker,
    /// Optimizer tensors with the `opt.` prefix removed.
    pub optimizer: BTreeMap<String, Tensor>,
    /// Raw training-state JSON, present in training checkpoints.
    pub train_state: Option<String>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes atomically (temporary file, then rename).
pub fn save(
    path: &Path,
    tracker: &Tracker,
    optimizer: &BTreeMap<String, Tensor>,
    train_state: Option<&str>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = tracker
        .store
        .tensors()
        .into_iter()
        .map(|(k, v)| (format!("{MODEL_PREFIX}{k}"), v))
        .collect();
    tensors.extend(optimizer.iter().map(|(k, v)| (format!("{OPT_PREFIX}{k}"), v.clone())));
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(&tracker.config).map_err(|e| ckpt_err(path, e))?,
    );
    meta.insert(
        "pixel_norm".to_string(),
        serde_json::to_string(&tracker.pixel_norm).map_err(|e| ckpt_err(path, e))?,
    );
    meta.insert("dtype".to_string(), format!("{:?}", tracker.store.dtype()));
    if let Some(s) = train_state {
        meta.insert("train_state".to_string(), s.to_string());
    }
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
        .map_err(|e| ckpt_err(path, e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_dtype(s: &str) -> Option<DType> {
    match s {
        "F32" => Some(DType::F32),
        "F64" => Some(DType::F64),
        _ => None,
    }
}

pub fn load(path: &Path, device: &Device) -> Result<Loaded> {
    if !path.is_file() {
        return Err(ckpt_err(path, "no such checkpoint"));
    }
    let bytes = fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("missing metadata `{k}`")));
    if field("format")? != FORMAT {
        return Err(ckpt_err(path, format!("not a {FORMAT} checkpoint")));
    }
    let version = field("version")?;
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let config: ModelConfig = serde_json::from_str(field("model_config")?).map_err(|e| ckpt_err(path, e))?;
    let pixel_norm: PixelNorm = serde_json::from_str(field("pixel_norm")?).map_err(|e| ckpt_err(path, e))?;
    let dtype = parse_dtype(field("dtype")?).ok_or_else(|| ckpt_err(path, "unknown dtype"))?;
    let all = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut params = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (k, v) in all {
        if let Some(name) = k.strip_prefix(MODEL_PREFIX) {
            params.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix(OPT_PREFIX) {
            optimizer.insert(name.to_string(), v);
        }
    }
    let mut tracker = Tracker::new(&config, 0, dtype, device)?;
    if params.len() != tracker.store.len() {
        return Err(ckpt_err(
            path,
            format!("{} parameter tensors, model expects {}", params.len(), tracker.store.len()),
        ));
    }
    tracker.store.load(&params)?;
    tracker.pixel_norm = pixel_norm;
    Ok(Loaded {
        tracker,
        optimizer,
        train_state: meta.get("train_state").cloned(),
    })
}
