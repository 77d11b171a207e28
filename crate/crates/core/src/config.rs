//! Run configuration: defaults, then an optional TOML file, then
//! `section.key=value` overrides.
//!
//! ```toml
//! seed = 7
//! [train]
//! total_epochs = 20
//! [dca]
//! switch_epoch = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::EncoderConfig;
use crate::cycle::{CycleConfig, TrainConfig, TrainSchedule, Variant};
use crate::dca::DcaConfig;
use crate::error::{Error, Result};
use crate::eval::TrackSettings;
use crate::heads::{HeadConfig, LossWeights};
use crate::model::ModelConfig;

/// Environment variable consulted for the seed when no file or flag sets it.
pub const SEED_ENV: &str = "CYCLETRACK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub noise_decoder_zero_init: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            encoder: m.encoder,
            head: m.head,
            noise_decoder_zero_init: m.noise_decoder_zero_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub forward_length: usize,
    pub backward_steps: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub lr_decay_epoch: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub variant: Variant,
    pub checkpoint_every: usize,
    pub keep_epoch_checkpoints: bool,
}

impl TrainSection {
    fn from_schedule(s: &TrainSchedule) -> Self {
        Self {
            total_epochs: s.total_epochs,
            steps_per_epoch: s.steps_per_epoch,
            forward_length: s.forward_length,
            backward_steps: s.backward_steps,
            lr_backbone: s.lr_backbone,
            lr_rest: s.lr_rest,
            lr_decay_epoch: s.lr_decay_epoch,
            weight_decay: s.weight_decay,
            batch_size: s.batch_size,
            variant: Variant::Full,
            checkpoint_every: 0,
            keep_epoch_checkpoints: false,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_schedule(&TrainSchedule::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub cycle: CycleConfig,
    pub loss: LossWeights,
    pub dca: DcaConfig,
    pub eval: TrackSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            cycle: CycleConfig::default(),
            loss: LossWeights::default(),
            dca: DcaConfig {
                switch_epoch: Some(TrainSchedule::default().dca.switch_epoch),
                ..DcaConfig::default()
            },
            eval: TrackSettings::default(),
        }
    }
}

/// Where the configuration comes from, in increasing precedence.
#[derive(Debug, Clone, Default)]
pub struct Sources<'a> {
    pub paper_schedule: bool,
    pub file: Option<&'a Path>,
    /// `section.key=value` strings.
    pub overrides: &'a [String],
    /// Value of the seed environment variable, if any.
    pub env_seed: Option<String>,
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| Error::config("config", e.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let key = key.trim().trim_start_matches("--");
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Best-effort extraction of the key a deserialization error refers to.
fn error_field(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    if let Some(i) = msg.find("in `") {
        let rest = &msg[i + 4..];
        if let Some(j) = rest.find('`') {
            return rest[..j].to_string();
        }
    }
    "config".to_string()
}

/// Deserializes TOML text, mapping failures to a config error that names
/// the offending key where possible.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        Error::config(error_field(&msg), msg.trim().to_string())
    })
}

fn has_key(t: &Table, key: &str) -> bool {
    t.contains_key(key)
}

impl RunConfig {
    pub fn paper_preset() -> Self {
        let paper = TrainSchedule::paper();
        Self {
            train: TrainSection::from_schedule(&paper),
            dca: DcaConfig {
                switch_epoch: Some(paper.dca.switch_epoch),
                ..DcaConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn resolve(src: &Sources<'_>) -> Result<Self> {
        let base = if src.paper_schedule { Self::paper_preset() } else { Self::default() };
        let mut table = to_table(&base)?;
        let mut seed_given = false;
        if let Some(path) = src.file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            let file: Table = parse_toml(&text)?;
            seed_given |= has_key(&file, "seed");
            merge(&mut table, file);
        }
        for o in src.overrides {
            let mut flag = Table::new();
            apply_override(&mut flag, o)?;
            seed_given |= has_key(&flag, "seed");
            merge(&mut table, flag);
        }
        if !seed_given {
            if let Some(raw) = &src.env_seed {
                let seed: u64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
                table.insert("seed".into(), Value::Integer(seed as i64));
            }
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.to_string();
            Error::config(error_field(&msg), msg.trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.model.encoder.clone(),
            head: self.model.head.clone(),
            query_tokens: self.dca.token_length,
            saliency_direction: self.dca.saliency_direction,
            noise_decoder_zero_init: self.model.noise_decoder_zero_init,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        let t = &self.train;
        TrainSchedule {
            total_epochs: t.total_epochs,
            steps_per_epoch: t.steps_per_epoch,
            forward_length: t.forward_length,
            backward_steps: t.backward_steps,
            lr_backbone: t.lr_backbone,
            lr_rest: t.lr_rest,
            lr_decay_epoch: t.lr_decay_epoch,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            dca: self.dca.schedule(t.total_epochs),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule(),
            cycle: self.cycle.clone(),
            loss: self.loss,
            dca: self.dca.clone(),
            variant: self.train.variant,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            keep_epoch_checkpoints: self.train.keep_epoch_checkpoints,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in a signed 64-bit integer"));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.dca.token_length > self.model.encoder.max_context_tokens {
            return Err(Error::config(
                "dca.token_length",
                format!("exceeds model.encoder.max_context_tokens = {}", self.model.encoder.max_context_tokens),
            ));
        }
        if self.dca.token_length > self.model.encoder.search_tokens() {
            return Err(Error::config("dca.token_length", "exceeds the number of search tokens"));
        }
        let e = &self.eval;
        if !(e.search_factor > 1.0 && e.template_factor > 1.0 && e.min_box_px > 0.0) {
            return Err(Error::config("eval", "factors must exceed 1 and min_box_px must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }
}
