//! The run configuration: one JSON document with `--set key=value`
//! overrides. `trainer.seed` is the single source of randomness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tmage_core::data::DegradeSchedule;
use tmage_core::degrade::SamplerConfig;
use tmage_core::magenet::{ModelConfig, SIDE_MULTIPLE};
use tmage_core::meanteacher::TrainerConfig;
use tmage_core::rng::derive_seed;

use crate::error::{AppError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub labeled_manifest: Option<PathBuf>,
    pub unlabeled_manifest: Option<PathBuf>,
    /// Square side every image is resized to on load.
    pub side: Option<usize>,
    pub schedule: DegradeSchedule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
}

/// Labels for the streams derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0x494e_4954;
    pub const DATA: u64 = 0x4441_5441;
    pub const DEGRADE: u64 = 0x4447_5244;
    pub const SYNTH: u64 = 0x5359_4e54;
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.trainer.seed
    }

    pub fn derived_seed(&self, label: u64) -> u64 {
        derive_seed(self.seed(), &[label])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.trainer.validate()?;
        if let Some(side) = self.data.side {
            if side == 0 || side % SIDE_MULTIPLE != 0 {
                return Err(AppError::Usage(format!(
                    "data.side must be a positive multiple of {SIDE_MULTIPLE}, got {side}"
                )));
            }
        }
        Ok(())
    }

    /// Loads `path` (or the defaults), applies overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read(p).map_err(|e| AppError::io(p, e))?;
                serde_json::from_slice(&text).map_err(|e| AppError::Usage(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).expect("defaults serialize"),
        };
        let defaults = serde_json::to_value(Self::default()).expect("defaults serialize");
        for o in overrides {
            apply_override(&mut tree, &defaults, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut tree, &defaults, &format!("trainer.seed={s}"))?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| AppError::Usage(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets a dotted key. The value is parsed as JSON, falling back to a plain
/// string. Keys must exist in the default configuration.
pub fn apply_override(tree: &mut Value, defaults: &Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut probe = defaults;
    for p in &parts {
        probe = probe
            .get(p)
            .ok_or_else(|| AppError::Usage(format!("unknown configuration key {key:?}")))?;
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| AppError::Usage(format!("{key:?}: {p:?} is not a section")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| AppError::Usage(format!("{key:?} does not name a field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
