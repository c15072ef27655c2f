//! Declarative run configuration.
//!
//! Layers, lowest precedence first: built-in defaults, the TOML file,
//! `GDAN_`-prefixed environment variables, explicit `key=value` overrides.
//! Nested keys use dots on the command line (`model.lr_gen=1e-3`) and double
//! underscores in the environment (`GDAN_MODEL__LR_GEN=1e-3`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthBenchConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{GdanConfig, Hyperparams};
use crate::training::{TrainPlan, Variant, DEFAULT_PRETRAIN_EPOCHS};

pub const ENV_PREFIX: &str = "GDAN_";

/// Where the dataset comes from. Without a manifest the synthetic benchmark
/// described by `synth` is generated in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    /// Standardize features with training-row statistics after loading.
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variant: Variant,
    pub pretrain_epochs: usize,
    pub merge_train_val: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            variant: Variant::FullGdan,
            pretrain_epochs: DEFAULT_PRETRAIN_EPOCHS,
            merge_train_val: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub synth: SynthBenchConfig,
    pub model: Hyperparams,
    pub train: TrainSection,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            synth: SynthBenchConfig::default(),
            model: Hyperparams::default(),
            train: TrainSection::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Small networks sized for the synthetic benchmark.
    pub fn desk_scale() -> Self {
        RunConfig {
            model: Hyperparams::desk_scale(),
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or pure defaults when `None`) and applies environment and
    /// explicit overrides in that order.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        // Stable order so conflicting variables resolve the same way everywhere.
        env.sort();
        for (key, value) in &env {
            set_key(&mut table, key, value)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_key(&mut table, key.trim(), value.trim())?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.plan().validate()?;
        if self.eval.n_per_class == 0 {
            return Err(Error::Config("eval.n_per_class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn gdan_config(&self, feat_dim: usize, attr_dim: usize) -> Result<GdanConfig> {
        GdanConfig::new(feat_dim, attr_dim, self.model.clone())
    }

    pub fn plan(&self) -> TrainPlan {
        self.plan_for(self.train.variant)
    }

    pub fn plan_for(&self, variant: Variant) -> TrainPlan {
        TrainPlan {
            variant,
            pretrain_epochs: self.train.pretrain_epochs,
            epochs: self.model.epochs,
            checkpoint_every: self.model.checkpoint_every,
            seed: self.seed,
            merge_train_val: self.train.merge_train_val,
            val_n_per_class: self.model.n_synth_eval,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Serialized configuration without `output_dir`, so reports of identical
    /// runs in different directories are byte-identical.
    pub fn snapshot(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        Ok(v)
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}
