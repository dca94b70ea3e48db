//! Run configuration: one TOML file, dotted-path overrides and a resolved
//! snapshot written next to every run's artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use moelab::evalkit::{DecodeConfig, SynthSpec, HELD_IN_TASKS};
use moelab::model::ModelConfig;
use moelab::training::TrainConfig;
use moelab::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Where training examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus directory written by `gen-tasks`. Without one, the corpus is
    /// generated in memory from `[synth]` and the run seed.
    pub corpus: Option<PathBuf>,
    /// Task files under `train/` that make up the mixture.
    pub train_tasks: Vec<String>,
    /// Exemplars included in training prompts.
    pub k_shot: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            train_tasks: HELD_IN_TASKS.iter().map(|t| t.to_string()).collect(),
            k_shot: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Corpus split holding `suites.json` and the task files.
    pub split: String,
    pub decode: DecodeConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "held-out".into(),
            decode: DecodeConfig::default(),
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The single run seed. `train.seed` always follows it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.data.train_tasks.is_empty() {
            return Err(Error::Config("data.train_tasks is empty".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::Io { path, source: e })
    }
}

/// Parses the value of a `--set key=value` pair as TOML, falling back to a
/// bare string (so `--set eval.split=held-in` works unquoted).
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Layers, lowest first: defaults (with `base_model` as the model section
/// when given), the config file, `--set` overrides, `--seed`. Unknown keys
/// anywhere are rejected.
pub fn resolve(
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    base_model: Option<&ModelConfig>,
) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some(m) = base_model {
        base.model = m.clone();
    }
    let mut table: Table = toml::from_str(&base.to_toml()).expect("defaults round-trip");
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let file: Table = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().replace('\n', " ")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
