//! Run configuration. On disk it is one JSON object whose keys are flat
//! dotted paths (`"train.temperature": 0.01`); missing keys keep their
//! defaults and command-line overrides are applied last.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelSpec;
use crate::train::TrainConfig;

/// Adjustments applied to the default network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Divides every block width; 1 keeps the full network.
    pub channel_divisor: usize,
    pub temporal_kernel: usize,
    pub embedding_dim: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            channel_divisor: 1,
            temporal_kernel: 9,
            embedding_dim: 128,
        }
    }
}

impl ModelOptions {
    pub fn spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::resgcn_n39_r8().scaled(self.channel_divisor);
        spec.temporal_kernel = self.temporal_kernel;
        spec.embedding_dim = self.embedding_dim;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding the pose CSV files.
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    /// Seeds initialization, batch sampling and shuffled evaluation.
    pub seed: u64,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            out: PathBuf::from("run"),
            seed: 0,
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// Parses the value half of `key=value`: JSON when it parses, a bare string otherwise.
fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

impl RunConfig {
    /// Every dotted key with its current value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Layers `overrides` (in order) over this configuration. Unknown keys are errors.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, Value)>) -> Result<RunConfig> {
        let mut flat = self.to_flat();
        for (key, value) in overrides {
            match flat.get_mut(key) {
                Some(slot) => *slot = value,
                None => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
            }
        }
        let config: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(config.seeded())
    }

    /// Applies `key=value` strings.
    pub fn with_assignments(&self, assignments: &[String]) -> Result<RunConfig> {
        let mut pairs = Vec::with_capacity(assignments.len());
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {a:?}")))?;
            pairs.push((k.trim(), parse_value(v.trim())));
        }
        self.with_overrides(pairs)
    }

    /// Reads a flat dotted-key JSON file over the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let pairs: Vec<(String, Value)> = map.into_iter().collect();
        RunConfig::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// The flat form, pretty-printed; reading it back gives the same configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Propagates the run seed to the components that sample.
    pub fn seeded(mut self) -> RunConfig {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.spec()?;
        self.train.validate()?;
        self.augment.validate()?;
        if let Some(root) = &self.corpus {
            if !root.is_dir() {
                return Err(Error::Config(format!("corpus directory {} does not exist", root.display())));
            }
        }
        Ok(())
    }

    /// Settings used by the bundled synthetic experiments: a quarter-width
    /// network trained briefly on small batches.
    pub fn desk_scale() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.channel_divisor = 4;
        c.train.subjects_per_batch = 6;
        c.train.sequences_per_subject = 4;
        c.train.temperature = 0.1;
        c.train.epochs_scale = 30.0 / 300.0;
        c.train.cycles.truncate(1);
        c
    }
}
