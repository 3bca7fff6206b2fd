//! Experiment configuration: one JSON document plus dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use sitfuse::eval::{DropMode, EvalConfig};
use sitfuse::gridworld::{GenParams, StartBand};
use sitfuse::percept::{Bank, BankConfig};
use sitfuse::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Splits { train: 16, test: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinitySettings {
    pub samples: usize,
    pub ridge: f64,
    /// Use this matrix file instead of estimating one.
    pub path: Option<PathBuf>,
}

impl Default for AffinitySettings {
    fn default() -> Self {
        AffinitySettings {
            samples: 1000,
            ridge: 1e-3,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustSettings {
    /// Dropped counts to sweep; empty means `0..n`.
    pub ks: Vec<usize>,
    pub modes: Vec<DropMode>,
}

impl Default for RobustSettings {
    fn default() -> Self {
        RobustSettings {
            ks: Vec::new(),
            modes: vec![DropMode::Renormalize, DropMode::ZeroNoise],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsSettings {
    pub samples: usize,
}

impl Default for AnalyticsSettings {
    fn default() -> Self {
        AnalyticsSettings { samples: 2000 }
    }
}

/// A trained model: a name plus overrides of the shared training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(flatten)]
    pub overrides: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub generation: GenParams,
    pub goal_radius: u32,
    pub splits: Splits,
    pub bank: BankConfig,
    /// Training states sampled per environment.
    pub samples_per_env: usize,
    pub affinity: AffinitySettings,
    pub train: TrainConfig,
    pub models: Vec<ModelSpec>,
    /// Majority and top-k voting baselines over this action-fusion model.
    pub vote_model: Option<String>,
    pub top_k: usize,
    pub eval: EvalConfig,
    pub robustness: RobustSettings,
    pub analytics: AnalyticsSettings,
}

fn model(name: &str, fields: Value) -> ModelSpec {
    let mut overrides = match fields {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    overrides.retain(|_, v| !v.is_null());
    ModelSpec {
        name: name.to_string(),
        overrides,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            generation: GenParams {
                width: 32,
                height: 32,
                rooms: 5,
                room_min: 5,
                room_max: 10,
                clutter: 0.05,
                ..GenParams::default()
            },
            goal_radius: 1,
            splits: Splits::default(),
            bank: BankConfig::default(),
            samples_per_env: 256,
            affinity: AffinitySettings::default(),
            train: TrainConfig::default(),
            models: vec![
                model("blackbox", serde_json::json!({"scheme": "blackbox"})),
                model("concat", serde_json::json!({"scheme": "concat"})),
                model("feature_fusion", serde_json::json!({"scheme": "feature_fusion"})),
                model("action_fusion", serde_json::json!({"scheme": "action_fusion"})),
                model(
                    "action_fusion_lbl",
                    serde_json::json!({"scheme": "action_fusion", "lambda_lbl": 0.1}),
                ),
                model(
                    "action_fusion_aff",
                    serde_json::json!({"scheme": "action_fusion", "lambda_aff": 0.1}),
                ),
            ],
            vote_model: Some("action_fusion".into()),
            top_k: 3,
            eval: EvalConfig {
                max_steps: 30,
                episodes_per_task: 64,
                band: StartBand { min: 4, max: 14 },
                seed: 0,
                record_gates: false,
            },
            robustness: RobustSettings::default(),
            analytics: AnalyticsSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults), then applies `--set` overrides and the
    /// seed/out flags.
    pub fn resolve(path: Option<&Path>, sets: &[String], seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize"),
        };
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{s}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        cfg.eval.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.generation.validate()?;
        let bank = self.bank()?;
        if self.splits.train == 0 || self.splits.test == 0 {
            return Err(CliError::Usage("both splits need at least one environment".into()));
        }
        if self.samples_per_env == 0 || self.eval.episodes_per_task == 0 || self.eval.max_steps == 0 {
            return Err(CliError::Usage(
                "sample, episode and step counts must be positive".into(),
            ));
        }
        let mut names = std::collections::HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) || m.name.is_empty() || m.name.contains(['/', '\\']) {
                return Err(CliError::Usage(format!("invalid or duplicate model name `{}`", m.name)));
            }
            self.train_config(m)?;
        }
        if let Some(v) = &self.vote_model {
            if !names.contains(v.as_str()) {
                return Err(CliError::Usage(format!("vote_model `{v}` is not a configured model")));
            }
        }
        if self.top_k == 0 || self.top_k > bank.len() {
            return Err(CliError::Usage(format!("top_k must be in 1..={}", bank.len())));
        }
        if self.robustness.ks.iter().any(|&k| k >= bank.len()) {
            return Err(CliError::Usage(format!("robustness ks must be below {}", bank.len())));
        }
        Ok(())
    }

    pub fn bank(&self) -> CliResult<Bank> {
        Ok(Bank::from_config(&self.bank)?)
    }

    /// The shared training config with the model's overrides and the global
    /// seed applied.
    pub fn train_config(&self, model: &ModelSpec) -> CliResult<TrainConfig> {
        let mut doc = serde_json::to_value(&self.train).expect("train config serializes");
        doc["seed"] = Value::from(self.seed);
        for (k, v) in &model.overrides {
            doc[k] = v.clone();
        }
        serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("model `{}`: {e}", model.name)))
    }

    pub fn model(&self, name: &str) -> CliResult<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| CliError::Usage(format!("no model named `{name}` in config")))
    }

    /// SHA-256 over the canonical JSON of everything except the output
    /// directory.
    pub fn digest(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut doc {
            m.remove("out");
        }
        hex::encode(Sha256::digest(canonical(&doc).as_bytes()))
    }
}

/// JSON with object keys sorted at every level.
fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&m[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Sets `value` at a dotted `path`, creating objects along the way. Numeric
/// segments index existing arrays.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override path `{path}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Usage(format!("`{part}` in `{path}` is not an array index")))?;
                let len = a.len();
                a.get_mut(idx)
                    .ok_or_else(|| CliError::Usage(format!("index {idx} out of range ({len}) in `{path}`")))?
            }
            Value::Object(m) => m.entry(part.to_string()).or_insert(Value::Null),
            other => {
                *other = Value::Object(Map::new());
                other
                    .as_object_mut()
                    .unwrap()
                    .entry(part.to_string())
                    .or_insert(Value::Null)
            }
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("path has at least one segment")
}
