use std::path::{Path, PathBuf};

use assl::baselines::Strategy;
use assl::data::SyntheticConfig;
use assl::trainer::ablation::DEFAULT_K_SWEEP;
use assl::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Settings of the `ablate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub variants: Vec<Strategy>,
    pub seeds: usize,
    pub k_values: Vec<usize>,
    pub k_seeds: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { variants: Strategy::ABLATION.to_vec(), seeds: 5, k_values: DEFAULT_K_SWEEP.to_vec(), k_seeds: 3 }
    }
}

/// The config file: training settings at the top level, plus data paths,
/// the synthetic generator and the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    /// Training corpus (JSON lines). Without it a synthetic corpus is
    /// generated from `synthetic`.
    pub data: Option<PathBuf>,
    /// Separate test corpus; without it a stratified holdout is used.
    pub test_data: Option<PathBuf>,
    pub test_fraction: f64,
    pub holdout_seed: u64,
    pub out_dir: PathBuf,
    pub labels_fraction: f64,
    pub dump_neighbors: bool,
    pub synthetic: SyntheticConfig,
    pub ablation: AblationSettings,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data: None,
            test_data: None,
            test_fraction: 1.0 / 3.0,
            holdout_seed: 0,
            out_dir: PathBuf::from("runs"),
            labels_fraction: 0.1,
            dump_neighbors: false,
            synthetic: SyntheticConfig::default(),
            ablation: AblationSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Rejects keys that do not exist in `reference`, recursing into nested
/// objects. Free-form maps (empty objects in the reference) accept anything.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(v), Value::Object(r)) = (value, reference) {
        if r.is_empty() {
            return;
        }
        for (k, sub) in v {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rsub) => unknown_keys(sub, rsub, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
        let reference = serde_json::to_value(Self::default()).expect("default config serialises");
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(format!("unknown config keys: {}", unknown.join(", ")));
        }
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn flatten(value: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &path, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every config key with its default, one per line.
pub fn config_help() -> String {
    let value = serde_json::to_value(CliConfig::default()).expect("default config serialises");
    let mut keys = Vec::new();
    flatten(&value, "", &mut keys);
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config file keys (JSON; nested keys are objects) and defaults:\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s.push_str("\nPrecedence: command-line flags > config file > defaults.");
    s
}
