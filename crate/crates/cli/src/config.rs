//! Config loading: strict TOML parsing with dotted-path overrides.
//!
//! Every command reads one TOML file. Unknown keys abort before any compute
//! (`deny_unknown_fields` on every config struct). `--set key.path=value`
//! overrides are applied to the parsed TOML document before
//! deserialization, so they go through the same strict validation.

use pap_core::attack::{AttackConfig, Norm};
use pap_core::eval::SelectionStrategy;
use pap_core::{PapError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Process exit code for an error, per the documented contract:
/// 2 config, 3 data/checkpoint, 4 numeric.
pub fn exit_code(err: &PapError) -> i32 {
    match err {
        PapError::Config(_) | PapError::Validation(_) => 2,
        PapError::Data(_) | PapError::Format(_) | PapError::Io(_) => 3,
        PapError::Numeric(_) => 4,
    }
}

/// Read a TOML file, apply `--set` overrides, and deserialize strictly.
/// Returns the config plus the SHA-256 digest of its canonical JSON form.
pub fn load<T: serde::de::DeserializeOwned + Serialize>(
    path: &Path,
    overrides: &[String],
) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        PapError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| PapError::Config(format!("{}: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: T = value
        .try_into()
        .map_err(|e| PapError::Config(format!("{}: {e}", path.display())))?;
    let canonical = serde_json::to_string(&cfg)?;
    let digest = pap_core::bytes::sha256_hex(canonical.as_bytes());
    Ok((cfg, digest))
}

/// Apply one `key.path=value` override to a parsed TOML document. Numeric
/// path segments index arrays; the value is parsed as TOML, falling back to
/// a plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        PapError::Config(format!("--set expects key.path=value, got {spec:?}"))
    })?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(PapError::Config(format!("empty path segment in {path:?}")));
    }
    let mut cursor = root;
    for (k, seg) in segments.iter().enumerate() {
        let last = k + 1 == segments.len();
        if let Ok(index) = seg.parse::<usize>() {
            let arr = cursor.as_array_mut().ok_or_else(|| {
                PapError::Config(format!("{path:?}: segment {seg:?} indexes a non-array"))
            })?;
            if index >= arr.len() {
                return Err(PapError::Config(format!(
                    "{path:?}: index {index} out of range (array has {} entries)",
                    arr.len()
                )));
            }
            if last {
                arr[index] = parsed;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            let table = cursor.as_table_mut().ok_or_else(|| {
                PapError::Config(format!("{path:?}: segment {seg:?} is not a table"))
            })?;
            if last {
                table.insert(seg.to_string(), parsed);
                return Ok(());
            }
            cursor = table
                .entry(seg.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
    }
    Ok(())
}

/// Resolve the run directory: explicit `out_dir` wins, otherwise a name is
/// derived under `$PAP_RUN_ROOT` (default `./runs`).
pub fn resolve_out_dir(
    out_dir: &Option<String>,
    command: &str,
    seed: u64,
    config_digest: &str,
) -> PathBuf {
    match out_dir {
        Some(dir) => PathBuf::from(dir),
        None => {
            let root = std::env::var("PAP_RUN_ROOT").unwrap_or_else(|_| "runs".into());
            PathBuf::from(root).join(format!(
                "{command}-{seed}-{}",
                &config_digest[..8.min(config_digest.len())]
            ))
        }
    }
}

// ---- shared config fragments ----

fn default_train_len() -> usize {
    pap_core::data::DESK_TRAIN_LEN
}
fn default_test_len() -> usize {
    pap_core::data::DESK_TEST_LEN
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    100
}

/// Synthetic dataset identity: one seed covers both splits (the generator
/// keys each split and image index off it deterministically).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    #[serde(default = "default_train_len")]
    pub train_len: usize,
    #[serde(default = "default_test_len")]
    pub test_len: usize,
}

/// Attack parameters as written in configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// "linf" or "l2".
    pub norm: String,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn to_config(&self) -> Result<AttackConfig> {
        let norm = match self.norm.as_str() {
            "linf" => Norm::Linf,
            "l2" => Norm::L2,
            other => {
                return Err(PapError::Config(format!(
                    "unknown norm {other:?}; expected \"linf\" or \"l2\""
                )))
            }
        };
        let cfg = AttackConfig {
            norm,
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            random_start: self.random_start,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_strategy(name: &str) -> Result<SelectionStrategy> {
    Ok(match name {
        "predicted_label" => SelectionStrategy::PredictedLabel,
        "traversal" => SelectionStrategy::Traversal,
        "oracle_label" => SelectionStrategy::OracleLabel,
        "random_label" => SelectionStrategy::RandomLabel,
        other => {
            return Err(PapError::Config(format!(
                "unknown strategy {other:?}; expected predicted_label, traversal, \
                 oracle_label, or random_label"
            )))
        }
    })
}

// ---- per-command configs ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainCfg {
    /// "natural" or "adversarial".
    pub regime: String,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Warm start: fine-tune this checkpoint instead of a fresh model.
    #[serde(default)]
    pub init: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub optim: OptimSpec,
    /// Required for the adversarial regime.
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub lr_drop_at: Option<f64>,
}

impl Default for OptimSpec {
    fn default() -> Self {
        let d = pap_core::model::pretrain::PretrainConfig::default();
        OptimSpec {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            lr_drop_at: d.lr_drop_at,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default)]
    pub lambda3: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPromptsCfg {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Checkpoint directory of the frozen backbone.
    pub backbone: String,
    pub dataset: DatasetSpec,
    /// "natural" or "adversarial": selects the loss-weight defaults.
    pub preset: String,
    /// Optional per-field overrides of the preset's loss weights.
    #[serde(default)]
    pub objective: Option<ObjectiveSpec>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub lr_drop_epoch: Option<usize>,
    #[serde(default)]
    pub lr_drop_factor: Option<f64>,
    #[serde(default)]
    pub weight_update_period: Option<usize>,
    pub attack: AttackSpec,
    #[serde(default)]
    pub adaptive_attack: bool,
    #[serde(default)]
    pub clamp_in_graph: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttackSpec {
    pub name: String,
    /// Craft through the prompting transform instead of the raw backbone.
    #[serde(default)]
    pub adaptive: bool,
    pub norm: String,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NamedAttackSpec {
    pub fn to_config(&self) -> Result<AttackConfig> {
        AttackSpec {
            norm: self.norm.clone(),
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            random_start: self.random_start,
            seed: self.seed,
        }
        .to_config()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateCfg {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub backbone: String,
    /// Prompt bank directory; absent evaluates the raw (zero-prompt) model.
    #[serde(default)]
    pub bank: Option<String>,
    /// predicted_label | traversal | oracle_label | random_label.
    pub strategy: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub attacks: Vec<NamedAttackSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseCfg {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub backbone: String,
    pub dataset: DatasetSpec,
    pub attack: AttackSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCmdCfg {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub backbone: String,
    pub dataset: DatasetSpec,
    /// "train" or "test".
    #[serde(default = "default_split")]
    pub split: String,
    /// Cap on the number of examples attacked.
    #[serde(default)]
    pub limit: Option<usize>,
    pub attack: AttackSpec,
}

fn default_split() -> String {
    "test".into()
}
