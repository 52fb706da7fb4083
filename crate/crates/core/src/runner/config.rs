use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balancer::BalancerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::MixtureSpec;
use crate::tensor::Precision;

/// Every knob of an experiment. Loaded from TOML; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub data: MixtureSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub views: ViewConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub balancer: BalancerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn d_precision() -> Precision {
    Precision::F64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    #[serde(default = "d_global")]
    pub global: usize,
    #[serde(default = "d_local")]
    pub local: usize,
}

fn d_global() -> usize {
    2
}
fn d_local() -> usize {
    6
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global: d_global(),
            local: d_local(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    /// Peak learning rate; `0.15 · batch_size / 256` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default)]
    pub lr_floor: f64,
    #[serde(default = "d_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_cwd_start")]
    pub centroid_wd_start: f64,
    #[serde(default = "d_cwd_end")]
    pub centroid_wd_end: f64,
    #[serde(default = "d_teacher_momentum")]
    pub teacher_momentum: f64,
    #[serde(default = "d_tau_t")]
    pub teacher_temperature: f64,
    #[serde(default = "d_tau_s")]
    pub student_temperature: f64,
}

fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    256
}
fn d_warmup() -> usize {
    5
}
fn d_sgd_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}
fn d_cwd_start() -> f64 {
    1e-3
}
fn d_cwd_end() -> f64 {
    1e-4
}
fn d_teacher_momentum() -> f64 {
    0.996
}
fn d_tau_t() -> f64 {
    0.04
}
fn d_tau_s() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            warmup_epochs: d_warmup(),
            base_lr: None,
            lr_floor: 0.0,
            sgd_momentum: d_sgd_momentum(),
            weight_decay: d_wd(),
            centroid_wd_start: d_cwd_start(),
            centroid_wd_end: d_cwd_end(),
            teacher_momentum: d_teacher_momentum(),
            teacher_temperature: d_tau_t(),
            student_temperature: d_tau_s(),
        }
    }
}

impl TrainConfig {
    pub fn resolved_base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(0.15 * self.batch_size as f64 / 256.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_dir")]
    pub dir: PathBuf,
    /// Also write teacher embeddings of the evaluation set.
    #[serde(default)]
    pub export_embeddings: bool,
}

fn d_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: d_dir(),
            export_embeddings: false,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: d_precision(),
            data: MixtureSpec::default(),
            model: ModelConfig::default(),
            views: ViewConfig::default(),
            train: TrainConfig::default(),
            balancer: BalancerConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

fn non_negative(x: f64) -> bool {
    x >= 0.0 && x.is_finite()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.balancer
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let v = &self.views;
        check(v.global >= 1 && v.global + v.local >= 2, || {
            format!(
                "views need G >= 2, or G >= 1 with L >= 1; got G={}, L={}",
                v.global, v.local
            )
        })?;
        let t = &self.train;
        check(t.epochs >= 1, || "train.epochs must be at least 1".into())?;
        check(t.batch_size >= 1, || "train.batch_size must be at least 1".into())?;
        check(t.batch_size <= self.data.samples_per_epoch, || {
            format!(
                "train.batch_size {} exceeds data.samples_per_epoch {}",
                t.batch_size, self.data.samples_per_epoch
            )
        })?;
        check(t.warmup_epochs <= t.epochs, || {
            "train.warmup_epochs exceeds train.epochs".into()
        })?;
        let lr = t.resolved_base_lr();
        check(positive(lr), || format!("train.base_lr must be positive, got {lr}"))?;
        check(non_negative(t.lr_floor) && t.lr_floor <= lr, || {
            format!("train.lr_floor must lie in [0, base_lr], got {}", t.lr_floor)
        })?;
        check((0.0..1.0).contains(&t.sgd_momentum), || {
            format!("train.sgd_momentum must lie in [0, 1), got {}", t.sgd_momentum)
        })?;
        for (name, x) in [
            ("weight_decay", t.weight_decay),
            ("centroid_wd_start", t.centroid_wd_start),
            ("centroid_wd_end", t.centroid_wd_end),
        ] {
            check(non_negative(x), || format!("train.{name} must be non-negative, got {x}"))?;
        }
        check((0.0..=1.0).contains(&t.teacher_momentum), || {
            format!(
                "train.teacher_momentum must lie in [0, 1], got {}",
                t.teacher_momentum
            )
        })?;
        for (name, x) in [
            ("teacher_temperature", t.teacher_temperature),
            ("student_temperature", t.student_temperature),
        ] {
            check(positive(x), || format!("train.{name} must be positive, got {x}"))?;
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.samples_per_epoch / self.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.train.epochs as u64
    }

    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Returns a copy with `key=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml_string()?, overrides)
    }
}

/// Sets a dotted key (`balancer.enabled=false`) in a TOML table. The value is
/// parsed as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_dotted(table, key, value)
}

pub(crate) fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
