use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::{build_preset, ArchitectureSpec, PRESETS};
use crate::data::Augment;
use crate::error::{Error, Result};
use crate::trainer::{LossWeights, Schedule, SgdConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    BwbpfSeq,
    BwbpfPipeline,
    BpBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BwbpfSeq => "bwbpf-seq",
            Mode::BwbpfPipeline => "bwbpf-pipeline",
            Mode::BpBaseline => "bp-baseline",
        }
    }

    pub fn is_blockwise(self) -> bool {
        self != Mode::BpBaseline
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

pub const DATASETS: [&str; 3] = ["mnist", "cifar10", "synthetic"];

/// Everything needed to reproduce one run, as flat keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub preset: String,
    pub dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub k: usize,
    pub mode: Mode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr0: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub decay_drops: u32,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub augment: Augment,
    /// Use only the first N training / test samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub eval_batch_size: usize,
    pub queue_capacity: usize,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_channels: usize,
    pub synthetic_size: usize,
    pub synthetic_separation: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let w = LossWeights::default();
        Self {
            preset: String::new(),
            dataset: String::new(),
            data_dir: None,
            k: 4,
            mode: Mode::default(),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lr0: sgd.lr0,
            lr_final: sgd.lr_final,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: sgd.batch_size,
            epochs: sgd.epochs,
            schedule: sgd.schedule,
            decay_drops: sgd.decay_drops,
            seed: 0,
            precision: Precision::default(),
            output_dir: PathBuf::from("runs/default"),
            augment: Augment::None,
            train_limit: 0,
            test_limit: 0,
            eval_batch_size: 256,
            queue_capacity: 2,
            synthetic_classes: 10,
            synthetic_per_class: 100,
            synthetic_test_per_class: 20,
            synthetic_channels: 1,
            synthetic_size: 8,
            synthetic_separation: 4.0,
        }
    }
}

/// Parses a TOML value given on the command line; bare words are strings.
fn flag_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = toml::Table::try_from(ExperimentConfig::default())
        .map(|t| t.keys().cloned().collect())
        .unwrap_or_default();
    keys.push("data-dir".into());
    keys
}

/// Builds a validated configuration from optional file text and `key=value`
/// overrides; overrides win. All problems are reported together.
pub fn parse_config(
    file: Option<&str>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut table = match file {
        Some(text) => toml::from_str::<toml::Table>(text)
            .map_err(|e| Error::Validation(vec![format!("config file: {}", e.message())]))?,
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        table.insert(key.replace('_', "-"), flag_value(raw));
    }
    let known = known_keys();
    let mut problems: Vec<String> = table
        .keys()
        .filter(|k| !known.contains(k))
        .map(|k| format!("unknown key `{k}`"))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Validation(vec![e.message().to_string()]))?;
    problems.extend(cfg.problems());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(problems))
    }
}

impl ExperimentConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.lr0,
            lr_final: self.lr_final,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: self.schedule,
            decay_drops: self.decay_drops,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    /// `(channels, size)` of the dataset's images.
    pub fn input_geometry(&self) -> Option<(usize, usize)> {
        match self.dataset.as_str() {
            "mnist" => Some((1, 28)),
            "cifar10" => Some((3, 32)),
            "synthetic" => Some((self.synthetic_channels, self.synthetic_size)),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        if self.dataset == "synthetic" {
            self.synthetic_classes
        } else {
            10
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let (c, size) = self.input_geometry().ok_or_else(|| {
            Error::Validation(vec![format!("unknown dataset `{}`", self.dataset)])
        })?;
        build_preset(&self.preset, self.num_classes(), c, size)
    }

    pub fn run_id(&self) -> String {
        let k = if self.mode.is_blockwise() {
            format!("-k{}", self.k)
        } else {
            String::new()
        };
        format!(
            "{}-{}-{}{k}-s{}",
            self.preset,
            self.dataset,
            self.mode.as_str(),
            self.seed
        )
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.preset.is_empty() {
            out.push(format!(
                "preset is required (one of {})",
                PRESETS.join(", ")
            ));
        } else if !PRESETS.contains(&self.preset.as_str()) {
            out.push(format!(
                "unknown preset `{}` (one of {})",
                self.preset,
                PRESETS.join(", ")
            ));
        }
        if self.dataset.is_empty() {
            out.push(format!(
                "dataset is required (one of {})",
                DATASETS.join(", ")
            ));
        } else if !DATASETS.contains(&self.dataset.as_str()) {
            out.push(format!(
                "unknown dataset `{}` (one of {})",
                self.dataset,
                DATASETS.join(", ")
            ));
        }
        if out.is_empty() {
            match self.architecture() {
                Ok(spec) if self.k < 1 || self.k > spec.unit_count() => out.push(format!(
                    "k must be in 1..={} for {}, got {}",
                    spec.unit_count(),
                    self.preset,
                    self.k
                )),
                Ok(_) => {}
                Err(e) => out.push(e.to_string()),
            }
        } else if self.k < 1 {
            out.push(format!("k must be >= 1, got {}", self.k));
        }
        out.extend(self.sgd().problems());
        out.extend(self.weights().problems());
        if self.mode == Mode::BpBaseline && self.weights() != LossWeights::default() {
            out.push("lambda1/lambda2 apply to block-wise modes only, not bp-baseline".into());
        }
        if self.mode.is_blockwise() && self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            out.push("lambda1 and lambda2 are both 0: nothing would train".into());
        }
        if self.queue_capacity == 0 {
            out.push("queue-capacity must be >= 1".into());
        }
        if self.eval_batch_size == 0 {
            out.push("eval-batch-size must be >= 1".into());
        }
        if self.seed > i64::MAX as u64 {
            out.push(format!("seed must be <= {}", i64::MAX));
        }
        if self.dataset == "synthetic" {
            if self.synthetic_classes < 2 {
                out.push("synthetic-classes must be >= 2".into());
            }
            if self.synthetic_per_class == 0 || self.synthetic_test_per_class == 0 {
                out.push("synthetic-per-class and synthetic-test-per-class must be >= 1".into());
            }
            if !(self.synthetic_separation.is_finite() && self.synthetic_separation >= 0.0) {
                out.push("synthetic-separation must be finite and >= 0".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}
