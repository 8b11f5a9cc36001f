//! Experiment configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! # comment
//! method = fedmap
//! clients = 8
//! rounds = 120
//! schedule.s = 30
//! ```
//!
//! Unknown keys and duplicates are rejected with their line number. Every
//! key not given takes its default, except `method`, `clients` and `rounds`,
//! which are required.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{PartitionMode, PartitionSpec};
use crate::error::{FedMapError, Result};
use crate::feddr::{FedDrSettings, HybridConfig, DEFAULT_ALPHA, DEFAULT_ETA};
use crate::schedule::{ScheduleKind, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FedMap,
    FedAvgDense,
    FederatedPruning,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedMap => "fedmap",
            Method::FedAvgDense => "fedavg_dense",
            Method::FederatedPruning => "federated_pruning",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fedmap" => Ok(Method::FedMap),
            "fedavg_dense" | "fedavg" => Ok(Method::FedAvgDense),
            "federated_pruning" => Ok(Method::FederatedPruning),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden layer widths between input and output.
    pub hidden: Vec<usize>,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub interval: usize,
    pub prune_fraction: f64,
    pub floor_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub beta: f64,
    pub skew_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bits_per_param: u32,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub feddr_enabled: bool,
    pub feddr: FedDrSettings,
}

impl ExperimentConfig {
    /// Defaults for everything except the three required keys.
    pub fn with_required(method: Method, clients: usize, rounds: usize) -> Self {
        Self {
            method,
            clients,
            rounds,
            local_epochs: 4,
            lr: 0.01,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
            bits_per_param: 32,
            model: ModelConfig {
                hidden: vec![64, 32],
                bias: false,
            },
            schedule: ScheduleConfig {
                kind: ScheduleKind::Stepwise,
                interval: 90,
                prune_fraction: 0.25,
                floor_fraction: 0.05,
            },
            data: DataConfig {
                classes: 4,
                dim: 16,
                samples: 4000,
                spread: 0.5,
            },
            partition: PartitionConfig {
                mode: PartitionMode::Iid,
                beta: 0.3,
                skew_factor: 0.8,
            },
            feddr_enabled: false,
            feddr: FedDrSettings {
                config: HybridConfig::FedMapFedDr,
                alpha: DEFAULT_ALPHA,
                eta: DEFAULT_ETA,
                switch_event: 1,
                post_alpha: DEFAULT_ALPHA,
                post_eta: DEFAULT_ETA,
            },
        }
    }

    /// Layer widths of the MLP, input and output included.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data.dim];
        w.extend(&self.model.hidden);
        w.push(self.data.classes);
        w
    }

    /// Prunable parameter count `d` of the configured MLP.
    pub fn total_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1]).sum()
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule.kind,
            interval: self.schedule.interval,
            prune_fraction: self.schedule.prune_fraction,
            floor_fraction: self.schedule.floor_fraction,
            total_params: self.total_params(),
            rounds: self.rounds,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.partition.mode,
            beta: self.partition.beta,
            skew_factor: self.partition.skew_factor,
            clients: self.clients,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(FedMapError::config(key, msg));
        if self.clients == 0 {
            return bad("clients", "must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.bits_per_param != 32 && self.bits_per_param != 64 {
            return bad("bits_per_param", "must be 32 or 64");
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden", "widths must be positive");
        }
        self.schedule_spec().validate()?;
        if self.data.classes < 2 {
            return bad("data.classes", "need at least 2 classes");
        }
        if self.data.dim < self.data.classes {
            return bad("data.dim", "must be at least data.classes");
        }
        if !(self.data.spread >= 0.0 && self.data.spread.is_finite()) {
            return bad("data.spread", "must be nonnegative");
        }
        let train = (self.data.samples as f64 * crate::data::TRAIN_FRACTION).round() as usize;
        if train < self.clients || self.data.samples - train == 0 {
            return bad(
                "data.samples",
                "too few samples for the train/test split and clients",
            );
        }
        if !(self.partition.beta > 0.0 && self.partition.beta.is_finite()) {
            return bad("partition.beta", "must be positive");
        }
        if !(self.partition.skew_factor > 0.0 && self.partition.skew_factor.is_finite()) {
            return bad("partition.skew_factor", "must be positive");
        }
        if self.feddr_enabled {
            if self.method != Method::FedMap {
                return bad("feddr.enabled", "only supported with method = fedmap");
            }
            self.feddr.validate()?;
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "method" => self.method = v.parse()?,
            "clients" => self.clients = int(v)?,
            "rounds" => self.rounds = int(v)?,
            "local_epochs" => self.local_epochs = int(v)?,
            "lr" => self.lr = float(v)?,
            "weight_decay" => self.weight_decay = float(v)?,
            "batch_size" => self.batch_size = int(v)?,
            "seed" => self.seed = v.parse().map_err(|_| format!("`{v}` is not a u64"))?,
            "bits_per_param" => {
                self.bits_per_param = v.parse().map_err(|_| format!("`{v}` is not an integer"))?
            }
            "model.hidden" => {
                self.model.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|p| int(p.trim()))
                        .collect::<std::result::Result<_, _>>()?
                }
            }
            "model.bias" => self.model.bias = boolean(v)?,
            "schedule.kind" => {
                self.schedule.kind = match v {
                    "stepwise" => ScheduleKind::Stepwise,
                    "continuous" => ScheduleKind::Continuous,
                    _ => return Err(format!("unknown schedule kind `{v}`")),
                }
            }
            "schedule.s" => self.schedule.interval = int(v)?,
            "schedule.p_g" => self.schedule.prune_fraction = float(v)?,
            "schedule.floor" => self.schedule.floor_fraction = float(v)?,
            "data.classes" => self.data.classes = int(v)?,
            "data.dim" => self.data.dim = int(v)?,
            "data.samples" => self.data.samples = int(v)?,
            "data.spread" => self.data.spread = float(v)?,
            "partition.mode" => {
                self.partition.mode = v.parse().map_err(|e: FedMapError| e.to_string())?
            }
            "partition.beta" => self.partition.beta = float(v)?,
            "partition.skew_factor" => self.partition.skew_factor = float(v)?,
            "feddr.enabled" => self.feddr_enabled = boolean(v)?,
            "feddr.alpha" => self.feddr.alpha = float(v)?,
            "feddr.eta" => self.feddr.eta = float(v)?,
            "feddr.config" => {
                self.feddr.config = v.parse().map_err(|e: FedMapError| e.to_string())?
            }
            "feddr.switch_event" => self.feddr.switch_event = int(v)?,
            "feddr.post_alpha" => self.feddr.post_alpha = float(v)?,
            "feddr.post_eta" => self.feddr.post_eta = float(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn dump(&self) -> String {
        let hidden: Vec<String> = self.model.hidden.iter().map(|h| h.to_string()).collect();
        let kind = match self.schedule.kind {
            ScheduleKind::Stepwise => "stepwise",
            ScheduleKind::Continuous => "continuous",
        };
        let mut entries: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("bits_per_param", self.bits_per_param.to_string()),
            ("clients", self.clients.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.dim", self.data.dim.to_string()),
            ("data.samples", self.data.samples.to_string()),
            ("data.spread", fmt_float(self.data.spread)),
            ("feddr.alpha", fmt_float(self.feddr.alpha)),
            ("feddr.config", self.feddr.config.to_string()),
            ("feddr.enabled", self.feddr_enabled.to_string()),
            ("feddr.eta", fmt_float(self.feddr.eta)),
            ("feddr.post_alpha", fmt_float(self.feddr.post_alpha)),
            ("feddr.post_eta", fmt_float(self.feddr.post_eta)),
            ("feddr.switch_event", self.feddr.switch_event.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("lr", fmt_float(self.lr)),
            ("method", self.method.to_string()),
            ("model.bias", self.model.bias.to_string()),
            ("model.hidden", hidden.join(",")),
            ("partition.beta", fmt_float(self.partition.beta)),
            ("partition.mode", self.partition.mode.as_str().to_string()),
            (
                "partition.skew_factor",
                fmt_float(self.partition.skew_factor),
            ),
            ("rounds", self.rounds.to_string()),
            ("schedule.floor", fmt_float(self.schedule.floor_fraction)),
            ("schedule.kind", kind.to_string()),
            ("schedule.p_g", fmt_float(self.schedule.prune_fraction)),
            ("schedule.s", self.schedule.interval.to_string()),
            ("seed", self.seed.to_string()),
            ("weight_decay", fmt_float(self.weight_decay)),
        ];
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`ExperimentConfig::dump`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.dump().as_bytes()))
    }
}

fn fmt_float(x: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{x:?}")
}

fn int(v: &str) -> std::result::Result<usize, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a nonnegative integer"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if x.is_nan() {
        return Err("NaN is not allowed".into());
    }
    Ok(x)
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true/false")),
    }
}

/// `(line number, key, value)` for every assignment in `text`.
pub fn parse_assignments(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once('=').ok_or_else(|| FedMapError::Parse {
            line,
            msg: format!("expected `key = value`, got `{trimmed}`"),
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(FedMapError::Parse {
                line,
                msg: "empty key".into(),
            });
        }
        if let Some((first, ..)) = out.iter().find(|(_, existing, _)| *existing == key) {
            return Err(FedMapError::Parse {
                line,
                msg: format!("duplicate key `{key}` (first set on line {first})"),
            });
        }
        out.push((line, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let assignments = parse_assignments(text)?;
    let find = |key: &str| assignments.iter().find(|(_, k, _)| k == key);
    let required = |key: &str| find(key).ok_or_else(|| FedMapError::config(key, "is required"));
    let (line, _, m) = required("method")?;
    let method: Method = m
        .parse()
        .map_err(|msg| FedMapError::Parse { line: *line, msg })?;
    let (line, _, c) = required("clients")?;
    let clients = int(c).map_err(|msg| FedMapError::Parse { line: *line, msg })?;
    let (line, _, r) = required("rounds")?;
    let rounds = int(r).map_err(|msg| FedMapError::Parse { line: *line, msg })?;

    let mut cfg = ExperimentConfig::with_required(method, clients, rounds);
    for (line, key, value) in &assignments {
        cfg.set(key, value).map_err(|msg| FedMapError::Parse {
            line: *line,
            msg: format!("{key}: {msg}"),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedMapError::io(path, e))?;
    parse_config(&text)
}
