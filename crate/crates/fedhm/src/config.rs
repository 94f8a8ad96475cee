//! Experiment configuration: TOML parsing, validation, defaults, and the
//! resolved-config echo written next to run outputs.
//!
//! Unknown keys are rejected. Defaults follow the standard recipe: 20
//! clients, sampling rate 0.5, 10 local epochs, batch 64, SGD with lr 0.1,
//! momentum 0.9, weight decay 1e-4 (Frobenius decay defaults to the same
//! coefficient). The softmax temperature defaults to 5 under a dynamic
//! schedule and to infinity under a fixed one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Method, ScheduleMode};

fn d_clients() -> usize {
    20
}
fn d_sample_fraction() -> f64 {
    0.5
}
fn d_rounds() -> usize {
    10
}
fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    1e-4
}
fn d_ratios() -> Vec<f64> {
    vec![1.0]
}
fn d_true() -> bool {
    true
}
fn d_noise() -> f64 {
    0.3
}
fn d_per_class() -> usize {
    150
}
fn d_test_per_class() -> usize {
    50
}
fn d_synth_classes() -> usize {
    4
}
fn d_hidden() -> Vec<usize> {
    vec![32]
}
fn d_in_channels() -> usize {
    3
}
fn d_alpha() -> f64 {
    0.5
}
fn d_seed_init() -> u64 {
    1
}
fn d_seed_sampling() -> u64 {
    2
}
fn d_seed_data() -> u64 {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// fedhm | fedavg | widthslim-fedavg | heterofl-channel
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub compression: CompressionSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub seeds: SeedsSection,
}

fn default_method() -> String {
    "fedhm".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// tiny-cnn | resnet18 | resnet34 | mlp; or give `file` instead.
    #[serde(default)]
    pub name: Option<String>,
    /// Path to a TOML-serialized model spec.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    /// Hidden layer widths for the mlp model.
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// synthetic | idx | csv
    pub kind: String,
    #[serde(default = "d_synth_classes")]
    pub classes: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    /// Image dims [channels, height, width] for synthetic image data.
    #[serde(default)]
    pub image: Option<[usize; 3]>,
    /// Feature dimension for synthetic vector data.
    #[serde(default)]
    pub features: Option<usize>,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Standardize features with train-split statistics (file loaders).
    #[serde(default = "d_true")]
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub clients: usize,
    pub sample_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            clients: d_clients(),
            sample_fraction: d_sample_fraction(),
            rounds: d_rounds(),
            local_epochs: d_epochs(),
            batch_size: d_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Frobenius-decay coefficient; defaults to `weight_decay`.
    pub frobenius_decay: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_weight_decay(),
            frobenius_decay: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionSection {
    /// Rank ratios (fedhm) or width ratios (baselines); one per level.
    pub rank_ratios: Vec<f64>,
    /// First factorized layer index; alternative: `factorize_stages`.
    pub rho: Option<usize>,
    /// Factorize every layer whose stage number is listed or higher
    /// (shorthand: the smallest listed stage sets rho).
    pub factorize_stages: Option<Vec<usize>>,
    /// Softmax temperature; `inf` for uniform weights. Omitted: 5 under a
    /// dynamic schedule, inf under a fixed one.
    pub temperature: Option<f64>,
    /// fixed | dynamic
    pub schedule: String,
    /// Explicit fixed level per client (1-based); default round-robin.
    pub assignment: Option<Vec<usize>>,
    pub include_stem: bool,
    pub include_classifier: bool,
}

impl Default for CompressionSection {
    fn default() -> Self {
        CompressionSection {
            rank_ratios: d_ratios(),
            rho: None,
            factorize_stages: None,
            temperature: None,
            schedule: "fixed".into(),
            assignment: None,
            include_stem: false,
            include_classifier: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    /// iid | dirichlet
    pub scheme: String,
    pub alpha: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            scheme: "iid".into(),
            alpha: d_alpha(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub init: u64,
    pub sampling: u64,
    pub data: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            init: d_seed_init(),
            sampling: d_seed_sampling(),
            data: d_seed_data(),
        }
    }
}

impl ExperimentConfig {
    /// Parses, validates, and resolves a config file: all defaults applied,
    /// the temperature rule resolved, ranges checked.
    pub fn parse_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config("<toml>", e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills derived defaults and validates every range. Idempotent.
    pub fn resolve(&mut self) -> Result<()> {
        // temperature rule
        if self.compression.temperature.is_none() {
            self.compression.temperature = Some(match self.schedule_mode()? {
                ScheduleMode::Dynamic => 5.0,
                ScheduleMode::Fixed => f64::INFINITY,
            });
        }
        if self.optim.frobenius_decay.is_none() {
            self.optim.frobenius_decay = Some(self.optim.weight_decay);
        }
        self.validate()
    }

    pub fn method_kind(&self) -> Result<Method> {
        match self.method.as_str() {
            "fedhm" => Ok(Method::FedHm),
            "fedavg" => Ok(Method::FedAvg),
            "widthslim-fedavg" => Ok(Method::WidthSlimFedAvg),
            "heterofl-channel" => Ok(Method::HeteroFlChannel),
            other => Err(Error::config(
                "method",
                format!("unknown method `{other}`"),
            )),
        }
    }

    pub fn schedule_mode(&self) -> Result<ScheduleMode> {
        match self.compression.schedule.as_str() {
            "fixed" => Ok(ScheduleMode::Fixed),
            "dynamic" => Ok(ScheduleMode::Dynamic),
            other => Err(Error::config(
                "compression.schedule",
                format!("unknown schedule `{other}`"),
            )),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.compression.temperature.unwrap_or(f64::INFINITY)
    }

    pub fn frobenius_decay(&self) -> f64 {
        self.optim
            .frobenius_decay
            .unwrap_or(self.optim.weight_decay)
    }

    fn validate(&self) -> Result<()> {
        self.method_kind()?;
        self.schedule_mode()?;

        if self.model.name.is_none() && self.model.file.is_none() {
            return Err(Error::config("model.name", "set a model name or file"));
        }
        if let Some(name) = &self.model.name {
            if !["tiny-cnn", "resnet18", "resnet34", "mlp"].contains(&name.as_str()) {
                return Err(Error::config(
                    "model.name",
                    format!("unknown model `{name}`"),
                ));
            }
        }
        match self.dataset.kind.as_str() {
            "synthetic" => {
                if self.dataset.image.is_none() && self.dataset.features.is_none() {
                    return Err(Error::config(
                        "dataset.image",
                        "synthetic data needs image dims or a feature count",
                    ));
                }
                if self.dataset.classes < 2 {
                    return Err(Error::config("dataset.classes", "need at least 2 classes"));
                }
                if self.dataset.per_class < 1 || self.dataset.test_per_class < 1 {
                    return Err(Error::config(
                        "dataset.per_class",
                        "need at least one sample per class per split",
                    ));
                }
                if self.dataset.noise < 0.0 {
                    return Err(Error::config("dataset.noise", "noise must be >= 0"));
                }
            }
            "idx" => {
                for (field, value) in [
                    ("dataset.train_images", &self.dataset.train_images),
                    ("dataset.train_labels", &self.dataset.train_labels),
                    ("dataset.test_images", &self.dataset.test_images),
                    ("dataset.test_labels", &self.dataset.test_labels),
                ] {
                    if value.is_none() {
                        return Err(Error::config(field, "required for idx datasets"));
                    }
                }
            }
            "csv" => {
                if self.dataset.train.is_none() || self.dataset.test.is_none() {
                    return Err(Error::config(
                        "dataset.train",
                        "csv datasets need train and test paths",
                    ));
                }
            }
            other => {
                return Err(Error::config(
                    "dataset.kind",
                    format!("unknown dataset kind `{other}`"),
                ))
            }
        }

        let f = &self.federation;
        if f.clients < 1 {
            return Err(Error::config("federation.clients", "need at least one client"));
        }
        if !(f.sample_fraction > 0.0 && f.sample_fraction <= 1.0) {
            return Err(Error::config(
                "federation.sample_fraction",
                "must lie in (0, 1]",
            ));
        }
        if f.local_epochs < 1 {
            return Err(Error::config("federation.local_epochs", "must be >= 1"));
        }
        if f.batch_size < 1 {
            return Err(Error::config("federation.batch_size", "must be >= 1"));
        }

        if self.optim.lr < 0.0 {
            return Err(Error::config("lr", "learning rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        if self.optim.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        if self.frobenius_decay() < 0.0 {
            return Err(Error::config("optim.frobenius_decay", "must be >= 0"));
        }

        let c = &self.compression;
        if c.rank_ratios.is_empty() {
            return Err(Error::config(
                "compression.rank_ratios",
                "need at least one ratio",
            ));
        }
        for &r in &c.rank_ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(
                    "compression.rank_ratios",
                    format!("ratio {r} outside (0, 1]"),
                ));
            }
        }
        if c.rho.is_some() && c.factorize_stages.is_some() {
            return Err(Error::config(
                "compression.rho",
                "give rho or factorize_stages, not both",
            ));
        }
        if let Some(t) = c.temperature {
            if !(t > 0.0) {
                return Err(Error::config(
                    "compression.temperature",
                    "must be positive (or inf)",
                ));
            }
        }
        if let Some(assignment) = &c.assignment {
            if assignment.len() != f.clients {
                return Err(Error::config(
                    "compression.assignment",
                    "must list one level per client",
                ));
            }
            let levels = c.rank_ratios.len();
            if assignment.iter().any(|&l| l == 0 || l > levels) {
                return Err(Error::config(
                    "compression.assignment",
                    format!("levels must lie in 1..={levels}"),
                ));
            }
        }

        match self.partition.scheme.as_str() {
            "iid" => {}
            "dirichlet" => {
                if !(self.partition.alpha > 0.0) {
                    return Err(Error::config("partition.alpha", "must be > 0"));
                }
            }
            other => {
                return Err(Error::config(
                    "partition.scheme",
                    format!("unknown scheme `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// Serializes the resolved config; written into the output directory so
    /// a run can be reproduced from its artifacts alone.
    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
