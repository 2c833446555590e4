//! Experiment configuration: a flat, line-based `key = value` format with
//! CLI `--set` overrides, `OMH_`-prefixed environment overrides, and sweep
//! axes. Formatting and parsing round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::hierarchy::HierarchyConfig;
use crate::losses::LossWeights;
use crate::synthdata::SyntheticParams;
use crate::transport::SinkhornSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for key {key}")]
    BadValue { key: String, value: String },
    #[error("malformed config line {0:?} (expected key = value)")]
    BadLine(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every tunable of a run. Defaults describe the standard desk-scale setup:
/// a 3-level hierarchy doubling its cluster count per level, transport
/// temperature 0.02, sparsity weight 0.01, structure weight 0.3.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub depth: usize,
    pub base_clusters: usize,
    pub expansion: f64,
    pub ot_temperature: f64,
    pub sparsity_weight: f64,
    pub structure_weight: f64,
    pub distill_b: f64,
    pub steps: usize,
    pub eval_interval: usize,
    /// Steps at the start of training during which the matching terms carry
    /// zero weight, letting each level settle before they are coupled.
    pub structure_warmup: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub stop_gradient: bool,
    pub sinkhorn_tolerance: f64,
    pub sinkhorn_max_iterations: usize,
    pub sinkhorn_log_domain: bool,
    pub data_coarse: usize,
    pub data_fine_per_coarse: usize,
    pub data_dim: usize,
    pub data_noise: f64,
    pub data_coarse_angle_deg: f64,
    pub data_images: usize,
    pub data_per_class: usize,
    pub data_seed: u64,
    pub output_dir: String,
    pub run_id: String,
    pub determinism: bool,
    /// Sweep axes as `(field, values)` pairs; the sweep runner expands their
    /// Cartesian product.
    pub sweep_axes: Vec<(String, Vec<String>)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_clusters: 3,
            expansion: 2.0,
            ot_temperature: 0.02,
            sparsity_weight: 0.01,
            structure_weight: 0.3,
            distill_b: 0.3,
            steps: 400,
            eval_interval: 50,
            structure_warmup: 150,
            seed: 0,
            learning_rate: 1e-3,
            proj_dim: 16,
            proj_hidden: 32,
            stop_gradient: false,
            sinkhorn_tolerance: 1e-8,
            sinkhorn_max_iterations: 10_000,
            sinkhorn_log_domain: true,
            data_coarse: 3,
            data_fine_per_coarse: 2,
            data_dim: 32,
            data_noise: 0.05,
            data_coarse_angle_deg: 90.0,
            data_images: 4,
            data_per_class: 16,
            data_seed: 1,
            output_dir: "runs/default".into(),
            run_id: "run".into(),
            determinism: true,
            sweep_axes: Vec::new(),
        }
    }
}

/// All settable scalar keys, in the order they are formatted.
pub const FIELDS: &[&str] = &[
    "depth",
    "base_clusters",
    "expansion",
    "ot_temperature",
    "sparsity_weight",
    "structure_weight",
    "distill_b",
    "steps",
    "eval_interval",
    "structure_warmup",
    "seed",
    "learning_rate",
    "proj_dim",
    "proj_hidden",
    "stop_gradient",
    "sinkhorn_tolerance",
    "sinkhorn_max_iterations",
    "sinkhorn_log_domain",
    "data_coarse",
    "data_fine_per_coarse",
    "data_dim",
    "data_noise",
    "data_coarse_angle_deg",
    "data_images",
    "data_per_class",
    "data_seed",
    "output_dir",
    "run_id",
    "determinism",
];

impl ExperimentConfig {
    /// Canonical text form; `parse` of this reproduces the config exactly.
    pub fn format(&self) -> String {
        let mut out = String::new();
        for key in FIELDS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        for (field, values) in &self.sweep_axes {
            let _ = writeln!(out, "sweep_axis = {field}:{}", values.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::BadLine(line.to_string()))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// String form of one scalar field.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "depth" => self.depth.to_string(),
            "base_clusters" => self.base_clusters.to_string(),
            "expansion" => format!("{:?}", self.expansion),
            "ot_temperature" => format!("{:?}", self.ot_temperature),
            "sparsity_weight" => format!("{:?}", self.sparsity_weight),
            "structure_weight" => format!("{:?}", self.structure_weight),
            "distill_b" => format!("{:?}", self.distill_b),
            "steps" => self.steps.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "structure_warmup" => self.structure_warmup.to_string(),
            "seed" => self.seed.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "proj_dim" => self.proj_dim.to_string(),
            "proj_hidden" => self.proj_hidden.to_string(),
            "stop_gradient" => self.stop_gradient.to_string(),
            "sinkhorn_tolerance" => format!("{:?}", self.sinkhorn_tolerance),
            "sinkhorn_max_iterations" => self.sinkhorn_max_iterations.to_string(),
            "sinkhorn_log_domain" => self.sinkhorn_log_domain.to_string(),
            "data_coarse" => self.data_coarse.to_string(),
            "data_fine_per_coarse" => self.data_fine_per_coarse.to_string(),
            "data_dim" => self.data_dim.to_string(),
            "data_noise" => format!("{:?}", self.data_noise),
            "data_coarse_angle_deg" => format!("{:?}", self.data_coarse_angle_deg),
            "data_images" => self.data_images.to_string(),
            "data_per_class" => self.data_per_class.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "output_dir" => self.output_dir.clone(),
            "run_id" => self.run_id.clone(),
            "determinism" => self.determinism.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Sets one field from its string form. `sweep_axis` appends an axis
    /// written as `field:v1,v2,...`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue { key: key.to_string(), value: value.to_string() };
        match key {
            "depth" => self.depth = value.parse().map_err(|_| bad())?,
            "base_clusters" => self.base_clusters = value.parse().map_err(|_| bad())?,
            "expansion" => self.expansion = value.parse().map_err(|_| bad())?,
            "ot_temperature" => self.ot_temperature = value.parse().map_err(|_| bad())?,
            "sparsity_weight" => self.sparsity_weight = value.parse().map_err(|_| bad())?,
            "structure_weight" => self.structure_weight = value.parse().map_err(|_| bad())?,
            "distill_b" => self.distill_b = value.parse().map_err(|_| bad())?,
            "steps" => self.steps = value.parse().map_err(|_| bad())?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad())?,
            "structure_warmup" => self.structure_warmup = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad())?,
            "proj_dim" => self.proj_dim = value.parse().map_err(|_| bad())?,
            "proj_hidden" => self.proj_hidden = value.parse().map_err(|_| bad())?,
            "stop_gradient" => self.stop_gradient = value.parse().map_err(|_| bad())?,
            "sinkhorn_tolerance" => self.sinkhorn_tolerance = value.parse().map_err(|_| bad())?,
            "sinkhorn_max_iterations" => {
                self.sinkhorn_max_iterations = value.parse().map_err(|_| bad())?
            }
            "sinkhorn_log_domain" => self.sinkhorn_log_domain = value.parse().map_err(|_| bad())?,
            "data_coarse" => self.data_coarse = value.parse().map_err(|_| bad())?,
            "data_fine_per_coarse" => {
                self.data_fine_per_coarse = value.parse().map_err(|_| bad())?
            }
            "data_dim" => self.data_dim = value.parse().map_err(|_| bad())?,
            "data_noise" => self.data_noise = value.parse().map_err(|_| bad())?,
            "data_coarse_angle_deg" => {
                self.data_coarse_angle_deg = value.parse().map_err(|_| bad())?
            }
            "data_images" => self.data_images = value.parse().map_err(|_| bad())?,
            "data_per_class" => self.data_per_class = value.parse().map_err(|_| bad())?,
            "data_seed" => self.data_seed = value.parse().map_err(|_| bad())?,
            "output_dir" => self.output_dir = value.to_string(),
            "run_id" => self.run_id = value.to_string(),
            "determinism" => self.determinism = value.parse().map_err(|_| bad())?,
            "sweep_axis" => {
                let (field, values) = value.split_once(':').ok_or_else(bad)?;
                if !FIELDS.contains(&field.trim()) {
                    return Err(ConfigError::UnknownKey(field.trim().to_string()));
                }
                let values: Vec<String> =
                    values.split(',').map(|v| v.trim().to_string()).collect();
                if values.is_empty() || values.iter().any(String::is_empty) {
                    return Err(bad());
                }
                self.sweep_axes.push((field.trim().to_string(), values));
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `OMH_<FIELD>` environment overrides for every scalar field.
    pub fn apply_env_overrides(&mut self) -> Result<(), ConfigError> {
        for key in FIELDS {
            let var = format!("OMH_{}", key.to_uppercase());
            if let Ok(value) = std::env::var(&var) {
                self.set(key, &value)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.depth < 1 {
            return Err(ConfigError::Invalid("depth must be >= 1".into()));
        }
        if self.base_clusters < 1 {
            return Err(ConfigError::Invalid("base_clusters must be >= 1".into()));
        }
        if !(self.expansion >= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "expansion must be >= 1, got {}",
                self.expansion
            )));
        }
        if !(self.ot_temperature > 0.0) {
            return Err(ConfigError::Invalid("ot_temperature must be positive".into()));
        }
        if self.sparsity_weight < 0.0 || self.structure_weight < 0.0 {
            return Err(ConfigError::Invalid("loss weights must be non-negative".into()));
        }
        if self.eval_interval < 1 {
            return Err(ConfigError::Invalid("eval_interval must be >= 1".into()));
        }
        if self.proj_dim < 1 || self.proj_hidden < 1 {
            return Err(ConfigError::Invalid("projector dims must be >= 1".into()));
        }
        if !(self.sinkhorn_tolerance > 0.0) {
            return Err(ConfigError::Invalid("sinkhorn_tolerance must be positive".into()));
        }
        self.hierarchy_config()
            .schedule()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            sparsity_weight: self.sparsity_weight,
            structure_weight: self.structure_weight,
            distill_b: self.distill_b,
        }
    }

    pub fn sinkhorn_settings(&self) -> SinkhornSettings {
        SinkhornSettings {
            temperature: self.ot_temperature,
            max_iterations: self.sinkhorn_max_iterations,
            tolerance: self.sinkhorn_tolerance,
            log_domain: self.sinkhorn_log_domain,
        }
    }

    pub fn hierarchy_config(&self) -> HierarchyConfig {
        HierarchyConfig {
            depth: self.depth,
            base_clusters: self.base_clusters,
            expansion: self.expansion,
            ot_temperature: self.ot_temperature,
        }
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            n_coarse: self.data_coarse,
            fine_per_coarse: self.data_fine_per_coarse,
            dim: self.data_dim,
            noise_sigma: self.data_noise,
            coarse_angle_deg: self.data_coarse_angle_deg,
            images: self.data_images,
            per_class: self.data_per_class,
        }
    }

    /// Stable FNV-1a hash of the canonical text form, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.format().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
