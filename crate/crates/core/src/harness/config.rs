//! Experiment configuration: defaults, a TOML file and command-line flags,
//! merged in that order.
//!
//! Every key of the file format is a field of [`ExperimentConfig`] in
//! kebab-case. Unknown keys and wrong types are rejected with the key named.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{Activation, LossKind, LrSchedule, MlpSpec};
use crate::netsim::{ComputeProfile, ServerDelayProfile};
use crate::protocol::osp::ComputeTimeSource;
use crate::protocol::{RunOptions, SyncModel};
use crate::tuning::NetworkParams;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("config file: {0}")]
    Parse(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComputeTimeMode {
    /// The simulated compute time, known exactly.
    Configured,
    /// Mean of the previous epoch's compute phases.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sync: SyncModel,
    pub workers: usize,
    pub bandwidth_gbps: f64,
    pub latency_us: f64,
    pub loss_rate: f64,
    /// Base compute time per iteration.
    pub tc_ms: f64,
    pub jitter_fraction: f64,
    /// Per-worker compute slowdowns; missing entries are 1.
    pub straggler_multipliers: Vec<f64>,
    pub agg_delay_ms: f64,
    pub gib_calc_delay_ms: f64,
    pub gib_push_negligible: bool,

    /// Layer widths from input features to classes.
    pub model_widths: Vec<usize>,
    pub activation: Activation,
    /// Bytes each parameter stands for on the wire.
    pub bytes_per_element: u64,
    /// Replace the MLP with noise layers of this total size (timing studies).
    pub synthetic_model_bytes: Option<u64>,
    pub synthetic_layers: usize,
    pub synthetic_iterations_per_epoch: u64,

    /// Read samples from this CSV instead of generating blobs.
    pub dataset_csv: Option<PathBuf>,
    pub samples: usize,
    pub separation: f64,
    pub test_fraction: f64,

    pub learning_rate: f64,
    pub lr_halve_every: u64,
    pub batch: usize,
    pub epochs: u64,
    pub stop_on_convergence: bool,
    pub seed: u64,

    pub ssp_staleness: u64,
    /// Period of deferred-layer corrections; unset means a quarter of `tc-ms`.
    pub chunk_period_ms: Option<f64>,
    pub eq5_literal: bool,
    pub compute_time: ComputeTimeMode,
    /// Defer this share of the model every iteration instead of tuning.
    pub ics_fraction: Option<f64>,

    pub trace: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sync: SyncModel::Osp,
            workers: 8,
            bandwidth_gbps: 10.0,
            latency_us: 50.0,
            loss_rate: 0.0,
            tc_ms: 25.0,
            jitter_fraction: 0.0,
            straggler_multipliers: Vec::new(),
            agg_delay_ms: 0.0,
            gib_calc_delay_ms: 0.0,
            gib_push_negligible: true,
            model_widths: vec![16, 64, 64, 4],
            activation: Activation::Relu,
            bytes_per_element: 4,
            synthetic_model_bytes: None,
            synthetic_layers: 10,
            synthetic_iterations_per_epoch: 10,
            dataset_csv: None,
            samples: 4000,
            separation: 3.0,
            test_fraction: 0.2,
            learning_rate: 0.1,
            lr_halve_every: 10,
            batch: 32,
            epochs: 20,
            stop_on_convergence: true,
            seed: 1,
            ssp_staleness: 3,
            chunk_period_ms: None,
            eq5_literal: false,
            compute_time: ComputeTimeMode::Configured,
            ics_fraction: None,
            trace: false,
            out: None,
        }
    }
}

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Default,
    File,
    Flag,
    /// A flag replaced a value the file set.
    FlagOverFile,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
            Source::FlagOverFile => "flag (overrides file)",
        })
    }
}

pub type Provenance = BTreeMap<String, Source>;

fn parse_table(text: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.message().to_string()))
}

/// Default config with `file` then `flags` laid over it. Both are TOML
/// tables using the config keys; flags win.
pub fn parse_config(file: Option<&str>, flags: &toml::Table) -> Result<(ExperimentConfig, Provenance), ConfigError> {
    let mut merged = toml::Table::try_from(ExperimentConfig::default())
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut provenance: Provenance = merged.keys().map(|k| (k.clone(), Source::Default)).collect();
    let known: Vec<String> = merged.keys().cloned().collect();
    // optional keys are absent from the serialized defaults
    let optional = ["synthetic-model-bytes", "dataset-csv", "chunk-period-ms", "ics-fraction", "out"];
    let is_known = |k: &str| known.iter().any(|x| x == k) || optional.contains(&k);

    if let Some(text) = file {
        for (k, v) in parse_table(text)? {
            if !is_known(&k) {
                return Err(invalid(&k, "unknown key"));
            }
            provenance.insert(k.clone(), Source::File);
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        if !is_known(k) {
            return Err(invalid(k, "unknown key"));
        }
        let source = match provenance.get(k) {
            Some(Source::File) => Source::FlagOverFile,
            _ => Source::Flag,
        };
        provenance.insert(k.clone(), source);
        merged.insert(k.clone(), v.clone());
    }
    let cfg = decode(merged)?;
    cfg.validate()?;
    Ok((cfg, provenance))
}

/// Deserializes key by key so a type error names its key.
fn decode(table: toml::Table) -> Result<ExperimentConfig, ConfigError> {
    for (k, v) in &table {
        let mut single = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        single.insert(k.clone(), v.clone());
        if let Err(e) = single.try_into::<ExperimentConfig>() {
            return Err(invalid(k, e.message().to_string()));
        }
    }
    table
        .try_into::<ExperimentConfig>()
        .map_err(|e| ConfigError::Parse(e.message().to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        parse_config(Some(text), &toml::Table::new()).map(|(c, _)| c)
    }

    /// The fully resolved config in file form.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be non-negative, got {v}")))
            }
        };
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        positive("bandwidth-gbps", self.bandwidth_gbps)?;
        non_negative("latency-us", self.latency_us)?;
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(invalid("loss-rate", format!("must be in [0, 1), got {}", self.loss_rate)));
        }
        positive("tc-ms", self.tc_ms)?;
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(invalid("jitter-fraction", "must be in [0, 1)"));
        }
        if self.straggler_multipliers.len() > self.workers {
            return Err(invalid("straggler-multipliers", "more entries than workers"));
        }
        if let Some(m) = self.straggler_multipliers.iter().find(|m| !(m.is_finite() && **m >= 1.0)) {
            return Err(invalid("straggler-multipliers", format!("{m} is below 1")));
        }
        non_negative("agg-delay-ms", self.agg_delay_ms)?;
        non_negative("gib-calc-delay-ms", self.gib_calc_delay_ms)?;
        MlpSpec::new(self.model_widths.clone(), self.activation, LossKind::SoftmaxCrossEntropy)
            .map_err(|e| invalid("model-widths", e.to_string()))?;
        if self.bytes_per_element == 0 {
            return Err(invalid("bytes-per-element", "must be at least 1"));
        }
        if let Some(bytes) = self.synthetic_model_bytes {
            if self.synthetic_layers == 0 || bytes == 0 || bytes % self.synthetic_layers as u64 != 0 {
                return Err(invalid(
                    "synthetic-model-bytes",
                    format!("must split evenly over {} layers", self.synthetic_layers),
                ));
            }
        }
        if self.synthetic_iterations_per_epoch == 0 {
            return Err(invalid("synthetic-iterations-per-epoch", "must be at least 1"));
        }
        if self.dataset_csv.is_none() && self.samples < self.workers {
            return Err(invalid("samples", "fewer samples than workers"));
        }
        positive("separation", self.separation)?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(invalid("test-fraction", "must be in [0, 1)"));
        }
        positive("learning-rate", self.learning_rate)?;
        if self.batch == 0 {
            return Err(invalid("batch", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if let Some(t) = self.chunk_period_ms {
            positive("chunk-period-ms", t)?;
        }
        if let Some(f) = self.ics_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid("ics-fraction", "must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> NetworkParams {
        NetworkParams::new(self.bandwidth_gbps * 1e9 / 8.0, self.latency_us * 1e-6, self.loss_rate)
            .expect("validated")
    }

    pub fn compute_profile(&self) -> ComputeProfile {
        ComputeProfile {
            t_c_base: self.tc_ms * 1e-3,
            straggler_multipliers: self.straggler_multipliers.clone(),
            jitter_fraction: self.jitter_fraction,
            seed: self.seed,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.learning_rate, self.lr_halve_every)
    }

    /// Simulation options for `iterations_per_epoch` iterations per epoch.
    pub fn run_options(&self, iterations_per_epoch: u64) -> RunOptions {
        let mut o = RunOptions::new(
            self.sync,
            self.network(),
            self.compute_profile(),
            self.epochs * iterations_per_epoch,
        );
        o.delays = ServerDelayProfile {
            agg_delay: self.agg_delay_ms * 1e-3,
            gib_calc_delay: self.gib_calc_delay_ms * 1e-3,
            gib_push_negligible: self.gib_push_negligible,
        };
        o.ssp_staleness = self.ssp_staleness;
        o.chunk_period = self.chunk_period_ms.map(|t| t * 1e-3);
        o.eq5_literal = self.eq5_literal;
        o.compute_time = match self.compute_time {
            ComputeTimeMode::Configured => ComputeTimeSource::Configured(self.tc_ms * 1e-3),
            ComputeTimeMode::Measured => ComputeTimeSource::Measured,
        };
        o.fixed_ics_fraction = self.ics_fraction;
        o.stop_on_convergence = self.stop_on_convergence;
        o.trace = self.trace;
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, toml::Value)]) -> toml::Table {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn flags_over_defaults() {
        let (cfg, prov) = parse_config(
            None,
            &flags(&[
                ("sync", "osp".into()),
                ("workers", 8.into()),
                ("seed", 7.into()),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.sync, SyncModel::Osp);
        assert_eq!(cfg.seed, 7);
        assert_eq!(prov["seed"], Source::Flag);
        assert_eq!(prov["batch"], Source::Default);
    }

    #[test]
    fn zero_workers_names_the_key() {
        let err = parse_config(None, &flags(&[("workers", 0.into())])).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "workers"), "{err}");
    }

    #[test]
    fn flag_wins_over_file_and_is_noted() {
        let file = "workers = 4\nbatch = 16\nsync = \"bsp\"\n";
        let (cfg, prov) = parse_config(Some(file), &flags(&[("workers", 2.into())])).unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.batch, 16);
        assert_eq!(cfg.sync, SyncModel::Bsp);
        assert_eq!(prov["workers"], Source::FlagOverFile);
        assert_eq!(prov["batch"], Source::File);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_named() {
        let err = ExperimentConfig::from_toml("wrokers = 3").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "wrokers"));
        let err = ExperimentConfig::from_toml("batch = \"big\"").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "batch"), "{err}");
        let err = ExperimentConfig::from_toml("sync = \"paxos\"").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "sync"), "{err}");
        assert!(matches!(ExperimentConfig::from_toml("= 3"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn constraint_violations_are_named() {
        for (text, key) in [
            ("loss-rate = 1.5", "loss-rate"),
            ("tc-ms = 0.0", "tc-ms"),
            ("model-widths = [4]", "model-widths"),
            ("ics-fraction = 2.0", "ics-fraction"),
            ("straggler-multipliers = [0.5]", "straggler-multipliers"),
            ("synthetic-model-bytes = 101", "synthetic-model-bytes"),
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(&err, ConfigError::Invalid { key: k, .. } if k == key), "{text}: {err}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig {
            chunk_period_ms: Some(5.0),
            ics_fraction: Some(0.25),
            straggler_multipliers: vec![1.0, 2.0],
            ..ExperimentConfig::default()
        };
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap().to_toml(), text);
    }

    #[test]
    fn units_convert() {
        let cfg = ExperimentConfig::from_toml("bandwidth-gbps = 10.0\nlatency-us = 100.0\ntc-ms = 250.0").unwrap();
        let net = cfg.network();
        assert_eq!(net.bandwidth, 1.25e9);
        assert!((net.latency - 1e-4).abs() < 1e-18);
        assert_eq!(cfg.compute_profile().t_c_base, 0.25);
    }
}
