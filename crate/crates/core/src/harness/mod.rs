//! Assembles learner, protocol and simulator from a config, runs single
//! experiments and protocol comparisons, and writes their artifacts.

pub mod checks;
mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub use config::{parse_config, ComputeTimeMode, ConfigError, ExperimentConfig, Provenance, Source};
pub use report::{emit_report, ComparisonRow, ComparisonTable, RowStatus};

use crate::learner::{load_csv, synth_dataset, LearnerError, LossKind, MlpSpec};
use crate::metrics::{export_json, summarize, IterationRecord, MetricsError, RunSummary};
use crate::protocol::workload::{MlpWorkload, SyntheticWorkload, Workload};
use crate::protocol::{run, ProtocolError, RunOutput, SyncModel};
use crate::seed::{self, Purpose};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The workload a config describes: the MLP over blobs or a CSV, or noise
/// layers when a synthetic model size is set.
pub fn build_workload(cfg: &ExperimentConfig) -> Result<Box<dyn Workload + Send>, HarnessError> {
    cfg.validate()?;
    if let Some(bytes) = cfg.synthetic_model_bytes {
        return Ok(Box::new(SyntheticWorkload::new(
            bytes,
            cfg.synthetic_layers,
            cfg.workers,
            cfg.synthetic_iterations_per_epoch,
            cfg.batch,
            cfg.seed,
        )?));
    }
    let spec = MlpSpec::new(cfg.model_widths.clone(), cfg.activation, LossKind::SoftmaxCrossEntropy)?;
    let data = match &cfg.dataset_csv {
        Some(path) => load_csv(path)?,
        None => synth_dataset(
            seed::derive(cfg.seed, Purpose::Data, &[]),
            cfg.samples,
            spec.input_width(),
            spec.output_width(),
            cfg.separation,
        )?,
    };
    if data.class_count() > spec.output_width() {
        return Err(ConfigError::Invalid {
            key: "model-widths".into(),
            reason: format!(
                "{} output units for {} classes",
                spec.output_width(),
                data.class_count()
            ),
        }
        .into());
    }
    let (train, test) = data.split(cfg.test_fraction, seed::derive(cfg.seed, Purpose::Data, &[1]));
    Ok(Box::new(MlpWorkload::new(
        spec,
        train,
        test,
        cfg.workers,
        cfg.batch,
        cfg.lr_schedule(),
        cfg.seed,
        cfg.bytes_per_element,
    )?))
}

/// Everything a run produced.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub output: RunOutput,
    pub summary: RunSummary,
}

/// `summary.json`: the resolved config next to the results.
#[derive(Debug, Serialize)]
struct SummaryFile<'a> {
    config: &'a ExperimentConfig,
    summary: &'a RunSummary,
    iterations_per_epoch: u64,
    samples_per_iteration: u64,
    stopped_early: bool,
    ingress_payload_bytes: u64,
    egress_payload_bytes: u64,
}

#[derive(Debug, Serialize)]
struct FailureFile<'a> {
    config: &'a ExperimentConfig,
    error: String,
}

/// Runs one experiment; with `cfg.out` set, writes `config.toml`,
/// `metrics.csv`, `metrics.json`, `summary.json` and, when tracing,
/// `trace.tsv` there. A failed run leaves `failure.json` instead.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    let result = execute(cfg);
    if let (Err(e), Some(dir)) = (&result, &cfg.out) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        export_json(
            &FailureFile {
                config: cfg,
                error: e.to_string(),
            },
            &dir.join("failure.json"),
        )?;
    }
    let experiment = result?;
    if let Some(dir) = &cfg.out {
        write_artifacts(&experiment, dir)?;
    }
    Ok(experiment)
}

fn execute(cfg: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    let mut workload = build_workload(cfg)?;
    let opts = cfg.run_options(workload.iterations_per_epoch());
    let output = run(workload.as_mut(), &opts)?;
    let summary = summarize(&output.log, output.samples_per_iteration)?;
    Ok(Experiment {
        config: cfg.clone(),
        output,
        summary,
    })
}

fn write_artifacts(e: &Experiment, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.toml");
    fs::write(&path, e.config.to_toml()).map_err(io_err(&path))?;
    e.output.log.export_csv(&dir.join("metrics.csv"))?;
    let records: &[IterationRecord] = e.output.log.records();
    export_json(&records, &dir.join("metrics.json"))?;
    export_json(
        &SummaryFile {
            config: &e.config,
            summary: &e.summary,
            iterations_per_epoch: e.output.iterations_per_epoch,
            samples_per_iteration: e.output.samples_per_iteration,
            stopped_early: e.output.stopped_early,
            ingress_payload_bytes: e.output.ingress_payload_bytes,
            egress_payload_bytes: e.output.egress_payload_bytes,
        },
        &dir.join("summary.json"),
    )?;
    if let Some(trace) = &e.output.trace {
        let path = dir.join("trace.tsv");
        fs::write(&path, trace).map_err(io_err(&path))?;
    }
    Ok(())
}

/// A base config and the models to run it under.
#[derive(Debug, Clone)]
pub struct ComparisonSpec {
    pub base: ExperimentConfig,
    pub models: Vec<SyncModel>,
}

impl ComparisonSpec {
    pub fn all_models(base: ExperimentConfig) -> Self {
        Self {
            base,
            models: SyncModel::ALL.to_vec(),
        }
    }

    /// Config of one row: the base with only the model (and its output
    /// directory) changed.
    pub fn config_for(&self, model: SyncModel) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.sync = model;
        cfg.out = self.base.out.as_ref().map(|d| d.join(model.name()));
        cfg
    }
}

/// One run per model, in parallel threads. A failed run fails only its row.
pub fn run_comparison(spec: &ComparisonSpec) -> ComparisonTable {
    let results: Vec<(SyncModel, Result<RunSummary, String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = spec
            .models
            .iter()
            .map(|&m| {
                let cfg = spec.config_for(m);
                (
                    m,
                    s.spawn(move || run_experiment(&cfg).map(|e| e.summary).map_err(|e| e.to_string())),
                )
            })
            .collect();
        handles
            .into_iter()
            .map(|(m, h)| {
                let r = h.join().unwrap_or_else(|_| Err("run panicked".to_string()));
                (m, r)
            })
            .collect()
    });
    ComparisonTable::from_results(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            workers: 3,
            samples: 300,
            epochs: 3,
            batch: 16,
            model_widths: vec![4, 8, 3],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn run_writes_reproducible_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.trace = true;
        cfg.out = Some(dir.path().join("a"));
        run_experiment(&cfg).unwrap();
        let echo = fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
        let mut again = ExperimentConfig::from_toml(&echo).unwrap();
        again.out = Some(dir.path().join("b"));
        run_experiment(&again).unwrap();
        for f in ["metrics.csv", "metrics.json", "trace.tsv"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
        assert!(csv.starts_with("iteration,sim_time_end,bst,"));
    }

    #[test]
    fn partition_is_even() {
        let cfg = ExperimentConfig {
            samples: 103,
            test_fraction: 0.0,
            workers: 4,
            ..small()
        };
        let w = build_workload(&cfg).unwrap();
        let weights = w.subset_weights();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let sizes: Vec<f64> = weights.iter().map(|x| x * 103.0).collect();
        let (lo, hi) = sizes.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi - lo <= 1.0 + 1e-9);
    }

    #[test]
    fn diverging_run_leaves_a_failure_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.learning_rate = 1e200;
        cfg.out = Some(dir.path().to_path_buf());
        assert!(run_experiment(&cfg).is_err());
        let text = fs::read_to_string(dir.path().join("failure.json")).unwrap();
        assert!(text.contains("\"error\""));
    }

    #[test]
    fn comparison_has_a_row_per_model() {
        let spec = ComparisonSpec::all_models(small());
        let table = run_comparison(&spec);
        assert_eq!(table.rows.len(), 5);
        assert!(table.rows.iter().all(|r| r.status == RowStatus::Ok));
        let bsp = table.rows.iter().find(|r| r.model == SyncModel::Bsp).unwrap();
        assert_eq!(bsp.relative_throughput, Some(1.0));
    }
}
