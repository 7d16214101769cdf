//! WebAssembly bindings for the demo page. Each export takes plain numbers
//! and returns a JSON string the page renders.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::Serialize;
use wasm_bindgen::prelude::*;

use osp_core::harness::checks::{closed_form_throughput_ratio, TimingSetup};
use osp_core::harness::{run_experiment, ExperimentConfig};
use osp_core::protocol::SyncModel;
use osp_core::tuning::{tune_sgu, SguSchedule};

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub routine_fraction: f64,
    pub bsp_bst: f64,
    pub osp_bst: f64,
    pub expected_osp_bst: f64,
    pub throughput_ratio: f64,
    pub expected_ratio: f64,
}

/// BSP against OSP for routine fractions 0.1, 0.2, ..., 1.0.
pub fn timing_sweep_points(workers: usize, model_mb: f64, bandwidth_gbps: f64, tc_ms: f64) -> Result<Vec<SweepPoint>, String> {
    if workers == 0 || !(model_mb > 0.0) || !(bandwidth_gbps > 0.0) || !(tc_ms > 0.0) {
        return Err("workers, model size, bandwidth and compute time must be positive".into());
    }
    // ten equal layers, so every tenth of the model is a whole number of layers
    let model_bytes = ((model_mb * 1e6 / 10.0).round() as u64).max(1) * 10;
    let base = TimingSetup {
        workers,
        model_bytes,
        bandwidth: bandwidth_gbps * 1e9 / 8.0,
        latency: 50e-6,
        agg_delay: 0.0,
        t_c: tc_ms * 1e-3,
        routine_fraction: 1.0,
    };
    let (bsp_bst, bsp_tp) = base.simulate(SyncModel::Bsp, 12)?;
    (1..=10)
        .map(|tenths| {
            let setup = TimingSetup {
                routine_fraction: tenths as f64 / 10.0,
                ..base
            };
            let (osp_bst, osp_tp) = setup.simulate(SyncModel::Osp, 12)?;
            Ok(SweepPoint {
                routine_fraction: setup.routine_fraction,
                bsp_bst,
                osp_bst,
                expected_osp_bst: setup.expected_osp_bst(),
                throughput_ratio: osp_tp / bsp_tp,
                expected_ratio: closed_form_throughput_ratio(&setup),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct BudgetStep {
    pub epoch: u64,
    pub loss: f64,
    pub budget_bytes: u64,
}

/// Budget after each epoch for the given per-epoch losses.
pub fn budget_steps(losses: &[f64], u_max_bytes: u64, model_bytes: u64) -> Result<Vec<BudgetStep>, String> {
    let mut sched = SguSchedule::new(u_max_bytes, model_bytes);
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let epoch = i as u64 + 1;
            let budget_bytes = tune_sgu(&mut sched, epoch, loss).map_err(|e| e.to_string())?;
            Ok(BudgetStep {
                epoch,
                loss,
                budget_bytes,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TrainingRow {
    pub model: String,
    pub error: Option<String>,
    pub throughput: f64,
    pub top1: Option<f64>,
    pub mean_bst: f64,
    pub sim_time: f64,
    /// `(sim_time, accuracy)` at every evaluation.
    pub curve: Vec<(f64, f64)>,
}

/// The blob classifier trained under every model, one after another.
pub fn training_rows(workers: usize, epochs: u64, seed: u64, bandwidth_gbps: f64, jitter: f64) -> Vec<TrainingRow> {
    SyncModel::ALL
        .into_iter()
        .map(|sync| {
            let cfg = ExperimentConfig {
                sync,
                workers,
                epochs,
                seed,
                bandwidth_gbps,
                jitter_fraction: jitter,
                samples: 2000,
                separation: 1.5,
                tc_ms: 5.0,
                model_widths: vec![16, 32, 32, 4],
                stop_on_convergence: false,
                ..ExperimentConfig::default()
            };
            match run_experiment(&cfg) {
                Ok(e) => TrainingRow {
                    model: sync.name().into(),
                    error: None,
                    throughput: e.summary.throughput,
                    top1: e.summary.top1,
                    mean_bst: e.summary.mean_bst,
                    sim_time: e.summary.sim_time,
                    curve: e.summary.time_to_accuracy,
                },
                Err(err) => TrainingRow {
                    model: sync.name().into(),
                    error: Some(err.to_string()),
                    throughput: 0.0,
                    top1: None,
                    mean_bst: 0.0,
                    sim_time: 0.0,
                    curve: Vec::new(),
                },
            }
        })
        .collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn timing_sweep(workers: usize, model_mb: f64, bandwidth_gbps: f64, tc_ms: f64) -> Result<String, JsError> {
    let points = timing_sweep_points(workers, model_mb, bandwidth_gbps, tc_ms).map_err(|e| JsError::new(&e))?;
    to_json(&points)
}

#[wasm_bindgen]
pub fn budget_schedule(losses: Vec<f64>, u_max_mb: f64, model_mb: f64) -> Result<String, JsError> {
    let steps = budget_steps(&losses, (u_max_mb * 1e6) as u64, (model_mb * 1e6) as u64)
        .map_err(|e| JsError::new(&e))?;
    to_json(&steps)
}

#[wasm_bindgen]
pub fn train_compare(workers: usize, epochs: u32, seed: u32, bandwidth_gbps: f64, jitter: f64) -> Result<String, JsError> {
    if workers == 0 || workers > 32 || epochs == 0 || epochs > 60 {
        return Err(JsError::new("workers must be 1 to 32 and epochs 1 to 60"));
    }
    if !(bandwidth_gbps > 0.0) || !(0.0..1.0).contains(&jitter) {
        return Err(JsError::new("bandwidth must be positive and jitter in [0, 1)"));
    }
    to_json(&training_rows(workers, epochs.into(), seed.into(), bandwidth_gbps, jitter))
}
