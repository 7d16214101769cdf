//! Invariant and oracle suites shared by `osp check` and the acceptance
//! test target. Each check runs a small self-contained experiment and
//! reports whether the measured value lies within its tolerance.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::importance::{gib_decode, gib_encode, gib_encoded_len, Gib};
use crate::learner::{finite_diff_grad, forward_backward, init_params, synth_dataset, Activation, LossKind, MlpSpec};
use crate::metrics::summarize;
use crate::param::{LayerPayload, LayerSet};
use crate::protocol::workload::{SyntheticWorkload, Workload};
use crate::protocol::{aggregate, run, RunOptions, SyncModel};
use crate::tuning::compute_umax;

use super::{build_workload, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

fn result(id: u8, name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        id,
        name,
        passed,
        detail,
    }
}

fn failed(id: u8, name: &'static str, err: impl fmt::Display) -> CheckResult {
    result(id, name, false, format!("error: {err}"))
}

pub const CHECK_IDS: [u8; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

pub fn run_check(id: u8) -> Option<CheckResult> {
    Some(match id {
        1 => degeneration_to_barrier(),
        2 => deferred_gradient_conservation(),
        3 => gradient_oracle(),
        4 => aggregation_oracle(),
        5 => sync_time_closed_forms(),
        6 => throughput_ratio(),
        7 => accuracy_preservation(),
        8 => tuning_schedule(),
        9 => gib_wire_bound(),
        10 => determinism(),
        _ => return None,
    })
}

pub fn run_all() -> Vec<CheckResult> {
    CHECK_IDS.iter().filter_map(|&id| run_check(id)).collect()
}

/// Blobs config at the reference scale: 8 workers, [16,64,64,4].
fn mlp_config(sync: SyncModel, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        sync,
        seed,
        stop_on_convergence: false,
        ..ExperimentConfig::default()
    }
}

fn probed_run(cfg: &ExperimentConfig, iterations: u64) -> Result<crate::protocol::RunOutput, String> {
    let mut w = build_workload(cfg).map_err(|e| e.to_string())?;
    let mut o = cfg.run_options(w.iterations_per_epoch());
    o.max_iterations = iterations;
    o.stop_on_convergence = false;
    o.record_probes = true;
    run(w.as_mut(), &o).map_err(|e| e.to_string())
}

pub fn degeneration_to_barrier() -> CheckResult {
    const NAME: &str = "zero budget reproduces BSP checksums";
    let bsp = probed_run(&mlp_config(SyncModel::Bsp, 7), 50);
    let mut osp_cfg = mlp_config(SyncModel::Osp, 7);
    osp_cfg.ics_fraction = Some(0.0);
    let osp = probed_run(&osp_cfg, 50);
    let (bsp, osp) = match (bsp, osp) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return failed(1, NAME, e),
    };
    let a = bsp.probes.expect("probes on").global_checksums;
    let b = osp.probes.expect("probes on").global_checksums;
    let first_diff = a.iter().zip(&b).position(|(x, y)| x != y);
    let passed = a.len() == 50 && b.len() == 50 && first_diff.is_none();
    let detail = match first_diff {
        None => format!("{} of {} iteration checksums identical", a.len().min(b.len()), 50),
        Some(i) => format!("checksums diverge at iteration {i}"),
    };
    result(1, NAME, passed, detail)
}

pub fn deferred_gradient_conservation() -> CheckResult {
    const NAME: &str = "deferred updates conserved exactly";
    let mut cfg = mlp_config(SyncModel::Osp, 3);
    cfg.ics_fraction = Some(0.5);
    let out = match probed_run(&cfg, 100) {
        Ok(o) => o,
        Err(e) => return failed(2, NAME, e),
    };
    let probes = out.probes.expect("probes on");
    let mut p = out.initial_params.clone();
    let mut at_end = BTreeMap::new();
    for (it, d) in &probes.applied {
        if let Err(e) = p.apply_payload(d, 1.0) {
            return failed(2, NAME, e);
        }
        at_end.insert(*it, p.checksum());
    }
    let deferred = out.log.records().iter().filter(|r| r.ics_bytes > 0).count();
    let mut mismatches = 0;
    let mut checked = 0;
    for it in 0..100u64 {
        let workers = probes.settled_checksums.get(&it);
        let ok = match (workers, at_end.get(&it)) {
            (Some(w), Some(expected)) => w.len() == cfg.workers && w.values().all(|c| c == expected),
            _ => false,
        };
        checked += 1;
        if !ok {
            mismatches += 1;
        }
    }
    let passed = mismatches == 0 && deferred > 0;
    result(
        2,
        NAME,
        passed,
        format!("{checked} iterations, {deferred} with deferred layers, {mismatches} mismatches"),
    )
}

/// Largest `|a - n| / max(|a|, |n|, 1e-3)` over 10 random networks.
pub fn gradient_oracle() -> CheckResult {
    const NAME: &str = "analytic gradients match central differences";
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for instance in 0..10u64 {
        let depth = rng.random_range(2..=4);
        let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=7)).collect();
        let classes = *widths.last().expect("depth >= 2");
        let loss = if instance % 3 == 2 { LossKind::Mse } else { LossKind::SoftmaxCrossEntropy };
        let spec = match MlpSpec::new(widths.clone(), Activation::Tanh, loss) {
            Ok(s) => s,
            Err(e) => return failed(3, NAME, e),
        };
        let computed = (|| {
            let params = init_params(&spec, instance)?;
            let data = synth_dataset(instance, 16, widths[0], classes, 2.0)?;
            let batch: Vec<usize> = (0..16).collect();
            let (_, a) = forward_backward(&spec, &params, &data, &batch)?;
            let n = finite_diff_grad(&spec, &params, &data, &batch, 1e-4)?;
            Ok::<_, crate::learner::LearnerError>((a, n))
        })();
        let (a, n) = match computed {
            Ok(v) => v,
            Err(e) => return failed(3, NAME, e),
        };
        for (x, y) in a.values().iter().zip(n.values()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    result(3, NAME, worst < 1e-4, format!("max relative error {worst:.3e} (limit 1e-4)"))
}

/// Weighted mean recomputed element by element in ascending worker order.
fn brute_force_mean(payloads: &[LayerPayload], weights: &[f64]) -> LayerPayload {
    let total: f64 = weights.iter().sum();
    let mut out = LayerPayload::new();
    for layer in payloads[0].layer_ids() {
        let len = payloads[0].get(layer).expect("present").len();
        let mut values = Vec::with_capacity(len);
        for j in 0..len {
            let mut s = 0.0;
            for (p, w) in payloads.iter().zip(weights) {
                s += w * p.get(layer).expect("same layers")[j];
            }
            values.push(s / total);
        }
        out.insert(layer, values);
    }
    out
}

pub fn aggregation_oracle() -> CheckResult {
    const NAME: &str = "weighted aggregation matches brute force";
    let mut rng = ChaCha8Rng::seed_from_u64(0xa66);
    let mut cases = 0;
    for _ in 0..200 {
        let workers = rng.random_range(1..=9);
        let layers: LayerSet = (0..rng.random_range(1..=6)).filter(|_| rng.random_bool(0.7)).collect();
        let lens: Vec<usize> = (0..6).map(|_| rng.random_range(1..=12)).collect();
        let weights: Vec<f64> = (0..workers).map(|_| rng.random_range(0.01..3.0)).collect();
        let payloads: Vec<LayerPayload> = (0..workers)
            .map(|_| {
                let mut p = LayerPayload::new();
                for l in layers.iter() {
                    p.insert(l, (0..lens[l]).map(|_| rng.random_range(-5.0..5.0)).collect());
                }
                p
            })
            .collect();
        let refs: Vec<&LayerPayload> = payloads.iter().collect();
        let got = match aggregate(&refs, &weights) {
            Ok(g) => g,
            Err(e) => return failed(4, NAME, e),
        };
        if layers.is_empty() {
            if !got.is_empty() {
                return result(4, NAME, false, "empty payloads produced layers".into());
            }
            continue;
        }
        if got != brute_force_mean(&payloads, &weights) {
            return result(4, NAME, false, format!("mismatch after {cases} cases"));
        }
        cases += 1;
    }
    result(4, NAME, true, format!("{cases} random cases bitwise equal"))
}

/// Reference timing setup: 8 workers, 25 MB in 10 layers, 10 Gbps links.
pub struct TimingSetup {
    pub workers: usize,
    pub model_bytes: u64,
    pub bandwidth: f64,
    pub latency: f64,
    pub agg_delay: f64,
    pub t_c: f64,
    pub routine_fraction: f64,
}

impl Default for TimingSetup {
    fn default() -> Self {
        Self {
            workers: 8,
            model_bytes: 25_000_000,
            bandwidth: 1.25e9,
            latency: 50e-6,
            agg_delay: 1e-3,
            t_c: 0.25,
            routine_fraction: 0.2,
        }
    }
}

impl TimingSetup {
    pub fn expected_bsp_bst(&self) -> f64 {
        let nm = self.workers as f64 * self.model_bytes as f64;
        2.0 * nm / self.bandwidth + self.agg_delay + 2.0 * self.latency
    }

    pub fn expected_osp_bst(&self) -> f64 {
        let nm = self.workers as f64 * self.model_bytes as f64;
        2.0 * nm * self.routine_fraction / self.bandwidth + self.agg_delay + 2.0 * self.latency
    }

    /// Mean BST over iterations past the first, and throughput.
    pub fn simulate(&self, sync: SyncModel, iterations: u64) -> Result<(f64, f64), String> {
        let mut w = SyntheticWorkload::new(self.model_bytes, 10, self.workers, 1000, 32, 1)
            .map_err(|e| e.to_string())?;
        let net = crate::tuning::NetworkParams::new(self.bandwidth, self.latency, 0.0).map_err(|e| e.to_string())?;
        let mut o = RunOptions::new(sync, net, crate::netsim::ComputeProfile::uniform(self.t_c), iterations);
        o.delays.agg_delay = self.agg_delay;
        o.compute_time = crate::protocol::osp::ComputeTimeSource::Configured(self.t_c);
        o.fixed_ics_fraction = Some(1.0 - self.routine_fraction);
        let out = run(&mut w, &o).map_err(|e| e.to_string())?;
        let steady: Vec<f64> = out.log.records().iter().skip(2).map(|r| r.bst).collect();
        let mean = steady.iter().sum::<f64>() / steady.len().max(1) as f64;
        let summary = summarize(&out.log, out.samples_per_iteration).map_err(|e| e.to_string())?;
        Ok((mean, summary.throughput))
    }
}

pub fn sync_time_closed_forms() -> CheckResult {
    const NAME: &str = "simulated sync time matches closed forms";
    let setup = TimingSetup::default();
    let (bsp, osp) = match (setup.simulate(SyncModel::Bsp, 8), setup.simulate(SyncModel::Osp, 8)) {
        (Ok(a), Ok(b)) => (a.0, b.0),
        (Err(e), _) | (_, Err(e)) => return failed(5, NAME, e),
    };
    let (eb, eo) = (setup.expected_bsp_bst(), setup.expected_osp_bst());
    let (rb, ro) = ((bsp - eb).abs() / eb, (osp - eo).abs() / eo);
    result(
        5,
        NAME,
        rb <= 0.01 && ro <= 0.01,
        format!(
            "BSP {bsp:.6}s vs {eb:.6}s ({:.3}%), OSP {osp:.6}s vs {eo:.6}s ({:.3}%), limit 1%",
            rb * 100.0,
            ro * 100.0
        ),
    )
}

/// Iteration times of the reference setup without latency or aggregation.
pub fn closed_form_throughput_ratio(setup: &TimingSetup) -> f64 {
    let nm = setup.workers as f64 * setup.model_bytes as f64;
    let bsp = setup.t_c + 2.0 * nm / setup.bandwidth;
    let osp = setup.t_c + 2.0 * nm * setup.routine_fraction / setup.bandwidth;
    bsp / osp
}

pub fn throughput_ratio() -> CheckResult {
    const NAME: &str = "two-stage throughput gain over BSP";
    let setup = TimingSetup {
        agg_delay: 0.0,
        ..TimingSetup::default()
    };
    let (bsp, osp) = match (setup.simulate(SyncModel::Bsp, 50), setup.simulate(SyncModel::Osp, 50)) {
        (Ok(a), Ok(b)) => (a.1, b.1),
        (Err(e), _) | (_, Err(e)) => return failed(6, NAME, e),
    };
    let ratio = osp / bsp;
    let expected = closed_form_throughput_ratio(&setup);
    let off = (ratio - expected).abs() / expected;
    result(
        6,
        NAME,
        ratio >= 1.5 && off <= 0.05,
        format!("ratio {ratio:.4} vs closed form {expected:.4} ({:.2}% off, limit 5%), minimum 1.5", off * 100.0),
    )
}

pub fn accuracy_preservation() -> CheckResult {
    const SEPARATION: f64 = 1.0;
    const NAME: &str = "two-stage accuracy within 1 point of BSP";
    let mut tops = [Vec::new(), Vec::new()];
    let (mut deferred, mut total) = (0u64, 0u64);
    for seed in 1..=5u64 {
        for (i, sync) in [SyncModel::Bsp, SyncModel::Osp].into_iter().enumerate() {
            // overlapping blobs, so accuracy has room below 1
            let cfg = ExperimentConfig {
                epochs: 15,
                separation: SEPARATION,
                ..mlp_config(sync, seed)
            };
            match super::run_experiment(&cfg) {
                Ok(e) => {
                    tops[i].push(e.summary.top1.unwrap_or(0.0));
                    if sync == SyncModel::Osp {
                        for r in e.output.log.records() {
                            deferred += r.ics_bytes;
                            total += r.ics_bytes + r.rs_bytes;
                        }
                    }
                }
                Err(e) => return failed(7, NAME, e),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, o) = (mean(&tops[0]), mean(&tops[1]));
    let share = deferred as f64 / total.max(1) as f64;
    result(
        7,
        NAME,
        (o - b).abs() <= 0.01 && deferred > 0,
        format!(
            "mean top-1 over 5 seeds: BSP {b:.4}, OSP {o:.4}, gap {:.4} (limit 0.01); OSP deferred {:.1}% of bytes",
            (o - b).abs(),
            share * 100.0
        ),
    )
}

pub fn tuning_schedule() -> CheckResult {
    const NAME: &str = "budget schedule grows, starts at zero, stays capped";
    let mut details = Vec::new();
    let mut passed = true;
    // the second bandwidth makes the compute-time bound the tighter cap
    for bandwidth in [1.25e9, 0.5e9] {
        let setup = TimingSetup {
            bandwidth,
            ..TimingSetup::default()
        };
        let ipe = 5;
        let mut w = match SyntheticWorkload::new(setup.model_bytes, 10, setup.workers, ipe, 32, 1) {
            Ok(w) => w,
            Err(e) => return failed(8, NAME, e),
        };
        let net = crate::tuning::NetworkParams::new(bandwidth, setup.latency, 0.0).expect("valid");
        let mut o = RunOptions::new(SyncModel::Osp, net, crate::netsim::ComputeProfile::uniform(setup.t_c), 8 * ipe);
        o.compute_time = crate::protocol::osp::ComputeTimeSource::Configured(setup.t_c);
        let out = match run(&mut w, &o) {
            Ok(o) => o,
            Err(e) => return failed(8, NAME, e),
        };
        let model = w.partition().model_bytes();
        let cap = compute_umax(&net, setup.t_c, setup.workers, model, false).min(model * 4 / 5);
        let budgets: Vec<u64> = out.log.records().iter().map(|r| r.sgu_budget_bytes).collect();
        let monotone = budgets.windows(2).all(|p| p[0] <= p[1]);
        let first_epoch_zero = budgets[..ipe as usize].iter().all(|&b| b == 0);
        let max = budgets.iter().copied().max().unwrap_or(0);
        let ok = monotone && first_epoch_zero && max <= cap && max > 0;
        passed &= ok;
        details.push(format!(
            "b={bandwidth:.2e}: max {max} of cap {cap}, non-decreasing {monotone}, epoch 1 zero {first_epoch_zero}"
        ));
    }
    result(8, NAME, passed, details.join("; "))
}

pub fn gib_wire_bound() -> CheckResult {
    const NAME: &str = "bitmap encoding size and round trip";
    let len = gib_encoded_len(1000);
    let mut rng = ChaCha8Rng::seed_from_u64(0x61b);
    for layers in 1..=1000usize {
        let gib = Gib {
            ics_set: (0..layers).filter(|_| rng.random_bool(0.4)).collect(),
            iteration_tag: rng.random(),
        };
        let back = gib_encode(&gib, layers).and_then(|b| gib_decode(&b, layers));
        if back.as_ref() != Ok(&gib) {
            return result(9, NAME, false, format!("round trip failed at {layers} layers"));
        }
    }
    result(9, NAME, len <= 1024, format!("1000 layers encode to {len} bytes (limit 1024); 1..=1000 round trip"))
}

/// Serialized outputs of one run: CSV, record JSON, summary JSON, trace.
pub fn run_fingerprint(cfg: &ExperimentConfig) -> Result<[String; 4], String> {
    let e = super::run_experiment(cfg).map_err(|e| e.to_string())?;
    Ok([
        e.output.log.to_csv_string(),
        serde_json::to_string(e.output.log.records()).map_err(|e| e.to_string())?,
        serde_json::to_string(&e.summary).map_err(|e| e.to_string())?,
        e.output.trace.unwrap_or_default(),
    ])
}

pub fn determinism() -> CheckResult {
    const NAME: &str = "reruns are byte-identical";
    let mut differing = Vec::new();
    for sync in SyncModel::ALL {
        let cfg = ExperimentConfig {
            epochs: 2,
            jitter_fraction: 0.2,
            trace: true,
            ..mlp_config(sync, 11)
        };
        match (run_fingerprint(&cfg), run_fingerprint(&cfg)) {
            (Ok(a), Ok(b)) => {
                if a != b {
                    differing.push(sync.name());
                }
            }
            (Err(e), _) | (_, Err(e)) => return failed(10, NAME, e),
        }
    }
    let detail = if differing.is_empty() {
        "CSV, JSON and traces identical for all five models".to_string()
    } else {
        format!("outputs differ for {}", differing.join(", "))
    };
    result(10, NAME, differing.is_empty(), detail)
}
