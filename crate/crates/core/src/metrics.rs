//! Per-iteration measurements, run summaries and their CSV/JSON forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Column order of the per-iteration CSV.
pub const CSV_HEADER: &str = "iteration,sim_time_end,bst,train_loss,eval_accuracy,sgu_budget_bytes,rs_bytes,ics_bytes,dropped_stale_msgs";

/// Accuracy gain below which a 10-epoch window counts as converged.
pub const CONVERGENCE_MIN_GAIN: f64 = 0.001;
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("iteration {got} recorded after {previous:?}")]
    OutOfOrder { previous: Option<u64>, got: u64 },
    #[error("iteration {iteration} ends at {time}s, not after the previous record at {previous}s")]
    TimeNotIncreasing { iteration: u64, time: f64, previous: f64 },
    #[error("iteration {iteration}: {detail}")]
    InvalidRecord { iteration: u64, detail: String },
    #[error("log is empty")]
    EmptyLog,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed metrics: {0}")]
    Format(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub sim_time_end: f64,
    pub bst: f64,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub sgu_budget_bytes: u64,
    pub rs_bytes: u64,
    pub ics_bytes: u64,
    pub dropped_stale_msgs: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    records: Vec<IterationRecord>,
    /// Expected `rs_bytes + ics_bytes` per record, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bytes_per_iteration: Option<u64>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Additionally checks every record moves exactly `bytes` gradient bytes.
    pub fn with_byte_total(bytes: u64) -> Self {
        Self {
            records: Vec::new(),
            bytes_per_iteration: Some(bytes),
        }
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn record_iteration(&mut self, record: IterationRecord) -> Result<(), MetricsError> {
        let last = self.records.last();
        let expected = last.map_or(0, |r| r.iteration + 1);
        if record.iteration != expected {
            return Err(MetricsError::OutOfOrder {
                previous: last.map(|r| r.iteration),
                got: record.iteration,
            });
        }
        if let Some(prev) = last {
            if !(record.sim_time_end > prev.sim_time_end) {
                return Err(MetricsError::TimeNotIncreasing {
                    iteration: record.iteration,
                    time: record.sim_time_end,
                    previous: prev.sim_time_end,
                });
            }
        }
        let bad = |detail: &str| MetricsError::InvalidRecord {
            iteration: record.iteration,
            detail: detail.to_string(),
        };
        if !(record.sim_time_end.is_finite() && record.sim_time_end >= 0.0) {
            return Err(bad("end time must be finite and non-negative"));
        }
        if !(record.bst.is_finite() && record.bst >= 0.0) {
            return Err(bad("synchronization time must be finite and non-negative"));
        }
        if !record.train_loss.is_finite() {
            return Err(bad("training loss is not finite"));
        }
        if let Some(a) = record.eval_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(bad("accuracy outside [0, 1]"));
            }
        }
        if let Some(total) = self.bytes_per_iteration {
            if record.rs_bytes + record.ics_bytes != total {
                return Err(bad(&format!(
                    "moved {} gradient bytes, expected {total}",
                    record.rs_bytes + record.ics_bytes
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Accuracy of every evaluated record, in order.
    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.eval_accuracy).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            w.serialize(r).expect("records serialize");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8"));
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => {
                return Err(MetricsError::Format(format!("unexpected header {other:?}")));
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let mut log = Self::new();
        for row in reader.deserialize() {
            let r: IterationRecord = row.map_err(|e| MetricsError::Format(e.to_string()))?;
            log.record_iteration(r)?;
        }
        Ok(log)
    }

    pub fn export_csv(&self, path: &Path) -> Result<(), MetricsError> {
        fs::write(path, self.to_csv_string()).map_err(|e| io_err(path, e))
    }

    pub fn import_csv(path: &Path) -> Result<Self, MetricsError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_csv_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Samples per simulated second.
    pub throughput: f64,
    /// Best evaluated accuracy, if any record was evaluated.
    pub top1: Option<f64>,
    /// Iterations completed when `top1` was first reached.
    pub iterations_to_top1: Option<u64>,
    /// `(sim_time_end, accuracy)` of every evaluated record.
    pub time_to_accuracy: Vec<(f64, f64)>,
    pub mean_bst: f64,
    pub iterations: u64,
    pub sim_time: f64,
    pub final_train_loss: f64,
}

pub fn summarize(log: &MetricsLog, samples_per_iteration: u64) -> Result<RunSummary, MetricsError> {
    let last = log.last().ok_or(MetricsError::EmptyLog)?;
    let n = log.len() as u64;
    let sim_time = last.sim_time_end;
    let throughput = if sim_time > 0.0 {
        (n * samples_per_iteration) as f64 / sim_time
    } else {
        0.0
    };
    let mut top1: Option<(f64, u64)> = None;
    let mut curve = Vec::new();
    for r in log.records() {
        if let Some(a) = r.eval_accuracy {
            curve.push((r.sim_time_end, a));
            if top1.is_none_or(|(best, _)| a > best) {
                top1 = Some((a, r.iteration + 1));
            }
        }
    }
    let mean_bst = log.records().iter().map(|r| r.bst).sum::<f64>() / n as f64;
    Ok(RunSummary {
        throughput,
        top1: top1.map(|t| t.0),
        iterations_to_top1: top1.map(|t| t.1),
        time_to_accuracy: curve,
        mean_bst,
        iterations: n,
        sim_time,
        final_train_loss: last.train_loss,
    })
}

/// True once the best accuracy of the last [`CONVERGENCE_WINDOW`] epochs
/// beats the best before them by less than [`CONVERGENCE_MIN_GAIN`].
pub fn converged(epoch_accuracies: &[f64]) -> bool {
    let n = epoch_accuracies.len();
    if n <= CONVERGENCE_WINDOW {
        return false;
    }
    let split = n - CONVERGENCE_WINDOW;
    let before = epoch_accuracies[..split].iter().copied().fold(f64::MIN, f64::max);
    let recent = epoch_accuracies[split..].iter().copied().fold(f64::MIN, f64::max);
    recent - before < CONVERGENCE_MIN_GAIN
}

pub fn export_json<T: Serialize>(value: &T, path: &Path) -> Result<(), MetricsError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| MetricsError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn import_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rec(i: u64, t: f64) -> IterationRecord {
        IterationRecord {
            iteration: i,
            sim_time_end: t,
            bst: 0.1,
            train_loss: 1.0 / (i as f64 + 1.0),
            eval_accuracy: None,
            sgu_budget_bytes: 0,
            rs_bytes: 100,
            ics_bytes: 0,
            dropped_stale_msgs: 0,
        }
    }

    #[test]
    fn order_is_enforced() {
        let mut log = MetricsLog::new();
        assert!(log.record_iteration(rec(1, 1.0)).is_err());
        log.record_iteration(rec(0, 1.0)).unwrap();
        assert!(matches!(
            log.record_iteration(rec(0, 2.0)),
            Err(MetricsError::OutOfOrder { .. })
        ));
        assert!(matches!(
            log.record_iteration(rec(1, 1.0)),
            Err(MetricsError::TimeNotIncreasing { .. })
        ));
        log.record_iteration(rec(1, 1.5)).unwrap();
    }

    #[test]
    fn byte_total_is_checked() {
        let mut log = MetricsLog::with_byte_total(100);
        log.record_iteration(rec(0, 1.0)).unwrap();
        let mut r = rec(1, 2.0);
        r.ics_bytes = 1;
        assert!(matches!(log.record_iteration(r), Err(MetricsError::InvalidRecord { .. })));
    }

    #[test]
    fn throughput_and_top1() {
        let mut log = MetricsLog::new();
        for i in 0..100 {
            log.record_iteration(rec(i, 0.5 * (i + 1) as f64)).unwrap();
        }
        let s = summarize(&log, 512).unwrap();
        assert_eq!(s.throughput, 1024.0);
        assert_eq!(s.top1, None);
        assert!(s.time_to_accuracy.is_empty());

        let mut log = MetricsLog::new();
        for (i, a) in [0.5, 0.9, 0.8].into_iter().enumerate() {
            let mut r = rec(i as u64, i as f64 + 1.0);
            r.eval_accuracy = Some(a);
            log.record_iteration(r).unwrap();
        }
        let s = summarize(&log, 1).unwrap();
        assert_eq!(s.top1, Some(0.9));
        assert_eq!(s.iterations_to_top1, Some(2));
        assert_eq!(s.time_to_accuracy.len(), 3);
        assert!(summarize(&MetricsLog::new(), 1).is_err());
    }

    #[test]
    fn single_record_curve() {
        let mut log = MetricsLog::new();
        log.record_iteration(rec(0, 1.0)).unwrap();
        assert!(summarize(&log, 4).unwrap().time_to_accuracy.len() <= 1);
    }

    #[test]
    fn csv_layout() {
        let mut log = MetricsLog::new();
        log.record_iteration(rec(0, 0.25)).unwrap();
        let mut r = rec(1, 0.5);
        r.eval_accuracy = Some(0.75);
        log.record_iteration(r).unwrap();
        let text = log.to_csv_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "0,0.25,0.1,1.0,,0,100,0,0");
        assert_eq!(lines[2], "1,0.5,0.1,0.5,0.75,0,100,0,0");
        assert_eq!(MetricsLog::from_csv_str(&text).unwrap(), log);
    }

    #[test]
    fn convergence_window() {
        assert!(!converged(&[0.5; 10]));
        assert!(converged(&[0.5; 11]));
        let mut acc: Vec<f64> = (0..11).map(|e| 0.5 + 0.01 * e as f64).collect();
        assert!(!converged(&acc));
        acc.extend([0.55; 10]);
        assert!(converged(&acc));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::new();
        log.record_iteration(rec(0, 0.1)).unwrap();
        let s = summarize(&log, 3).unwrap();
        let p = dir.path().join("s.json");
        export_json(&s, &p).unwrap();
        assert_eq!(import_json::<RunSummary>(&p).unwrap(), s);
        let err = import_json::<RunSummary>(&dir.path().join("missing.json")).unwrap_err();
        assert!(err.to_string().contains("missing.json"));
    }

    proptest! {
        #[test]
        fn csv_round_trip_preserves_values(
            steps in proptest::collection::vec((1e-9f64..10.0, 0.0f64..5.0, proptest::option::of(0.0f64..=1.0), 0u64..1_000_000), 1..40)
        ) {
            let mut log = MetricsLog::new();
            let mut t = 0.0;
            for (i, (dt, loss, acc, bytes)) in steps.into_iter().enumerate() {
                t += dt;
                log.record_iteration(IterationRecord {
                    iteration: i as u64,
                    sim_time_end: t,
                    bst: dt / 3.0,
                    train_loss: loss,
                    eval_accuracy: acc,
                    sgu_budget_bytes: bytes,
                    rs_bytes: bytes / 2,
                    ics_bytes: bytes - bytes / 2,
                    dropped_stale_msgs: i as u64 % 3,
                }).unwrap();
            }
            let back = MetricsLog::from_csv_str(&log.to_csv_string()).unwrap();
            prop_assert_eq!(back, log);
        }
    }
}
