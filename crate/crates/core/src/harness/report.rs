use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::metrics::RunSummary;
use crate::protocol::SyncModel;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: SyncModel,
    pub status: RowStatus,
    pub throughput: Option<f64>,
    pub top1: Option<f64>,
    pub iterations_to_top1: Option<u64>,
    pub mean_bst: Option<f64>,
    /// Throughput over the BSP row's, when that row succeeded.
    pub relative_throughput: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

const COLUMNS: [&str; 7] = [
    "model",
    "status",
    "throughput",
    "top1",
    "iterations_to_top1",
    "mean_bst",
    "relative_throughput",
];

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonTable {
    pub fn from_results(results: Vec<(SyncModel, Result<RunSummary, String>)>) -> Self {
        let bsp = results.iter().find_map(|(m, r)| match (m, r) {
            (SyncModel::Bsp, Ok(s)) if s.throughput > 0.0 => Some(s.throughput),
            _ => None,
        });
        let rows = results
            .into_iter()
            .map(|(model, r)| match r {
                Ok(s) => ComparisonRow {
                    model,
                    status: RowStatus::Ok,
                    throughput: Some(s.throughput),
                    top1: s.top1,
                    iterations_to_top1: s.iterations_to_top1,
                    mean_bst: Some(s.mean_bst),
                    relative_throughput: bsp.map(|b| s.throughput / b),
                },
                Err(e) => ComparisonRow {
                    model,
                    status: RowStatus::Failed(e),
                    throughput: None,
                    top1: None,
                    iterations_to_top1: None,
                    mean_bst: None,
                    relative_throughput: None,
                },
            })
            .collect();
        Self { rows }
    }

    fn cells(row: &ComparisonRow) -> [String; 7] {
        [
            row.model.name().to_string(),
            match row.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(_) => "failed".to_string(),
            },
            cell(row.throughput),
            cell(row.top1),
            cell(row.iterations_to_top1),
            cell(row.mean_bst),
            cell(row.relative_throughput),
        ]
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for row in &self.rows {
            w.write_record(Self::cells(row)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    /// Aligned columns with rounded numbers; failures listed below.
    pub fn to_text(&self) -> String {
        let rounded = |v: Option<f64>, digits: usize| v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into());
        let mut lines: Vec<[String; 7]> = vec![COLUMNS.map(String::from)];
        for row in &self.rows {
            let c = Self::cells(row);
            lines.push([
                c[0].clone(),
                c[1].clone(),
                rounded(row.throughput, 1),
                rounded(row.top1, 4),
                row.iterations_to_top1.map_or("-".into(), |i| i.to_string()),
                rounded(row.mean_bst, 6),
                rounded(row.relative_throughput, 3),
            ]);
        }
        let widths: Vec<usize> = (0..7).map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let padded: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", padded.join("  ").trim_end()).expect("string write");
        }
        for row in &self.rows {
            if let RowStatus::Failed(e) = &row.status {
                writeln!(out, "{} failed: {e}", row.model.name()).expect("string write");
            }
        }
        out
    }
}

/// Writes `comparison.csv` and `comparison.txt` into `dir`.
pub fn emit_report(table: &ComparisonTable, dir: &Path) -> Result<(), HarnessError> {
    if table.rows.is_empty() {
        return Err(super::ConfigError::Invalid {
            key: "sync".into(),
            reason: "comparison has no rows".into(),
        }
        .into());
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join("comparison.csv");
    fs::write(&csv_path, table.to_csv_string()).map_err(io(&csv_path))?;
    let txt_path = dir.join("comparison.txt");
    fs::write(&txt_path, table.to_text()).map_err(io(&txt_path))?;
    Ok(())
}
