use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osp_core::harness::checks::{run_check, CHECK_IDS};
use osp_core::harness::{
    emit_report, parse_config, run_comparison, run_experiment, ComparisonSpec, ExperimentConfig, RowStatus, Source,
};
use osp_core::protocol::SyncModel;

#[derive(Parser)]
#[command(name = "osp", version, about = "Simulate parameter-server synchronization models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(ConfigFlags),
    /// Run the same experiment under several synchronization models.
    Compare {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Models to compare, comma separated (default: all five).
        #[arg(long, value_delimiter = ',')]
        models: Vec<SyncModel>,
    },
    /// Run the invariant and oracle suites.
    Check {
        /// Only these checks, comma separated.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

/// Flags mirror config-file keys; a flag wins over the file.
#[derive(Args)]
struct ConfigFlags {
    /// TOML file with config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sync: Option<String>,
    #[arg(long)]
    workers: Option<i64>,
    #[arg(long)]
    bandwidth_gbps: Option<f64>,
    #[arg(long)]
    latency_us: Option<f64>,
    #[arg(long)]
    loss_rate: Option<f64>,
    /// Base compute time per iteration in milliseconds.
    #[arg(long)]
    tc_ms: Option<f64>,
    /// Layer widths, e.g. 16,64,64,4.
    #[arg(long, value_delimiter = ',')]
    model_widths: Option<Vec<i64>>,
    #[arg(long)]
    batch: Option<i64>,
    #[arg(long)]
    epochs: Option<i64>,
    #[arg(long)]
    seed: Option<i64>,
    #[arg(long)]
    ssp_staleness: Option<i64>,
    #[arg(long)]
    chunk_period_ms: Option<f64>,
    /// Bound the deferred bytes with the unscaled compute-time formula.
    #[arg(long)]
    eq5_literal: bool,
    /// Write an event trace next to the metrics.
    #[arg(long)]
    trace: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigFlags {
    fn table(&self) -> toml::Table {
        let mut t = toml::Table::new();
        let mut put = |key: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                t.insert(key.to_string(), v);
            }
        };
        put("sync", self.sync.clone().map(Into::into));
        put("workers", self.workers.map(Into::into));
        put("bandwidth-gbps", self.bandwidth_gbps.map(Into::into));
        put("latency-us", self.latency_us.map(Into::into));
        put("loss-rate", self.loss_rate.map(Into::into));
        put("tc-ms", self.tc_ms.map(Into::into));
        put(
            "model-widths",
            self.model_widths
                .as_ref()
                .map(|w| toml::Value::Array(w.iter().map(|&x| x.into()).collect())),
        );
        put("batch", self.batch.map(Into::into));
        put("epochs", self.epochs.map(Into::into));
        put("seed", self.seed.map(Into::into));
        put("ssp-staleness", self.ssp_staleness.map(Into::into));
        put("chunk-period-ms", self.chunk_period_ms.map(Into::into));
        put("eq5-literal", self.eq5_literal.then_some(true.into()));
        put("trace", self.trace.then_some(true.into()));
        put("out", self.out.as_ref().map(|p| p.display().to_string().into()));
        t
    }

    fn resolve(&self) -> Result<ExperimentConfig, String> {
        let text = match &self.config {
            Some(path) => Some(std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?),
            None => None,
        };
        let (cfg, provenance) = parse_config(text.as_deref(), &self.table()).map_err(|e| e.to_string())?;
        for (key, source) in &provenance {
            if *source == Source::FlagOverFile {
                eprintln!("note: `{key}` from {source}");
            }
        }
        Ok(cfg)
    }
}

fn run(flags: &ConfigFlags) -> Result<(), String> {
    let cfg = flags.resolve()?;
    let e = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let s = &e.summary;
    println!("model          {}", cfg.sync);
    println!("iterations     {}", s.iterations);
    println!("sim time       {:.6} s", s.sim_time);
    println!("throughput     {:.2} samples/s", s.throughput);
    println!("mean BST       {:.6} s", s.mean_bst);
    match (s.top1, s.iterations_to_top1) {
        (Some(a), Some(i)) => println!("top-1          {a:.4} after {i} iterations"),
        _ => println!("top-1          not evaluated"),
    }
    println!("final loss     {:.6}", s.final_train_loss);
    if e.output.stopped_early {
        println!("stopped early: accuracy plateaued");
    }
    if let Some(dir) = &cfg.out {
        println!("wrote          {}", dir.display());
    }
    Ok(())
}

fn compare(flags: &ConfigFlags, models: &[SyncModel]) -> Result<bool, String> {
    let base = flags.resolve()?;
    let spec = ComparisonSpec {
        models: if models.is_empty() { SyncModel::ALL.to_vec() } else { models.to_vec() },
        base,
    };
    let table = run_comparison(&spec);
    print!("{}", table.to_text());
    if let Some(dir) = &spec.base.out {
        emit_report(&table, dir).map_err(|e| e.to_string())?;
        println!("wrote {}", dir.display());
    }
    Ok(table.rows.iter().all(|r| r.status == RowStatus::Ok))
}

fn check(only: &[u8]) -> Result<bool, String> {
    let ids: Vec<u8> = if only.is_empty() { CHECK_IDS.to_vec() } else { only.to_vec() };
    let mut passed = 0;
    for &id in &ids {
        let r = run_check(id).ok_or_else(|| format!("no check {id} (checks are 1 to {})", CHECK_IDS.len()))?;
        println!("{r}");
        passed += usize::from(r.passed);
    }
    println!("{passed}/{} checks passed", ids.len());
    Ok(passed == ids.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(flags) => run(flags).map(|()| true),
        Command::Compare { flags, models } => compare(flags, models),
        Command::Check { only } => check(only),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
