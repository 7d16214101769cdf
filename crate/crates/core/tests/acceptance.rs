//! One line per acceptance criterion; exits non-zero if any criterion fails.
//! Runs without the libtest harness so the lines are never captured.

use std::process::ExitCode;

use osp_core::harness::checks::{run_check, CHECK_IDS};

fn main() -> ExitCode {
    let mut failures = Vec::new();
    for id in CHECK_IDS {
        let started = std::time::Instant::now();
        let r = run_check(id).expect("known check id");
        println!("{r} [{:.1}s]", started.elapsed().as_secs_f64());
        if !r.passed {
            failures.push(r.id);
        }
    }
    if failures.is_empty() {
        println!("acceptance: {}/{} criteria passed", CHECK_IDS.len(), CHECK_IDS.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failures:?}");
        ExitCode::FAILURE
    }
}
