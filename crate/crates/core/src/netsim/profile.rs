use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::seed::{self, Purpose};

/// Per-iteration compute durations: a base time scaled by a per-worker
/// straggler multiplier and a deterministic jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub t_c_base: f64,
    /// Missing entries default to 1.
    pub straggler_multipliers: Vec<f64>,
    pub jitter_fraction: f64,
    pub seed: u64,
}

impl ComputeProfile {
    pub fn uniform(t_c_base: f64) -> Self {
        Self {
            t_c_base,
            straggler_multipliers: Vec::new(),
            jitter_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.t_c_base.is_finite() && self.t_c_base >= 0.0) {
            return Err(SimError::InvalidProfile(format!("compute time {}", self.t_c_base)));
        }
        if let Some(m) = self
            .straggler_multipliers
            .iter()
            .find(|m| !(m.is_finite() && **m >= 1.0))
        {
            return Err(SimError::InvalidProfile(format!("straggler multiplier {m}")));
        }
        if !(self.jitter_fraction.is_finite() && (0.0..1.0).contains(&self.jitter_fraction)) {
            return Err(SimError::InvalidProfile(format!(
                "jitter fraction {}",
                self.jitter_fraction
            )));
        }
        Ok(())
    }

    pub fn multiplier(&self, worker: usize) -> f64 {
        self.straggler_multipliers.get(worker).copied().unwrap_or(1.0)
    }

    pub fn duration(&self, worker: usize, iteration: u64) -> f64 {
        let mut t = self.t_c_base * self.multiplier(worker);
        if self.jitter_fraction > 0.0 {
            let mut rng = seed::rng(self.seed, Purpose::Jitter, &[worker as u64, iteration]);
            let j = rng.random_range(-self.jitter_fraction..=self.jitter_fraction);
            t *= 1.0 + j;
        }
        t
    }
}

/// Server-side work that is not link time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ServerDelayProfile {
    /// Seconds per aggregation.
    pub agg_delay: f64,
    /// Seconds from the last aggregated layer to a ready importance bitmap.
    pub gib_calc_delay: f64,
    /// Send the bitmap as latency-only control traffic.
    pub gib_push_negligible: bool,
}

impl ServerDelayProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("agg delay", self.agg_delay), ("gib delay", self.gib_calc_delay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidProfile(format!("{name} {v}")));
            }
        }
        Ok(())
    }
}

/// Synchronization time per iteration: from the first worker finishing
/// compute of iteration `i` to the last worker ready to compute `i + 1`.
#[derive(Debug, Clone, Default)]
pub struct BstTracker {
    first_done: BTreeMap<u64, f64>,
    ready: BTreeMap<u64, (usize, f64)>,
    workers: usize,
}

impl BstTracker {
    pub fn new(workers: usize) -> Self {
        Self {
            workers,
            ..Self::default()
        }
    }

    pub fn compute_done(&mut self, iteration: u64, at: f64) {
        let e = self.first_done.entry(iteration).or_insert(at);
        *e = e.min(at);
    }

    /// A worker is ready to start computing `next`.
    pub fn ready(&mut self, next: u64, at: f64) {
        let e = self.ready.entry(next).or_insert((0, at));
        e.0 += 1;
        e.1 = e.1.max(at);
    }

    /// `None` until every worker is ready for `iteration + 1`.
    pub fn measure_bst(&self, iteration: u64) -> Option<f64> {
        let start = *self.first_done.get(&iteration)?;
        let &(count, end) = self.ready.get(&(iteration + 1))?;
        (count >= self.workers).then_some(end - start)
    }

    /// Drops bookkeeping for iterations before `iteration`.
    pub fn forget_before(&mut self, iteration: u64) {
        self.first_done = self.first_done.split_off(&iteration);
        self.ready = self.ready.split_off(&(iteration + 1));
    }
}
