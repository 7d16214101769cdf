//! Synchronization protocols between workers and the parameter server.
//!
//! [`osp`] holds the two-stage protocol's worker and server state machines
//! as plain functions over their state; [`engine`] drives them, and the
//! barrier, asynchronous, bounded-staleness and round-robin baselines, from
//! simulator events.

pub mod engine;
mod message;
pub mod osp;
pub mod workload;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use engine::{run, Probes, RunOptions, RunOutput};
pub use message::{
    decode_layers, encode_layers, payload_wire_bytes, Body, Message, MessageKind,
    LAYER_ENTRY_HEADER_BYTES, MESSAGE_HEADER_BYTES,
};

use crate::learner::LearnerError;
use crate::netsim::SimError;
use crate::param::{LayerPayload, LayerSet, ParamError};
use crate::tuning::TuningError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("payload layers {got:?} differ from {expected:?}")]
    LayerSetMismatch { expected: LayerSet, got: LayerSet },
    #[error("payloads overlap on layers {0:?}")]
    Overlap(LayerSet),
    #[error("layer {0} has no pending local delta")]
    NotPending(usize),
    #[error("stale message for iteration {iteration}, server at {current}")]
    Stale { iteration: u64, current: u64 },
    #[error("unexpected message: {0}")]
    UnexpectedMessage(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("encoding: {0}")]
    Encoding(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("worker {worker}, iteration {iteration}: {source}")]
    Training {
        worker: usize,
        iteration: u64,
        source: LearnerError,
    },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncModel {
    Bsp,
    Asp,
    Ssp,
    R2sp,
    Osp,
}

impl SyncModel {
    pub const ALL: [SyncModel; 5] = [
        SyncModel::Bsp,
        SyncModel::Asp,
        SyncModel::Ssp,
        SyncModel::R2sp,
        SyncModel::Osp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyncModel::Bsp => "bsp",
            SyncModel::Asp => "asp",
            SyncModel::Ssp => "ssp",
            SyncModel::R2sp => "r2sp",
            SyncModel::Osp => "osp",
        }
    }
}

impl fmt::Display for SyncModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyncModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown sync model {s:?} (expected bsp, asp, ssp, r2sp or osp)"))
    }
}

/// Weighted mean per element, `sum_w weight_w * value_w / sum_w weight_w`,
/// summed in ascending worker order. `payloads[w]` belongs to worker `w`.
pub fn aggregate(payloads: &[&LayerPayload], weights: &[f64]) -> Result<LayerPayload, ProtocolError> {
    if payloads.len() != weights.len() || payloads.is_empty() {
        return Err(ProtocolError::InvalidWeights(format!(
            "{} payloads for {} weights",
            payloads.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(ProtocolError::InvalidWeights(format!("weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(ProtocolError::InvalidWeights("weights sum to zero".into()));
    }
    let expected = payloads[0].layer_set();
    for p in &payloads[1..] {
        let got = p.layer_set();
        if got != expected {
            return Err(ProtocolError::LayerSetMismatch { expected, got });
        }
    }
    let mut out = LayerPayload::new();
    for (layer, first) in payloads[0].iter() {
        let mut acc = vec![0.0; first.len()];
        for (p, &w) in payloads.iter().zip(weights) {
            let values = p.get(layer).expect("layer sets checked equal");
            if values.len() != acc.len() {
                return Err(ProtocolError::Param(ParamError::Shape(format!(
                    "layer {layer}: {} values against {}",
                    values.len(),
                    acc.len()
                ))));
            }
            for (a, v) in acc.iter_mut().zip(values) {
                *a += w * v;
            }
        }
        for a in &mut acc {
            *a /= total;
        }
        out.insert(layer, acc);
    }
    Ok(out)
}
