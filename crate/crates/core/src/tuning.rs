//! Byte budget for the in-computation stage: the per-iteration upper bound
//! and the per-epoch schedule that grows the budget as training loss falls.

use serde::{Deserialize, Serialize};

/// Share of the model that may ever be deferred to the in-computation stage.
pub const MAX_DEFERRED_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TuningError {
    #[error("invalid network parameters: {0}")]
    InvalidNetwork(String),
    #[error("epoch {epoch} tuned before the first epoch recorded its loss")]
    Uninitialized { epoch: u64 },
    #[error("invalid epoch loss {0}")]
    InvalidLoss(f64),
    #[error("epoch indices start at 1")]
    ZeroEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
    pub loss_rate: f64,
}

impl NetworkParams {
    pub fn new(bandwidth: f64, latency: f64, loss_rate: f64) -> Result<Self, TuningError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(TuningError::InvalidNetwork(format!("bandwidth {bandwidth}")));
        }
        if !(latency.is_finite() && latency >= 0.0) {
            return Err(TuningError::InvalidNetwork(format!("latency {latency}")));
        }
        if !(0.0..1.0).contains(&loss_rate) {
            return Err(TuningError::InvalidNetwork(format!("loss rate {loss_rate}")));
        }
        Ok(Self {
            bandwidth,
            latency,
            loss_rate,
        })
    }

    /// Bandwidth left after retransmissions.
    pub fn effective_bandwidth(&self) -> f64 {
        self.bandwidth / (1.0 + self.loss_rate)
    }
}

/// Largest in-computation payload per worker that the links can drain while
/// the workers compute for `t_c` seconds.
///
/// The default divides the bandwidth by `1 + loss_rate`. With `literal` set
/// the factor multiplies instead, which lets loss enlarge the budget.
pub fn compute_umax(
    net: &NetworkParams,
    t_c: f64,
    n_workers: usize,
    model_bytes: u64,
    literal: bool,
) -> u64 {
    if !(t_c > 0.0) || n_workers == 0 {
        return 0;
    }
    let factor = if literal {
        1.0 + net.loss_rate
    } else {
        1.0 / (1.0 + net.loss_rate)
    };
    let raw = net.bandwidth * t_c * factor / n_workers as f64;
    let cap = MAX_DEFERRED_FRACTION * model_bytes as f64;
    raw.min(cap).floor() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SguSchedule {
    u_max: u64,
    initial_loss: Option<f64>,
    current_budget: u64,
    epoch: u64,
}

impl SguSchedule {
    /// `u_max` is clamped to the deferred-fraction cap of the model.
    pub fn new(u_max: u64, model_bytes: u64) -> Self {
        let cap = (MAX_DEFERRED_FRACTION * model_bytes as f64).floor() as u64;
        Self {
            u_max: u_max.min(cap),
            initial_loss: None,
            current_budget: 0,
            epoch: 0,
        }
    }

    pub fn u_max(&self) -> u64 {
        self.u_max
    }

    /// Re-bounds the schedule, e.g. after the compute time was re-measured.
    pub fn set_u_max(&mut self, u_max: u64, model_bytes: u64) {
        let cap = (MAX_DEFERRED_FRACTION * model_bytes as f64).floor() as u64;
        self.u_max = u_max.min(cap);
        self.current_budget = self.current_budget.min(self.u_max);
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.initial_loss
    }

    pub fn current_budget(&self) -> u64 {
        self.current_budget
    }

    /// Last epoch passed to [`tune_sgu`], 0 before any.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Feeds the mean training loss of epoch `epoch` (1-based) and returns the
/// budget. The first epoch fixes the reference loss and yields 0; later
/// epochs scale `u_max` by the relative loss reduction, clamped to [0, 1].
pub fn tune_sgu(sched: &mut SguSchedule, epoch: u64, epoch_loss: f64) -> Result<u64, TuningError> {
    if epoch == 0 {
        return Err(TuningError::ZeroEpoch);
    }
    if !(epoch_loss.is_finite() && epoch_loss >= 0.0) {
        return Err(TuningError::InvalidLoss(epoch_loss));
    }
    let budget = if epoch == 1 {
        sched.initial_loss = Some(epoch_loss);
        0
    } else {
        let reference = sched.initial_loss.ok_or(TuningError::Uninitialized { epoch })?;
        let factor = if reference > 0.0 {
            (1.0 - epoch_loss / reference).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (factor * sched.u_max as f64).floor() as u64
    };
    sched.current_budget = budget.min(sched.u_max);
    sched.epoch = epoch;
    Ok(sched.current_budget)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn net(b: f64, lr: f64) -> NetworkParams {
        NetworkParams::new(b, 0.0, lr).unwrap()
    }

    #[test]
    fn umax_examples() {
        assert_eq!(compute_umax(&net(1.25e9, 0.0), 0.1, 8, 100_000_000, false), 15_625_000);
        assert_eq!(compute_umax(&net(1.25e9, 0.0), 0.0, 8, 100_000_000, false), 0);
        assert_eq!(
            compute_umax(&net(1.25e9, 0.0), 1.0, 1, 1_000_000_000, false),
            800_000_000
        );
    }

    #[test]
    fn loss_rate_direction() {
        let n = net(1.0e9, 0.25);
        assert_eq!(compute_umax(&n, 1.0, 10, u64::MAX / 2, false), 80_000_000);
        assert_eq!(compute_umax(&n, 1.0, 10, u64::MAX / 2, true), 125_000_000);
    }

    #[test]
    fn network_validation() {
        assert!(NetworkParams::new(0.0, 0.0, 0.0).is_err());
        assert!(NetworkParams::new(1.0, -1.0, 0.0).is_err());
        assert!(NetworkParams::new(1.0, 0.0, 1.0).is_err());
        assert!(NetworkParams::new(1.0, 0.0, 0.999).is_ok());
    }

    #[test]
    fn schedule_examples() {
        let mut s = SguSchedule::new(1000, 10_000);
        assert_eq!(tune_sgu(&mut s, 1, 1.0).unwrap(), 0);
        assert_eq!(tune_sgu(&mut s, 2, 0.25).unwrap(), 750);
        assert_eq!(tune_sgu(&mut s, 5, 1.0).unwrap(), 0);
        assert_eq!(tune_sgu(&mut s, 6, 0.0).unwrap(), 1000);
        assert_eq!(tune_sgu(&mut s, 7, 3.0).unwrap(), 0);
        assert_eq!(s.epoch(), 7);
    }

    #[test]
    fn schedule_requires_first_epoch() {
        let mut s = SguSchedule::new(1000, 10_000);
        assert_eq!(
            tune_sgu(&mut s, 2, 0.5),
            Err(TuningError::Uninitialized { epoch: 2 })
        );
        assert_eq!(tune_sgu(&mut s, 0, 0.5), Err(TuningError::ZeroEpoch));
        assert!(tune_sgu(&mut s, 1, f64::NAN).is_err());
    }

    #[test]
    fn umax_capped_by_model() {
        let s = SguSchedule::new(1000, 100);
        assert_eq!(s.u_max(), 80);
    }

    proptest! {
        #[test]
        fn budget_follows_falling_loss(
            first in 0.01f64..10.0,
            drops in proptest::collection::vec(0.0f64..1.0, 1..20),
            u_max in 0u64..1_000_000,
            model in 1u64..2_000_000,
        ) {
            let mut s = SguSchedule::new(u_max, model);
            let cap = (0.8 * model as f64).floor() as u64;
            prop_assert_eq!(tune_sgu(&mut s, 1, first).unwrap(), 0);
            let mut loss = first;
            let mut prev = 0;
            for (i, d) in drops.iter().enumerate() {
                loss *= d;
                let b = tune_sgu(&mut s, i as u64 + 2, loss).unwrap();
                prop_assert!(b >= prev);
                prop_assert!(b <= u_max.min(cap));
                prev = b;
            }
        }

        #[test]
        fn umax_monotone(
            b in 1.0f64..1e10,
            t in 0.0f64..10.0,
            dt in 0.0f64..1.0,
            n in 1usize..64,
            lr in 0.0f64..0.9,
        ) {
            let nw = net(b, lr);
            let model = u64::MAX / 4;
            let base = compute_umax(&nw, t, n, model, false);
            prop_assert!(compute_umax(&nw, t + dt, n, model, false) >= base);
            prop_assert!(compute_umax(&net(b * 2.0, lr), t, n, model, false) >= base);
            prop_assert!(compute_umax(&nw, t, n + 1, model, false) <= base);
        }
    }
}
