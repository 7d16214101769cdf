//! Event loop that runs one synchronization model over the simulator.

mod asp;
mod bsp;
mod osp;
mod r2sp;

use std::collections::BTreeMap;
use std::fmt;

use crate::metrics::{converged, IterationRecord, MetricsLog};
use crate::netsim::{
    BstTracker, ComputeProfile, Direction, EventKind, ServerDelayProfile, SimEvent, Simulator,
};
use crate::param::{GradVector, LayerPayload, ParamVector};
use crate::tuning::NetworkParams;

use super::osp::ComputeTimeSource;
use super::workload::Workload;
use super::{Message, ProtocolError, SyncModel};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub sync: SyncModel,
    pub network: NetworkParams,
    pub compute: ComputeProfile,
    pub delays: ServerDelayProfile,
    pub ssp_staleness: u64,
    /// Period between local corrections; `None` means a quarter of the
    /// base compute time.
    pub chunk_period: Option<f64>,
    pub eq5_literal: bool,
    pub compute_time: ComputeTimeSource,
    /// Defer this share of the model instead of tuning the budget.
    pub fixed_ics_fraction: Option<f64>,
    pub max_iterations: u64,
    pub stop_on_convergence: bool,
    pub trace: bool,
    pub record_probes: bool,
}

impl RunOptions {
    pub fn new(sync: SyncModel, network: NetworkParams, compute: ComputeProfile, max_iterations: u64) -> Self {
        Self {
            sync,
            network,
            compute,
            delays: ServerDelayProfile {
                gib_push_negligible: true,
                ..ServerDelayProfile::default()
            },
            ssp_staleness: 1,
            chunk_period: None,
            eq5_literal: false,
            compute_time: ComputeTimeSource::Configured(0.0),
            fixed_ics_fraction: None,
            max_iterations,
            stop_on_convergence: false,
            trace: false,
            record_probes: false,
        }
    }

    pub fn chunk_period(&self) -> f64 {
        self.chunk_period.unwrap_or(self.compute.t_c_base / 4.0)
    }

    /// Deferred chunks per iteration: one per period of the base compute time.
    pub fn chunk_count(&self) -> usize {
        let t = self.chunk_period();
        if t > 0.0 && self.compute.t_c_base > 0.0 {
            (self.compute.t_c_base / t).ceil().max(1.0) as usize
        } else {
            1
        }
    }
}

/// Observations for invariant checks.
#[derive(Debug, Clone, Default)]
pub struct Probes {
    /// Server parameters when each iteration finished aggregating.
    pub global_checksums: Vec<u64>,
    /// Per iteration, per worker: worker parameters once every aggregated
    /// value of that iteration was applied locally.
    pub settled_checksums: BTreeMap<u64, BTreeMap<usize, u64>>,
    /// Aggregated deltas in the order the server applied them.
    pub applied: Vec<(u64, LayerPayload)>,
    /// Largest gap between the iterations workers were computing.
    pub max_iteration_spread: u64,
    /// Iterations whose deferred layers were still in flight when the next
    /// routine push was due.
    pub ics_overruns: u64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub trace: Option<String>,
    pub probes: Option<Probes>,
    pub initial_params: ParamVector,
    pub final_params: ParamVector,
    pub samples_per_iteration: u64,
    pub iterations_per_epoch: u64,
    pub stopped_early: bool,
    /// Gradient/parameter bytes delivered worker to server.
    pub ingress_payload_bytes: u64,
    pub egress_payload_bytes: u64,
    /// Loss-inflated bytes on the wire.
    pub ingress_wire_bytes: f64,
    pub egress_wire_bytes: f64,
}

/// Timers the engines set.
#[derive(Clone)]
pub enum Timer {
    /// Messages leaving the server after a processing delay.
    Outbox(Vec<(Direction, usize, Message)>),
    /// A worker applies buffered corrections.
    CorrectionTick { worker: usize, iteration: u64 },
}

impl fmt::Debug for Timer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timer::Outbox(msgs) => {
                let kinds: Vec<&str> = msgs.iter().map(|(_, _, m)| m.kind.name()).collect();
                let it = msgs.first().map_or(0, |m| m.2.iteration);
                write!(f, "outbox iteration {it} {}", kinds.join(","))
            }
            Timer::CorrectionTick { worker, iteration } => {
                write!(f, "correction worker {worker} iteration {iteration}")
            }
        }
    }
}

#[derive(Debug, Default)]
struct IterStats {
    losses: BTreeMap<usize, f64>,
    rs_bytes: u64,
    ics_bytes: u64,
    dropped: u64,
    budget: u64,
    end: Option<f64>,
    accuracy: Option<f64>,
}

/// Collects per-iteration measurements and releases records in order once
/// both the end time and the synchronization time are known.
struct Tracker {
    bst: BstTracker,
    iters: BTreeMap<u64, IterStats>,
    log: MetricsLog,
    next: u64,
    epoch_accuracies: Vec<f64>,
    converged: bool,
}

pub(crate) struct Ctx<'a> {
    sim: Simulator<Message, Timer>,
    workload: &'a mut dyn Workload,
    opts: &'a RunOptions,
    weights: Vec<f64>,
    tracker: Tracker,
    probes: Option<Probes>,
    /// Iteration each worker is computing or about to push.
    worker_iteration: Vec<u64>,
    stop: bool,
}

impl Ctx<'_> {
    fn n(&self) -> usize {
        self.weights.len()
    }

    fn now(&self) -> f64 {
        self.sim.now()
    }

    fn send(&mut self, direction: Direction, worker: usize, msg: Message) -> Result<(), ProtocolError> {
        self.sim.send(direction, worker, msg)?;
        Ok(())
    }

    fn broadcast(&self, msg: &Message) -> Vec<(Direction, usize, Message)> {
        (0..self.n()).map(|k| (Direction::Egress, k, msg.clone())).collect()
    }

    /// Sends now, or after `delay` seconds of server work.
    fn send_after(&mut self, delay: f64, msgs: Vec<(Direction, usize, Message)>) -> Result<(), ProtocolError> {
        if msgs.is_empty() {
            return Ok(());
        }
        if delay > 0.0 {
            self.sim.set_timer_after(delay, Timer::Outbox(msgs))?;
        } else {
            for (d, k, m) in msgs {
                self.send(d, k, m)?;
            }
        }
        Ok(())
    }

    fn flush_outbox(&mut self, msgs: Vec<(Direction, usize, Message)>) -> Result<(), ProtocolError> {
        for (d, k, m) in msgs {
            self.send(d, k, m)?;
        }
        Ok(())
    }

    fn last_iteration(&self) -> u64 {
        self.opts.max_iterations
    }

    /// Computes the step for `iteration` on `params` and starts the compute
    /// phase; the result is handed back for the engine to hold until done.
    fn begin_compute(
        &mut self,
        worker: usize,
        iteration: u64,
        params: &ParamVector,
    ) -> Result<(f64, GradVector), ProtocolError> {
        let (loss, delta) = self
            .workload
            .compute(worker, iteration, params)
            .map_err(|source| ProtocolError::Training {
                worker,
                iteration,
                source,
            })?;
        if !loss.is_finite() || !delta.all_finite() {
            return Err(ProtocolError::Training {
                worker,
                iteration,
                source: crate::learner::LearnerError::NumericOverflow(format!("loss {loss}")),
            });
        }
        self.sim.start_compute(worker, iteration)?;
        self.worker_iteration[worker] = iteration;
        if let Some(p) = self.probes.as_mut() {
            let max = self.worker_iteration.iter().max().copied().unwrap_or(0);
            let min = self.worker_iteration.iter().min().copied().unwrap_or(0);
            p.max_iteration_spread = p.max_iteration_spread.max(max - min);
        }
        Ok((loss, delta))
    }

    fn compute_done(&mut self, iteration: u64) {
        let now = self.now();
        self.tracker.bst.compute_done(iteration, now);
    }

    /// `worker` can start computing `next` (or would, past the last iteration).
    fn ready(&mut self, next: u64) {
        let now = self.now();
        self.tracker.bst.ready(next, now);
        self.flush_records();
    }

    fn stats(&mut self, iteration: u64) -> &mut IterStats {
        self.tracker.iters.entry(iteration).or_default()
    }

    fn loss(&mut self, worker: usize, iteration: u64, loss: f64) {
        self.stats(iteration).losses.insert(worker, loss);
    }

    fn pushed(&mut self, iteration: u64, rs_bytes: u64, ics_bytes: u64) {
        let s = self.stats(iteration);
        s.rs_bytes += rs_bytes;
        s.ics_bytes += ics_bytes;
    }

    fn dropped(&mut self, iteration: u64) {
        self.stats(iteration).dropped += 1;
    }

    fn settled(&mut self, iteration: u64, worker: usize, params: &ParamVector) {
        if let Some(p) = self.probes.as_mut() {
            p.settled_checksums
                .entry(iteration)
                .or_default()
                .insert(worker, params.checksum());
        }
    }

    /// Every update of `iteration` reached the server's parameters.
    fn complete(&mut self, iteration: u64, budget: u64, global: &ParamVector) -> Result<(), ProtocolError> {
        let now = self.now();
        let ipe = self.workload.iterations_per_epoch();
        let accuracy = if (iteration + 1).is_multiple_of(ipe) || iteration + 1 == self.last_iteration() {
            self.workload
                .evaluate(global)
                .map_err(|source| ProtocolError::Training {
                    worker: usize::MAX,
                    iteration,
                    source,
                })?
        } else {
            None
        };
        let s = self.stats(iteration);
        s.end = Some(now);
        s.budget = budget;
        s.accuracy = accuracy;
        if let Some(p) = self.probes.as_mut() {
            p.global_checksums.push(global.checksum());
        }
        self.flush_records();
        Ok(())
    }

    fn flush_records(&mut self) {
        if self.tracker.converged {
            return;
        }
        loop {
            let next = self.tracker.next;
            let Some(bst) = self.tracker.bst.measure_bst(next) else {
                break;
            };
            let Some(stats) = self.tracker.iters.get(&next) else {
                break;
            };
            let Some(end) = stats.end else {
                break;
            };
            let stats = self.tracker.iters.remove(&next).expect("present");
            let loss = if stats.losses.is_empty() {
                0.0
            } else {
                stats.losses.values().sum::<f64>() / stats.losses.len() as f64
            };
            let record = IterationRecord {
                iteration: next,
                sim_time_end: end,
                bst,
                train_loss: loss,
                eval_accuracy: stats.accuracy,
                sgu_budget_bytes: stats.budget,
                rs_bytes: stats.rs_bytes,
                ics_bytes: stats.ics_bytes,
                dropped_stale_msgs: stats.dropped,
            };
            self.tracker
                .log
                .record_iteration(record)
                .expect("engines finish iterations in order with increasing times");
            self.tracker.bst.forget_before(next + 1);
            self.tracker.next += 1;
            if let Some(a) = stats.accuracy {
                self.tracker.epoch_accuracies.push(a);
                if self.opts.stop_on_convergence && converged(&self.tracker.epoch_accuracies) {
                    self.tracker.converged = true;
                    self.stop = true;
                    return;
                }
            }
        }
    }
}

pub(crate) trait Engine {
    fn start(&mut self, cx: &mut Ctx<'_>) -> Result<(), ProtocolError>;
    fn handle(&mut self, cx: &mut Ctx<'_>, event: SimEvent<Message, Timer>) -> Result<(), ProtocolError>;
    fn final_params(&self) -> ParamVector;
    fn collect_probes(&mut self, _probes: &mut Probes) {}
}

/// Runs `opts.max_iterations` iterations (fewer if convergence stops it).
pub fn run(workload: &mut dyn Workload, opts: &RunOptions) -> Result<RunOutput, ProtocolError> {
    let n = workload.workers();
    if n == 0 || opts.max_iterations == 0 {
        return Err(ProtocolError::Config("need at least one worker and one iteration".into()));
    }
    let weights = workload.subset_weights();
    if weights.len() != n {
        return Err(ProtocolError::Config("one weight per worker".into()));
    }
    if let Some(f) = opts.fixed_ics_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(ProtocolError::Config(format!("deferred fraction {f} outside [0, 1]")));
        }
    }
    opts.delays.validate()?;
    let mut sim = Simulator::new(n, opts.network, opts.compute.clone())?;
    if opts.trace {
        sim.enable_trace();
    }
    let initial = workload.initial_params();
    let model_bytes = workload.partition().model_bytes();
    let samples_per_iteration = workload.samples_per_iteration();
    let iterations_per_epoch = workload.iterations_per_epoch();
    let mut cx = Ctx {
        sim,
        workload,
        opts,
        weights,
        tracker: Tracker {
            bst: BstTracker::new(n),
            iters: BTreeMap::new(),
            log: MetricsLog::with_byte_total(model_bytes * n as u64),
            next: 0,
            epoch_accuracies: Vec::new(),
            converged: false,
        },
        probes: opts.record_probes.then(Probes::default),
        worker_iteration: vec![0; n],
        stop: false,
    };
    let mut engine: Box<dyn Engine> = match opts.sync {
        SyncModel::Bsp => Box::new(bsp::BspEngine::new(&cx, &initial)),
        SyncModel::Osp => Box::new(osp::OspEngine::new(&cx, &initial)?),
        SyncModel::Asp => Box::new(asp::AsyncEngine::new(&cx, &initial, None)),
        SyncModel::Ssp => Box::new(asp::AsyncEngine::new(&cx, &initial, Some(opts.ssp_staleness))),
        SyncModel::R2sp => Box::new(r2sp::R2spEngine::new(&cx, &initial)),
    };
    engine.start(&mut cx)?;
    while !cx.stop {
        let Some(event) = cx.sim.next_event()? else {
            break;
        };
        if let EventKind::TimerFired(Timer::Outbox(msgs)) = event.kind {
            cx.flush_outbox(msgs)?;
            continue;
        }
        engine.handle(&mut cx, event)?;
    }
    if !cx.stop && cx.tracker.next < opts.max_iterations {
        return Err(ProtocolError::UnexpectedMessage(format!(
            "simulation ran dry after {} of {} iterations",
            cx.tracker.next, opts.max_iterations
        )));
    }
    let mut probes = cx.probes.take();
    if let Some(p) = probes.as_mut() {
        engine.collect_probes(p);
    }
    let ingress = cx.sim.link(Direction::Ingress);
    let egress = cx.sim.link(Direction::Egress);
    Ok(RunOutput {
        ingress_payload_bytes: ingress.delivered_payload_bytes(),
        egress_payload_bytes: egress.delivered_payload_bytes(),
        ingress_wire_bytes: ingress.delivered_bytes(),
        egress_wire_bytes: egress.delivered_bytes(),
        trace: cx.sim.take_trace(),
        log: cx.tracker.log,
        probes,
        initial_params: initial,
        final_params: engine.final_params(),
        samples_per_iteration,
        iterations_per_epoch,
        stopped_early: cx.tracker.converged,
    })
}
