use std::collections::VecDeque;

use crate::netsim::{Direction, EventKind, SimEvent};
use crate::param::{GradVector, LayerPayload, LayerSet, ParamVector};

use super::super::osp::{gib_of, BudgetPolicy, ServerConfig, ServerOutput, ServerState, WorkerState};
use super::super::{Body, Message, MessageKind, ProtocolError};
use super::{Ctx, Engine, Timer};

struct OspWorker {
    ws: WorkerState,
    result: Option<(f64, GradVector)>,
    computing: bool,
    compute_started: f64,
    /// Delta of the last pushed iteration, the source of local steps.
    last_delta: Option<GradVector>,
    unsent: VecDeque<Message>,
    chunk_in_flight: bool,
    /// Aggregated deferred layers waiting for the next correction tick.
    buffered: Vec<LayerPayload>,
    /// Iteration whose deferred layers are being settled.
    settling: Option<u64>,
}

pub(super) struct OspEngine {
    server: ServerState,
    workers: Vec<OspWorker>,
    chunks: usize,
    period: f64,
}

impl OspEngine {
    pub(super) fn new(cx: &Ctx<'_>, initial: &ParamVector) -> Result<Self, ProtocolError> {
        let n = cx.n();
        let part = initial.partition().clone();
        let budget = match cx.opts.fixed_ics_fraction {
            Some(f) => BudgetPolicy::Fixed((f * part.model_bytes() as f64).round() as u64),
            None => BudgetPolicy::Tuned,
        };
        let compute_time = match cx.opts.compute_time {
            super::super::osp::ComputeTimeSource::Configured(t) if t <= 0.0 => {
                super::super::osp::ComputeTimeSource::Configured(cx.opts.compute.t_c_base)
            }
            other => other,
        };
        let mut server = ServerState::new(
            initial.clone(),
            ServerConfig {
                weights: cx.weights.clone(),
                iterations_per_epoch: cx.workload.iterations_per_epoch(),
                budget,
                network: cx.opts.network,
                compute_time,
                eq5_literal: cx.opts.eq5_literal,
                gib_push_negligible: cx.opts.delays.gib_push_negligible,
            },
        )?;
        if cx.probes.is_some() {
            server.record_applied();
        }
        let workers = (0..n)
            .map(|k| OspWorker {
                ws: WorkerState::new(k, initial.clone(), cx.weights[k], k as u64),
                result: None,
                computing: false,
                compute_started: 0.0,
                last_delta: None,
                unsent: VecDeque::new(),
                chunk_in_flight: false,
                buffered: Vec::new(),
                settling: None,
            })
            .collect();
        Ok(Self {
            server,
            workers,
            chunks: cx.opts.chunk_count(),
            period: cx.opts.chunk_period(),
        })
    }

    fn compute(&mut self, cx: &mut Ctx<'_>, k: usize, iteration: u64) -> Result<(), ProtocolError> {
        let w = &mut self.workers[k];
        w.result = Some(cx.begin_compute(k, iteration, &w.ws.params)?);
        w.computing = true;
        w.compute_started = cx.now();
        if self.period > 0.0 {
            cx.sim.set_timer_after(self.period, Timer::CorrectionTick { worker: k, iteration })?;
        }
        Ok(())
    }

    /// Applies buffered corrections; pushes the next iteration if it was
    /// only waiting for them.
    fn apply_corrections(&mut self, cx: &mut Ctx<'_>, k: usize) -> Result<(), ProtocolError> {
        let w = &mut self.workers[k];
        for chunk in std::mem::take(&mut w.buffered) {
            w.ws.lgp_correct(&chunk)?;
        }
        if w.ws.drained() {
            if let Some(it) = w.settling.take() {
                cx.settled(it, k, &w.ws.params);
            }
        }
        self.try_push(cx, k)
    }

    fn try_push(&mut self, cx: &mut Ctx<'_>, k: usize) -> Result<(), ProtocolError> {
        let w = &mut self.workers[k];
        if w.computing || w.result.is_none() {
            return Ok(());
        }
        if !w.ws.drained() {
            return Ok(());
        }
        let (loss, delta) = w.result.take().expect("checked");
        let iteration = cx.worker_iteration[k];
        w.ws.iteration = iteration;
        let (rs, ics) = w.ws.osp_worker_iteration(&delta, self.chunks)?;
        let ics_bytes: u64 = ics.iter().map(|m| m.layer_bytes).sum();
        cx.pushed(iteration, rs.layer_bytes, ics_bytes);
        w.unsent = ics.into();
        w.last_delta = Some(delta);
        cx.send(Direction::Ingress, k, Message::loss(iteration, loss))?;
        cx.send(Direction::Ingress, k, rs)?;
        Ok(())
    }

    fn send_next_chunk(&mut self, cx: &mut Ctx<'_>, k: usize) -> Result<(), ProtocolError> {
        let w = &mut self.workers[k];
        if w.chunk_in_flight {
            return Ok(());
        }
        if let Some(m) = w.unsent.pop_front() {
            w.chunk_in_flight = true;
            cx.send(Direction::Ingress, k, m)?;
        }
        Ok(())
    }

    fn route(&mut self, cx: &mut Ctx<'_>, out: ServerOutput) -> Result<(), ProtocolError> {
        if let Some(pull) = out.pull_important {
            let msgs = cx.broadcast(&pull);
            cx.send_after(cx.opts.delays.agg_delay, msgs)?;
        }
        if let Some(chunk) = out.ics_global {
            let msgs = cx.broadcast(&chunk);
            cx.flush_outbox(msgs)?;
        }
        if let Some(iteration) = out.completed_iteration {
            let budget = self
                .server
                .completed()
                .last()
                .map_or(0, |c| c.budget);
            cx.complete(iteration, budget, &self.server.global_params)?;
        }
        if let Some(gib) = out.gib_update {
            let msgs = cx.broadcast(&gib);
            cx.send_after(cx.opts.delays.gib_calc_delay, msgs)?;
        }
        Ok(())
    }

    fn on_server(&mut self, cx: &mut Ctx<'_>, k: usize, msg: Message) -> Result<(), ProtocolError> {
        let iteration = msg.iteration;
        match msg.kind {
            MessageKind::LossReport => {
                if let Body::Scalar(v) = msg.body {
                    cx.loss(k, iteration, v);
                    match self.server.record_loss(k, iteration, v) {
                        Err(ProtocolError::Stale { .. }) => cx.dropped(iteration),
                        other => other?,
                    }
                }
            }
            MessageKind::PushImportant | MessageKind::PushIcsChunk => {
                let chunk = msg.kind == MessageKind::PushIcsChunk;
                match self.server.osp_server_on_push(k, msg) {
                    Ok(out) => self.route(cx, out)?,
                    Err(ProtocolError::Stale { .. }) => cx.dropped(iteration),
                    Err(e) => return Err(e),
                }
                if chunk {
                    self.workers[k].chunk_in_flight = false;
                    self.send_next_chunk(cx, k)?;
                }
            }
            other => {
                return Err(ProtocolError::UnexpectedMessage(format!(
                    "{} at the server",
                    other.name()
                )))
            }
        }
        Ok(())
    }

    fn on_worker(&mut self, cx: &mut Ctx<'_>, k: usize, msg: Message) -> Result<(), ProtocolError> {
        let iteration = msg.iteration;
        match msg.kind {
            MessageKind::PullImportant => {
                let global = msg.into_payload()?;
                let w = &mut self.workers[k];
                let delta = w.last_delta.as_ref().expect("pull follows a push");
                let part = delta.partition().clone();
                let others: LayerSet = global.layer_set().complement(part.layer_count());
                let local = delta.slice_layers(&others)?;
                w.ws.lgp_partial(&global, &local)?;
                w.ws.iteration = iteration + 1;
                if w.ws.drained() {
                    cx.settled(iteration, k, &w.ws.params);
                } else {
                    w.settling = Some(iteration);
                }
                cx.ready(iteration + 1);
                if iteration + 1 < cx.last_iteration() {
                    self.compute(cx, k, iteration + 1)?;
                }
                self.send_next_chunk(cx, k)?;
            }
            MessageKind::IcsGlobalChunk => {
                let chunk = msg.into_payload()?;
                self.workers[k].buffered.push(chunk);
                if !self.workers[k].computing {
                    self.apply_corrections(cx, k)?;
                }
            }
            MessageKind::GibUpdate => {
                if let Some((gib, order)) = gib_of(&msg) {
                    self.workers[k].ws.receive_gib(gib, order);
                }
            }
            other => {
                return Err(ProtocolError::UnexpectedMessage(format!(
                    "{} at worker {k}",
                    other.name()
                )))
            }
        }
        Ok(())
    }
}

impl Engine for OspEngine {
    fn start(&mut self, cx: &mut Ctx<'_>) -> Result<(), ProtocolError> {
        for k in 0..cx.n() {
            self.compute(cx, k, 0)?;
        }
        Ok(())
    }

    fn handle(&mut self, cx: &mut Ctx<'_>, event: SimEvent<Message, Timer>) -> Result<(), ProtocolError> {
        match event.kind {
            EventKind::ComputeDone { worker, iteration } => {
                cx.compute_done(iteration);
                let w = &mut self.workers[worker];
                w.computing = false;
                let took = cx.now() - w.compute_started;
                self.server.observe_compute_time(took);
                let w = &self.workers[worker];
                if !w.ws.drained() && w.buffered.is_empty() {
                    if let Some(p) = cx.probes.as_mut() {
                        p.ics_overruns += 1;
                    }
                }
                self.apply_corrections(cx, worker)?;
            }
            EventKind::FlowArrived {
                direction: Direction::Ingress,
                worker,
                message,
                ..
            } => self.on_server(cx, worker, message)?,
            EventKind::FlowArrived {
                direction: Direction::Egress,
                worker,
                message,
                ..
            } => self.on_worker(cx, worker, message)?,
            EventKind::TimerFired(Timer::CorrectionTick { worker, iteration }) => {
                let w = &self.workers[worker];
                if w.computing && cx.worker_iteration[worker] == iteration {
                    self.apply_corrections(cx, worker)?;
                    cx.sim
                        .set_timer_after(self.period, Timer::CorrectionTick { worker, iteration })?;
                }
            }
            EventKind::TimerFired(Timer::Outbox(_)) => unreachable!("outbox handled by the loop"),
        }
        Ok(())
    }

    fn final_params(&self) -> ParamVector {
        self.server.global_params.clone()
    }

    fn collect_probes(&mut self, probes: &mut super::Probes) {
        probes.applied = self.server.applied().to_vec();
    }
}
