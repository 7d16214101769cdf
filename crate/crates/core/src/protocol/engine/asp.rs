use std::collections::BTreeMap;

use crate::netsim::{Direction, EventKind, SimEvent};
use crate::param::{GradVector, LayerPayload, ParamVector};

use super::super::{Body, Message, MessageKind, ProtocolError};
use super::{Ctx, Engine, Timer};

/// Full delta scaled by the pushing worker's data share.
pub(super) fn scaled_payload(delta: LayerPayload, weight: f64) -> LayerPayload {
    let mut out = LayerPayload::new();
    for (l, v) in delta.iter() {
        out.insert(l, v.iter().map(|x| x * weight).collect());
    }
    out
}

/// Server applies each push on arrival and answers with its current
/// parameters. Without a staleness bound, pushes more than one iteration
/// behind the newest are discarded; with a bound `s`, a worker more than `s`
/// iterations ahead of the slowest waits for its reply.
pub(super) struct AsyncEngine {
    global: ParamVector,
    params: Vec<ParamVector>,
    results: Vec<Option<(f64, GradVector)>>,
    staleness: Option<u64>,
    newest: Option<u64>,
    /// Pushes processed per worker.
    clocks: Vec<u64>,
    held: Vec<Option<Message>>,
    processed: BTreeMap<u64, usize>,
}

impl AsyncEngine {
    pub(super) fn new(cx: &Ctx<'_>, initial: &ParamVector, staleness: Option<u64>) -> Self {
        let n = cx.n();
        Self {
            global: initial.clone(),
            params: vec![initial.clone(); n],
            results: vec![None; n],
            staleness,
            newest: None,
            clocks: vec![0; n],
            held: vec![None; n],
            processed: BTreeMap::new(),
        }
    }

    fn compute(&mut self, cx: &mut Ctx<'_>, k: usize, iteration: u64) -> Result<(), ProtocolError> {
        self.results[k] = Some(cx.begin_compute(k, iteration, &self.params[k])?);
        Ok(())
    }

    fn reply(&self, cx: &mut Ctx<'_>, k: usize, msg: Message) -> Result<(), ProtocolError> {
        cx.send_after(cx.opts.delays.agg_delay, vec![(Direction::Egress, k, msg)])
    }

    fn on_push(&mut self, cx: &mut Ctx<'_>, k: usize, iteration: u64, delta: LayerPayload) -> Result<(), ProtocolError> {
        let stale = self.staleness.is_none() && self.newest.is_some_and(|m| iteration + 1 < m);
        if stale {
            cx.dropped(iteration);
        } else {
            let scaled = scaled_payload(delta, cx.weights[k]);
            self.global.apply_payload(&scaled, 1.0)?;
            if let Some(p) = cx.probes.as_mut() {
                p.applied.push((iteration, scaled));
            }
        }
        self.newest = Some(self.newest.map_or(iteration, |m| m.max(iteration)));
        self.clocks[k] = iteration + 1;

        let count = self.processed.entry(iteration).or_default();
        *count += 1;
        if *count == cx.n() {
            self.processed.remove(&iteration);
            cx.complete(iteration, 0, &self.global)?;
        }

        let part = self.global.partition().clone();
        let snapshot = self.global.slice_layers(&part.all_layers())?;
        let msg = Message::layers(MessageKind::PullFull, iteration, snapshot, &part);
        match self.staleness {
            Some(s) if self.clocks[k] - self.min_clock() > s => self.held[k] = Some(msg),
            _ => self.reply(cx, k, msg)?,
        }
        self.release(cx, &part)
    }

    fn min_clock(&self) -> u64 {
        self.clocks.iter().copied().min().unwrap_or(0)
    }

    /// Answers held workers that are back within the bound, with the
    /// parameters as they are now.
    fn release(&mut self, cx: &mut Ctx<'_>, part: &crate::param::LayerPartition) -> Result<(), ProtocolError> {
        let Some(s) = self.staleness else {
            return Ok(());
        };
        let min = self.min_clock();
        for k in 0..self.held.len() {
            if self.clocks[k] - min > s {
                continue;
            }
            if let Some(held) = self.held[k].take() {
                let snapshot = self.global.slice_layers(&part.all_layers())?;
                let msg = Message::layers(MessageKind::PullFull, held.iteration, snapshot, part);
                self.reply(cx, k, msg)?;
            }
        }
        Ok(())
    }
}

impl Engine for AsyncEngine {
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
                let (loss, delta) = self.results[worker].take().expect("result held while computing");
                let part = delta.partition().clone();
                let push = Message::layers(MessageKind::PushFull, iteration, delta.slice_layers(&part.all_layers())?, &part);
                cx.pushed(iteration, push.layer_bytes, 0);
                cx.send(Direction::Ingress, worker, Message::loss(iteration, loss))?;
                cx.send(Direction::Ingress, worker, push)?;
            }
            EventKind::FlowArrived {
                direction: Direction::Ingress,
                worker,
                message,
                ..
            } => match message.kind {
                MessageKind::LossReport => {
                    if let Body::Scalar(v) = message.body {
                        cx.loss(worker, message.iteration, v);
                    }
                }
                MessageKind::PushFull => {
                    let iteration = message.iteration;
                    let delta = message.into_payload()?;
                    self.on_push(cx, worker, iteration, delta)?;
                }
                other => {
                    return Err(ProtocolError::UnexpectedMessage(format!(
                        "{} at the server",
                        other.name()
                    )))
                }
            },
            EventKind::FlowArrived {
                direction: Direction::Egress,
                worker,
                message,
                ..
            } => {
                let iteration = message.iteration;
                let snapshot = message.into_payload()?;
                self.params[worker].merge_payload(&snapshot)?;
                cx.settled(iteration, worker, &self.params[worker]);
                cx.ready(iteration + 1);
                if iteration + 1 < cx.last_iteration() {
                    self.compute(cx, worker, iteration + 1)?;
                }
            }
            EventKind::TimerFired(_) => {}
        }
        Ok(())
    }

    fn final_params(&self) -> ParamVector {
        self.global.clone()
    }
}
