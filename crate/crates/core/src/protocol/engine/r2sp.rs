use crate::netsim::{Direction, EventKind, SimEvent};
use crate::param::{GradVector, ParamVector};

use super::super::{Body, Message, MessageKind, ProtocolError};
use super::asp::scaled_payload;
use super::{Ctx, Engine, Timer};

/// Worker in `slot` of `round`. The order rotates by one every round so the
/// worker that went last goes first next.
pub(super) fn worker_for(round: u64, slot: usize, n: usize) -> usize {
    (slot + n - (round % n as u64) as usize) % n
}

/// Round-robin: one worker at a time may push, the server applies it and
/// answers that worker alone, then grants the next slot.
pub(super) struct R2spEngine {
    global: ParamVector,
    params: Vec<ParamVector>,
    results: Vec<Option<(f64, GradVector)>>,
    computing: Vec<bool>,
    granted: Vec<Option<u64>>,
    round: u64,
    slot: usize,
}

impl R2spEngine {
    pub(super) fn new(cx: &Ctx<'_>, initial: &ParamVector) -> Self {
        let n = cx.n();
        let mut granted = vec![None; n];
        granted[worker_for(0, 0, n)] = Some(0);
        Self {
            global: initial.clone(),
            params: vec![initial.clone(); n],
            results: vec![None; n],
            computing: vec![false; n],
            granted,
            round: 0,
            slot: 0,
        }
    }

    fn compute(&mut self, cx: &mut Ctx<'_>, k: usize, iteration: u64) -> Result<(), ProtocolError> {
        self.results[k] = Some(cx.begin_compute(k, iteration, &self.params[k])?);
        self.computing[k] = true;
        Ok(())
    }

    fn try_push(&mut self, cx: &mut Ctx<'_>, k: usize) -> Result<(), ProtocolError> {
        if self.computing[k] || self.results[k].is_none() {
            return Ok(());
        }
        let iteration = cx.worker_iteration[k];
        if self.granted[k] != Some(iteration) {
            return Ok(());
        }
        self.granted[k] = None;
        let (loss, delta) = self.results[k].take().expect("checked");
        let part = delta.partition().clone();
        let push = Message::layers(MessageKind::PushFull, iteration, delta.slice_layers(&part.all_layers())?, &part);
        cx.pushed(iteration, push.layer_bytes, 0);
        cx.send(Direction::Ingress, k, Message::loss(iteration, loss))?;
        cx.send(Direction::Ingress, k, push)
    }

    fn on_push(&mut self, cx: &mut Ctx<'_>, k: usize, msg: Message) -> Result<(), ProtocolError> {
        let n = cx.n();
        let iteration = msg.iteration;
        if iteration != self.round || worker_for(self.round, self.slot, n) != k {
            return Err(ProtocolError::UnexpectedMessage(format!(
                "push from worker {k} for iteration {iteration} outside its slot"
            )));
        }
        let scaled = scaled_payload(msg.into_payload()?, cx.weights[k]);
        self.global.apply_payload(&scaled, 1.0)?;
        if let Some(p) = cx.probes.as_mut() {
            p.applied.push((iteration, scaled));
        }
        let part = self.global.partition().clone();
        let snapshot = self.global.slice_layers(&part.all_layers())?;
        let reply = Message::layers(MessageKind::PullFull, iteration, snapshot, &part);
        cx.send_after(cx.opts.delays.agg_delay, vec![(Direction::Egress, k, reply)])?;

        self.slot += 1;
        if self.slot == n {
            cx.complete(self.round, 0, &self.global)?;
            self.round += 1;
            self.slot = 0;
        }
        if self.round < cx.last_iteration() {
            let next = worker_for(self.round, self.slot, n);
            cx.send(Direction::Egress, next, Message::grant(self.round))?;
        }
        Ok(())
    }
}

impl Engine for R2spEngine {
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
                self.computing[worker] = false;
                self.try_push(cx, worker)?;
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
                MessageKind::PushFull => self.on_push(cx, worker, message)?,
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
            } => match message.kind {
                MessageKind::PushGrant => {
                    self.granted[worker] = Some(message.iteration);
                    self.try_push(cx, worker)?;
                }
                MessageKind::PullFull => {
                    let iteration = message.iteration;
                    let snapshot = message.into_payload()?;
                    self.params[worker].merge_payload(&snapshot)?;
                    cx.settled(iteration, worker, &self.params[worker]);
                    cx.ready(iteration + 1);
                    if iteration + 1 < cx.last_iteration() {
                        self.compute(cx, worker, iteration + 1)?;
                    }
                    self.try_push(cx, worker)?;
                }
                other => {
                    return Err(ProtocolError::UnexpectedMessage(format!(
                        "{} at worker {worker}",
                        other.name()
                    )))
                }
            },
            EventKind::TimerFired(_) => {}
        }
        Ok(())
    }

    fn final_params(&self) -> ParamVector {
        self.global.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::worker_for;

    #[test]
    fn every_round_is_a_permutation_and_rotates() {
        for n in 1..7 {
            for r in 0..10u64 {
                let mut seen: Vec<usize> = (0..n).map(|s| worker_for(r, s, n)).collect();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                // last of a round opens the next one
                assert_eq!(worker_for(r, n - 1, n), worker_for(r + 1, 0, n));
            }
        }
        assert_eq!(worker_for(0, 0, 4), 0);
    }
}
