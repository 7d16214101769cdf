use crate::netsim::{Direction, EventKind, SimEvent};
use crate::param::{GradVector, LayerPayload, ParamVector};

use super::super::{aggregate, Message, MessageKind, ProtocolError};
use super::{Ctx, Engine, Timer};

/// Every worker pushes its full delta; the server waits for all of them,
/// applies the weighted mean and sends it back.
pub(super) struct BspEngine {
    global: ParamVector,
    params: Vec<ParamVector>,
    results: Vec<Option<(f64, GradVector)>>,
    inbox: Vec<Option<LayerPayload>>,
    inbox_iteration: u64,
}

impl BspEngine {
    pub(super) fn new(cx: &Ctx<'_>, initial: &ParamVector) -> Self {
        let n = cx.n();
        Self {
            global: initial.clone(),
            params: vec![initial.clone(); n],
            results: vec![None; n],
            inbox: vec![None; n],
            inbox_iteration: 0,
        }
    }

    fn compute(&mut self, cx: &mut Ctx<'_>, k: usize, iteration: u64) -> Result<(), ProtocolError> {
        self.results[k] = Some(cx.begin_compute(k, iteration, &self.params[k])?);
        Ok(())
    }
}

impl Engine for BspEngine {
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
                let payload = delta.slice_layers(&part.all_layers())?;
                let push = Message::layers(MessageKind::PushFull, iteration, payload, &part);
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
                    if let super::super::Body::Scalar(v) = message.body {
                        cx.loss(worker, message.iteration, v);
                    }
                }
                MessageKind::PushFull => {
                    let iteration = message.iteration;
                    if iteration != self.inbox_iteration {
                        return Err(ProtocolError::UnexpectedMessage(format!(
                            "push for iteration {iteration} during barrier {}",
                            self.inbox_iteration
                        )));
                    }
                    self.inbox[worker] = Some(message.into_payload()?);
                    if self.inbox.iter().all(Option::is_some) {
                        let payloads: Vec<LayerPayload> =
                            self.inbox.iter_mut().map(|p| p.take().expect("all present")).collect();
                        let refs: Vec<&LayerPayload> = payloads.iter().collect();
                        let agg = aggregate(&refs, &cx.weights)?;
                        self.global.apply_payload(&agg, 1.0)?;
                        if let Some(p) = cx.probes.as_mut() {
                            p.applied.push((iteration, agg.clone()));
                        }
                        cx.complete(iteration, 0, &self.global)?;
                        self.inbox_iteration += 1;
                        let pull = Message::layers(
                            MessageKind::PullFull,
                            iteration,
                            agg,
                            self.global.partition(),
                        );
                        let out = cx.broadcast(&pull);
                        cx.send_after(cx.opts.delays.agg_delay, out)?;
                    }
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
                let agg = message.into_payload()?;
                self.params[worker].apply_payload(&agg, 1.0)?;
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
