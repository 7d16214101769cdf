//! Deterministic discrete-event simulation of worker compute phases and the
//! parameter server's duplex link.
//!
//! All workers share one ingress link into the server and one egress link
//! out of it. Concurrent flows on a link split its bandwidth equally, which
//! is what makes many-to-one pushes slow down together. Loss is modeled as a
//! fixed `1 + loss_rate` inflation of every flow, latency is added once per
//! message on delivery, and zero-size messages pay latency only.

mod link;
mod profile;
mod queue;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use link::{Direction, LinkResource};
pub use profile::{BstTracker, ComputeProfile, ServerDelayProfile};
pub use queue::EventQueue;

use crate::tuning::NetworkParams;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("event scheduled at {at}s but the clock is already at {now}s")]
    PastEvent { at: f64, now: f64 },
    #[error("worker {worker} is already computing")]
    WorkerBusy { worker: usize },
    #[error("unknown worker {worker}")]
    UnknownWorker { worker: usize },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowId(pub u64);

/// What the simulator needs to know about a message it carries.
pub trait Transmit {
    /// Bytes on the wire; 0 means latency-only.
    fn wire_bytes(&self) -> u64;
    /// Gradient/parameter bytes inside the message, for accounting.
    fn payload_bytes(&self) -> u64 {
        0
    }
    /// One-line summary for the event trace.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind<M, T> {
    ComputeDone {
        worker: usize,
        iteration: u64,
    },
    FlowArrived {
        flow: FlowId,
        direction: Direction,
        /// Sender for ingress, receiver for egress.
        worker: usize,
        message: M,
    },
    TimerFired(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<M, T> {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind<M, T>,
}

enum Item<M, T> {
    Visible(EventKind<M, T>),
    LinkCheck { direction: Direction, version: u64 },
}

struct InFlight<M> {
    worker: usize,
    message: M,
}

pub struct Simulator<M, T> {
    queue: EventQueue<Item<M, T>>,
    ingress: LinkResource,
    egress: LinkResource,
    in_flight: BTreeMap<FlowId, InFlight<M>>,
    next_flow: u64,
    compute: ComputeProfile,
    busy: Vec<bool>,
    trace: Option<String>,
}

impl<M: Transmit, T: std::fmt::Debug> Simulator<M, T> {
    pub fn new(
        workers: usize,
        net: NetworkParams,
        compute: ComputeProfile,
    ) -> Result<Self, SimError> {
        compute.validate()?;
        Ok(Self {
            queue: EventQueue::new(),
            ingress: LinkResource::new(Direction::Ingress, net.bandwidth, net.latency, net.loss_rate),
            egress: LinkResource::new(Direction::Egress, net.bandwidth, net.latency, net.loss_rate),
            in_flight: BTreeMap::new(),
            next_flow: 0,
            compute,
            busy: vec![false; workers],
            trace: None,
        })
    }

    /// Starts recording one tab-separated line per delivered event.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn workers(&self) -> usize {
        self.busy.len()
    }

    pub fn compute_profile(&self) -> &ComputeProfile {
        &self.compute
    }

    pub fn link(&self, direction: Direction) -> &LinkResource {
        match direction {
            Direction::Ingress => &self.ingress,
            Direction::Egress => &self.egress,
        }
    }

    fn link_mut(&mut self, direction: Direction) -> &mut LinkResource {
        match direction {
            Direction::Ingress => &mut self.ingress,
            Direction::Egress => &mut self.egress,
        }
    }

    pub fn is_busy(&self, worker: usize) -> bool {
        self.busy.get(worker).copied().unwrap_or(false)
    }

    /// Sends `message` over `direction` to or from `worker`.
    pub fn send(&mut self, direction: Direction, worker: usize, message: M) -> Result<FlowId, SimError> {
        if worker >= self.busy.len() {
            return Err(SimError::UnknownWorker { worker });
        }
        let id = FlowId(self.next_flow);
        self.next_flow += 1;
        let now = self.now();
        let size = message.wire_bytes();
        if size == 0 {
            let latency = self.link(direction).latency();
            let payload = message.payload_bytes();
            self.link_mut(direction).count_latency_only(payload);
            self.queue.schedule(
                now + latency,
                Item::Visible(EventKind::FlowArrived {
                    flow: id,
                    direction,
                    worker,
                    message,
                }),
            )?;
            return Ok(id);
        }
        self.in_flight.insert(id, InFlight { worker, message });
        self.link_mut(direction).add(now, id, size);
        self.schedule_check(direction)?;
        Ok(id)
    }

    fn schedule_check(&mut self, direction: Direction) -> Result<(), SimError> {
        let link = self.link(direction);
        if let Some(at) = link.next_completion() {
            let version = link.version();
            // rounding can put the prediction a hair before the clock
            let at = at.max(self.now());
            self.queue.schedule(at, Item::LinkCheck { direction, version })?;
        }
        Ok(())
    }

    /// Begins a compute phase; returns its end time.
    pub fn start_compute(&mut self, worker: usize, iteration: u64) -> Result<f64, SimError> {
        match self.busy.get(worker) {
            None => return Err(SimError::UnknownWorker { worker }),
            Some(true) => return Err(SimError::WorkerBusy { worker }),
            Some(false) => {}
        }
        let end = self.now() + self.compute.duration(worker, iteration);
        self.queue
            .schedule(end, Item::Visible(EventKind::ComputeDone { worker, iteration }))?;
        self.busy[worker] = true;
        Ok(end)
    }

    pub fn set_timer(&mut self, at: f64, timer: T) -> Result<(), SimError> {
        self.queue.schedule(at, Item::Visible(EventKind::TimerFired(timer)))?;
        Ok(())
    }

    pub fn set_timer_after(&mut self, delay: f64, timer: T) -> Result<(), SimError> {
        let at = self.now() + delay.max(0.0);
        self.set_timer(at, timer)
    }

    /// Next visible event, or `None` when nothing is left to happen.
    pub fn next_event(&mut self) -> Result<Option<SimEvent<M, T>>, SimError> {
        while let Some((time, seq, item)) = self.queue.pop() {
            match item {
                Item::LinkCheck { direction, version } => {
                    if self.link(direction).version() != version {
                        continue;
                    }
                    let in_flight = &self.in_flight;
                    let link = match direction {
                        Direction::Ingress => &mut self.ingress,
                        Direction::Egress => &mut self.egress,
                    };
                    let done = link.complete_due(time, |id| {
                        in_flight.get(&id).map_or(0, |f| f.message.payload_bytes())
                    });
                    let latency = link.latency();
                    for id in done {
                        let f = self.in_flight.remove(&id).expect("completed flow is in flight");
                        self.queue.schedule(
                            time + latency,
                            Item::Visible(EventKind::FlowArrived {
                                flow: id,
                                direction,
                                worker: f.worker,
                                message: f.message,
                            }),
                        )?;
                    }
                    self.schedule_check(direction)?;
                }
                Item::Visible(kind) => {
                    if let EventKind::ComputeDone { worker, .. } = kind {
                        self.busy[worker] = false;
                    }
                    let event = SimEvent { time, seq, kind };
                    if let Some(trace) = self.trace.as_mut() {
                        trace_line(trace, &event);
                    }
                    return Ok(Some(event));
                }
            }
        }
        Ok(None)
    }
}

fn trace_line<M: Transmit, T: std::fmt::Debug>(out: &mut String, e: &SimEvent<M, T>) {
    let _ = match &e.kind {
        EventKind::ComputeDone { worker, iteration } => writeln!(
            out,
            "{}\t{}\tcompute-done\tworker {}\titeration {}",
            e.time, e.seq, worker, iteration
        ),
        EventKind::FlowArrived {
            flow,
            direction,
            worker,
            message,
        } => writeln!(
            out,
            "{}\t{}\tflow-arrived\tflow {}\t{} worker {} {}",
            e.time,
            e.seq,
            flow.0,
            direction.name(),
            worker,
            message.describe()
        ),
        EventKind::TimerFired(t) => {
            writeln!(out, "{}\t{}\ttimer\t-\t{:?}", e.time, e.seq, t)
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Blob(u64);

    impl Transmit for Blob {
        fn wire_bytes(&self) -> u64 {
            self.0
        }
        fn payload_bytes(&self) -> u64 {
            self.0
        }
        fn describe(&self) -> String {
            format!("{} bytes", self.0)
        }
    }

    fn sim(workers: usize, b: f64, lat: f64, lr: f64) -> Simulator<Blob, u32> {
        Simulator::new(
            workers,
            NetworkParams::new(b, lat, lr).unwrap(),
            ComputeProfile::uniform(0.25),
        )
        .unwrap()
    }

    fn arrivals(s: &mut Simulator<Blob, u32>) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        while let Some(e) = s.next_event().unwrap() {
            if let EventKind::FlowArrived { worker, .. } = e.kind {
                out.push((e.time, worker));
            }
        }
        out
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-9)
    }

    #[test]
    fn single_flow_closed_form() {
        let mut s = sim(1, 1e9, 1e-4, 0.0);
        s.send(Direction::Ingress, 0, Blob(1_000_000)).unwrap();
        let a = arrivals(&mut s);
        assert_eq!(a.len(), 1);
        assert!(close(a[0].0, 1.1e-3), "{}", a[0].0);
    }

    #[test]
    fn equal_flows_share_bandwidth() {
        let mut s = sim(2, 1e9, 1e-4, 0.0);
        s.send(Direction::Ingress, 0, Blob(1_000_000)).unwrap();
        s.send(Direction::Ingress, 1, Blob(1_000_000)).unwrap();
        let a = arrivals(&mut s);
        assert_eq!(a.len(), 2);
        for (t, _) in &a {
            assert!(close(*t, 1e-4 + 2e-3), "{t}");
        }
    }

    #[test]
    fn loss_inflates_transferred_bytes() {
        let mut s = sim(1, 1e9, 0.0, 0.5);
        s.send(Direction::Egress, 0, Blob(1_000_000)).unwrap();
        let a = arrivals(&mut s);
        assert!(close(a[0].0, 1.5e-3));
        assert_eq!(s.link(Direction::Egress).delivered_bytes(), 1.5e6);
        assert_eq!(s.link(Direction::Egress).delivered_payload_bytes(), 1_000_000);
        assert_eq!(s.link(Direction::Ingress).delivered_messages(), 0);
    }

    #[test]
    fn directions_are_independent() {
        let mut s = sim(2, 1e9, 0.0, 0.0);
        s.send(Direction::Ingress, 0, Blob(1_000_000)).unwrap();
        s.send(Direction::Egress, 1, Blob(1_000_000)).unwrap();
        for (t, _) in arrivals(&mut s) {
            assert!(close(t, 1e-3));
        }
    }

    #[test]
    fn late_joiner_slows_but_never_speeds_up() {
        // flow A alone for 0.5 ms (half done), then shares with B
        let mut s = sim(2, 1e9, 0.0, 0.0);
        s.send(Direction::Ingress, 0, Blob(1_000_000)).unwrap();
        s.set_timer(0.5e-3, 1).unwrap();
        let mut times = BTreeMap::new();
        while let Some(e) = s.next_event().unwrap() {
            match e.kind {
                EventKind::TimerFired(_) => {
                    s.send(Direction::Ingress, 1, Blob(1_000_000)).unwrap();
                }
                EventKind::FlowArrived { worker, .. } => {
                    times.insert(worker, e.time);
                }
                _ => {}
            }
        }
        assert!(close(times[&0], 1.5e-3), "{}", times[&0]);
        assert!(close(times[&1], 2.0e-3), "{}", times[&1]);
    }

    #[test]
    fn zero_size_pays_latency_only() {
        let mut s = sim(1, 1e9, 2e-4, 0.3);
        s.send(Direction::Egress, 0, Blob(0)).unwrap();
        let a = arrivals(&mut s);
        assert!(close(a[0].0, 2e-4));
    }

    #[test]
    fn compute_profile_scaling_and_jitter() {
        let mut p = ComputeProfile::uniform(0.25);
        assert_eq!(p.duration(0, 3), 0.25);
        p.straggler_multipliers = vec![1.0, 1.0, 1.0, 2.0];
        assert_eq!(p.duration(3, 0), 0.5);
        p.jitter_fraction = 0.1;
        p.seed = 42;
        let d: Vec<f64> = (0..20).map(|i| p.duration(1, i)).collect();
        assert!(d.iter().all(|x| (0.225..=0.275).contains(x)));
        assert!(d.windows(2).any(|w| w[0] != w[1]));
        assert_eq!(d, (0..20).map(|i| p.duration(1, i)).collect::<Vec<_>>());
        p.straggler_multipliers = vec![0.5];
        assert!(p.validate().is_err());
    }

    #[test]
    fn compute_done_and_busy_worker() {
        let mut s = sim(2, 1e9, 0.0, 0.0);
        assert_eq!(s.start_compute(1, 0).unwrap(), 0.25);
        assert_eq!(s.start_compute(1, 0), Err(SimError::WorkerBusy { worker: 1 }));
        assert_eq!(s.start_compute(5, 0), Err(SimError::UnknownWorker { worker: 5 }));
        let e = s.next_event().unwrap().unwrap();
        assert_eq!(e.kind, EventKind::ComputeDone { worker: 1, iteration: 0 });
        assert!(!s.is_busy(1));
        assert!(s.next_event().unwrap().is_none());
    }

    #[test]
    fn bst_tracker_waits_for_all_workers() {
        let mut t = BstTracker::new(2);
        t.compute_done(0, 1.0);
        t.compute_done(0, 0.8);
        t.ready(1, 1.5);
        assert_eq!(t.measure_bst(0), None);
        t.ready(1, 1.7);
        assert!((t.measure_bst(0).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn trace_is_reproducible() {
        let run = || {
            let mut s = sim(3, 1e9, 1e-5, 0.1);
            s.enable_trace();
            for w in 0..3 {
                s.send(Direction::Ingress, w, Blob(1000 * (w as u64 + 1))).unwrap();
                s.start_compute(w, 0).unwrap();
            }
            s.set_timer(1e-6, 9).unwrap();
            while s.next_event().unwrap().is_some() {}
            s.take_trace().unwrap()
        };
        let a = run();
        assert_eq!(a.lines().count(), 7);
        assert_eq!(a, run());
    }
}
