use serde::{Deserialize, Serialize};

use super::FlowId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Worker to server.
    Ingress,
    /// Server to worker.
    Egress,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Ingress => "ingress",
            Direction::Egress => "egress",
        }
    }
}

#[derive(Debug, Clone)]
struct ActiveFlow {
    id: FlowId,
    size: f64,
    remaining: f64,
}

/// One side of the server's duplex link. Active flows split the bandwidth
/// equally (processor sharing); remaining bytes are advanced lazily whenever
/// membership changes or a completion check fires.
#[derive(Debug, Clone)]
pub struct LinkResource {
    direction: Direction,
    bandwidth: f64,
    latency: f64,
    loss_rate: f64,
    flows: Vec<ActiveFlow>,
    last_update: f64,
    version: u64,
    delivered_bytes: f64,
    delivered_payload_bytes: u64,
    delivered_messages: u64,
}

impl LinkResource {
    pub fn new(direction: Direction, bandwidth: f64, latency: f64, loss_rate: f64) -> Self {
        Self {
            direction,
            bandwidth,
            latency,
            loss_rate,
            flows: Vec::new(),
            last_update: 0.0,
            version: 0,
            delivered_bytes: 0.0,
            delivered_payload_bytes: 0,
            delivered_messages: 0,
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn latency(&self) -> f64 {
        self.latency
    }

    pub fn loss_rate(&self) -> f64 {
        self.loss_rate
    }

    pub fn active_flows(&self) -> usize {
        self.flows.len()
    }

    pub(super) fn version(&self) -> u64 {
        self.version
    }

    /// Sum of effective (loss-inflated) sizes of completed flows.
    pub fn delivered_bytes(&self) -> f64 {
        self.delivered_bytes
    }

    /// Sum of payload bytes reported by completed flows' messages.
    pub fn delivered_payload_bytes(&self) -> u64 {
        self.delivered_payload_bytes
    }

    pub fn delivered_messages(&self) -> u64 {
        self.delivered_messages
    }

    pub fn effective_size(&self, size: u64) -> f64 {
        size as f64 * (1.0 + self.loss_rate)
    }

    fn advance(&mut self, now: f64) {
        let elapsed = now - self.last_update;
        if elapsed > 0.0 && !self.flows.is_empty() {
            let drained = elapsed * self.bandwidth / self.flows.len() as f64;
            for f in &mut self.flows {
                f.remaining = (f.remaining - drained).max(0.0);
            }
        }
        self.last_update = now;
    }

    pub(super) fn add(&mut self, now: f64, id: FlowId, size: u64) {
        self.advance(now);
        let size = self.effective_size(size);
        self.flows.push(ActiveFlow {
            id,
            size,
            remaining: size,
        });
        self.version += 1;
    }

    /// When the next flow finishes transmitting, if any.
    pub(super) fn next_completion(&self) -> Option<f64> {
        let min = self
            .flows
            .iter()
            .map(|f| f.remaining)
            .min_by(|a, b| a.total_cmp(b))?;
        Some(self.last_update + min * self.flows.len() as f64 / self.bandwidth)
    }

    /// Retires the flows with the least remaining bytes. Only called at the
    /// instant `next_completion` predicted, so the minimum is spent up to
    /// rounding and is zeroed exactly.
    pub(super) fn complete_due(&mut self, now: f64, payload_of: impl Fn(FlowId) -> u64) -> Vec<FlowId> {
        self.advance(now);
        let Some(min) = self
            .flows
            .iter()
            .map(|f| f.remaining)
            .min_by(|a, b| a.total_cmp(b))
        else {
            return Vec::new();
        };
        let largest = self.flows.iter().map(|f| f.size).fold(1.0, f64::max);
        let threshold = min + largest * 1e-12;
        let mut done = Vec::new();
        let mut kept = Vec::with_capacity(self.flows.len());
        for mut f in self.flows.drain(..) {
            if f.remaining <= threshold {
                f.remaining = 0.0;
                self.delivered_bytes += f.size;
                self.delivered_payload_bytes += payload_of(f.id);
                self.delivered_messages += 1;
                done.push(f.id);
            } else {
                kept.push(f);
            }
        }
        self.flows = kept;
        self.version += 1;
        done
    }

    /// Messages that bypass the fair share (zero-size control traffic).
    pub(super) fn count_latency_only(&mut self, payload: u64) {
        self.delivered_payload_bytes += payload;
        self.delivered_messages += 1;
    }
}
