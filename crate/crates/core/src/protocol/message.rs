use serde::{Deserialize, Serialize};

use crate::importance::{gib_encoded_len, Gib};
use crate::netsim::Transmit;
use crate::param::{LayerPartition, LayerPayload};

use super::ProtocolError;

/// kind (1) + iteration (4) + layer entries (2)
pub const MESSAGE_HEADER_BYTES: u64 = 7;
/// layer id (4) + value count (4)
pub const LAYER_ENTRY_HEADER_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    /// Worker's routine-stage layers.
    PushImportant = 1,
    /// A slice of a worker's deferred layers.
    PushIcsChunk = 2,
    /// Aggregated routine-stage layers back to a worker.
    PullImportant = 3,
    /// Aggregated deferred layers broadcast as they complete.
    IcsGlobalChunk = 4,
    GibUpdate = 5,
    LossReport = 6,
    PushFull = 7,
    /// Aggregated delta (barrier models) or current parameters (asynchronous
    /// models) covering every layer.
    PullFull = 8,
    /// Round-robin turn handed to the next worker.
    PushGrant = 9,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match b {
            1 => PushImportant,
            2 => PushIcsChunk,
            3 => PullImportant,
            4 => IcsGlobalChunk,
            5 => GibUpdate,
            6 => LossReport,
            7 => PushFull,
            8 => PullFull,
            9 => PushGrant,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use MessageKind::*;
        match self {
            PushImportant => "push-important",
            PushIcsChunk => "push-ics-chunk",
            PullImportant => "pull-important",
            IcsGlobalChunk => "ics-global-chunk",
            GibUpdate => "gib-update",
            LossReport => "loss-report",
            PushFull => "push-full",
            PullFull => "pull-full",
            PushGrant => "push-grant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Layers(LayerPayload),
    /// Bitmap plus the deferred layers in ascending importance, so workers
    /// can order their chunks.
    Gib { gib: Gib, ics_order: Vec<usize> },
    Scalar(f64),
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub iteration: u64,
    pub body: Body,
    /// Encoded size; 0 marks latency-only control traffic.
    pub size_bytes: u64,
    /// Gradient or parameter bytes carried, by layer size.
    pub layer_bytes: u64,
}

impl Message {
    pub fn layers(kind: MessageKind, iteration: u64, payload: LayerPayload, part: &LayerPartition) -> Self {
        let layer_bytes = payload.size_bytes(part);
        Self {
            kind,
            iteration,
            size_bytes: payload_wire_bytes(&payload, part),
            layer_bytes,
            body: Body::Layers(payload),
        }
    }

    pub fn loss(iteration: u64, loss: f64) -> Self {
        Self {
            kind: MessageKind::LossReport,
            iteration,
            body: Body::Scalar(loss),
            size_bytes: MESSAGE_HEADER_BYTES + 8,
            layer_bytes: 0,
        }
    }

    /// `negligible` sends the bitmap as latency-only traffic.
    pub fn gib(iteration: u64, gib: Gib, ics_order: Vec<usize>, layer_count: usize, negligible: bool) -> Self {
        let size = if negligible {
            0
        } else {
            1 + gib_encoded_len(layer_count) as u64 + 2 * ics_order.len() as u64
        };
        Self {
            kind: MessageKind::GibUpdate,
            iteration,
            body: Body::Gib { gib, ics_order },
            size_bytes: size,
            layer_bytes: 0,
        }
    }

    pub fn grant(iteration: u64) -> Self {
        Self {
            kind: MessageKind::PushGrant,
            iteration,
            body: Body::Empty,
            size_bytes: 0,
            layer_bytes: 0,
        }
    }

    pub fn payload(&self) -> Option<&LayerPayload> {
        match &self.body {
            Body::Layers(p) => Some(p),
            _ => None,
        }
    }

    pub fn into_payload(self) -> Result<LayerPayload, ProtocolError> {
        match self.body {
            Body::Layers(p) => Ok(p),
            _ => Err(ProtocolError::UnexpectedMessage(format!(
                "{} carries no layers",
                self.kind.name()
            ))),
        }
    }
}

impl Transmit for Message {
    fn wire_bytes(&self) -> u64 {
        self.size_bytes
    }

    fn payload_bytes(&self) -> u64 {
        self.layer_bytes
    }

    fn describe(&self) -> String {
        let what = match &self.body {
            Body::Layers(p) => {
                let ids: Vec<String> = p.layer_ids().map(|l| l.to_string()).collect();
                format!("layers [{}]", ids.join(","))
            }
            Body::Gib { gib, .. } => format!("ics {:?} tag {}", gib.ics_set, gib.iteration_tag),
            Body::Scalar(v) => format!("value {v}"),
            Body::Empty => "-".to_string(),
        };
        format!(
            "{} iteration {} bytes {} {}",
            self.kind.name(),
            self.iteration,
            self.size_bytes,
            what
        )
    }
}

/// Encoded size of a layer message at the partition's element width.
pub fn payload_wire_bytes(payload: &LayerPayload, part: &LayerPartition) -> u64 {
    MESSAGE_HEADER_BYTES
        + payload
            .iter()
            .map(|(_, v)| LAYER_ENTRY_HEADER_BYTES + v.len() as u64 * part.bytes_per_element())
            .sum::<u64>()
}

/// Little-endian encoding with 4-byte IEEE-754 values. Values are rounded to
/// single precision on the way out.
pub fn encode_layers(kind: MessageKind, iteration: u64, payload: &LayerPayload) -> Result<Vec<u8>, ProtocolError> {
    let iteration = u32::try_from(iteration)
        .map_err(|_| ProtocolError::Encoding(format!("iteration {iteration} exceeds 32 bits")))?;
    let entries = u16::try_from(payload.len())
        .map_err(|_| ProtocolError::Encoding(format!("{} layers exceed 16 bits", payload.len())))?;
    let mut out = Vec::with_capacity(7 + payload.element_count() * 4 + payload.len() * 8);
    out.push(kind as u8);
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&entries.to_le_bytes());
    for (layer, values) in payload.iter() {
        let layer = u32::try_from(layer)
            .map_err(|_| ProtocolError::Encoding(format!("layer {layer} exceeds 32 bits")))?;
        out.extend_from_slice(&layer.to_le_bytes());
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_layers(bytes: &[u8]) -> Result<(MessageKind, u64, LayerPayload), ProtocolError> {
    let mut r = Reader { bytes, pos: 0 };
    let kind = r.take(1)?[0];
    let kind = MessageKind::from_byte(kind)
        .ok_or_else(|| ProtocolError::Encoding(format!("unknown message kind {kind}")))?;
    let iteration = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as u64;
    let entries = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    let mut payload = LayerPayload::new();
    for _ in 0..entries {
        let layer = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| ProtocolError::Encoding("count overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if payload.insert(layer, values).is_some() {
            return Err(ProtocolError::Encoding(format!("layer {layer} repeated")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ProtocolError::Encoding(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((kind, iteration, payload))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ProtocolError::Encoding(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
