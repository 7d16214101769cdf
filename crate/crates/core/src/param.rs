//! Flat parameter and gradient storage partitioned into layers.
//!
//! Every protocol moves whole layers: a [`LayerSet`] selects layers, a
//! [`LayerPayload`] carries their values, and [`Layered`] vectors hold the
//! full model state over a shared [`LayerPartition`].

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Wire width of one model element. Models are 32-bit floats on the wire.
pub const DEFAULT_BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("layer {layer} out of range ({layers} layers)")]
    InvalidLayer { layer: usize, layers: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, ParamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub id: usize,
    pub offset: usize,
    pub count: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.count
    }
}

/// Contiguous, non-overlapping layer spans covering `[0, total_count)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    layers: Vec<LayerSpan>,
    bytes_per_element: u64,
    total_count: usize,
}

impl LayerPartition {
    pub fn new(layer_counts: &[usize], bytes_per_element: u64) -> Result<Self> {
        if layer_counts.is_empty() {
            return Err(ParamError::InvalidPartition("no layers".into()));
        }
        if bytes_per_element == 0 {
            return Err(ParamError::InvalidPartition(
                "bytes_per_element must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(layer_counts.len());
        let mut offset = 0;
        for (id, &count) in layer_counts.iter().enumerate() {
            if count == 0 {
                return Err(ParamError::InvalidPartition(format!(
                    "layer {id} has zero elements"
                )));
            }
            layers.push(LayerSpan { id, offset, count });
            offset += count;
        }
        Ok(Self {
            layers,
            bytes_per_element,
            total_count: offset,
        })
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> Result<&LayerSpan> {
        self.layers.get(id).ok_or(ParamError::InvalidLayer {
            layer: id,
            layers: self.layers.len(),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    pub fn bytes_per_element(&self) -> u64 {
        self.bytes_per_element
    }

    pub fn layer_size_bytes(&self, id: usize) -> u64 {
        self.layers[id].count as u64 * self.bytes_per_element
    }

    pub fn model_bytes(&self) -> u64 {
        self.total_count as u64 * self.bytes_per_element
    }

    /// Sum of the wire sizes of the layers in `set`.
    pub fn layer_bytes(&self, set: &LayerSet) -> Result<u64> {
        self.check_set(set)?;
        Ok(set.iter().map(|l| self.layer_size_bytes(l)).sum())
    }

    pub fn check_set(&self, set: &LayerSet) -> Result<()> {
        if let Some(bad) = set.iter().find(|&l| l >= self.layers.len()) {
            return Err(ParamError::InvalidLayer {
                layer: bad,
                layers: self.layers.len(),
            });
        }
        Ok(())
    }

    pub fn all_layers(&self) -> LayerSet {
        LayerSet::full(self.layers.len())
    }
}

/// Bitmap over layer ids.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LayerSet {
    words: Vec<u64>,
}

impl LayerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full(layer_count: usize) -> Self {
        (0..layer_count).collect()
    }

    pub fn insert(&mut self, layer: usize) {
        let (w, b) = (layer / 64, layer % 64);
        if self.words.len() <= w {
            self.words.resize(w + 1, 0);
        }
        self.words[w] |= 1 << b;
    }

    pub fn remove(&mut self, layer: usize) {
        if let Some(word) = self.words.get_mut(layer / 64) {
            *word &= !(1 << (layer % 64));
        }
        while self.words.last() == Some(&0) {
            self.words.pop();
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.words
            .get(layer / 64)
            .is_some_and(|w| w & (1 << (layer % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Ascending layer ids.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            (0..64)
                .filter(move |b| word & (1u64 << b) != 0)
                .map(move |b| wi * 64 + b)
        })
    }

    pub fn complement(&self, layer_count: usize) -> LayerSet {
        (0..layer_count).filter(|&l| !self.contains(l)).collect()
    }

    pub fn union(&self, other: &LayerSet) -> LayerSet {
        self.iter().chain(other.iter()).collect()
    }

    pub fn intersection(&self, other: &LayerSet) -> LayerSet {
        self.iter().filter(|&l| other.contains(l)).collect()
    }

    pub fn is_subset(&self, other: &LayerSet) -> bool {
        self.iter().all(|l| other.contains(l))
    }

    pub fn is_disjoint(&self, other: &LayerSet) -> bool {
        self.iter().all(|l| !other.contains(l))
    }
}

impl FromIterator<usize> for LayerSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut set = LayerSet::new();
        for l in iter {
            set.insert(l);
        }
        set
    }
}

impl fmt::Debug for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Layer-sparse values keyed by layer id, iterated in ascending id order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerPayload {
    layers: BTreeMap<usize, Vec<f64>>,
}

impl LayerPayload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, values: Vec<f64>) -> Option<Vec<f64>> {
        self.layers.insert(layer, values)
    }

    pub fn get(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn remove(&mut self, layer: usize) -> Option<Vec<f64>> {
        self.layers.remove(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.layers.iter().map(|(&l, v)| (l, v.as_slice()))
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn layer_set(&self) -> LayerSet {
        self.layer_ids().collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    /// Checks every entry against `part`: known layer, exact length, finite values.
    pub fn validate(&self, part: &LayerPartition) -> Result<()> {
        for (layer, values) in self.iter() {
            let span = part.layer(layer)?;
            if values.len() != span.count {
                return Err(ParamError::Shape(format!(
                    "layer {layer}: payload has {} values, partition expects {}",
                    values.len(),
                    span.count
                )));
            }
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(ParamError::NonFinite(span.offset + i));
            }
        }
        Ok(())
    }

    /// Wire size of the carried layers.
    pub fn size_bytes(&self, part: &LayerPartition) -> u64 {
        self.element_count() as u64 * part.bytes_per_element()
    }

    /// Splits off the listed layers into a new payload.
    pub fn take_layers(&mut self, set: &LayerSet) -> LayerPayload {
        let mut out = LayerPayload::new();
        for l in set.iter() {
            if let Some(v) = self.layers.remove(&l) {
                out.layers.insert(l, v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Params;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grads;

/// Flat real-valued model state over a shared partition.
///
/// The kind marker separates parameters from gradients and deltas at the type
/// level; both share the same operations.
#[derive(Debug, Clone, PartialEq)]
pub struct Layered<K> {
    values: Vec<f64>,
    partition: Arc<LayerPartition>,
    _kind: PhantomData<K>,
}

pub type ParamVector = Layered<Params>;
pub type GradVector = Layered<Grads>;

impl<K> Layered<K> {
    pub fn new(values: Vec<f64>, partition: Arc<LayerPartition>) -> Result<Self> {
        if values.len() != partition.total_count() {
            return Err(ParamError::Shape(format!(
                "{} values for a partition of {}",
                values.len(),
                partition.total_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite(i));
        }
        Ok(Self {
            values,
            partition,
            _kind: PhantomData,
        })
    }

    pub fn zeros(partition: Arc<LayerPartition>) -> Self {
        Self {
            values: vec![0.0; partition.total_count()],
            partition,
            _kind: PhantomData,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    pub fn layer_values(&self, layer: usize) -> &[f64] {
        &self.values[self.partition.layers()[layer].range()]
    }

    pub fn layer_values_mut(&mut self, layer: usize) -> &mut [f64] {
        let range = self.partition.layers()[layer].range();
        &mut self.values[range]
    }

    /// Reinterprets the same storage under another kind marker.
    pub fn cast<J>(self) -> Layered<J> {
        Layered {
            values: self.values,
            partition: self.partition,
            _kind: PhantomData,
        }
    }

    fn check_same_shape<J>(&self, other: &Layered<J>) -> Result<()> {
        if self.partition != other.partition {
            return Err(ParamError::Shape("vectors use different partitions".into()));
        }
        Ok(())
    }

    /// Copies the layers in `set` verbatim.
    pub fn slice_layers(&self, set: &LayerSet) -> Result<LayerPayload> {
        self.partition.check_set(set)?;
        let mut out = LayerPayload::new();
        for l in set.iter() {
            out.insert(l, self.layer_values(l).to_vec());
        }
        Ok(out)
    }

    /// Overwrites the payload's layers; everything else is left untouched.
    pub fn merge_payload(&mut self, payload: &LayerPayload) -> Result<()> {
        payload.validate(&self.partition)?;
        for (l, values) in payload.iter() {
            self.layer_values_mut(l).copy_from_slice(values);
        }
        Ok(())
    }

    /// `self += scale * delta`, ascending index order.
    pub fn apply_delta<J>(&mut self, delta: &Layered<J>, scale: f64) -> Result<()> {
        self.check_same_shape(delta)?;
        for (p, d) in self.values.iter_mut().zip(&delta.values) {
            *p += scale * d;
        }
        Ok(())
    }

    /// Payload form of [`apply_delta`](Self::apply_delta); touches only listed layers.
    pub fn apply_payload(&mut self, payload: &LayerPayload, scale: f64) -> Result<()> {
        payload.validate(&self.partition)?;
        for (l, values) in payload.iter() {
            for (p, d) in self.layer_values_mut(l).iter_mut().zip(values) {
                *p += scale * d;
            }
        }
        Ok(())
    }

    /// 64-bit FNV-1a over the IEEE-754 bit patterns; equal iff bitwise-equal
    /// with overwhelming probability.
    pub fn checksum(&self) -> u64 {
        checksum_values(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn checksum_values(values: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn part(counts: &[usize]) -> Arc<LayerPartition> {
        Arc::new(LayerPartition::new(counts, 4).unwrap())
    }

    #[test]
    fn partition_offsets_follow_input_order() {
        let p = LayerPartition::new(&[3, 2], 4).unwrap();
        assert_eq!(
            p.layers(),
            &[
                LayerSpan { id: 0, offset: 0, count: 3 },
                LayerSpan { id: 1, offset: 3, count: 2 }
            ]
        );
        assert_eq!(p.total_count(), 5);

        let single = LayerPartition::new(&[1], 4).unwrap();
        assert_eq!(single.layers()[0].range(), 0..1);
    }

    #[test]
    fn partition_layer_byte_sizes() {
        let p = LayerPartition::new(&[10, 20, 30], 4).unwrap();
        let sizes: Vec<u64> = (0..3).map(|l| p.layer_size_bytes(l)).collect();
        assert_eq!(sizes, vec![40, 80, 120]);
    }

    #[test]
    fn partition_rejects_empty_or_zero() {
        assert!(matches!(
            LayerPartition::new(&[], 4),
            Err(ParamError::InvalidPartition(_))
        ));
        assert!(matches!(
            LayerPartition::new(&[3, 0], 4),
            Err(ParamError::InvalidPartition(_))
        ));
    }

    #[test]
    fn slice_selects_layers() {
        let v = ParamVector::new(vec![1.0, 2.0, 3.0, 4.0], part(&[2, 2])).unwrap();
        let payload = v.slice_layers(&[1].into_iter().collect()).unwrap();
        assert_eq!(payload.get(1), Some(&[3.0, 4.0][..]));
        assert_eq!(payload.len(), 1);
        assert!(v.slice_layers(&LayerSet::new()).unwrap().is_empty());
        let all = v.slice_layers(&LayerSet::full(2)).unwrap();
        assert_eq!(all.size_bytes(v.partition()), v.partition().model_bytes());
    }

    #[test]
    fn slice_rejects_out_of_range_layer() {
        let v = ParamVector::zeros(part(&[2, 2]));
        let err = v.slice_layers(&[5].into_iter().collect()).unwrap_err();
        assert_eq!(err, ParamError::InvalidLayer { layer: 5, layers: 2 });
    }

    #[test]
    fn merge_overwrites_only_listed_layers() {
        let mut v = ParamVector::new(vec![1.0, 2.0, 3.0, 4.0], part(&[2, 2])).unwrap();
        let mut p = LayerPayload::new();
        p.insert(0, vec![9.0, 9.0]);
        v.merge_payload(&p).unwrap();
        assert_eq!(v.values(), &[9.0, 9.0, 3.0, 4.0]);

        let before = v.clone();
        v.merge_payload(&LayerPayload::new()).unwrap();
        assert_eq!(v, before);

        let mut bad = LayerPayload::new();
        bad.insert(1, vec![1.0]);
        assert!(matches!(v.merge_payload(&bad), Err(ParamError::Shape(_))));
    }

    #[test]
    fn apply_delta_cases() {
        let pt = part(&[2]);
        let mut p = ParamVector::new(vec![1.0, 1.0], pt.clone()).unwrap();
        let d = GradVector::new(vec![0.5, -0.5], pt.clone()).unwrap();
        p.apply_delta(&d, 1.0).unwrap();
        assert_eq!(p.values(), &[1.5, 0.5]);
        p.apply_delta(&d, 0.0).unwrap();
        assert_eq!(p.values(), &[1.5, 0.5]);

        let mut q = ParamVector::new(vec![1.0; 4], part(&[2, 2])).unwrap();
        let mut payload = LayerPayload::new();
        payload.insert(1, vec![0.1, -0.2]);
        q.apply_payload(&payload, 1.0).unwrap();
        assert_eq!(q.values(), &[1.0, 1.0, 1.1, 0.8]);

        let other = GradVector::zeros(part(&[4]));
        assert!(q.apply_delta(&other, 1.0).is_err());
    }

    #[test]
    fn layer_bytes_cases() {
        let p = LayerPartition::new(&[10, 20, 30], 4).unwrap();
        assert_eq!(p.layer_bytes(&LayerSet::new()).unwrap(), 0);
        assert_eq!(p.layer_bytes(&LayerSet::full(3)).unwrap(), 240);
        assert_eq!(p.layer_bytes(&[0].into_iter().collect()).unwrap(), 40);
    }

    #[test]
    fn layer_set_ops() {
        let mut s: LayerSet = [0, 3, 70].into_iter().collect();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 3, 70]);
        assert_eq!(s.len(), 3);
        s.remove(70);
        assert_eq!(s, [0, 3].into_iter().collect());
        assert_eq!(s.complement(5), [1, 2, 4].into_iter().collect());
        assert!(s.is_disjoint(&s.complement(5)));
    }

    fn counts_and_values() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<bool>)> {
        prop::collection::vec(1usize..6, 1..8).prop_flat_map(|counts| {
            let total: usize = counts.iter().sum();
            let n = counts.len();
            (
                Just(counts),
                prop::collection::vec(-1e3f64..1e3, total),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn slice_and_complement_reconstruct((counts, values, mask) in counts_and_values()) {
            let pt = part(&counts);
            let v = GradVector::new(values, pt.clone()).unwrap();
            let set: LayerSet = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            let mut rebuilt = GradVector::zeros(pt.clone());
            rebuilt.merge_payload(&v.slice_layers(&set).unwrap()).unwrap();
            rebuilt.merge_payload(&v.slice_layers(&set.complement(counts.len())).unwrap()).unwrap();
            prop_assert_eq!(rebuilt.checksum(), v.checksum());
            prop_assert_eq!(rebuilt, v);
        }

        #[test]
        fn layer_bytes_additive_over_disjoint_sets((counts, _values, mask) in counts_and_values()) {
            let pt = part(&counts);
            let a: LayerSet = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            let b = a.complement(counts.len());
            prop_assert_eq!(
                pt.layer_bytes(&a).unwrap() + pt.layer_bytes(&b).unwrap(),
                pt.layer_bytes(&LayerSet::full(counts.len())).unwrap()
            );
        }

        #[test]
        fn apply_delta_is_deterministic((counts, values, _mask) in counts_and_values(), scale in -2.0f64..2.0) {
            let pt = part(&counts);
            let d = GradVector::new(values.iter().map(|v| v * 0.37).collect(), pt.clone()).unwrap();
            let mut a = ParamVector::new(values.clone(), pt.clone()).unwrap();
            let mut b = ParamVector::new(values, pt).unwrap();
            a.apply_delta(&d, scale).unwrap();
            b.apply_delta(&d, scale).unwrap();
            prop_assert_eq!(a.checksum(), b.checksum());
        }
    }
}
