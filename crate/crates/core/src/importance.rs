//! Per-layer gradient importance and the Gradient Importance Bitmap (GIB).
//!
//! A layer's importance is the first-order Taylor estimate of how much the
//! loss depends on it: `sum_j |g_j * p_j|` over its elements. Layers are
//! ranked by that score and the least important prefix that fits the byte
//! budget is deferred to in-computation synchronization.

use serde::{Deserialize, Serialize};

use crate::param::{GradVector, LayerPartition, LayerSet, ParamError, ParamVector};

/// One non-negative score per layer, indexed by layer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    scores: Vec<f64>,
}

impl LayerImportance {
    pub fn new(scores: Vec<f64>) -> Result<Self, ParamError> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(ParamError::NonFinite(i));
        }
        Ok(Self { scores })
    }

    pub fn zeros(layers: usize) -> Self {
        Self {
            scores: vec![0.0; layers],
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn layer_count(&self) -> usize {
        self.scores.len()
    }

    pub fn set(&mut self, layer: usize, score: f64) {
        self.scores[layer] = score;
    }
}

/// Score of a single layer from its parameter and gradient values.
pub fn pgp_score(params: &[f64], grads: &[f64]) -> f64 {
    params.iter().zip(grads).map(|(p, g)| (g * p).abs()).sum()
}

pub fn pgp_layer_importance(
    params: &ParamVector,
    grads: &GradVector,
) -> Result<LayerImportance, ParamError> {
    if params.partition() != grads.partition() {
        return Err(ParamError::Shape(
            "parameters and gradients use different partitions".into(),
        ));
    }
    let scores = (0..params.partition().layer_count())
        .map(|l| pgp_score(params.layer_values(l), grads.layer_values(l)))
        .collect();
    LayerImportance::new(scores)
}

/// Layer ids ascending by score; equal scores keep ascending id order.
pub fn rank_layers(importance: &LayerImportance) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.scores.len()).collect();
    order.sort_by(|&a, &b| importance.scores[a].total_cmp(&importance.scores[b]));
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gib {
    /// Layers deferred to in-computation synchronization. The complement is
    /// synchronized at the routine barrier.
    pub ics_set: LayerSet,
    pub iteration_tag: u32,
}

impl Gib {
    /// Everything at the routine barrier: the first iteration's bitmap.
    pub fn empty(iteration_tag: u32) -> Self {
        Self {
            ics_set: LayerSet::new(),
            iteration_tag,
        }
    }

    pub fn rs_set(&self, layer_count: usize) -> LayerSet {
        self.ics_set.complement(layer_count)
    }
}

/// Walks layers from least to most important, deferring each while the
/// running byte total stays within `budget_bytes`; stops at the first layer
/// that does not fit.
pub fn build_gib(
    importance: &LayerImportance,
    partition: &LayerPartition,
    budget_bytes: u64,
    iteration_tag: u32,
) -> Gib {
    let mut ics_set = LayerSet::new();
    let mut used = 0u64;
    for layer in rank_layers(importance) {
        let size = partition.layer_size_bytes(layer);
        if used + size > budget_bytes {
            break;
        }
        used += size;
        ics_set.insert(layer);
    }
    Gib {
        ics_set,
        iteration_tag,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GibFormatError {
    #[error("GIB buffer truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("GIB marks layer {layer} but only {layers} layers exist")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("GIB encodes {found} layers, expected {expected}")]
    LayerCountMismatch { expected: usize, found: usize },
}

pub const GIB_HEADER_BYTES: usize = 8;

pub fn gib_encoded_len(layer_count: usize) -> usize {
    GIB_HEADER_BYTES + layer_count.div_ceil(8)
}

/// `tag: u32 LE | layer_count: u32 LE | bitmap`, where bit `k % 8` of byte
/// `k / 8` marks layer `k` as deferred.
pub fn gib_encode(gib: &Gib, layer_count: usize) -> Result<Vec<u8>, GibFormatError> {
    if let Some(layer) = gib.ics_set.iter().find(|&l| l >= layer_count) {
        return Err(GibFormatError::LayerOutOfRange {
            layer,
            layers: layer_count,
        });
    }
    let mut out = Vec::with_capacity(gib_encoded_len(layer_count));
    out.extend_from_slice(&gib.iteration_tag.to_le_bytes());
    out.extend_from_slice(&(layer_count as u32).to_le_bytes());
    let mut bitmap = vec![0u8; layer_count.div_ceil(8)];
    for l in gib.ics_set.iter() {
        bitmap[l / 8] |= 1 << (l % 8);
    }
    out.extend_from_slice(&bitmap);
    Ok(out)
}

pub fn gib_decode(bytes: &[u8], layer_count: usize) -> Result<Gib, GibFormatError> {
    if bytes.len() < GIB_HEADER_BYTES {
        return Err(GibFormatError::Truncated {
            need: GIB_HEADER_BYTES,
            have: bytes.len(),
        });
    }
    let tag = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let encoded_layers = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if encoded_layers != layer_count {
        return Err(GibFormatError::LayerCountMismatch {
            expected: layer_count,
            found: encoded_layers,
        });
    }
    let need = gib_encoded_len(layer_count);
    if bytes.len() < need {
        return Err(GibFormatError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let bitmap = &bytes[GIB_HEADER_BYTES..need];
    let mut ics_set = LayerSet::new();
    for (i, &byte) in bitmap.iter().enumerate() {
        for b in 0..8 {
            if byte & (1 << b) != 0 {
                let layer = i * 8 + b;
                if layer >= layer_count {
                    return Err(GibFormatError::LayerOutOfRange {
                        layer,
                        layers: layer_count,
                    });
                }
                ics_set.insert(layer);
            }
        }
    }
    Ok(Gib {
        ics_set,
        iteration_tag: tag,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;

    fn set(ids: &[usize]) -> LayerSet {
        ids.iter().copied().collect()
    }

    #[test]
    fn pgp_hand_evaluation() {
        let part = Arc::new(LayerPartition::new(&[2], 4).unwrap());
        let p = ParamVector::new(vec![1.0, -2.0], part.clone()).unwrap();
        let g = GradVector::new(vec![0.5, 0.25], part.clone()).unwrap();
        assert_eq!(pgp_layer_importance(&p, &g).unwrap().scores(), &[1.0]);

        let zero = GradVector::zeros(part.clone());
        assert_eq!(pgp_layer_importance(&p, &zero).unwrap().scores(), &[0.0]);

        let neg = ParamVector::new(vec![-1.0, 2.0], part).unwrap();
        assert_eq!(
            pgp_layer_importance(&neg, &g).unwrap(),
            pgp_layer_importance(&p, &g).unwrap()
        );
    }

    #[test]
    fn pgp_rejects_mismatched_shapes() {
        let p = ParamVector::zeros(Arc::new(LayerPartition::new(&[2], 4).unwrap()));
        let g = GradVector::zeros(Arc::new(LayerPartition::new(&[1, 1], 4).unwrap()));
        assert!(pgp_layer_importance(&p, &g).is_err());
    }

    #[test]
    fn ranking() {
        let imp = LayerImportance::new(vec![5.0, 1.0, 0.2]).unwrap();
        assert_eq!(rank_layers(&imp), vec![2, 1, 0]);
        assert_eq!(rank_layers(&LayerImportance::zeros(3)), vec![0, 1, 2]);
        assert_eq!(rank_layers(&LayerImportance::zeros(1)), vec![0]);
    }

    #[test]
    fn gib_prefix_rule() {
        let imp = LayerImportance::new(vec![5.0, 1.0, 0.2]).unwrap();
        // 2-byte elements give layer sizes 40, 60 and 50 bytes
        let sizes = LayerPartition::new(&[20, 30, 25], 2).unwrap();
        assert_eq!(build_gib(&imp, &sizes, 100, 1).ics_set, set(&[2]));
        assert_eq!(build_gib(&imp, &sizes, 0, 1).ics_set, set(&[]));
        assert_eq!(build_gib(&imp, &sizes, 150, 1).ics_set, set(&[0, 1, 2]));
        assert_eq!(build_gib(&imp, &sizes, 109, 1).ics_set, set(&[2]));
        assert_eq!(build_gib(&imp, &sizes, 110, 1).ics_set, set(&[1, 2]));
    }

    #[test]
    fn gib_wire_examples() {
        let gib = Gib {
            ics_set: set(&[0, 3]),
            iteration_tag: 0x0102_0304,
        };
        let bytes = gib_encode(&gib, 8).unwrap();
        assert_eq!(bytes, vec![4, 3, 2, 1, 8, 0, 0, 0, 0x09]);
        assert_eq!(gib_encode(&Gib::empty(0), 8).unwrap()[8], 0x00);

        let big = Gib {
            ics_set: (0..1000).step_by(3).collect(),
            iteration_tag: 7,
        };
        let encoded = gib_encode(&big, 1000).unwrap();
        assert_eq!(encoded.len(), 133);
        assert!(encoded.len() < 1024);
    }

    #[test]
    fn gib_decode_errors() {
        let bytes = gib_encode(&Gib::empty(3), 20).unwrap();
        assert!(matches!(
            gib_decode(&bytes[..5], 20),
            Err(GibFormatError::Truncated { .. })
        ));
        assert!(matches!(
            gib_decode(&bytes[..9], 20),
            Err(GibFormatError::Truncated { need: 11, have: 9 })
        ));
        assert!(matches!(
            gib_decode(&bytes, 21),
            Err(GibFormatError::LayerCountMismatch { .. })
        ));
        assert!(gib_encode(&Gib { ics_set: set(&[9]), iteration_tag: 0 }, 8).is_err());
    }

    proptest! {
        #[test]
        fn gib_round_trip(layers in 1usize..=1000, seed in any::<u64>(), tag in any::<u32>()) {
            let ics: LayerSet = (0..layers)
                .filter(|l| crate::seed::splitmix64(seed ^ *l as u64).is_multiple_of(3))
                .collect();
            let gib = Gib { ics_set: ics, iteration_tag: tag };
            let bytes = gib_encode(&gib, layers).unwrap();
            prop_assert_eq!(bytes.len(), gib_encoded_len(layers));
            prop_assert_eq!(gib_decode(&bytes, layers).unwrap(), gib);
        }

        #[test]
        fn scale_covariance(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 6),
            c in 0.01f64..100.0,
        ) {
            let part = Arc::new(LayerPartition::new(&[2, 1, 3], 4).unwrap());
            let p = ParamVector::new(vals.iter().map(|v| v.0).collect(), part.clone()).unwrap();
            let g = GradVector::new(vals.iter().map(|v| v.1).collect(), part.clone()).unwrap();
            let gc = GradVector::new(vals.iter().map(|v| v.1 * c).collect(), part).unwrap();
            let a = pgp_layer_importance(&p, &g).unwrap();
            let b = pgp_layer_importance(&p, &gc).unwrap();
            for (x, y) in a.scores().iter().zip(b.scores()) {
                prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
            // exact ties may split differently after rounding; distinct scores keep order
            let distinct = a.scores().windows(2).all(|w| w[0] != w[1])
                && a.scores()[0] != a.scores()[2];
            if distinct {
                prop_assert_eq!(rank_layers(&a), rank_layers(&b));
            }
        }

        #[test]
        fn gib_budget_monotone_and_bounded(
            scores in prop::collection::vec(0.0f64..10.0, 1..20),
            sizes in prop::collection::vec(1usize..50, 20),
            b1 in 0u64..2000,
            extra in 0u64..2000,
        ) {
            let n = scores.len();
            let part = LayerPartition::new(&sizes[..n], 4).unwrap();
            let imp = LayerImportance::new(scores).unwrap();
            let small = build_gib(&imp, &part, b1, 0);
            let large = build_gib(&imp, &part, b1 + extra, 0);
            prop_assert!(small.ics_set.is_subset(&large.ics_set));
            prop_assert!(part.layer_bytes(&small.ics_set).unwrap() <= b1);
            prop_assert!(part.layer_bytes(&large.ics_set).unwrap() <= b1 + extra);
        }
    }
}
