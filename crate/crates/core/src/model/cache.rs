use std::collections::BTreeMap;

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

impl KvEntry {
    fn bitwise_eq(&self, other: &KvEntry) -> bool {
        bits_eq(&self.key, &other.key) && bits_eq(&self.value, &other.value)
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// One head's keys and values by position; `None` marks a position whose
/// embedding is parked in the layer's pending inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadCache {
    pub entries: Vec<Option<KvEntry>>,
}

impl HeadCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pending_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_none())
            .map(|(p, _)| p)
    }

    pub fn has_pending(&self) -> bool {
        self.entries.iter().any(Option::is_none)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
    /// Pre-norm block inputs for positions some head has not projected yet.
    pub pending_inputs: BTreeMap<usize, Vec<f32>>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, HeadCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops pending inputs that no head still needs.
    pub(crate) fn prune_pending(&mut self) {
        let heads = &self.heads;
        self.pending_inputs
            .retain(|&p, _| heads.iter().any(|h| matches!(h.entries.get(p), Some(None))));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerCache {
                    heads: vec![HeadCache::default(); cfg.n_heads],
                    pending_inputs: BTreeMap::new(),
                })
                .collect(),
        }
    }

    /// Tokens cached (positions recorded in layer 0).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_pending(&self) -> bool {
        self.layers.iter().any(|l| !l.pending_inputs.is_empty())
    }

    /// Bit-level equality of every key, value and pending input.
    pub fn bitwise_eq(&self, other: &KvCache) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.heads.len() == b.heads.len()
                    && a.heads.iter().zip(&b.heads).all(|(ha, hb)| {
                        ha.entries.len() == hb.entries.len()
                            && ha
                                .entries
                                .iter()
                                .zip(&hb.entries)
                                .all(|(ea, eb)| match (ea, eb) {
                                    (Some(x), Some(y)) => x.bitwise_eq(y),
                                    (None, None) => true,
                                    _ => false,
                                })
                    })
                    && a.pending_inputs.len() == b.pending_inputs.len()
                    && a.pending_inputs
                        .iter()
                        .zip(&b.pending_inputs)
                        .all(|((pa, va), (pb, vb))| pa == pb && bits_eq(va, vb))
            })
    }

    /// Every (layer, head, position) has K/V or a pending input.
    pub fn is_consistent(&self) -> bool {
        self.layers.iter().all(|l| {
            l.heads.iter().all(|h| {
                h.entries
                    .iter()
                    .enumerate()
                    .all(|(p, e)| e.is_some() || l.pending_inputs.contains_key(&p))
            })
        })
    }
}
