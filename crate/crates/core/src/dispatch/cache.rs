//! Memo of sharding propagation keyed by the placement signature of a call.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use super::strategy::PropResult;
use crate::dtensor::DTensorMeta;
use crate::engine::{DType, Op};
use crate::placement::Placement;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OperandKey {
    pub placements: Vec<Placement>,
    pub mesh_id: u64,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// Everything propagation depends on. Op parameters are part of the op text.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub op: String,
    pub operands: Vec<OperandKey>,
}

impl Signature {
    pub fn of(op: &Op, metas: &[&DTensorMeta]) -> Self {
        Self {
            op: op.to_string(),
            operands: metas
                .iter()
                .map(|m| OperandKey {
                    placements: m.placements().to_vec(),
                    mesh_id: m.mesh().id(),
                    shape: m.global_shape.clone(),
                    dtype: m.dtype,
                })
                .collect(),
        }
    }
}

/// Shared between callers: lookups take the read lock, inserts the write lock.
#[derive(Debug, Default)]
pub struct PropCache {
    map: RwLock<HashMap<Signature, PropResult>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl PropCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &Signature) -> Option<PropResult> {
        let found = self.map.read().expect("cache lock").get(key).cloned();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    /// Keeps the first value stored under `key`.
    pub fn insert(&self, key: Signature, value: PropResult) {
        self.map.write().expect("cache lock").entry(key).or_insert(value);
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn clear(&self) {
        self.map.write().expect("cache lock").clear();
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}
