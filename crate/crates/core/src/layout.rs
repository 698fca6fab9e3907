//! Explicit index maps for stacked moment vectors.
//!
//! Every covariance matrix attached to a moment vector (Σ_ω, Var(π), the
//! acov of a [`MomentInput`](crate::pivfit::MomentInput)) carries one of
//! these, so no module relies on positional conventions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// One element of a stacked moment vector. Variable indices refer to the
/// variable order of the owning statistics object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StatKey {
    Mean(usize),
    /// Threshold `k` (zero-based) of variable `j`.
    Threshold(usize, usize),
    /// Covariance element with `i >= j`.
    Cov(usize, usize),
}

impl StatKey {
    /// Covariance key with the indices put in lower-triangle order.
    pub fn cov(i: usize, j: usize) -> Self {
        if i >= j {
            StatKey::Cov(i, j)
        } else {
            StatKey::Cov(j, i)
        }
    }

    /// Canonical sort rank: means, thresholds, then covariances scanned
    /// column-major over the lower triangle.
    fn rank(&self) -> (u8, usize, usize) {
        match *self {
            StatKey::Mean(j) => (0, j, 0),
            StatKey::Threshold(j, k) => (1, j, k),
            StatKey::Cov(i, j) => (2, j, i),
        }
    }

    /// Relabel variable indices through `map` (old index to new index).
    pub fn relabel(&self, map: &[usize]) -> Self {
        match *self {
            StatKey::Mean(j) => StatKey::Mean(map[j]),
            StatKey::Threshold(j, k) => StatKey::Threshold(map[j], k),
            StatKey::Cov(i, j) => StatKey::cov(map[i], map[j]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentLayout {
    keys: Vec<StatKey>,
    index: HashMap<StatKey, usize>,
}

impl MomentLayout {
    pub fn new(keys: Vec<StatKey>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self { keys, index }
    }

    /// Layout with keys sorted into canonical order.
    pub fn canonical(mut keys: Vec<StatKey>) -> Self {
        keys.sort_by_key(StatKey::rank);
        keys.dedup();
        Self::new(keys)
    }

    pub fn keys(&self) -> &[StatKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn position(&self, key: &StatKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn contains(&self, key: &StatKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn relabel(&self, map: &[usize]) -> Self {
        Self::new(self.keys.iter().map(|k| k.relabel(map)).collect())
    }
}
