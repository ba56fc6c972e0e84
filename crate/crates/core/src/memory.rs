//! Long-term store from task context to the cell state committed at the end
//! of that task's most recent episode.
//!
//! In sparse mode only the units listed in `sparse_indices` are kept; the
//! index list itself is stored once for the whole table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::ContextKey;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicStore {
    width: usize,
    mode: StoreMode,
    sparse_indices: Option<Vec<usize>>,
    entries: BTreeMap<u32, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub entries: usize,
    pub floats_stored: usize,
    pub dense_equivalent_floats: usize,
    pub savings_fraction: f64,
}

impl EpisodicStore {
    pub fn dense(width: usize) -> Self {
        EpisodicStore {
            width,
            mode: StoreMode::Dense,
            sparse_indices: None,
            entries: BTreeMap::new(),
        }
    }

    /// A sparse store. `indices` may be left unset; storing then fails until
    /// [`set_sparse_indices`](Self::set_sparse_indices) is called.
    pub fn sparse(width: usize, indices: Option<Vec<usize>>) -> Result<Self> {
        let mut s = EpisodicStore {
            width,
            mode: StoreMode::Sparse,
            sparse_indices: None,
            entries: BTreeMap::new(),
        };
        if let Some(ix) = indices {
            s.set_sparse_indices(ix)?;
        }
        Ok(s)
    }

    pub fn set_sparse_indices(&mut self, mut indices: Vec<usize>) -> Result<()> {
        indices.sort_unstable();
        indices.dedup();
        if indices.iter().any(|&j| j >= self.width) {
            return Err(Error::Config(format!("sparse index out of range {}", self.width)));
        }
        if !self.entries.is_empty() {
            return Err(Error::Config("sparse indices must be set before storing".into()));
        }
        self.sparse_indices = Some(indices);
        Ok(())
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sparse_indices(&self) -> Option<&[usize]> {
        self.sparse_indices.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &ContextKey) -> bool {
        self.entries.contains_key(&key.task_id)
    }

    /// Raw stored payloads in task-id order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.entries.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Commits `c_final` under the task's key, replacing any previous value.
    pub fn store(&mut self, key: &ContextKey, c_final: &[f64]) -> Result<()> {
        self.store_id(key.task_id, c_final)
    }

    pub fn store_id(&mut self, task_id: u32, c_final: &[f64]) -> Result<()> {
        if c_final.len() != self.width {
            return Err(Error::Contract(format!(
                "stored value has width {}, expected {}",
                c_final.len(),
                self.width
            )));
        }
        if c_final.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("stored value is not finite".into()));
        }
        let value = match self.mode {
            StoreMode::Dense => c_final.to_vec(),
            StoreMode::Sparse => {
                let ix = self.sparse_indices.as_ref().ok_or_else(|| {
                    Error::Config("sparse store used without sparse indices".into())
                })?;
                ix.iter().map(|&j| c_final[j]).collect()
            }
        };
        self.entries.insert(task_id, value);
        Ok(())
    }

    /// Inserts an already-packed payload (used when loading from disk).
    pub(crate) fn insert_packed(&mut self, task_id: u32, packed: Vec<f64>) -> Result<()> {
        let expect = match self.mode {
            StoreMode::Dense => self.width,
            StoreMode::Sparse => self.sparse_indices.as_ref().map_or(0, Vec::len),
        };
        if packed.len() != expect {
            return Err(Error::Format(format!(
                "memory entry {task_id} has {} floats, expected {expect}",
                packed.len()
            )));
        }
        self.entries.insert(task_id, packed);
        Ok(())
    }

    /// The stored value expanded to full width, or zeros for an unseen task.
    pub fn retrieve(&self, key: &ContextKey) -> Vec<f64> {
        self.retrieve_id(key.task_id)
    }

    pub fn retrieve_id(&self, task_id: u32) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        if let Some(v) = self.entries.get(&task_id) {
            match (&self.mode, &self.sparse_indices) {
                (StoreMode::Dense, _) => out.copy_from_slice(v),
                (StoreMode::Sparse, Some(ix)) => {
                    for (&j, &x) in ix.iter().zip(v) {
                        out[j] = x;
                    }
                }
                (StoreMode::Sparse, None) => {}
            }
        }
        out
    }

    /// Storage accounting; the shared index list counts once against sparse stores.
    pub fn storage_report(&self) -> StorageReport {
        let entries = self.entries.len();
        let dense_equivalent_floats = entries * self.width;
        let floats_stored = match self.mode {
            StoreMode::Dense => dense_equivalent_floats,
            StoreMode::Sparse => {
                let k = self.sparse_indices.as_ref().map_or(0, Vec::len);
                entries * k + k
            }
        };
        let savings_fraction = if dense_equivalent_floats == 0 {
            0.0
        } else {
            1.0 - floats_stored as f64 / dense_equivalent_floats as f64
        };
        StorageReport {
            entries,
            floats_stored,
            dense_equivalent_floats,
            savings_fraction,
        }
    }

    /// Re-packs every entry into a sparse store over `indices`.
    pub fn to_sparse(&self, indices: Vec<usize>) -> Result<EpisodicStore> {
        let mut out = EpisodicStore::sparse(self.width, Some(indices))?;
        for &id in self.entries.keys() {
            out.store_id(id, &self.retrieve_id(id))?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(id: u32) -> ContextKey {
        ContextKey {
            task_id: id,
            vector: vec![0.0; 4],
        }
    }

    #[test]
    fn dense_round_trip_and_overwrite() {
        let mut s = EpisodicStore::dense(4);
        s.store(&key(7), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.retrieve(&key(7)), vec![1.0, 2.0, 3.0, 4.0]);
        s.store(&key(7), &[0.0, -1.0, 0.5, 9.0]).unwrap();
        assert_eq!(s.retrieve(&key(7)), vec![0.0, -1.0, 0.5, 9.0]);
        assert_eq!(s.len(), 1);
        assert_eq!(s.retrieve(&key(8)), vec![0.0; 4]);
        assert_eq!(s.storage_report().savings_fraction, 0.0);
    }

    #[test]
    fn sparse_expansion() {
        let mut s = EpisodicStore::sparse(6, Some(vec![4, 1])).unwrap();
        s.store(&key(1), &[9.0, 1.0, 9.0, 9.0, 4.0, 9.0]).unwrap();
        assert_eq!(s.retrieve(&key(1)), vec![0.0, 1.0, 0.0, 0.0, 4.0, 0.0]);
        assert_eq!(s.entries().next().unwrap().1, &[1.0, 4.0]);
    }

    #[test]
    fn sparse_without_indices_is_config_error() {
        let mut s = EpisodicStore::sparse(4, None).unwrap();
        assert!(matches!(s.store(&key(0), &[0.0; 4]), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_wrong_width_and_nan() {
        let mut s = EpisodicStore::dense(3);
        assert!(s.store(&key(0), &[0.0; 2]).is_err());
        assert!(s.store(&key(0), &[0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn quarter_width_saves_three_quarters() {
        let mut s = EpisodicStore::sparse(256, Some((0..64).collect())).unwrap();
        assert_eq!(s.storage_report().floats_stored, 64);
        for id in 0..1000 {
            s.store_id(id, &[0.5; 256]).unwrap();
        }
        let r = s.storage_report();
        assert_eq!(r.entries, 1000);
        assert_eq!(r.floats_stored, 64 * 1000 + 64);
        assert_eq!(r.dense_equivalent_floats, 256_000);
        let expect = 1.0 - (64.0 * 1000.0 + 64.0) / (256.0 * 1000.0);
        assert!((r.savings_fraction - expect).abs() < 1e-15);
        assert!((r.savings_fraction - 0.74975).abs() < 1e-12);
        // per entry, a sparse value is a quarter of a dense one
        assert_eq!(s.entries().next().unwrap().1.len() * 4, 256);
    }

    proptest! {
        #[test]
        fn round_trips(values in proptest::collection::vec(-5.0f64..5.0, 16),
                       idx in proptest::collection::btree_set(0usize..16, 0..16),
                       other in 100u32..200) {
            let mut dense = EpisodicStore::dense(16);
            dense.store_id(3, &values).unwrap();
            prop_assert_eq!(dense.retrieve_id(3), values.clone());
            prop_assert_eq!(dense.retrieve_id(other), vec![0.0; 16]);

            let ix: Vec<usize> = idx.iter().copied().collect();
            let mut sparse = EpisodicStore::sparse(16, Some(ix.clone())).unwrap();
            sparse.store_id(3, &values).unwrap();
            let restricted: Vec<f64> = (0..16).map(|j| if idx.contains(&j) { values[j] } else { 0.0 }).collect();
            prop_assert_eq!(sparse.retrieve_id(3), restricted.clone());
            prop_assert_eq!(sparse.retrieve_id(other), vec![0.0; 16]);

            // zero outside the index set: both modes agree
            let mut d2 = EpisodicStore::dense(16);
            d2.store_id(3, &restricted).unwrap();
            let mut s2 = EpisodicStore::sparse(16, Some(ix)).unwrap();
            s2.store_id(3, &restricted).unwrap();
            prop_assert_eq!(d2.retrieve_id(3), s2.retrieve_id(3));
        }
    }
}
