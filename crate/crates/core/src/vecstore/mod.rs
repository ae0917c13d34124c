//! Vector storage, the KVD1 dump format and synthetic workload generation.

mod format;
mod workload;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use format::{
    load_vectors, load_workload, read_vectors, save_vectors, save_workload, write_vectors,
    FileEntry, FileRole, Manifest, KVD1_HEADER_LEN, KVD1_MAGIC, KVD1_VERSION,
};
pub use workload::{generate_workload, WorkloadSpec, DEFAULT_CONCENTRATION, DEFAULT_OOD_STRENGTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Key,
    Value,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Query => 0,
            Role::Key => 1,
            Role::Value => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Query),
            1 => Some(Role::Key),
            2 => Some(Role::Value),
            _ => None,
        }
    }
}

/// A dense row-major `n x d` matrix of f32 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    role: Role,
    d: usize,
    data: Vec<f32>,
}

impl VectorSet {
    /// Wraps `data` as `data.len() / d` rows. Rejects `d == 0`, ragged data and
    /// non-finite entries.
    pub fn new(role: Role, d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 {
            return Err(Error::spec("d", "dimension must be at least 1"));
        }
        if data.len() % d != 0 {
            return Err(Error::spec(
                "data",
                format!("length {} is not a multiple of d = {d}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::spec(
                "data",
                format!("non-finite value at row {}, column {}", pos / d, pos % d),
            ));
        }
        Ok(VectorSet { role, d, data })
    }

    pub fn from_rows(role: Role, rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        VectorSet::new(role, d, rows.concat())
    }

    pub fn empty(role: Role, d: usize) -> Result<Self> {
        VectorSet::new(role, d, Vec::new())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d)
    }

    /// Copies the given rows, in order, into a new set with the same role.
    pub fn select(&self, ids: &[usize]) -> VectorSet {
        let mut data = Vec::with_capacity(ids.len() * self.d);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        VectorSet {
            role: self.role,
            d: self.d,
            data,
        }
    }

    /// Bytes used by the vector payload.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

/// Everything needed to run one query head: its own prefill and decode
/// queries, plus the key/value storage it shares with the rest of its group.
#[derive(Debug, Clone)]
pub struct HeadWorkload {
    pub head_id: usize,
    pub kv_group_id: usize,
    pub prefill_queries: VectorSet,
    pub keys: Arc<VectorSet>,
    pub values: Arc<VectorSet>,
    pub decode_queries: VectorSet,
}

impl HeadWorkload {
    pub fn new(
        head_id: usize,
        kv_group_id: usize,
        prefill_queries: VectorSet,
        keys: Arc<VectorSet>,
        values: Arc<VectorSet>,
        decode_queries: VectorSet,
    ) -> Result<Self> {
        if keys.len() != values.len() {
            return Err(Error::spec(
                "values",
                format!("{} values for {} keys", values.len(), keys.len()),
            ));
        }
        for set in [&prefill_queries, &decode_queries] {
            if set.dim() != keys.dim() {
                return Err(Error::DimensionMismatch {
                    expected: keys.dim(),
                    got: set.dim(),
                });
            }
        }
        Ok(HeadWorkload {
            head_id,
            kv_group_id,
            prefill_queries,
            keys,
            values,
            decode_queries,
        })
    }

    /// Context length.
    pub fn n_ctx(&self) -> usize {
        self.keys.len()
    }

    pub fn d_head(&self) -> usize {
        self.keys.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(VectorSet::new(Role::Key, 0, vec![]).is_err());
        assert!(VectorSet::new(Role::Key, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(VectorSet::new(Role::Key, 1, vec![f32::NAN]).is_err());
        assert!(VectorSet::new(Role::Key, 1, vec![f32::INFINITY]).is_err());
        let empty = VectorSet::empty(Role::Value, 4).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.len(), 0);
    }

    #[test]
    fn rows_and_select() {
        let s = VectorSet::from_rows(Role::Query, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
            .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.row(1), &[3.0, 4.0]);
        let sub = s.select(&[2, 0]);
        assert_eq!(sub.as_slice(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(s.rows().count(), 3);
    }

    #[test]
    fn workload_checks_kv_lengths() {
        let k = Arc::new(VectorSet::new(Role::Key, 2, vec![0.0; 4]).unwrap());
        let v = Arc::new(VectorSet::new(Role::Value, 2, vec![0.0; 2]).unwrap());
        let q = VectorSet::new(Role::Query, 2, vec![0.0; 2]).unwrap();
        assert!(HeadWorkload::new(0, 0, q.clone(), k.clone(), v, q.clone()).is_err());
        let v = Arc::new(VectorSet::new(Role::Value, 2, vec![0.0; 4]).unwrap());
        let q3 = VectorSet::new(Role::Query, 3, vec![0.0; 3]).unwrap();
        assert!(HeadWorkload::new(0, 0, q3, k.clone(), v.clone(), q.clone()).is_err());
        assert!(HeadWorkload::new(0, 0, q.clone(), k, v, q).is_ok());
    }
}
