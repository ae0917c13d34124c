use std::sync::Arc;

use rayon::prelude::*;

use super::{is_masked, masked_count, IdMask, SearchResult, TopK};
use crate::kernel::dot;
use crate::vecstore::VectorSet;
use crate::{Error, Result};

/// Exact search by scoring every key.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    keys: Arc<VectorSet>,
}

/// Queries scored together against each key, so a key row is loaded once per
/// block instead of once per query.
const QUERY_BLOCK: usize = 32;

impl FlatIndex {
    pub fn build(keys: Arc<VectorSet>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyContext);
        }
        Ok(FlatIndex { keys })
    }

    pub fn keys(&self) -> &Arc<VectorSet> {
        &self.keys
    }

    pub fn search(&self, q: &[f32], k: usize, mask: Option<&IdMask>) -> Result<SearchResult> {
        if q.len() != self.keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.keys.dim(),
                got: q.len(),
            });
        }
        let available = self.keys.len() - masked_count(mask);
        if k == 0 || k > available {
            return Err(Error::KOutOfRange { k, max: available });
        }
        let mut top = TopK::new(k);
        let mut scanned = 0;
        for (i, row) in self.keys.rows().enumerate() {
            if is_masked(mask, i) {
                continue;
            }
            scanned += 1;
            top.push(dot(q, row), i);
        }
        Ok(SearchResult::from_topk(top, k, scanned))
    }

    /// Exact top-`k` for every row of `queries`, best first. Scores are the
    /// same as [`FlatIndex::search`] produces, so results agree exactly.
    pub fn knn_batch(&self, queries: &VectorSet, k: usize) -> Result<Vec<Vec<usize>>> {
        exact_knn(&self.keys, queries, k)
    }
}

pub(crate) fn exact_knn(keys: &VectorSet, queries: &VectorSet, k: usize) -> Result<Vec<Vec<usize>>> {
    if queries.dim() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: queries.dim(),
        });
    }
    if k == 0 || k > keys.len() {
        return Err(Error::KOutOfRange { k, max: keys.len() });
    }
    let d = queries.dim();
    let blocks: Vec<Vec<Vec<usize>>> = queries
        .as_slice()
        .par_chunks(QUERY_BLOCK * d)
        .map(|block| {
            let qs: Vec<&[f32]> = block.chunks_exact(d).collect();
            let mut tops: Vec<TopK> = qs.iter().map(|_| TopK::new(k)).collect();
            for (i, row) in keys.rows().enumerate() {
                for (q, top) in qs.iter().zip(tops.iter_mut()) {
                    top.push_ascending(dot(q, row), i);
                }
            }
            tops.into_iter()
                .map(|t| t.into_sorted().into_iter().map(|(_, i)| i).collect())
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

const GEMM_QUERIES: usize = 128;
const GEMM_KEYS: usize = 2048;

/// Blocked matrix-product variant of [`exact_knn`] for bulk construction
/// work. Scores can differ from [`dot`] in the last bit, so exact near-ties
/// may resolve differently; rankings used for search never go through here.
pub(crate) fn gemm_knn(keys: &VectorSet, queries: &VectorSet, k: usize) -> Result<Vec<Vec<usize>>> {
    if queries.dim() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: queries.dim(),
        });
    }
    if k == 0 || k > keys.len() {
        return Err(Error::KOutOfRange { k, max: keys.len() });
    }
    let d = queries.dim();
    let kd = keys.as_slice();
    let blocks: Vec<Vec<Vec<usize>>> = queries
        .as_slice()
        .par_chunks(GEMM_QUERIES * d)
        .map(|block| {
            let m = block.len() / d;
            let mut tops: Vec<TopK> = (0..m).map(|_| TopK::new(k)).collect();
            let mut scores = vec![0.0f32; m * GEMM_KEYS];
            for start in (0..keys.len()).step_by(GEMM_KEYS) {
                let nk = GEMM_KEYS.min(keys.len() - start);
                let kb = &kd[start * d..(start + nk) * d];
                // scores[m x nk] = block[m x d] * kb^T
                unsafe {
                    matrixmultiply::sgemm(
                        m,
                        d,
                        nk,
                        1.0,
                        block.as_ptr(),
                        d as isize,
                        1,
                        kb.as_ptr(),
                        1,
                        d as isize,
                        0.0,
                        scores.as_mut_ptr(),
                        nk as isize,
                        1,
                    );
                }
                for (row, top) in scores.chunks_exact(nk).take(m).zip(tops.iter_mut()) {
                    for (j, &s) in row.iter().enumerate() {
                        top.push_ascending(s, start + j);
                    }
                }
            }
            tops.into_iter()
                .map(|t| t.into_sorted().into_iter().map(|(_, i)| i).collect())
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}
