//! Measurements behind the sparsity and out-of-distribution findings:
//! Mahalanobis gaps, recall against the exact oracle, recall-versus-scan
//! sweeps and top-k attention error sweeps.

mod mahalanobis;

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{full_attention_f64, mse, partial_attention, topk_oracle};
use crate::index::{FlatIndex, IndexConfig, IndexKind, SearchIndex};
use crate::vecstore::{HeadWorkload, VectorSet};
use crate::{Error, Result};

pub use mahalanobis::{default_shrinkage, mahalanobis_gap, GapReport, MahalanobisModel, DEFAULT_GAP_SAMPLE};

/// `|retrieved ∩ truth| / |truth|`. Order and duplicates in `retrieved` do
/// not matter. An empty `truth` counts as fully recalled.
pub fn recall_at_k(retrieved: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let mut r = retrieved.to_vec();
    r.sort_unstable();
    r.dedup();
    let hits = truth.iter().filter(|t| r.binary_search(t).is_ok()).count();
    hits as f64 / truth.len() as f64
}

/// Exact top-`k` ids for every query, from the flat oracle.
pub fn ground_truth(keys: &Arc<VectorSet>, queries: &VectorSet, k: usize) -> Result<Vec<Vec<usize>>> {
    FlatIndex::build(keys.clone())?.knn_batch(queries, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index_kind: IndexKind,
    /// `nprobe` for IVF, `ef` for the graph, 0 for flat.
    pub param: usize,
    pub recall_at_k: f64,
    pub scan_fraction: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "index_kind,param,recall_at_k,scan_fraction,n_queries";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.index_kind, r.param, r.recall_at_k, r.scan_fraction, r.n_queries
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Cheapest row of `kind` reaching `target` recall.
    pub fn min_scan_at_recall(&self, kind: IndexKind, target: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.index_kind == kind && r.recall_at_k >= target)
            .min_by(|a, b| a.scan_fraction.total_cmp(&b.scan_fraction))
    }

    pub fn extend(&mut self, other: SweepReport) {
        self.rows.extend(other.rows);
    }
}

/// Searches every query at every grid value of a built index and averages
/// recall against `truth`. Flat has no knob, so it yields a single row.
pub fn sweep_index(
    index: &SearchIndex,
    queries: &VectorSet,
    truth: &[Vec<usize>],
    grid: &[usize],
    k: usize,
) -> Result<SweepReport> {
    if queries.len() != truth.len() {
        return Err(Error::spec(
            "truth",
            format!("{} truth lists for {} queries", truth.len(), queries.len()),
        ));
    }
    if queries.is_empty() {
        return Err(Error::spec("queries", "need at least one query"));
    }
    let grid: Vec<Option<usize>> = match index.kind() {
        IndexKind::Flat => vec![None],
        _ if grid.is_empty() => return Err(Error::spec("grid", "must not be empty")),
        _ => grid.iter().map(|&p| Some(p)).collect(),
    };
    let n = index.keys().len() as f64;
    let mut rows = Vec::with_capacity(grid.len());
    for param in grid {
        let per_query: Vec<(f64, f64)> = (0..queries.len())
            .into_par_iter()
            .map(|i| {
                let r = index.search_with(queries.row(i), k, param, None)?;
                Ok((recall_at_k(&r.ids, &truth[i]), r.scanned as f64 / n))
            })
            .collect::<Result<_>>()?;
        let m = per_query.len() as f64;
        rows.push(SweepRow {
            index_kind: index.kind(),
            param: param.unwrap_or(0),
            recall_at_k: per_query.iter().map(|x| x.0).sum::<f64>() / m,
            scan_fraction: per_query.iter().map(|x| x.1).sum::<f64>() / m,
            n_queries: per_query.len(),
        });
    }
    Ok(SweepReport { rows })
}

/// Builds `config`'s index over the workload's keys (graph trained on its
/// prefill queries) and sweeps it over the decode queries.
pub fn recall_sweep(
    workload: &HeadWorkload,
    config: &IndexConfig,
    grid: &[usize],
    k: usize,
    seed: u64,
) -> Result<SweepReport> {
    let truth = ground_truth(&workload.keys, &workload.decode_queries, k)?;
    let index = SearchIndex::build(config, workload.keys.clone(), &workload.prefill_queries, seed)?;
    sweep_index(&index, &workload.decode_queries, &truth, grid, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub k: usize,
    pub mean_mse: f64,
    pub n_queries: usize,
}

pub const MSE_CSV_HEADER: &str = "k,mean_mse,n_queries";

pub fn mse_rows_csv(rows: &[MseRow]) -> String {
    let mut out = String::from(MSE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.k, r.mean_mse, r.n_queries);
    }
    out
}

/// Mean error of attention restricted to the exact top-`k` keys against full
/// attention, per `k` in `grid` plus `k = n`. Rows come back sorted by `k`.
pub fn mse_sweep(keys: &VectorSet, values: &VectorSet, queries: &VectorSet, grid: &[usize]) -> Result<Vec<MseRow>> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::EmptyContext);
    }
    if queries.is_empty() {
        return Err(Error::spec("queries", "need at least one query"));
    }
    if let Some(&bad) = grid.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::KOutOfRange { k: bad, max: n });
    }
    let mut ks: Vec<usize> = grid.to_vec();
    ks.push(n);
    ks.sort_unstable();
    ks.dedup();
    let kmax_partial = ks.iter().copied().filter(|&k| k < n).max();
    let all: Vec<usize> = (0..n).collect();

    let per_query: Vec<Vec<f64>> = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let exact = full_attention_f64(q, keys, values)?;
            let ranking = match kmax_partial {
                Some(kmax) => topk_oracle(q, keys, kmax)?,
                None => Vec::new(),
            };
            ks.iter()
                .map(|&k| {
                    let ids = if k == n { &all[..] } else { &ranking[..k] };
                    Ok(mse(&partial_attention(q, keys, values, ids)?.out, &exact))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let m = per_query.len();
    Ok(ks
        .iter()
        .enumerate()
        .map(|(j, &k)| MseRow {
            k,
            mean_mse: per_query.iter().map(|row| row[j]).sum::<f64>() / m as f64,
            n_queries: m,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecstore::Role;

    #[test]
    fn recall_basics() {
        let truth: Vec<usize> = (0..100).collect();
        assert_eq!(recall_at_k(&truth, &truth), 1.0);
        let disjoint: Vec<usize> = (100..200).collect();
        assert_eq!(recall_at_k(&disjoint, &truth), 0.0);
        let partial: Vec<usize> = (27..127).collect();
        assert!((recall_at_k(&partial, &truth) - 0.73).abs() < 1e-12);
        let mut rev = partial.clone();
        rev.reverse();
        assert_eq!(recall_at_k(&rev, &truth), recall_at_k(&partial, &truth));
    }

    #[test]
    fn csv_layout() {
        let rep = SweepReport {
            rows: vec![SweepRow {
                index_kind: IndexKind::OodGraph,
                param: 64,
                recall_at_k: 0.5,
                scan_fraction: 0.25,
                n_queries: 3,
            }],
        };
        assert_eq!(rep.to_csv(), "index_kind,param,recall_at_k,scan_fraction,n_queries\nood_graph,64,0.5,0.25,3\n");
        assert_eq!(
            rep.to_jsonl().unwrap(),
            "{\"index_kind\":\"ood_graph\",\"param\":64,\"recall_at_k\":0.5,\"scan_fraction\":0.25,\"n_queries\":3}\n"
        );
    }

    fn tiny() -> (Arc<VectorSet>, VectorSet, VectorSet) {
        let keys: Vec<f32> = (0..200 * 4).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let vals: Vec<f32> = (0..200 * 4).map(|i| ((i * 53 % 97) as f32 / 48.0) - 1.0).collect();
        let qs: Vec<f32> = (0..10 * 4).map(|i| ((i * 29 % 89) as f32 / 11.0) - 4.0).collect();
        (
            Arc::new(VectorSet::new(Role::Key, 4, keys).unwrap()),
            VectorSet::new(Role::Value, 4, vals).unwrap(),
            VectorSet::new(Role::Query, 4, qs).unwrap(),
        )
    }

    #[test]
    fn flat_row_is_exact() {
        let (k, _, q) = tiny();
        let truth = ground_truth(&k, &q, 10).unwrap();
        let flat = SearchIndex::build(&IndexConfig::flat(), k, &q, 0).unwrap();
        let rep = sweep_index(&flat, &q, &truth, &[1, 2, 3], 10).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].recall_at_k, 1.0);
        assert_eq!(rep.rows[0].scan_fraction, 1.0);
    }

    // The runner-up's value pulls the truncated output away from the exact
    // one, whose third key nearly cancels it: more keys, larger error.
    #[test]
    fn mse_can_rise_with_k() {
        let k = Arc::new(VectorSet::new(Role::Key, 1, vec![3.0, 2.9, 2.8]).unwrap());
        let v = VectorSet::new(Role::Value, 1, vec![0.0, 1.0, -1.0]).unwrap();
        let q = VectorSet::new(Role::Query, 1, vec![1.0]).unwrap();
        let rows = mse_sweep(&k, &v, &q, &[1, 2]).unwrap();
        assert!(rows[1].mean_mse > 100.0 * rows[0].mean_mse, "{rows:?}");
        assert_eq!(rows[2].mean_mse, 0.0);
    }

    #[test]
    fn mse_sweep_ends_at_zero() {
        let (k, v, q) = tiny();
        let rows = mse_sweep(&k, &v, &q, &[1, 5, 50]).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 5, 50, 200]);
        assert_eq!(rows.last().unwrap().mean_mse, 0.0);
        assert!(mse_sweep(&k, &v, &q, &[201]).is_err());
    }
}
