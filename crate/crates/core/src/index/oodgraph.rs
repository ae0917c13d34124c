//! Query-guided key graph for out-of-distribution inner-product search.
//!
//! Keys built into an ordinary proximity graph are linked by how close they
//! are to each other, which says little about which keys a query from a
//! different distribution will want. This graph is built from the queries
//! instead:
//!
//! 1. every training query is linked to its exact top-`k_train` keys;
//! 2. those links are projected onto the keys: within one query's ranked
//!    neighbor list, each key proposes edges toward the co-neighbors ranked
//!    above it, so walking an edge moves toward what similar queries preferred;
//! 3. each key keeps at most `projected_degree` proposals, chosen by a
//!    diversity rule and then by raw score;
//! 4. spare out-degree is filled with each key's nearest keys under the
//!    metric the training queries induce, `|q·(k_u - k_v)|` averaged over a
//!    query sample, plus the reverse of those edges where room remains;
//! 5. a repair pass attaches every key not reachable from the entry point.
//!
//! The training queries are dropped after the build; only key adjacency is
//! stored. Search is best-first with a bounded pool of `ef` candidates.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::flat::gemm_knn;
use super::{is_masked, IdMask, SearchResult, TopK};
use crate::kernel::{dot, rank_order, squared_l2};
use crate::vecstore::{Role, VectorSet};
use crate::{Error, Result};

pub const OODG_MAGIC: &[u8; 4] = b"OODG";
pub const OODG_VERSION: u32 = 1;

/// Pool width used while looking for an attachment point during repair.
const REPAIR_EF: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStrategy {
    /// Key closest (Euclidean) to the key mean.
    Medoid,
    /// Key with the largest norm.
    MaxNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodGraphBuildParams {
    #[serde(default = "defaults::k_train")]
    pub k_train: usize,
    #[serde(default = "defaults::max_degree")]
    pub max_degree: usize,
    #[serde(default = "defaults::entry")]
    pub entry: EntryStrategy,
    #[serde(default = "defaults::ef_construction")]
    pub ef_construction: usize,
    /// Out-edges a key may keep from projection; the rest of `max_degree`
    /// is left for neighborhood fill.
    #[serde(default = "defaults::projected_degree")]
    pub projected_degree: usize,
    /// Query-metric nearest keys offered to each key's spare slots. 0 turns
    /// the fill pass off.
    #[serde(default = "defaults::neighbor_fill")]
    pub neighbor_fill: usize,
    /// Use only this many training queries, evenly strided. `None` uses all.
    #[serde(default)]
    pub train_sample: Option<usize>,
}

mod defaults {
    pub fn k_train() -> usize {
        32
    }
    pub fn max_degree() -> usize {
        32
    }
    pub fn entry() -> super::EntryStrategy {
        super::EntryStrategy::Medoid
    }
    pub fn ef_construction() -> usize {
        128
    }
    pub fn projected_degree() -> usize {
        16
    }
    pub fn neighbor_fill() -> usize {
        16
    }
    pub fn ef() -> usize {
        128
    }
}

impl Default for OodGraphBuildParams {
    fn default() -> Self {
        OodGraphBuildParams {
            k_train: defaults::k_train(),
            max_degree: defaults::max_degree(),
            entry: defaults::entry(),
            ef_construction: defaults::ef_construction(),
            projected_degree: defaults::projected_degree(),
            neighbor_fill: defaults::neighbor_fill(),
            train_sample: None,
        }
    }
}

impl OodGraphBuildParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_train < 2 {
            return Err(Error::spec("k_train", "must be at least 2"));
        }
        if self.max_degree < 2 {
            return Err(Error::spec("max_degree", "must be at least 2"));
        }
        if self.projected_degree == 0 || self.projected_degree > self.max_degree {
            return Err(Error::spec(
                "projected_degree",
                format!("must be in 1..={}, got {}", self.max_degree, self.projected_degree),
            ));
        }
        if self.ef_construction == 0 {
            return Err(Error::spec("ef_construction", "must be at least 1"));
        }
        if self.train_sample == Some(0) {
            return Err(Error::spec("train_sample", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodSearchParams {
    pub ef: usize,
    pub k: usize,
}

/// Build parameters plus the search pool width used by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodGraphParams {
    #[serde(default)]
    pub build: OodGraphBuildParams,
    #[serde(default = "defaults::ef")]
    pub ef: usize,
}

impl Default for OodGraphParams {
    fn default() -> Self {
        OodGraphParams {
            build: OodGraphBuildParams::default(),
            ef: defaults::ef(),
        }
    }
}

/// Structural summary of a built graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub n: usize,
    pub train_queries: usize,
    pub edges: usize,
    /// `degree_histogram[d]` = number of keys with out-degree `d`.
    pub degree_histogram: Vec<usize>,
    pub fill_edges: usize,
    pub repair_edges: usize,
    pub entry_point: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OodGraph {
    adjacency: Vec<Vec<u32>>,
    entry_point: usize,
    max_degree: usize,
}

impl OodGraph {
    pub fn build(
        keys: &VectorSet,
        train_queries: &VectorSet,
        params: &OodGraphBuildParams,
    ) -> Result<OodGraph> {
        Ok(Self::build_with_stats(keys, train_queries, params)?.0)
    }

    pub fn build_with_stats(
        keys: &VectorSet,
        train_queries: &VectorSet,
        params: &OodGraphBuildParams,
    ) -> Result<(OodGraph, BuildStats)> {
        params.validate()?;
        let n = keys.len();
        if n < 2 {
            return Err(Error::spec("keys", format!("need at least 2 keys, got {n}")));
        }
        if train_queries.dim() != keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: keys.dim(),
                got: train_queries.dim(),
            });
        }
        if train_queries.is_empty() {
            return Err(Error::spec("train_queries", "need at least 1 training query"));
        }
        let train = match params.train_sample {
            Some(s) if s < train_queries.len() => {
                let m = train_queries.len();
                let ids: Vec<usize> = (0..s).map(|i| i * m / s).collect();
                std::borrow::Cow::Owned(train_queries.select(&ids))
            }
            _ => std::borrow::Cow::Borrowed(train_queries),
        };

        let knn = gemm_knn(keys, &train, params.k_train.min(n))?;
        let proposals = project(&knn, n);
        drop(knn);
        let mut adjacency: Vec<Vec<u32>> = proposals
            .into_par_iter()
            .enumerate()
            .map(|(u, cands)| prune(keys, u, cands, params))
            .collect();
        let fill_edges = if params.neighbor_fill > 0 {
            fill(keys, &train, &mut adjacency, params)?
        } else {
            0
        };

        let entry_point = match params.entry {
            EntryStrategy::Medoid => medoid(keys),
            EntryStrategy::MaxNorm => max_norm(keys),
        };
        let repair_edges = repair(keys, &mut adjacency, entry_point, params.max_degree)?;
        let graph = OodGraph {
            adjacency,
            entry_point,
            max_degree: params.max_degree,
        };
        let stats = BuildStats {
            n,
            train_queries: train.len(),
            edges: graph.edge_count(),
            degree_histogram: graph.degree_histogram(),
            fill_edges,
            repair_edges,
            entry_point,
        };
        Ok((graph, stats))
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn entry_point(&self) -> usize {
        self.entry_point
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn neighbors(&self, u: usize) -> &[u32] {
        &self.adjacency[u]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn degree_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.max_degree + 1];
        for adj in &self.adjacency {
            hist[adj.len()] += 1;
        }
        hist
    }

    pub fn structure_bytes(&self) -> usize {
        self.edge_count() * std::mem::size_of::<u32>()
            + self.adjacency.len() * std::mem::size_of::<u32>()
    }

    /// Number of keys reachable from the entry point.
    pub fn reachable_count(&self) -> usize {
        if self.adjacency.is_empty() {
            return 0;
        }
        let mut seen = vec![false; self.len()];
        bfs_mark(&self.adjacency, self.entry_point, &mut seen)
    }

    /// Best-first search for the `k` keys with the largest `q·k`. Masked keys
    /// are traversed but never returned. `scanned` counts distinct keys scored.
    pub fn search(
        &self,
        keys: &VectorSet,
        q: &[f32],
        params: &OodSearchParams,
        mask: Option<&IdMask>,
    ) -> Result<SearchResult> {
        if self.adjacency.is_empty() {
            return Err(Error::EmptyContext);
        }
        if keys.len() != self.len() {
            return Err(Error::spec(
                "keys",
                format!("graph has {} nodes but {} keys were given", self.len(), keys.len()),
            ));
        }
        if q.len() != keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: keys.dim(),
                got: q.len(),
            });
        }
        if params.k == 0 {
            return Err(Error::KOutOfRange { k: 0, max: self.len() });
        }
        if params.ef < params.k {
            return Err(Error::spec("ef", format!("ef = {} < k = {}", params.ef, params.k)));
        }
        let (results, scanned) =
            best_first(&self.adjacency, keys, q, self.entry_point, params.ef, params.k, mask);
        Ok(SearchResult::from_topk(results, params.k, scanned))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(OODG_MAGIC)?;
        w.write_all(&OODG_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.max_degree as u32).to_le_bytes())?;
        w.write_all(&(self.entry_point as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for adj in &self.adjacency {
            buf.extend_from_slice(&(adj.len() as u32).to_le_bytes());
            for &v in adj {
                buf.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<OodGraph> {
        let mut fixed = [0u8; 28];
        read_exact(&mut r, &mut fixed, "header")?;
        if &fixed[0..4] != OODG_MAGIC {
            return Err(Error::format("magic", "bad magic"));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != OODG_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(fixed[8..16].try_into().unwrap());
        let max_degree = u32::from_le_bytes(fixed[16..20].try_into().unwrap()) as usize;
        let entry = u64::from_le_bytes(fixed[20..28].try_into().unwrap());
        let n = usize::try_from(n).map_err(|_| Error::format("n", "node count overflows"))?;
        if n > 0 && entry as usize >= n {
            return Err(Error::format("entry_point", format!("{entry} out of range for {n} nodes")));
        }
        let mut adjacency = Vec::with_capacity(n.min(1 << 24));
        let mut word = [0u8; 8];
        for u in 0..n {
            read_exact(&mut r, &mut word[..4], "degree")?;
            let degree = u32::from_le_bytes(word[..4].try_into().unwrap()) as usize;
            if degree > max_degree {
                return Err(Error::format(
                    "degree",
                    format!("node {u} has degree {degree} > {max_degree}"),
                ));
            }
            let mut adj = Vec::with_capacity(degree);
            for _ in 0..degree {
                read_exact(&mut r, &mut word, "neighbors")?;
                let v = u64::from_le_bytes(word);
                if v as usize >= n || v as usize == u {
                    return Err(Error::format("neighbors", format!("bad edge {u} -> {v}")));
                }
                adj.push(v as u32);
            }
            adjacency.push(adj);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|e| Error::format("neighbors", e.to_string()))? != 0 {
            return Err(Error::format("neighbors", "trailing bytes"));
        }
        Ok(OodGraph {
            adjacency,
            entry_point: entry as usize,
            max_degree,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(field, "truncated"),
        _ => Error::format(field, e.to_string()),
    })
}

/// Rank-directed edge proposals: within each ranked neighbor list, every key
/// proposes an edge to each key ranked above it.
fn project(knn: &[Vec<usize>], n: usize) -> Vec<Vec<u32>> {
    let mut proposals: Vec<Vec<u32>> = vec![Vec::new(); n];
    for list in knn {
        for (j, &lower) in list.iter().enumerate().skip(1) {
            proposals[lower].extend(list[..j].iter().map(|&v| v as u32));
        }
    }
    proposals
}

fn prune(keys: &VectorSet, u: usize, mut cands: Vec<u32>, params: &OodGraphBuildParams) -> Vec<u32> {
    cands.sort_unstable();
    cands.dedup();
    let ku = keys.row(u);
    let mut scored: Vec<(f32, usize)> = cands
        .into_iter()
        .map(|v| (dot(ku, keys.row(v as usize)), v as usize))
        .collect();
    scored.sort_unstable_by(|a, b| rank_order(*a, *b));
    scored.truncate(params.ef_construction);

    let m = params.projected_degree;
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    for &(score, v) in &scored {
        if kept.len() == m {
            break;
        }
        let kv = keys.row(v);
        if kept.iter().all(|&w| dot(kv, keys.row(w)) < score) {
            kept.push(v);
        } else {
            skipped.push(v);
        }
    }
    for v in skipped {
        if kept.len() == m {
            break;
        }
        kept.push(v);
    }
    kept.into_iter().map(|v| v as u32).collect()
}

/// Keys mapped to their scores against a strided sample of at most `d`
/// training queries. Euclidean distance between mapped keys is then the
/// query-weighted distance between the original keys.
fn query_coordinates(keys: &VectorSet, train: &VectorSet) -> Result<VectorSet> {
    let m = train.len().min(keys.dim());
    let ids: Vec<usize> = (0..m).map(|i| i * train.len() / m).collect();
    let sample = train.select(&ids);
    let mut data = Vec::with_capacity(keys.len() * m);
    for row in keys.rows() {
        data.extend(sample.rows().map(|q| dot(q, row)));
    }
    VectorSet::new(Role::Key, m, data)
}

/// Offers each key its `neighbor_fill` nearest keys in query coordinates,
/// forward into its own spare slots and reversed into the neighbor's.
fn fill(
    keys: &VectorSet,
    train: &VectorSet,
    adjacency: &mut [Vec<u32>],
    params: &OodGraphBuildParams,
) -> Result<usize> {
    let n = keys.len();
    let coords = query_coordinates(keys, train)?;
    // nearest by L2 as a max inner product: [2x, -1] · [y, |y|²]
    let d = coords.dim();
    let mut probe = Vec::with_capacity(n * (d + 1));
    let mut base = Vec::with_capacity(n * (d + 1));
    for row in coords.rows() {
        probe.extend(row.iter().map(|x| 2.0 * x));
        probe.push(-1.0);
        base.extend_from_slice(row);
        base.push(dot(row, row));
    }
    let probe = VectorSet::new(Role::Query, d + 1, probe)?;
    let base = VectorSet::new(Role::Key, d + 1, base)?;
    let near = gemm_knn(&base, &probe, (params.neighbor_fill + 1).min(n))?;
    let m = params.max_degree;
    let mut added = 0;
    for (u, list) in near.iter().enumerate() {
        for &v in list.iter().filter(|&&v| v != u) {
            if adjacency[u].len() < m && !adjacency[u].contains(&(v as u32)) {
                adjacency[u].push(v as u32);
                added += 1;
            }
            if adjacency[v].len() < m && !adjacency[v].contains(&(u as u32)) {
                adjacency[v].push(u as u32);
                added += 1;
            }
        }
    }
    Ok(added)
}

fn medoid(keys: &VectorSet) -> usize {
    let d = keys.dim();
    let mut mean = vec![0.0f64; d];
    for row in keys.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / keys.len() as f64) as f32).collect();
    let mut best = (f32::INFINITY, 0);
    for (i, row) in keys.rows().enumerate() {
        let dist = squared_l2(row, &mean);
        if dist < best.0 {
            best = (dist, i);
        }
    }
    best.1
}

fn max_norm(keys: &VectorSet) -> usize {
    let mut best = (f32::NEG_INFINITY, 0);
    for (i, row) in keys.rows().enumerate() {
        let norm = dot(row, row);
        if norm > best.0 {
            best = (norm, i);
        }
    }
    best.1
}

/// Marks everything reachable from `start` that is not yet marked; returns
/// how many nodes were newly marked.
fn bfs_mark(adjacency: &[Vec<u32>], start: usize, seen: &mut [bool]) -> usize {
    if seen[start] {
        return 0;
    }
    let mut marked = 1;
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            let v = v as usize;
            if !seen[v] {
                seen[v] = true;
                marked += 1;
                queue.push_back(v);
            }
        }
    }
    marked
}

/// Attaches every key unreachable from `entry` to a nearby reachable key with
/// spare out-degree. Returns the number of edges added.
fn repair(keys: &VectorSet, adjacency: &mut [Vec<u32>], entry: usize, max_degree: usize) -> Result<usize> {
    let n = adjacency.len();
    let mut reached = vec![false; n];
    let mut count = bfs_mark(adjacency, entry, &mut reached);
    let mut added = 0;
    for u in 0..n {
        if count == n {
            break;
        }
        if reached[u] {
            continue;
        }
        let target = keys.row(u);
        let (near, _) = best_first(adjacency, keys, target, entry, REPAIR_EF, REPAIR_EF, None);
        let mut options: Vec<(f32, usize)> = near
            .into_sorted()
            .into_iter()
            .map(|(_, r)| (squared_l2(keys.row(r), target), r))
            .collect();
        options.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut host = options
            .iter()
            .map(|&(_, r)| r)
            .find(|&r| adjacency[r].len() < max_degree);
        if host.is_none() {
            // no spare slot near u; take the closest reachable node that has one
            let mut best = (f32::INFINITY, usize::MAX);
            for r in (0..n).filter(|&r| reached[r] && adjacency[r].len() < max_degree) {
                let dist = squared_l2(keys.row(r), target);
                if dist < best.0 {
                    best = (dist, r);
                }
            }
            host = (best.1 != usize::MAX).then_some(best.1);
        }
        match host {
            Some(r) => adjacency[r].push(u as u32),
            None => {
                // every reachable node is full: splice u into the nearest one's
                // last edge so nothing downstream loses its path
                let r = options.first().map(|x| x.1).unwrap_or(entry);
                let displaced = adjacency[r].pop().expect("full node has edges");
                adjacency[r].push(u as u32);
                if displaced as usize != u && !adjacency[u].contains(&displaced) {
                    // u was unreached, so dropping one of its edges cannot
                    // disconnect anything that was already reachable
                    if adjacency[u].len() >= max_degree {
                        adjacency[u].pop();
                    }
                }
                if displaced as usize != u && !adjacency[u].contains(&displaced) {
                    adjacency[u].push(displaced);
                    added += 1;
                }
            }
        }
        added += 1;
        count += bfs_mark(adjacency, u, &mut reached);
    }
    Ok(added)
}

#[derive(Clone, Copy)]
struct Candidate(f32, usize);

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // better candidates compare greater
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((other.0, other.1), (self.0, self.1))
    }
}

/// Core best-first traversal. Returns the top-`k` unmasked keys seen and the
/// number of keys scored.
fn best_first(
    adjacency: &[Vec<u32>],
    keys: &VectorSet,
    q: &[f32],
    entry: usize,
    ef: usize,
    k: usize,
    mask: Option<&IdMask>,
) -> (TopK, usize) {
    let mut visited = vec![0u64; adjacency.len().div_ceil(64)];
    let mut visit = |v: usize| -> bool {
        let (w, b) = (v / 64, 1u64 << (v % 64));
        let fresh = visited[w] & b == 0;
        visited[w] |= b;
        fresh
    };
    let mut pool = TopK::new(ef);
    let mut results = TopK::new(k);
    let mut frontier = BinaryHeap::new();

    visit(entry);
    let s = dot(q, keys.row(entry));
    let mut scanned = 1;
    pool.push(s, entry);
    if !is_masked(mask, entry) {
        results.push(s, entry);
    }
    frontier.push(Candidate(s, entry));

    while let Some(Candidate(score, u)) = frontier.pop() {
        if pool.is_full() {
            if let Some(worst) = pool.worst() {
                if rank_order((score, u), worst) == Ordering::Greater {
                    break;
                }
            }
        }
        for &v in &adjacency[u] {
            let v = v as usize;
            if !visit(v) {
                continue;
            }
            let s = dot(q, keys.row(v));
            scanned += 1;
            if !is_masked(mask, v) {
                results.push(s, v);
            }
            let admit = !pool.is_full()
                || pool
                    .worst()
                    .is_some_and(|w| rank_order((s, v), w) == Ordering::Less);
            if admit {
                pool.push(s, v);
                frontier.push(Candidate(s, v));
            }
        }
    }
    (results, scanned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecstore::Role;

    fn four_keys() -> VectorSet {
        VectorSet::from_rows(
            Role::Key,
            &[vec![4.0, 0.0], vec![3.0, 0.5], vec![2.0, -0.5], vec![1.0, 0.2]],
        )
        .unwrap()
    }

    #[test]
    fn single_query_projection_by_hand() {
        let keys = four_keys();
        let q = VectorSet::new(Role::Query, 2, vec![1.0, 0.0]).unwrap();
        let params = OodGraphBuildParams {
            k_train: 4,
            max_degree: 4,
            projected_degree: 4,
            neighbor_fill: 0,
            ..Default::default()
        };
        let (g, stats) = OodGraph::build_with_stats(&keys, &q, &params).unwrap();
        // ranking for q is 0, 1, 2, 3; each key links to everything above it
        for (u, above) in [(1, vec![0u32]), (2, vec![0, 1]), (3, vec![0, 1, 2])] {
            let adj = g.neighbors(u);
            assert!(above.iter().all(|v| adj.contains(v)), "key {u}: {adj:?}");
        }
        // the medoid (key 1) only reaches 0 through projected edges; repair
        // supplies the rest
        assert_eq!(g.entry_point(), 1);
        assert_eq!(stats.repair_edges, g.edge_count() - 6);
        assert_eq!(g.reachable_count(), 4);
        assert_eq!(stats.degree_histogram.iter().sum::<usize>(), 4);
    }

    #[test]
    fn projection_proposals() {
        let p = project(&[vec![2, 0, 1]], 3);
        assert_eq!(p[2], Vec::<u32>::new());
        assert_eq!(p[0], vec![2]);
        assert_eq!(p[1], vec![2, 0]);
    }

    #[test]
    fn build_errors() {
        let keys = four_keys();
        let q = VectorSet::new(Role::Query, 2, vec![1.0, 0.0]).unwrap();
        let one = VectorSet::new(Role::Key, 2, vec![1.0, 0.0]).unwrap();
        assert!(OodGraph::build(&one, &q, &Default::default()).is_err());
        let q3 = VectorSet::new(Role::Query, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            OodGraph::build(&keys, &q3, &Default::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = OodGraphBuildParams {
            k_train: 1,
            ..Default::default()
        };
        assert!(OodGraph::build(&keys, &q, &bad).is_err());
    }

    #[test]
    fn search_validates_params() {
        let keys = four_keys();
        let q = VectorSet::new(Role::Query, 2, vec![1.0, 0.0]).unwrap();
        let g = OodGraph::build(&keys, &q, &Default::default()).unwrap();
        assert!(g.search(&keys, &[1.0, 0.0], &OodSearchParams { ef: 1, k: 2 }, None).is_err());
        assert!(g.search(&keys, &[1.0, 0.0], &OodSearchParams { ef: 4, k: 0 }, None).is_err());
        let r = g.search(&keys, &[1.0, 0.0], &OodSearchParams { ef: 4, k: 2 }, None).unwrap();
        assert_eq!(r.ids, vec![0, 1]);
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let keys = four_keys();
        let q = VectorSet::new(Role::Query, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = OodGraph::build(&keys, &q, &Default::default()).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(OodGraph::read_from(&bytes[..]).unwrap(), g);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(OodGraph::read_from(&bad[..]).unwrap_err().to_string().contains("bad magic"));
        assert!(OodGraph::read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(OodGraph::read_from(&extra[..]).is_err());
    }
}
