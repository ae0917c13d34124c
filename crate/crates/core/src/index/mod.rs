//! Maximum-inner-product indexes over a key set.
//!
//! All indexes rank by raw `q·k` (no `1/√d`; scaling is monotone and belongs to
//! the attention math) and report how many keys they scored, which is the
//! hardware-independent cost of a search.

mod flat;
mod ivf;
mod oodgraph;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernel::rank_order;
use crate::vecstore::VectorSet;
use crate::{Error, Result};

pub use flat::FlatIndex;
pub use ivf::{IvfIndex, IvfParams, DEFAULT_KMEANS_ITERS};
pub use oodgraph::{
    BuildStats, EntryStrategy, OodGraph, OodGraphBuildParams, OodGraphParams, OodSearchParams,
    OODG_MAGIC, OODG_VERSION,
};

/// Ranked hits of one search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Key ids, best first (score descending, id ascending on ties).
    pub ids: Vec<usize>,
    pub scores: Vec<f32>,
    /// Number of keys whose score was computed.
    pub scanned: usize,
    /// Set when fewer than the requested number of ids could be returned.
    pub incomplete: bool,
}

impl SearchResult {
    fn from_topk(top: TopK, k: usize, scanned: usize) -> Self {
        let (scores, ids): (Vec<f32>, Vec<usize>) = top.into_sorted().into_iter().unzip();
        SearchResult {
            incomplete: ids.len() < k,
            ids,
            scores,
            scanned,
        }
    }
}

/// Key ids that a search must never return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMask {
    bits: Vec<bool>,
    count: usize,
}

impl IdMask {
    pub fn new(n: usize) -> Self {
        IdMask {
            bits: vec![false; n],
            count: 0,
        }
    }

    pub fn from_ids(n: usize, ids: &[usize]) -> Result<Self> {
        let mut mask = IdMask::new(n);
        for &i in ids {
            if i >= n {
                return Err(Error::InvalidIndices(format!("mask id {i} out of range for {n} keys")));
            }
            if !mask.bits[i] {
                mask.bits[i] = true;
                mask.count += 1;
            }
        }
        Ok(mask)
    }

    #[inline]
    pub fn contains(&self, id: usize) -> bool {
        self.bits.get(id).copied().unwrap_or(false)
    }

    /// Number of masked ids.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Size of the id space the mask covers.
    pub fn universe(&self) -> usize {
        self.bits.len()
    }
}

#[inline]
pub(crate) fn is_masked(mask: Option<&IdMask>, id: usize) -> bool {
    mask.is_some_and(|m| m.contains(id))
}

pub(crate) fn masked_count(mask: Option<&IdMask>) -> usize {
    mask.map_or(0, IdMask::count)
}

#[derive(Clone, Copy)]
struct Ranked(f32, usize);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    // worse entries compare greater, so a max-heap keeps the worst on top
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.0, self.1), (other.0, other.1))
    }
}

/// Bounded collection of the `k` best `(score, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, score: f32, id: usize) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Ranked(score, id));
        } else if let Some(worst) = self.heap.peek() {
            if rank_order((score, id), (worst.0, worst.1)) == Ordering::Less {
                self.heap.pop();
                self.heap.push(Ranked(score, id));
            }
        }
    }

    /// [`TopK::push`] for callers that offer ids in increasing order: an
    /// equal score can then never displace a retained entry.
    #[inline]
    pub(crate) fn push_ascending(&mut self, score: f32, id: usize) {
        if self.heap.len() >= self.k {
            match self.heap.peek() {
                Some(worst) if score > worst.0 => {}
                _ => return,
            }
        }
        self.push(score, id);
    }

    #[allow(dead_code)]
    pub(crate) fn len(&self) -> usize {
        self.heap.len()
    }

    pub(crate) fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    /// Worst retained entry.
    pub(crate) fn worst(&self) -> Option<(f32, usize)> {
        self.heap.peek().map(|r| (r.0, r.1))
    }

    pub(crate) fn into_sorted(self) -> Vec<(f32, usize)> {
        self.heap.into_sorted_vec().into_iter().map(|r| (r.0, r.1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Flat,
    Ivf,
    OodGraph,
}

impl IndexKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::Flat => "flat",
            IndexKind::Ivf => "ivf",
            IndexKind::OodGraph => "ood_graph",
        }
    }
}

impl std::fmt::Display for IndexKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index choice plus every knob any kind may need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub kind: IndexKind,
    #[serde(default)]
    pub ivf: IvfParams,
    #[serde(default)]
    pub ood_graph: OodGraphParams,
}

impl IndexConfig {
    pub fn flat() -> Self {
        Self::of(IndexKind::Flat)
    }

    pub fn of(kind: IndexKind) -> Self {
        IndexConfig {
            kind,
            ivf: IvfParams::default(),
            ood_graph: OodGraphParams::default(),
        }
    }
}

/// A built index of any kind, holding its own search-time knob.
#[derive(Debug, Clone)]
pub enum SearchIndex {
    Flat(FlatIndex),
    Ivf { index: IvfIndex, nprobe: usize },
    OodGraph {
        graph: OodGraph,
        keys: Arc<VectorSet>,
        ef: usize,
        /// Present when the graph was built here rather than loaded.
        stats: Option<BuildStats>,
    },
}

impl SearchIndex {
    /// Builds the configured index. `train_queries` feeds the graph build and
    /// `seed` the k-means initialization; other kinds ignore them.
    pub fn build(
        config: &IndexConfig,
        keys: Arc<VectorSet>,
        train_queries: &VectorSet,
        seed: u64,
    ) -> Result<Self> {
        Ok(match config.kind {
            IndexKind::Flat => SearchIndex::Flat(FlatIndex::build(keys)?),
            IndexKind::Ivf => {
                let p = &config.ivf;
                let nlist = p.nlist_for(keys.len());
                let index = IvfIndex::build(keys, nlist, seed, p.iters)?;
                let nprobe = p.nprobe.clamp(1, index.nlist());
                SearchIndex::Ivf { index, nprobe }
            }
            IndexKind::OodGraph => {
                let p = &config.ood_graph;
                let (graph, stats) = OodGraph::build_with_stats(&keys, train_queries, &p.build)?;
                SearchIndex::OodGraph {
                    graph,
                    keys,
                    ef: p.ef,
                    stats: Some(stats),
                }
            }
        })
    }

    pub fn kind(&self) -> IndexKind {
        match self {
            SearchIndex::Flat(_) => IndexKind::Flat,
            SearchIndex::Ivf { .. } => IndexKind::Ivf,
            SearchIndex::OodGraph { .. } => IndexKind::OodGraph,
        }
    }

    pub fn keys(&self) -> &Arc<VectorSet> {
        match self {
            SearchIndex::Flat(f) => f.keys(),
            SearchIndex::Ivf { index, .. } => index.keys(),
            SearchIndex::OodGraph { keys, .. } => keys,
        }
    }

    /// Top-`k` search with the index's configured knob. Returns fewer than
    /// `k` ids (flagged `incomplete`) if not enough unmasked keys are reached.
    pub fn search(&self, q: &[f32], k: usize, mask: Option<&IdMask>) -> Result<SearchResult> {
        self.search_with(q, k, None, mask)
    }

    /// [`SearchIndex::search`] with the knob (`nprobe` or `ef`) overridden.
    /// Flat has no knob and ignores `param`.
    pub fn search_with(
        &self,
        q: &[f32],
        k: usize,
        param: Option<usize>,
        mask: Option<&IdMask>,
    ) -> Result<SearchResult> {
        match self {
            SearchIndex::Flat(f) => {
                let available = f.keys().len() - masked_count(mask);
                f.search(q, k.min(available), mask)
            }
            SearchIndex::Ivf { index, nprobe } => {
                index.search(q, k, param.unwrap_or(*nprobe), mask)
            }
            SearchIndex::OodGraph { graph, keys, ef, .. } => {
                let ef = param.unwrap_or(*ef).max(k);
                graph.search(keys, q, &OodSearchParams { ef, k }, mask)
            }
        }
    }

    /// The configured knob, if the kind has one.
    pub fn param(&self) -> Option<usize> {
        match self {
            SearchIndex::Flat(_) => None,
            SearchIndex::Ivf { nprobe, .. } => Some(*nprobe),
            SearchIndex::OodGraph { ef, .. } => Some(*ef),
        }
    }

    /// Bytes held by the index structure itself, excluding the shared keys.
    pub fn structure_bytes(&self) -> usize {
        match self {
            SearchIndex::Flat(_) => 0,
            SearchIndex::Ivf { index, .. } => index.structure_bytes(),
            SearchIndex::OodGraph { graph, .. } => graph.structure_bytes(),
        }
    }
}
