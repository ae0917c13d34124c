//! Inverted-file index: k-means partitions the keys (Euclidean), queries probe
//! the lists whose centroids have the largest inner product with them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{is_masked, IdMask, SearchResult, TopK};
use crate::kernel::{dot, rank_order, squared_l2};
use crate::vecstore::VectorSet;
use crate::{Error, Result};

pub const DEFAULT_KMEANS_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvfParams {
    /// Cluster count; `None` means `⌈√n⌉`.
    #[serde(default)]
    pub nlist: Option<usize>,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Lists probed per search by the engine.
    #[serde(default = "default_nprobe")]
    pub nprobe: usize,
}

fn default_iters() -> usize {
    DEFAULT_KMEANS_ITERS
}

fn default_nprobe() -> usize {
    32
}

impl Default for IvfParams {
    fn default() -> Self {
        IvfParams {
            nlist: None,
            iters: DEFAULT_KMEANS_ITERS,
            nprobe: default_nprobe(),
        }
    }
}

impl IvfParams {
    pub fn nlist_for(&self, n: usize) -> usize {
        self.nlist
            .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
            .clamp(1, n.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct IvfIndex {
    keys: Arc<VectorSet>,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

impl IvfIndex {
    /// Clusters `keys` into `nlist` lists with `iters` Lloyd iterations after
    /// k-means++ seeding. Clusters that go empty are reseeded with the member
    /// of the largest cluster farthest from its centroid.
    pub fn build(keys: Arc<VectorSet>, nlist: usize, seed: u64, iters: usize) -> Result<Self> {
        let n = keys.len();
        if n == 0 {
            return Err(Error::EmptyContext);
        }
        if nlist == 0 || nlist > n {
            return Err(Error::spec("nlist", format!("{nlist} not in 1..={n}")));
        }
        let d = keys.dim();
        let mut centroids = kmeans_pp(&keys, nlist, seed);
        let mut assign = assign_all(&keys, &centroids);
        for _ in 0..iters {
            reseed_empty(&keys, &centroids, &mut assign, nlist);
            centroids = update_centroids(&keys, &assign, nlist, d);
            assign = assign_all(&keys, &centroids);
        }
        reseed_empty(&keys, &centroids, &mut assign, nlist);
        let mut lists = vec![Vec::new(); nlist];
        for (i, &c) in assign.iter().enumerate() {
            lists[c as usize].push(i as u32);
        }
        Ok(IvfIndex {
            keys,
            centroids,
            lists,
        })
    }

    pub fn keys(&self) -> &Arc<VectorSet> {
        &self.keys
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        let d = self.keys.dim();
        &self.centroids[c * d..(c + 1) * d]
    }

    pub fn structure_bytes(&self) -> usize {
        self.centroids.len() * 4 + self.lists.iter().map(|l| l.len() * 4).sum::<usize>()
    }

    /// Exact top-`k` within the `nprobe` lists whose centroids score highest.
    /// `scanned` counts the unmasked members of the probed lists.
    pub fn search(
        &self,
        q: &[f32],
        k: usize,
        nprobe: usize,
        mask: Option<&IdMask>,
    ) -> Result<SearchResult> {
        if q.len() != self.keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.keys.dim(),
                got: q.len(),
            });
        }
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::spec("nprobe", format!("{nprobe} not in 1..={}", self.nlist())));
        }
        if k == 0 {
            return Err(Error::KOutOfRange { k, max: self.keys.len() });
        }
        let mut order: Vec<(f32, usize)> =
            (0..self.nlist()).map(|c| (dot(q, self.centroid(c)), c)).collect();
        if nprobe < order.len() {
            order.select_nth_unstable_by(nprobe - 1, |a, b| rank_order(*a, *b));
            order.truncate(nprobe);
        }
        let mut top = TopK::new(k);
        let mut scanned = 0;
        for &(_, c) in &order {
            for &id in &self.lists[c] {
                let id = id as usize;
                if is_masked(mask, id) {
                    continue;
                }
                scanned += 1;
                top.push(dot(q, self.keys.row(id)), id);
            }
        }
        Ok(SearchResult::from_topk(top, k, scanned))
    }
}

fn kmeans_pp(keys: &VectorSet, nlist: usize, seed: u64) -> Vec<f32> {
    let n = keys.len();
    let d = keys.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(nlist * d);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(keys.row(first));
    let mut nearest: Vec<f64> = keys
        .rows()
        .map(|r| squared_l2(r, keys.row(first)) as f64)
        .collect();
    for _ in 1..nlist {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a chosen centroid
            chosen.iter().position(|c| !c).expect("nlist <= n")
        };
        chosen[pick] = true;
        let c = keys.row(pick);
        centroids.extend_from_slice(c);
        nearest
            .par_iter_mut()
            .zip(keys.as_slice().par_chunks_exact(d))
            .for_each(|(best, r)| *best = best.min(squared_l2(r, c) as f64));
    }
    centroids
}

fn assign_all(keys: &VectorSet, centroids: &[f32]) -> Vec<u32> {
    let d = keys.dim();
    let norms: Vec<f32> = centroids.chunks_exact(d).map(|c| dot(c, c)).collect();
    keys.as_slice()
        .par_chunks_exact(d)
        .map(|x| {
            // argmin ‖x − c‖² = argmin ‖c‖² − 2 x·c
            let mut best = (f32::INFINITY, 0u32);
            for (j, (c, norm)) in centroids.chunks_exact(d).zip(&norms).enumerate() {
                let dist = norm - 2.0 * dot(x, c);
                if dist < best.0 {
                    best = (dist, j as u32);
                }
            }
            best.1
        })
        .collect()
}

fn reseed_empty(keys: &VectorSet, centroids: &[f32], assign: &mut [u32], nlist: usize) {
    let d = keys.dim();
    let mut sizes = vec![0usize; nlist];
    for &c in assign.iter() {
        sizes[c as usize] += 1;
    }
    for empty in 0..nlist {
        if sizes[empty] > 0 {
            continue;
        }
        let largest = (0..nlist)
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("nlist >= 1");
        if sizes[largest] < 2 {
            break;
        }
        let centre = &centroids[largest * d..(largest + 1) * d];
        let mut far = (f32::NEG_INFINITY, usize::MAX);
        for (i, &c) in assign.iter().enumerate() {
            if c as usize == largest {
                let dist = squared_l2(keys.row(i), centre);
                if dist > far.0 {
                    far = (dist, i);
                }
            }
        }
        assign[far.1] = empty as u32;
        sizes[largest] -= 1;
        sizes[empty] = 1;
    }
}

fn update_centroids(keys: &VectorSet, assign: &[u32], nlist: usize, d: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; nlist * d];
    let mut counts = vec![0usize; nlist];
    for (row, &c) in keys.rows().zip(assign) {
        let c = c as usize;
        counts[c] += 1;
        for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
            *s += x as f64;
        }
    }
    sums.chunks_exact(d)
        .zip(&counts)
        .flat_map(|(s, &cnt)| s.iter().map(move |x| (x / cnt.max(1) as f64) as f32))
        .collect()
}
