//! Reference attention math.
//!
//! Scores are `z_i = q·k_i / √d`. Everything here accumulates in f64; public
//! outputs are f32 unless the function name says otherwise. A
//! [`PartialAttention`] over one index set carries enough state (local max and
//! local exp-sum) to be merged with another disjoint set without revisiting
//! either, and the merge reproduces attention over the union exactly.

use crate::kernel::{dot, dot_f64, rank_order};
use crate::vecstore::VectorSet;
use crate::{Error, Result};

/// Scaled dot products and their softmax over some index set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub ids: Vec<usize>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
}

impl AttentionScores {
    pub fn compute(q: &[f32], keys: &VectorSet, ids: &[usize]) -> Result<Self> {
        check_query(q, keys)?;
        let scale = 1.0 / (keys.dim() as f64).sqrt();
        let z: Vec<f64> = ids.iter().map(|&i| dot_f64(q, keys.row(i)) * scale).collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut a: Vec<f64> = z.iter().map(|&zi| (zi - zmax).exp()).collect();
        let total: f64 = a.iter().sum();
        a.iter_mut().for_each(|x| *x /= total);
        Ok(AttentionScores {
            ids: ids.to_vec(),
            z,
            a,
        })
    }

    pub fn full(q: &[f32], keys: &VectorSet) -> Result<Self> {
        let ids: Vec<usize> = (0..keys.len()).collect();
        Self::compute(q, keys, &ids)
    }

    /// Total softmax weight held by the `k` largest weights.
    pub fn top_mass(&self, k: usize) -> f64 {
        let mut a = self.a.clone();
        a.sort_by(|x, y| y.total_cmp(x));
        a.iter().take(k).sum()
    }
}

fn check_query(q: &[f32], keys: &VectorSet) -> Result<()> {
    if q.len() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: q.len(),
        });
    }
    Ok(())
}

fn check_kv(q: &[f32], keys: &VectorSet, values: &VectorSet) -> Result<()> {
    check_query(q, keys)?;
    if keys.len() != values.len() {
        return Err(Error::spec(
            "values",
            format!("{} values for {} keys", values.len(), keys.len()),
        ));
    }
    Ok(())
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::InvalidIndices("empty index set".into()));
    }
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::InvalidIndices(format!("index {i} out of range for {n} keys")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidIndices(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

/// Attention restricted to one index set, kept in mergeable form.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    /// Normalized weighted value sum over the set.
    pub out: Vec<f64>,
    /// Largest scaled score in the set.
    pub zmax: f64,
    /// `Σ exp(z_i - zmax)` over the set; zero marks an empty set.
    pub expsum: f64,
}

impl PartialAttention {
    /// The partial result of an empty index set.
    pub fn empty(dv: usize) -> Self {
        PartialAttention {
            out: vec![0.0; dv],
            zmax: f64::NEG_INFINITY,
            expsum: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.expsum == 0.0
    }

    pub fn out_f32(&self) -> Vec<f32> {
        self.out.iter().map(|&x| x as f32).collect()
    }
}

fn attend(q: &[f32], keys: &VectorSet, values: &VectorSet, indices: &[usize]) -> PartialAttention {
    let scale = 1.0 / (keys.dim() as f64).sqrt();
    let z: Vec<f64> = indices
        .iter()
        .map(|&i| dot_f64(q, keys.row(i)) * scale)
        .collect();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0f64; values.dim()];
    let mut expsum = 0.0f64;
    for (&i, &zi) in indices.iter().zip(&z) {
        let w = (zi - zmax).exp();
        expsum += w;
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += w * v as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= expsum);
    PartialAttention { out, zmax, expsum }
}

/// Softmax-weighted value sum over all keys.
pub fn full_attention(q: &[f32], keys: &VectorSet, values: &VectorSet) -> Result<Vec<f32>> {
    Ok(full_partial(q, keys, values)?.out_f32())
}

/// [`full_attention`] without the final rounding to f32.
pub fn full_attention_f64(q: &[f32], keys: &VectorSet, values: &VectorSet) -> Result<Vec<f64>> {
    Ok(full_partial(q, keys, values)?.out)
}

fn full_partial(q: &[f32], keys: &VectorSet, values: &VectorSet) -> Result<PartialAttention> {
    check_kv(q, keys, values)?;
    if keys.is_empty() {
        return Err(Error::EmptyContext);
    }
    let all: Vec<usize> = (0..keys.len()).collect();
    Ok(attend(q, keys, values, &all))
}

/// Attention with the softmax renormalized over `indices` only.
pub fn sparse_attention(
    q: &[f32],
    keys: &VectorSet,
    values: &VectorSet,
    indices: &[usize],
) -> Result<Vec<f32>> {
    Ok(partial_attention(q, keys, values, indices)?.out_f32())
}

pub fn partial_attention(
    q: &[f32],
    keys: &VectorSet,
    values: &VectorSet,
    indices: &[usize],
) -> Result<PartialAttention> {
    check_kv(q, keys, values)?;
    check_indices(indices, keys.len())?;
    Ok(attend(q, keys, values, indices))
}

/// Rescaling factors `(γ1, γ2)` for merging two partials, computed against
/// the reference score `zref`.
pub fn merge_weights_with_reference(
    pw: &PartialAttention,
    po: &PartialAttention,
    zref: f64,
) -> (f64, f64) {
    let mass = |p: &PartialAttention| {
        if p.is_empty() {
            0.0
        } else {
            (p.zmax - zref).exp() * p.expsum
        }
    };
    let (mw, mo) = (mass(pw), mass(po));
    let total = mw + mo;
    (mw / total, mo / total)
}

/// Rescaling factors with the reference fixed at the larger local maximum.
pub fn merge_weights(pw: &PartialAttention, po: &PartialAttention) -> (f64, f64) {
    merge_weights_with_reference(pw, po, pw.zmax.max(po.zmax))
}

/// Combines partials over two disjoint index sets of the same query into
/// attention over their union. An empty side contributes nothing.
pub fn merge_f64(pw: &PartialAttention, po: &PartialAttention) -> Result<Vec<f64>> {
    match (pw.is_empty(), po.is_empty()) {
        (true, true) => Err(Error::EmptySupport),
        (false, true) => Ok(pw.out.clone()),
        (true, false) => Ok(po.out.clone()),
        (false, false) => {
            if pw.out.len() != po.out.len() {
                return Err(Error::DimensionMismatch {
                    expected: pw.out.len(),
                    got: po.out.len(),
                });
            }
            let (g1, g2) = merge_weights(pw, po);
            debug_assert!((g1 + g2 - 1.0).abs() <= 1e-6, "γ1 + γ2 = {}", g1 + g2);
            Ok(pw
                .out
                .iter()
                .zip(&po.out)
                .map(|(w, o)| g1 * w + g2 * o)
                .collect())
        }
    }
}

pub fn merge(pw: &PartialAttention, po: &PartialAttention) -> Result<Vec<f32>> {
    Ok(merge_f64(pw, po)?.into_iter().map(|x| x as f32).collect())
}

/// The `k` keys with the largest raw inner product with `q`, best first,
/// lower index first on ties.
pub fn topk_oracle(q: &[f32], keys: &VectorSet, k: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..keys.len()).collect();
    topk_among(q, keys, &all, k)
}

/// [`topk_oracle`] restricted to `candidates`.
pub fn topk_among(q: &[f32], keys: &VectorSet, candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    check_query(q, keys)?;
    if k == 0 || k > candidates.len() {
        return Err(Error::KOutOfRange {
            k,
            max: candidates.len(),
        });
    }
    let mut scored: Vec<(f32, usize)> = candidates.iter().map(|&i| (dot(q, keys.row(i)), i)).collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| rank_order(*a, *b));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Statically resident tokens `W` and the retrievable remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KVPartition {
    pub static_set: Vec<usize>,
    pub dynamic_pool: Vec<usize>,
}

impl KVPartition {
    pub fn context_len(&self) -> usize {
        self.static_set.len() + self.dynamic_pool.len()
    }
}

/// First `s_init` tokens plus the last `s_local` tokens stay resident; the
/// rest form the dynamic pool.
pub fn static_partition(t: usize, s_init: usize, s_local: usize) -> KVPartition {
    let init_end = s_init.min(t);
    let local_start = t.saturating_sub(s_local).max(init_end);
    KVPartition {
        static_set: (0..init_end).chain(local_start..t).collect(),
        dynamic_pool: (init_end..local_start).collect(),
    }
}

/// Mean squared difference over dimensions.
pub fn mse<A, B>(approx: &[A], exact: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    assert_eq!(approx.len(), exact.len(), "mse over unequal dimensions");
    if approx.is_empty() {
        return 0.0;
    }
    approx
        .iter()
        .zip(exact)
        .map(|(&a, &e)| {
            let diff = a.into() - e.into();
            diff * diff
        })
        .sum::<f64>()
        / approx.len() as f64
}
