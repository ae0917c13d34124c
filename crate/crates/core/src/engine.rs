//! Decode loop over a statically partitioned KV cache.
//!
//! Each head keeps the first `s_init` and last `s_local` tokens resident
//! (`W`) and retrieves up to `top_k` more (`Ω`) from its index, with `W`
//! masked out of the search. Attention is computed separately over `W` and
//! `Ω` and merged exactly. Heads of one kv group share key/value storage but
//! each query head owns an index trained on its own prefill queries.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    full_attention_f64, merge_weights, merge_f64, mse, partial_attention, static_partition,
    KVPartition, PartialAttention,
};
use crate::index::{IdMask, IndexConfig, IndexKind, SearchIndex};
use crate::vecstore::{HeadWorkload, VectorSet};
use crate::{Error, Result};

/// How the resident set `W` is chosen. Only the fixed initial-plus-local
/// pattern exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternStrategy {
    #[default]
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "defaults::s_init")]
    pub s_init: usize,
    #[serde(default = "defaults::s_local")]
    pub s_local: usize,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub pattern: PatternStrategy,
    #[serde(default = "defaults::index")]
    pub index: IndexConfig,
    /// Worker threads for callers that size a pool from the config; 0 leaves
    /// the choice to rayon.
    #[serde(default)]
    pub n_threads: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn s_init() -> usize {
        128
    }
    pub fn s_local() -> usize {
        512
    }
    pub fn top_k() -> usize {
        100
    }
    pub fn index() -> crate::index::IndexConfig {
        crate::index::IndexConfig::of(crate::index::IndexKind::OodGraph)
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            s_init: defaults::s_init(),
            s_local: defaults::s_local(),
            top_k: defaults::top_k(),
            pattern: PatternStrategy::Static,
            index: defaults::index(),
            n_threads: 0,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::spec("top_k", "must be at least 1"));
        }
        Ok(())
    }
}

/// One query head's view of the engine.
#[derive(Debug)]
pub struct HeadState {
    pub head_id: usize,
    pub kv_group_id: usize,
    pub keys: Arc<VectorSet>,
    pub values: Arc<VectorSet>,
    pub partition: KVPartition,
    mask: IdMask,
    /// `None` when the resident set already covers the context.
    index: Option<SearchIndex>,
    decode_queries: VectorSet,
}

impl HeadState {
    pub fn index(&self) -> Option<&SearchIndex> {
        self.index.as_ref()
    }

    pub fn mask(&self) -> &IdMask {
        &self.mask
    }

    pub fn decode_queries(&self) -> &VectorSet {
        &self.decode_queries
    }
}

#[derive(Debug)]
pub struct EngineState {
    pub config: EngineConfig,
    pub heads: Vec<HeadState>,
}

/// Builds every head's partition and index. Heads are built in parallel;
/// the result does not depend on the thread count.
pub fn engine_init(workloads: &[HeadWorkload], config: &EngineConfig) -> Result<EngineState> {
    config.validate()?;
    let first = workloads
        .first()
        .ok_or_else(|| Error::spec("workloads", "need at least one head"))?;
    let t = first.n_ctx();
    if t == 0 {
        return Err(Error::EmptyContext);
    }
    if let Some(w) = workloads.iter().find(|w| w.n_ctx() != t) {
        return Err(Error::spec(
            "workloads",
            format!("head {} has {} tokens, head {} has {t}", w.head_id, w.n_ctx(), first.head_id),
        ));
    }
    let heads = workloads
        .par_iter()
        .map(|w| {
            let partition = static_partition(t, config.s_init, config.s_local);
            let mask = IdMask::from_ids(t, &partition.static_set)?;
            let index = if partition.dynamic_pool.is_empty() {
                None
            } else {
                Some(SearchIndex::build(&config.index, w.keys.clone(), &w.prefill_queries, config.seed)?)
            };
            Ok(HeadState {
                head_id: w.head_id,
                kv_group_id: w.kv_group_id,
                keys: w.keys.clone(),
                values: w.values.clone(),
                partition,
                mask,
                index,
                decode_queries: w.decode_queries.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EngineState {
        config: config.clone(),
        heads,
    })
}

/// Switches for a decode run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Compute full attention per step and report the error against it.
    pub reference: bool,
    /// Keep the retrieved ids in the trace.
    pub record_omega: bool,
    /// Audit every step (merge weights, disjointness, partition) and collect
    /// violations instead of trusting the invariants.
    pub verify: bool,
}

/// One (step, head) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub head: usize,
    pub w_len: usize,
    pub omega_len: usize,
    pub scanned: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_ids: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip)]
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    /// One output vector per head, in head order.
    pub outputs: Vec<Vec<f32>>,
    pub entries: Vec<TraceEntry>,
    pub violations: Vec<String>,
}

/// Runs one decode step. `queries[h]` is the query for `state.heads[h]`.
pub fn decode_step(
    state: &EngineState,
    step: usize,
    queries: &[&[f32]],
    opts: DecodeOptions,
) -> Result<StepOutput> {
    if queries.len() != state.heads.len() {
        return Err(Error::spec(
            "queries",
            format!("{} queries for {} heads", queries.len(), state.heads.len()),
        ));
    }
    let per_head: Vec<(TraceEntry, Vec<String>)> = state
        .heads
        .par_iter()
        .zip(queries.par_iter())
        .map(|(head, q)| head_step(state, head, step, q, opts))
        .collect::<Result<_>>()?;
    let mut out = StepOutput {
        outputs: Vec::with_capacity(per_head.len()),
        entries: Vec::with_capacity(per_head.len()),
        violations: Vec::new(),
    };
    for (entry, violations) in per_head {
        out.outputs.push(entry.output.clone());
        out.entries.push(entry);
        out.violations.extend(violations);
    }
    Ok(out)
}

fn head_step(
    state: &EngineState,
    head: &HeadState,
    step: usize,
    q: &[f32],
    opts: DecodeOptions,
) -> Result<(TraceEntry, Vec<String>)> {
    let (keys, values) = (&*head.keys, &*head.values);
    if q.len() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: q.len(),
        });
    }
    let w = &head.partition.static_set;
    let pool = head.partition.dynamic_pool.len();
    let (omega, scanned) = match &head.index {
        Some(index) => {
            let r = index.search(q, state.config.top_k.min(pool), Some(&head.mask))?;
            (r.ids, r.scanned)
        }
        None => (Vec::new(), 0),
    };
    let part = |ids: &[usize]| -> Result<PartialAttention> {
        if ids.is_empty() {
            Ok(PartialAttention::empty(values.dim()))
        } else {
            partial_attention(q, keys, values, ids)
        }
    };
    let (pw, po) = (part(w)?, part(&omega)?);
    let merged = merge_f64(&pw, &po)?;
    let output: Vec<f32> = merged.iter().map(|&x| x as f32).collect();

    let mut violations = Vec::new();
    if opts.verify {
        let tag = format!("step {step} head {}", head.head_id);
        if !pw.is_empty() && !po.is_empty() {
            let (g1, g2) = merge_weights(&pw, &po);
            if (g1 + g2 - 1.0).abs() > 1e-6 {
                violations.push(format!("{tag}: merge weights sum to {}", g1 + g2));
            }
        }
        if let Some(&id) = omega.iter().find(|&&id| head.mask.contains(id)) {
            violations.push(format!("{tag}: retrieved id {id} is resident"));
        }
        if omega.len() > state.config.top_k {
            violations.push(format!("{tag}: {} ids retrieved, top_k {}", omega.len(), state.config.top_k));
        }
        let mut sorted = omega.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != omega.len() {
            violations.push(format!("{tag}: duplicate retrieved ids"));
        }
        if head.partition.context_len() != keys.len() || head.mask.count() != w.len() {
            violations.push(format!("{tag}: partition does not cover the context"));
        }
    }
    let mse = if opts.reference {
        Some(mse(&output, &full_attention_f64(q, keys, values)?))
    } else {
        None
    };
    let entry = TraceEntry {
        step,
        head: head.head_id,
        w_len: w.len(),
        omega_len: omega.len(),
        scanned,
        omega_ids: opts.record_omega.then_some(omega),
        mse,
        output,
    };
    Ok((entry, violations))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub steps: usize,
    pub heads: usize,
    /// Mean of `scanned / |dynamic pool|` over (step, head) pairs.
    pub mean_scan_fraction: f64,
    pub mean_omega: f64,
    pub min_omega: usize,
    pub max_omega: usize,
    /// Tokens attended per head and step (`|W| + |Ω|`), averaged.
    pub mean_tokens: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_mse: Option<f64>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeRun {
    pub trace: Vec<TraceEntry>,
    pub summary: DecodeSummary,
}

impl DecodeRun {
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs `n_steps` steps, feeding step `s` the `s`-th decode query of every
/// head.
pub fn decode_run(state: &EngineState, n_steps: usize, opts: DecodeOptions) -> Result<DecodeRun> {
    if let Some(h) = state.heads.iter().find(|h| h.decode_queries.len() < n_steps) {
        return Err(Error::spec(
            "n_steps",
            format!(
                "{n_steps} steps but head {} has {} decode queries",
                h.head_id,
                h.decode_queries.len()
            ),
        ));
    }
    let mut trace = Vec::with_capacity(n_steps * state.heads.len());
    let mut violations = Vec::new();
    for step in 0..n_steps {
        let queries: Vec<&[f32]> = state.heads.iter().map(|h| h.decode_queries.row(step)).collect();
        let out = decode_step(state, step, &queries, opts)?;
        trace.extend(out.entries);
        violations.extend(out.violations);
    }
    let summary = summarize(state, &trace, n_steps, opts, violations);
    Ok(DecodeRun { trace, summary })
}

fn summarize(
    state: &EngineState,
    trace: &[TraceEntry],
    steps: usize,
    opts: DecodeOptions,
    violations: Vec<String>,
) -> DecodeSummary {
    let mut s = DecodeSummary {
        steps,
        heads: state.heads.len(),
        violations,
        ..Default::default()
    };
    if trace.is_empty() {
        if opts.reference {
            s.mean_mse = Some(0.0);
            s.max_mse = Some(0.0);
        }
        return s;
    }
    let m = trace.len() as f64;
    let mut scan = 0.0;
    for (i, e) in trace.iter().enumerate() {
        let pool = state.heads[i % state.heads.len()].partition.dynamic_pool.len();
        if pool > 0 {
            scan += e.scanned as f64 / pool as f64;
        }
    }
    s.mean_scan_fraction = scan / m;
    s.mean_omega = trace.iter().map(|e| e.omega_len as f64).sum::<f64>() / m;
    s.min_omega = trace.iter().map(|e| e.omega_len).min().unwrap_or(0);
    s.max_omega = trace.iter().map(|e| e.omega_len).max().unwrap_or(0);
    s.mean_tokens = trace.iter().map(|e| (e.w_len + e.omega_len) as f64).sum::<f64>() / m;
    if opts.reference {
        let errs: Vec<f64> = trace.iter().filter_map(|e| e.mse).collect();
        s.mean_mse = Some(errs.iter().sum::<f64>() / m);
        s.max_mse = Some(errs.iter().copied().fold(0.0, f64::max));
    }
    s
}

/// Key/value and index memory, with shared kv storage counted once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub heads: usize,
    pub kv_groups: usize,
    /// Key plus value payload bytes, one copy per distinct storage instance.
    pub kv_bytes: usize,
    /// What `kv_bytes` would be with one copy per query head.
    pub kv_bytes_unshared: usize,
    pub index_bytes: usize,
    pub index_bytes_per_head: Vec<usize>,
}

pub fn memory_report(state: &EngineState) -> MemoryReport {
    let storage: Vec<(&Arc<VectorSet>, &Arc<VectorSet>)> =
        state.heads.iter().map(|h| (&h.keys, &h.values)).collect();
    let index_bytes: Vec<usize> = state
        .heads
        .iter()
        .map(|h| h.index.as_ref().map_or(0, SearchIndex::structure_bytes))
        .collect();
    MemoryReport::account(&storage, index_bytes)
}

impl MemoryReport {
    /// Accounts per-head `(keys, values)` storage, counting each distinct
    /// allocation once, plus per-head index bytes.
    pub fn account(storage: &[(&Arc<VectorSet>, &Arc<VectorSet>)], index_bytes_per_head: Vec<usize>) -> Self {
        let mut seen: Vec<*const VectorSet> = Vec::new();
        let mut kv_bytes = 0;
        let mut kv_bytes_unshared = 0;
        let mut groups = 0;
        for (k, v) in storage {
            kv_bytes_unshared += k.payload_bytes() + v.payload_bytes();
            let mut fresh = false;
            for set in [k, v] {
                let ptr = Arc::as_ptr(set);
                if !seen.contains(&ptr) {
                    seen.push(ptr);
                    kv_bytes += set.payload_bytes();
                    fresh = true;
                }
            }
            groups += fresh as usize;
        }
        MemoryReport {
            heads: storage.len(),
            kv_groups: groups,
            kv_bytes,
            kv_bytes_unshared,
            index_bytes: index_bytes_per_head.iter().sum(),
            index_bytes_per_head,
        }
    }
}

impl EngineState {
    pub fn index_kind(&self) -> IndexKind {
        self.config.index.kind
    }
}
