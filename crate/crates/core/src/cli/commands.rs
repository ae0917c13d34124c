use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use crate::diagnostics::{
    ground_truth, mahalanobis_gap, mse_rows_csv, mse_sweep, sweep_index, GapReport, MseRow, SweepReport,
};
use crate::engine::{decode_run, engine_init, memory_report, DecodeOptions, MemoryReport};
use crate::index::{IndexConfig, IndexKind, OodGraph, SearchIndex};
use crate::vecstore::{generate_workload, load_workload, save_workload, HeadWorkload, VectorSet};
use crate::{Error, Result};

/// What a command leaves behind: files written plus any failed checks.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub failures: Vec<String>,
}

impl Outcome {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }
}

fn write(out: &mut Outcome, path: PathBuf, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    info!("wrote {}", path.display());
    out.written.push(path);
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// The run's heads: loaded from `input.manifest` if set, generated otherwise.
pub fn load_heads(config: &RunConfig) -> Result<Vec<HeadWorkload>> {
    let t = Instant::now();
    let heads = match (&config.input.manifest, &config.workload) {
        (Some(m), _) => load_workload(m)?,
        (None, Some(spec)) => generate_workload(spec)?,
        (None, None) => return Err(Error::Config("no workload and no input.manifest".into())),
    };
    info!("{} heads ready in {:.2?}", heads.len(), t.elapsed());
    Ok(heads)
}

fn pick_head(heads: &[HeadWorkload], head: usize) -> Result<&HeadWorkload> {
    heads
        .iter()
        .find(|h| h.head_id == head)
        .ok_or_else(|| Error::Config(format!("no head {head} in the workload")))
}

fn first_queries(set: &VectorSet, max: Option<usize>) -> VectorSet {
    match max {
        Some(m) if m < set.len() => set.select(&(0..m).collect::<Vec<_>>()),
        _ => set.clone(),
    }
}

pub fn cmd_gen(config: &RunConfig, verify: bool) -> Result<Outcome> {
    let spec = config
        .workload
        .as_ref()
        .ok_or_else(|| Error::Config("gen needs a workload section".into()))?;
    let heads = generate_workload(spec)?;
    let dir = config.output.dir.join("workload");
    let note = Some(format!(
        "synthetic: seed {}, ood_strength {}, concentration {}",
        spec.seed, spec.ood_strength, spec.concentration
    ));
    let manifest = save_workload(&dir, &heads, note)?;
    println!("{}", manifest.display());
    let mut out = Outcome {
        written: vec![manifest.clone()],
        ..Default::default()
    };
    if verify {
        let back = load_workload(&manifest)?;
        out.check(back.len() == heads.len(), || "reloaded head count differs".into());
        for (a, b) in heads.iter().zip(&back) {
            let same = |x: &VectorSet, y: &VectorSet| {
                x.dim() == y.dim()
                    && x.as_slice().iter().map(|v| v.to_bits()).eq(y.as_slice().iter().map(|v| v.to_bits()))
            };
            out.check(
                same(&a.keys, &b.keys)
                    && same(&a.values, &b.values)
                    && same(&a.prefill_queries, &b.prefill_queries)
                    && same(&a.decode_queries, &b.decode_queries),
                || format!("head {}: reloaded vectors differ", a.head_id),
            );
        }
        let mut groups: Vec<usize> = back.iter().map(|h| h.kv_group_id).collect();
        groups.sort_unstable();
        groups.dedup();
        for g in groups {
            let members: Vec<&HeadWorkload> = back.iter().filter(|h| h.kv_group_id == g).collect();
            out.check(
                members.windows(2).all(|p| Arc::ptr_eq(&p[0].keys, &p[1].keys)),
                || format!("group {g}: heads do not share key storage after reload"),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphSummary {
    pub entry_point: usize,
    pub max_degree: usize,
    pub edges: usize,
    pub reachable: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill_edges: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repair_edges: Option<usize>,
    pub degree_histogram: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadBuild {
    pub head: usize,
    pub kv_group: usize,
    pub n: usize,
    pub structure_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlist: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSummary>,
}

/// Build results. Wall-clock times go to the log only, so the report is
/// identical across thread counts and reruns.
#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub index_kind: IndexKind,
    pub index: IndexConfig,
    pub heads: Vec<HeadBuild>,
    pub memory: MemoryReport,
}

pub fn cmd_build(config: &RunConfig, verify: bool) -> Result<Outcome> {
    let heads = load_heads(config)?;
    let seed = config.engine.seed;
    let built: Vec<SearchIndex> = heads
        .par_iter()
        .map(|h| {
            let t = Instant::now();
            let index = SearchIndex::build(&config.index, h.keys.clone(), &h.prefill_queries, seed)?;
            info!("head {}: {} index built in {:.2?}", h.head_id, index.kind(), t.elapsed());
            Ok(index)
        })
        .collect::<Result<_>>()?;

    let mut out = Outcome::default();
    let dir = config.output.dir.join("index");
    let mut reports = Vec::with_capacity(heads.len());
    for (h, index) in heads.iter().zip(&built) {
        let mut rep = HeadBuild {
            head: h.head_id,
            kv_group: h.kv_group_id,
            n: h.n_ctx(),
            structure_bytes: index.structure_bytes(),
            artifact: None,
            note: None,
            nlist: None,
            graph: None,
        };
        match index {
            SearchIndex::Flat(_) => rep.note = Some("no preprocessing".into()),
            SearchIndex::Ivf { index: ivf, .. } => {
                rep.nlist = Some(ivf.nlist());
                rep.note = Some("not serialized; rebuilt deterministically from the seed".into());
            }
            SearchIndex::OodGraph {
                graph, stats, keys, ..
            } => {
                let name = format!("head{}.oodg", h.head_id);
                let path = dir.join(&name);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                std::fs::write(&path, graph.to_bytes()).map_err(|e| Error::io(&path, e))?;
                out.written.push(path.clone());
                rep.artifact = Some(format!("index/{name}"));
                let reachable = graph.reachable_count();
                rep.graph = Some(GraphSummary {
                    entry_point: graph.entry_point(),
                    max_degree: graph.max_degree(),
                    edges: graph.edge_count(),
                    reachable,
                    fill_edges: stats.as_ref().map(|s| s.fill_edges),
                    repair_edges: stats.as_ref().map(|s| s.repair_edges),
                    degree_histogram: graph.degree_histogram(),
                });
                if verify {
                    verify_graph(&mut out, h, graph, keys, &path, config.index.ood_graph.ef)?;
                }
            }
        }
        reports.push(rep);
    }
    let storage: Vec<_> = heads.iter().map(|h| (&h.keys, &h.values)).collect();
    let memory = MemoryReport::account(&storage, built.iter().map(SearchIndex::structure_bytes).collect());
    let report = BuildReport {
        index_kind: config.index.kind,
        index: config.index.clone(),
        heads: reports,
        memory,
    };
    write(&mut out, config.output.dir.join("build_report.json"), &json(&report)?)?;
    Ok(out)
}

fn verify_graph(
    out: &mut Outcome,
    h: &HeadWorkload,
    graph: &OodGraph,
    keys: &Arc<VectorSet>,
    path: &Path,
    ef: usize,
) -> Result<()> {
    let n = keys.len();
    let tag = format!("head {}", h.head_id);
    out.check(graph.reachable_count() == n, || {
        format!("{tag}: {} of {n} keys reachable", graph.reachable_count())
    });
    out.check(
        (0..graph.len()).all(|u| graph.neighbors(u).len() <= graph.max_degree()),
        || format!("{tag}: degree above {}", graph.max_degree()),
    );
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let loaded = OodGraph::read_from(&bytes[..])?;
    out.check(&loaded == graph, || format!("{tag}: reloaded graph differs"));
    let k = 100.min(n);
    let params = crate::index::OodSearchParams { ef: ef.max(k), k };
    for q in h.decode_queries.rows().take(16) {
        let a = graph.search(keys, q, &params, None)?;
        let b = loaded.search(keys, q, &params, None)?;
        if a != b {
            out.failures.push(format!("{tag}: reloaded graph searches differently"));
            break;
        }
    }
    Ok(())
}

pub fn cmd_sweep(config: &RunConfig, verify: bool) -> Result<Outcome> {
    let heads = load_heads(config)?;
    let s = &config.sweep;
    let head = pick_head(&heads, s.head)?;
    let queries = first_queries(&head.decode_queries, s.max_queries);
    let k = s.k.min(head.n_ctx());
    let t = Instant::now();
    let truth = ground_truth(&head.keys, &queries, k)?;
    info!("ground truth for {} queries in {:.2?}", queries.len(), t.elapsed());

    let mut report = SweepReport::default();
    for &kind in &s.kinds {
        let mut ic = config.index.clone();
        ic.kind = kind;
        let t = Instant::now();
        let index = SearchIndex::build(&ic, head.keys.clone(), &head.prefill_queries, config.engine.seed)?;
        info!("{kind} built in {:.2?}", t.elapsed());
        let grid: Vec<usize> = match &index {
            SearchIndex::Ivf { index: ivf, .. } => {
                let nlist = ivf.nlist();
                let kept: Vec<usize> = s.nprobe_grid.iter().copied().filter(|&p| p >= 1 && p <= nlist).collect();
                if kept.len() < s.nprobe_grid.len() {
                    warn!("dropping nprobe values outside 1..={nlist}");
                }
                kept
            }
            SearchIndex::OodGraph { .. } => {
                // search widens any ef below k to k, so those rows would repeat
                let kept: Vec<usize> = s.ef_grid.iter().copied().filter(|&ef| ef >= k).collect();
                if kept.len() < s.ef_grid.len() {
                    warn!("dropping ef values below k = {k}");
                }
                kept
            }
            SearchIndex::Flat(_) => Vec::new(),
        };
        let t = Instant::now();
        report.extend(sweep_index(&index, &queries, &truth, &grid, k)?);
        info!("{kind} swept in {:.2?}", t.elapsed());
    }

    let mut out = Outcome::default();
    if verify {
        verify_sweep(&mut out, &report);
    }
    let dir = &config.output.dir;
    if config.wants("csv") {
        write(&mut out, dir.join("sweep.csv"), &report.to_csv())?;
    }
    if config.wants("jsonl") {
        write(&mut out, dir.join("sweep.jsonl"), &report.to_jsonl()?)?;
    }
    Ok(out)
}

fn verify_sweep(out: &mut Outcome, report: &SweepReport) {
    for r in &report.rows {
        out.check((0.0..=1.0).contains(&r.recall_at_k), || format!("{} {}: recall {}", r.index_kind, r.param, r.recall_at_k));
        out.check((0.0..=1.0).contains(&r.scan_fraction), || {
            format!("{} {}: scan fraction {}", r.index_kind, r.param, r.scan_fraction)
        });
        if r.index_kind == IndexKind::Flat {
            out.check(r.recall_at_k == 1.0, || format!("flat recall {}", r.recall_at_k));
        }
    }
    let by_param = |kind: IndexKind| {
        let mut rows: Vec<(usize, f64)> = report
            .rows
            .iter()
            .filter(|r| r.index_kind == kind)
            .map(|r| (r.param, r.recall_at_k))
            .collect();
        rows.sort_by_key(|r| r.0);
        rows
    };
    let ivf = by_param(IndexKind::Ivf);
    for w in ivf.windows(2) {
        out.check(w[1].1 >= w[0].1, || format!("ivf recall drops from nprobe {} to {}", w[0].0, w[1].0));
    }
    let graph = by_param(IndexKind::OodGraph);
    let drops: Vec<f64> = graph.windows(2).map(|w| w[0].1 - w[1].1).filter(|&d| d > 0.0).collect();
    out.check(drops.len() <= 1 && drops.iter().all(|&d| d <= 0.005), || {
        format!("graph recall is not monotone in ef (drops {drops:?})")
    });
}

pub fn cmd_decode(config: &RunConfig, verify: bool) -> Result<Outcome> {
    let heads = load_heads(config)?;
    let t = Instant::now();
    let state = engine_init(&heads, &config.engine_config())?;
    info!("engine ready in {:.2?}", t.elapsed());
    let opts = DecodeOptions {
        reference: config.engine.reference,
        record_omega: config.engine.record_omega,
        verify,
    };
    let t = Instant::now();
    let run = decode_run(&state, config.engine.steps, opts)?;
    info!("{} steps in {:.2?}", config.engine.steps, t.elapsed());

    #[derive(Serialize)]
    struct Summary<'a> {
        index_kind: IndexKind,
        #[serde(flatten)]
        summary: &'a crate::engine::DecodeSummary,
        memory: MemoryReport,
    }
    let mut out = Outcome {
        failures: run.summary.violations.clone(),
        ..Default::default()
    };
    let dir = &config.output.dir;
    write(&mut out, dir.join("decode_trace.jsonl"), &run.trace_jsonl()?)?;
    let summary = Summary {
        index_kind: state.index_kind(),
        summary: &run.summary,
        memory: memory_report(&state),
    };
    write(&mut out, dir.join("decode_summary.json"), &json(&summary)?)?;
    Ok(out)
}

pub fn cmd_diagnose(config: &RunConfig, verify: bool) -> Result<Outcome> {
    let heads = load_heads(config)?;
    let dg = &config.diagnose;
    let head = pick_head(&heads, dg.head)?;
    let mut out = Outcome::default();
    let dir = &config.output.dir;

    // keep at least half the keys for fitting the reference model
    let sample = dg.sample.min(head.prefill_queries.len()).min(head.n_ctx() / 2);
    if sample < dg.sample {
        warn!("Mahalanobis sample reduced from {} to {sample}", dg.sample);
    }
    let t = Instant::now();
    let gap: GapReport = mahalanobis_gap(&head.prefill_queries, &head.keys, sample, dg.seed)?;
    info!("Mahalanobis gap {:.3} in {:.2?}", gap.ratio, t.elapsed());
    write(&mut out, dir.join("gap.json"), &json(&gap)?)?;

    let queries = first_queries(&head.decode_queries, dg.max_queries);
    let grid: Vec<usize> = dg.mse_grid.iter().copied().filter(|&k| k >= 1 && k <= head.n_ctx()).collect();
    let t = Instant::now();
    let rows: Vec<MseRow> = mse_sweep(&head.keys, &head.values, &queries, &grid)?;
    info!("mse sweep in {:.2?}", t.elapsed());
    if config.wants("csv") {
        write(&mut out, dir.join("mse_sweep.csv"), &mse_rows_csv(&rows))?;
    }
    if config.wants("jsonl") {
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write(&mut out, dir.join("mse_sweep.jsonl"), &text)?;
    }
    if verify {
        out.check(gap.ratio.is_finite() && gap.ratio > 0.0, || format!("gap ratio {}", gap.ratio));
        for w in rows.windows(2) {
            out.check(w[1].mean_mse <= w[0].mean_mse + 1e-12, || {
                format!("mse rises from k={} to k={}", w[0].k, w[1].k)
            });
        }
        if let Some(last) = rows.last() {
            out.check(last.mean_mse == 0.0, || format!("mse at k = n is {}", last.mean_mse));
        }
    }
    Ok(out)
}
