//! Build the query-guided key graph, save it, reload it and search.

use std::time::Instant;

use attnindex::diagnostics::recall_at_k;
use attnindex::index::{FlatIndex, OodGraph, OodGraphBuildParams, OodSearchParams};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let h = generate_workload(&WorkloadSpec::new(16384, 9))?.remove(0);
    let t = Instant::now();
    let (graph, stats) = OodGraph::build_with_stats(&h.keys, &h.prefill_queries, &OodGraphBuildParams::default())?;
    println!(
        "built in {:.1?}: {} edges, {} from fill, {} from repair, entry {}",
        t.elapsed(),
        stats.edges,
        stats.fill_edges,
        stats.repair_edges,
        stats.entry_point
    );
    println!("reachable: {} of {}", graph.reachable_count(), graph.len());

    let bytes = graph.to_bytes();
    let graph = OodGraph::read_from(&bytes[..])?;
    println!("serialized: {} bytes", bytes.len());

    let flat = FlatIndex::build(h.keys.clone())?;
    for ef in [100, 200] {
        let params = OodSearchParams { ef, k: 100 };
        let (mut recall, mut scanned) = (0.0, 0);
        let m = 64;
        for q in h.decode_queries.rows().take(m) {
            let r = graph.search(&h.keys, q, &params, None)?;
            recall += recall_at_k(&r.ids, &flat.search(q, 100, None)?.ids);
            scanned += r.scanned;
        }
        println!(
            "ef {ef}: recall@100 {:.3}, scanned {:.2}%",
            recall / m as f64,
            100.0 * scanned as f64 / (m * h.n_ctx()) as f64
        );
    }
    Ok(())
}
