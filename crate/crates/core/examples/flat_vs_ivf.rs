//! Exact scan against an inverted file on the same queries.

use attnindex::diagnostics::recall_at_k;
use attnindex::index::{FlatIndex, IvfIndex};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let h = generate_workload(&WorkloadSpec::new(16384, 5))?.remove(0);
    let flat = FlatIndex::build(h.keys.clone())?;
    let ivf = IvfIndex::build(h.keys.clone(), 128, 5, 20)?;
    let queries: Vec<&[f32]> = h.decode_queries.rows().take(64).collect();
    let truth: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| flat.search(q, 100, None).map(|r| r.ids))
        .collect::<Result<_, _>>()?;

    println!("nprobe  recall@100  scanned");
    for nprobe in [1, 4, 16, 32, 64, 128] {
        let (mut recall, mut scanned) = (0.0, 0);
        for (q, t) in queries.iter().zip(&truth) {
            let r = ivf.search(q, 100, nprobe, None)?;
            recall += recall_at_k(&r.ids, t);
            scanned += r.scanned;
        }
        let m = queries.len();
        println!(
            "{nprobe:6}  {:10.3}  {:6.2}%",
            recall / m as f64,
            100.0 * scanned as f64 / (m * h.n_ctx()) as f64
        );
    }
    Ok(())
}
