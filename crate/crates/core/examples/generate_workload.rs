//! Generate a small GQA workload, dump it and read it back.
//!
//! cargo run --release --example generate_workload -- /tmp/wl

use attnindex::vecstore::{generate_workload, load_workload, save_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "workload".into());
    let mut spec = WorkloadSpec::new(4096, 7);
    spec.n_heads = 4;
    spec.n_kv_groups = 2;
    let heads = generate_workload(&spec)?;
    let manifest = save_workload(&dir, &heads, Some("example".into()))?;
    let back = load_workload(&manifest)?;
    for h in &back {
        println!(
            "head {} group {}: {} keys x {}, {} prefill / {} decode queries",
            h.head_id,
            h.kv_group_id,
            h.n_ctx(),
            h.d_head(),
            h.prefill_queries.len(),
            h.decode_queries.len()
        );
    }
    println!("manifest: {}", manifest.display());
    Ok(())
}
