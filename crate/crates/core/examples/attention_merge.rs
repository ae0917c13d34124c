//! Attention over a resident window plus retrieved keys, merged exactly.

use attnindex::attention::{
    full_attention_f64, merge, merge_weights, mse, partial_attention, static_partition, topk_among,
};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let h = generate_workload(&WorkloadSpec::new(8192, 3))?.remove(0);
    let part = static_partition(h.n_ctx(), 128, 512);
    let q = h.decode_queries.row(0);
    let exact = full_attention_f64(q, &h.keys, &h.values)?;

    for k in [10, 100, 1000] {
        let omega = topk_among(q, &h.keys, &part.dynamic_pool, k)?;
        let pw = partial_attention(q, &h.keys, &h.values, &part.static_set)?;
        let po = partial_attention(q, &h.keys, &h.values, &omega)?;
        let (g1, g2) = merge_weights(&pw, &po);
        let out = merge(&pw, &po)?;
        println!("|Ω| = {k:4}: γ1 = {g1:.4}, γ2 = {g2:.4}, mse vs full = {:.3e}", mse(&out, &exact));
    }
    Ok(())
}
