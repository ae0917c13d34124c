//! Checks the generator's defaults: attention concentration, error of top-k
//! attention and the query/key gap across strengths and seeds.
//!
//! cargo run --release --example calibrate -- 65536

use attnindex::attention::AttentionScores;
use attnindex::diagnostics::{mahalanobis_gap, mse_sweep};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16384);
    for (strength, seed) in [(8.0, 1u64), (8.0, 2), (2.0, 7), (0.0, 1)] {
        let mut spec = WorkloadSpec::new(n, seed);
        spec.ood_strength = strength;
        let h = generate_workload(&spec)?.remove(0);
        let gap = mahalanobis_gap(&h.prefill_queries, &h.keys, 5000.min(n / 2), seed)?;
        let top = n / 1000;
        let mass: f64 = h
            .decode_queries
            .rows()
            .take(32)
            .map(|q| AttentionScores::full(q, &h.keys).map(|s| s.top_mass(top.max(1))))
            .sum::<Result<f64, _>>()?
            / 32.0;
        println!("strength {strength} seed {seed}: gap ratio {:.2}, top-{top} mass {mass:.3}", gap.ratio);
    }
    let h = generate_workload(&WorkloadSpec::new(n, 1))?.remove(0);
    for r in mse_sweep(&h.keys, &h.values, &h.decode_queries, &[4, 16, 36, 100, 128, 500])? {
        println!("k {:4}: mse {:.2e}", r.k, r.mean_mse);
    }
    Ok(())
}
