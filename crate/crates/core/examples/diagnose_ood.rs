//! How far queries sit from the key distribution, with and without the
//! query/key projection gap.

use attnindex::diagnostics::mahalanobis_gap;
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    for strength in [0.0, 2.0, 8.0] {
        let mut spec = WorkloadSpec::new(16384, 1);
        spec.ood_strength = strength;
        let h = generate_workload(&spec)?.remove(0);
        let gap = mahalanobis_gap(&h.prefill_queries, &h.keys, 5000, 1)?;
        println!(
            "ood_strength {strength:3}: query->keys {:7.2}, key->keys {:6.2}, ratio {:.2}",
            gap.q_to_k_mean, gap.k_to_k_mean, gap.ratio
        );
    }
    Ok(())
}
