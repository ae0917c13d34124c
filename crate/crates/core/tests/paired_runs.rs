use attnindex::diagnostics::mahalanobis_gap;
use attnindex::engine::{decode_run, engine_init, DecodeOptions, EngineConfig};
use attnindex::index::{IndexConfig, IndexKind};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

#[test]
fn weak_projection_gap_still_separates() {
    let mut spec = WorkloadSpec::new(65_536, 7);
    spec.ood_strength = 2.0;
    spec.n_decode = 1;
    let h = generate_workload(&spec).unwrap().remove(0);
    let gap = mahalanobis_gap(&h.prefill_queries, &h.keys, 5000, 7).unwrap();
    assert!(gap.q_to_k_mean >= 2.0 * gap.k_to_k_mean, "{} vs {}", gap.q_to_k_mean, gap.k_to_k_mean);
}

#[test]
fn graph_error_stays_near_flat_at_equal_k() {
    let mut spec = WorkloadSpec::new(16_384, 12);
    spec.n_heads = 2;
    spec.n_decode = 64;
    let heads = generate_workload(&spec).unwrap();
    let opts = DecodeOptions {
        reference: true,
        record_omega: false,
        verify: true,
    };
    let mean_mse = |kind| {
        let config = EngineConfig {
            index: IndexConfig::of(kind),
            ..Default::default()
        };
        let run = decode_run(&engine_init(&heads, &config).unwrap(), 64, opts).unwrap();
        assert!(run.summary.violations.is_empty(), "{:?}", run.summary.violations);
        run.summary.mean_mse.unwrap()
    };
    let flat = mean_mse(IndexKind::Flat);
    let graph = mean_mse(IndexKind::OodGraph);
    assert!(graph <= 10.0 * flat, "graph {graph:e}, flat {flat:e}");
}
