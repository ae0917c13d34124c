//! Sparse decode over four heads sharing two kv groups.

use attnindex::engine::{decode_run, engine_init, memory_report, DecodeOptions, EngineConfig};
use attnindex::index::{IndexConfig, IndexKind};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let mut spec = WorkloadSpec::new(8192, 2);
    spec.n_heads = 4;
    spec.n_kv_groups = 2;
    spec.n_decode = 16;
    let heads = generate_workload(&spec)?;

    for kind in [IndexKind::Flat, IndexKind::Ivf, IndexKind::OodGraph] {
        let config = EngineConfig {
            index: IndexConfig::of(kind),
            ..Default::default()
        };
        let state = engine_init(&heads, &config)?;
        let opts = DecodeOptions {
            reference: true,
            record_omega: false,
            verify: true,
        };
        let run = decode_run(&state, 16, opts)?;
        let s = &run.summary;
        println!(
            "{kind:9}: mean mse {:.2e}, scanned {:.2}% of pool, {} violations",
            s.mean_mse.unwrap_or(f64::NAN),
            100.0 * s.mean_scan_fraction,
            s.violations.len()
        );
        if kind == IndexKind::OodGraph {
            println!("{}", serde_json::to_string_pretty(&memory_report(&state))?);
        }
    }
    Ok(())
}
