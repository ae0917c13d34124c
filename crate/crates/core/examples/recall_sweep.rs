//! Recall against scan fraction for IVF and the graph, as CSV on stdout.

use attnindex::diagnostics::recall_sweep;
use attnindex::index::{IndexConfig, IndexKind};
use attnindex::vecstore::{generate_workload, WorkloadSpec};

fn main() -> attnindex::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16384);
    let h = generate_workload(&WorkloadSpec::new(n, 1))?.remove(0);
    let mut report = recall_sweep(&h, &IndexConfig::of(IndexKind::Ivf), &[4, 8, 16, 32, 64], 100, 1)?;
    report.extend(recall_sweep(&h, &IndexConfig::of(IndexKind::OodGraph), &[100, 128, 160, 200, 256], 100, 1)?);
    print!("{}", report.to_csv());
    for kind in [IndexKind::Ivf, IndexKind::OodGraph] {
        match report.min_scan_at_recall(kind, 0.95) {
            Some(r) => eprintln!("{kind}: recall 0.95 at {:.2}% scanned", 100.0 * r.scan_fraction),
            None => eprintln!("{kind}: recall 0.95 not reached"),
        }
    }
    Ok(())
}
