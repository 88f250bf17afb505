//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use switchgrad::limits::{default_tol_switch, extract_regions};
use switchgrad::simulate::FeedbackPolicy;
use switchgrad::{load_instance, Grid, Instance, NpdsConfig, NpdsSolver};

/// Loads one of the bundled instances by file name.
pub fn bundled(name: &str) -> Instance {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "instances", name]
        .iter()
        .collect();
    load_instance(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Solves `inst` once at `(eps, delta)` on an `n`-point grid and wraps the
/// result as a feedback policy.
pub fn policy_for(inst: &Instance, n: usize, eps: f64, delta: f64) -> FeedbackPolicy {
    let grid = Grid::uniform(&inst.spec.domain, n).expect("grid");
    let solver = NpdsSolver::new(&inst.spec, &grid).expect("solver");
    let (u, _) = solver.solve(&NpdsConfig::new(eps, delta)).expect("solve");
    let regions = extract_regions(&solver.disc, &u, default_tol_switch(&u));
    FeedbackPolicy::new(&solver.disc, &u, &regions, eps).expect("policy")
}
