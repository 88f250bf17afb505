//! Monte Carlo estimators built on the path engine.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::path::{path_rng, PathRecord, PathSimulator, SimConfig, StartPoint};
use super::policy::{ControlPolicy, FeedbackPolicy};
use crate::error::{Error, Result};
use crate::model::ProblemSpec;

/// Sum with `O(log n)` rounding growth and a fixed association order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub std_dev: f64,
    pub n_paths: usize,
    pub censored_fraction: f64,
    /// Mean stopping time (exit or censoring).
    pub mean_stop_time: f64,
    pub mean_switches: f64,
    pub max_rate: f64,
    pub rate_cap: f64,
    pub guard_hits: usize,
    /// Censoring above 1% of paths.
    pub heavy_censoring: bool,
}

/// Summary of one path kept by the estimators.
#[derive(Debug, Clone, Copy)]
struct PathSummary {
    cost: f64,
    censored: bool,
    stop: f64,
    switches: usize,
    max_rate: f64,
    guard_hits: usize,
}

impl From<&PathRecord> for PathSummary {
    fn from(r: &PathRecord) -> Self {
        Self {
            cost: r.total(),
            censored: r.censored,
            stop: r.stop_time,
            switches: r.switches,
            max_rate: r.max_rate,
            guard_hits: r.guard_hits,
        }
    }
}

fn summarize(paths: &[PathSummary], rate_cap: f64) -> CostEstimate {
    let n = paths.len();
    let costs: Vec<f64> = paths.iter().map(|p| p.cost).collect();
    // A degenerate sample keeps its exact value instead of a rounded mean.
    let constant = !costs.is_empty() && costs.windows(2).all(|w| w[0] == w[1]);
    let mean = if constant {
        costs[0]
    } else {
        pairwise_sum(&costs) / n as f64
    };
    let dev: Vec<f64> = costs.iter().map(|c| (c - mean) * (c - mean)).collect();
    let var = if n > 1 && !constant {
        pairwise_sum(&dev) / (n - 1) as f64
    } else {
        0.0
    };
    let std_dev = var.sqrt();
    let censored = paths.iter().filter(|p| p.censored).count();
    let stops: Vec<f64> = paths.iter().map(|p| p.stop).collect();
    CostEstimate {
        mean,
        std_error: std_dev / (n as f64).sqrt(),
        std_dev,
        n_paths: n,
        censored_fraction: censored as f64 / n as f64,
        mean_stop_time: pairwise_sum(&stops) / n as f64,
        mean_switches: paths.iter().map(|p| p.switches as f64).sum::<f64>() / n as f64,
        max_rate: paths.iter().fold(0.0, |a, p| a.max(p.max_rate)),
        rate_cap,
        guard_hits: paths.iter().map(|p| p.guard_hits).sum(),
        heavy_censoring: censored as f64 > 0.01 * n as f64,
    }
}

/// Estimates the expected discounted cost of `policy` from `start` with
/// `cfg.n_paths` independent paths. Paths run in parallel, each on its own
/// random stream, and are reduced in index order.
pub fn estimate_value<P: ControlPolicy + ?Sized>(
    spec: &ProblemSpec,
    policy: &P,
    cfg: &SimConfig,
    start: &StartPoint,
) -> Result<CostEstimate> {
    let sim = PathSimulator::new(spec, policy, cfg)?;
    let paths = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| sim.run(start, i, false).map(|r| PathSummary::from(&r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(
        &paths,
        policy.rate_cap().min(cfg.zeta_cap.unwrap_or(f64::INFINITY)),
    ))
}

/// Full records, events included, of the first `count` paths.
pub fn sample_paths<P: ControlPolicy + ?Sized>(
    spec: &ProblemSpec,
    policy: &P,
    cfg: &SimConfig,
    start: &StartPoint,
    count: usize,
) -> Result<Vec<PathRecord>> {
    let sim = PathSimulator::new(spec, policy, cfg)?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| sim.run(start, i, true))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub probe_time: f64,
    pub target: f64,
    pub estimate: CostEstimate,
    pub difference: f64,
    pub z_score: f64,
    pub passed: bool,
}

/// Compares `u^ε(x₀)` with the mean of the cost accrued up to `t ∧ τ` plus
/// the discounted continuation value `e^{−r(t)} u^ε(X_t)` on paths still
/// inside at `t`. Passes when `|z| ≤ 3`.
pub fn martingale_check<P: ControlPolicy + ?Sized>(
    spec: &ProblemSpec,
    policy: &P,
    cfg: &SimConfig,
    start: &StartPoint,
    probe_time: f64,
) -> Result<MartingaleReport> {
    let target = policy
        .continuation_value(&start.x, start.regime, start.state)
        .ok_or_else(|| Error::InvalidConfig("the policy carries no value function".into()))?;
    let mut probe = cfg.clone();
    probe.horizon_cap = Some(probe_time);
    let estimate = estimate_value(spec, policy, &probe, start)?;
    let difference = estimate.mean - target;
    let z_score = if estimate.std_error > 0.0 {
        difference / estimate.std_error
    } else if difference.abs() <= 1e-12 * (1.0 + target.abs()) {
        0.0
    } else {
        difference.signum() * f64::INFINITY
    };
    Ok(MartingaleReport {
        probe_time,
        target,
        estimate,
        difference,
        z_score,
        passed: z_score.abs() <= 3.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub base_tol: f64,
    pub base: CostEstimate,
    pub loose_tol: f64,
    pub loose: CostEstimate,
    pub difference: f64,
    pub combined_std_error: f64,
}

/// Re-estimates the cost with the switching tolerance multiplied by 100.
pub fn tolerance_sensitivity(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    cfg: &SimConfig,
    start: &StartPoint,
) -> Result<SensitivityReport> {
    let base = estimate_value(spec, policy, cfg, start)?;
    let loose_tol = 100.0 * policy.tol_switch();
    let loose_policy = policy.clone().with_tol_switch(loose_tol);
    let loose = estimate_value(spec, &loose_policy, cfg, start)?;
    Ok(SensitivityReport {
        base_tol: policy.tol_switch(),
        difference: loose.mean - base.mean,
        combined_std_error: base.std_error.hypot(loose.std_error),
        base,
        loose_tol,
        loose,
    })
}

/// Rows `(regime, state, node)` covering a random `fraction` of the grid
/// nodes in every block, drawn reproducibly from `seed`.
pub fn random_switch_rows(
    m: usize,
    n: usize,
    nodes: usize,
    fraction: f64,
    seed: u64,
) -> Vec<(usize, usize, usize)> {
    let count = ((fraction * nodes as f64).round() as usize).min(nodes);
    let mut rng = path_rng(seed, u64::MAX);
    let mut rows = Vec::with_capacity(m * n * count);
    for l in 0..m {
        for s in 0..n {
            let mut picked = sample(&mut rng, nodes, count).into_vec();
            picked.sort_unstable();
            rows.extend(picked.into_iter().map(|k| (l, s, k)));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn random_rows_are_reproducible() {
        let a = random_switch_rows(2, 1, 201, 0.05, 4);
        assert_eq!(a, random_switch_rows(2, 1, 201, 0.05, 4));
        assert_eq!(a.len(), 2 * 10);
        assert!(a.iter().all(|&(_, _, k)| k < 201));
    }
}
