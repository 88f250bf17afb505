//! Continuation `δ → 0` then `ε → 0`, residual checks for the limiting
//! variational inequalities, and extraction of the switching regions.

use serde::{Deserialize, Serialize};

use crate::discretization::{min_switch, Discretization};
use crate::error::{Error, Result};
use crate::export::{csv_document, num};
use crate::grid::{FieldKind, FieldMatrix, GridMeta};
use crate::linalg::{self, CsrBuilder};
use crate::npds::{Method, NpdsConfig, NpdsSolver, SolveReport};
use crate::penalty::Penalty;

pub const DEFAULT_SCHEDULE: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Optional per-stage solver settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOverrides {
    pub damping: Option<f64>,
    pub tol_residual: Option<f64>,
    pub max_outer: Option<usize>,
    pub method: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSchedule {
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub overrides: StageOverrides,
    /// Finish every `δ` sweep by solving the `δ = 0` system exactly.
    #[serde(default = "yes")]
    pub exact_switching: bool,
}

fn yes() -> bool {
    true
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self {
            deltas: DEFAULT_SCHEDULE.to_vec(),
            epsilons: DEFAULT_SCHEDULE.to_vec(),
            overrides: StageOverrides::default(),
            exact_switching: true,
        }
    }
}

impl ContinuationSchedule {
    pub fn check(&self) -> Result<()> {
        for (name, list) in [("deltas", &self.deltas), ("epsilons", &self.epsilons)] {
            if list.is_empty() {
                return Err(Error::InvalidConfig(format!("schedule {name} is empty")));
            }
            if list.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::InvalidConfig(format!(
                    "schedule {name} must lie in (0, 1)"
                )));
            }
            if list.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidConfig(format!(
                    "schedule {name} must be strictly decreasing"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_config(&self, eps: f64, delta: f64) -> NpdsConfig {
        let mut cfg = NpdsConfig::new(eps, delta);
        let o = &self.overrides;
        if let Some(v) = o.damping {
            cfg.damping = v;
        }
        if let Some(v) = o.tol_residual {
            cfg.tol_residual = v;
        }
        if let Some(v) = o.max_outer {
            cfg.max_outer = v;
        }
        if let Some(v) = o.method {
            cfg.method = v;
        }
        cfg
    }
}

/// One solved stage of the continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub eps: f64,
    /// `None` for the exact `δ = 0` solve.
    pub delta: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    /// Sup-norm distance to the previous stage of the same sweep.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub stages: Vec<StageRecord>,
    /// Sup-norm gaps between successive `u^ε` fields.
    pub eps_gaps: Vec<f64>,
}

impl ConvergenceTable {
    /// `δ` gaps of the sweep at `eps`, in schedule order.
    pub fn delta_gaps(&self, eps: f64) -> Vec<f64> {
        self.stages
            .iter()
            .filter(|s| s.eps == eps && s.delta.is_some())
            .filter_map(|s| s.gap)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let rows = self.stages.iter().map(|s| {
            [
                num(s.eps),
                s.delta.map_or("0".to_string(), num),
                s.converged.to_string(),
                s.iterations.to_string(),
                num(s.final_residual),
                s.gap.map_or(String::new(), num),
            ]
        });
        csv_document(
            &[
                "eps",
                "delta",
                "converged",
                "iterations",
                "final_residual",
                "gap",
            ],
            rows,
        )
    }
}

/// Counts how long gaps have failed to decrease; errors after three in a row.
/// A zero gap after a zero gap means the sweep has already converged.
fn check_stall(gaps: &[f64], stage: usize) -> Result<()> {
    let mut run = 0;
    for w in gaps.windows(2) {
        if w[1] >= w[0] && w[1] > 0.0 {
            run += 1;
            if run >= 3 {
                return Err(Error::StalledContinuation {
                    stage,
                    gaps: gaps.to_vec(),
                });
            }
        } else {
            run = 0;
        }
    }
    Ok(())
}

/// Residuals of the `δ → 0` system: `r₁ = [c − L]u + ψ_ε(|∇u|² − g²) − h`
/// and `r₃ = u − Mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pc1Report {
    pub tol_hjb: f64,
    pub max_positive: f64,
    pub max_min_abs: f64,
    pub violations: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaLimit {
    pub u_eps: FieldMatrix,
    pub table: ConvergenceTable,
    pub stage_fields: Vec<FieldMatrix>,
    pub reports: Vec<SolveReport>,
    pub pc1: Pc1Report,
    /// Distance from the last penalized stage to the exact `δ = 0` solution.
    pub tail_gap: Option<f64>,
}

/// Default HJB tolerance `max(1e−4, 5Δ)`.
pub fn default_tol_hjb(disc: &Discretization) -> f64 {
    (5.0 * disc.grid.max_spacing()).max(1e-4)
}

/// Default switching tolerance `1e−6 (1 + ‖u‖∞)`.
pub fn default_tol_switch(u: &FieldMatrix) -> f64 {
    1e-6 * (1.0 + u.sup_norm())
}

/// Called after every completed stage with its record and field.
pub type StageObserver<'a> = &'a mut dyn FnMut(&StageRecord, &FieldMatrix);

/// Runs the `δ` sweep at fixed `eps`, warm-starting each stage.
pub fn run_delta_limit(
    solver: &NpdsSolver,
    eps: f64,
    schedule: &ContinuationSchedule,
    initial: Option<FieldMatrix>,
) -> Result<DeltaLimit> {
    delta_sweep(solver, eps, schedule, initial, &mut |_, _| {})
}

fn delta_sweep(
    solver: &NpdsSolver,
    eps: f64,
    schedule: &ContinuationSchedule,
    initial: Option<FieldMatrix>,
    observe: StageObserver,
) -> Result<DeltaLimit> {
    schedule.check()?;
    let mut table = ConvergenceTable::default();
    let mut stage_fields: Vec<FieldMatrix> = Vec::new();
    let mut reports = Vec::new();
    let mut gaps = Vec::new();
    let mut current = initial;
    for (i, &delta) in schedule.deltas.iter().enumerate() {
        let mut cfg = schedule.stage_config(eps, delta);
        cfg.initial = current.take();
        let (u, rep) = solver.solve(&cfg)?;
        let gap = stage_fields.last().map(|prev| prev.sup_diff(&u));
        let record = StageRecord {
            eps,
            delta: Some(delta),
            converged: rep.converged,
            iterations: rep.outer_iterations,
            final_residual: rep.final_residual_sup,
            gap,
        };
        observe(&record, &u);
        if let Some(g) = gap {
            gaps.push(g);
            check_stall(&gaps, i)?;
        }
        table.stages.push(record);
        current = Some(u.clone());
        stage_fields.push(u);
        reports.push(rep);
    }
    let last = current.expect("schedule is non-empty");
    let (u_eps, tail_gap) = if schedule.exact_switching {
        let cfg = schedule.stage_config(eps, *schedule.deltas.last().unwrap());
        let tol = solver.tolerance(&cfg);
        let (u, iterations, res) = solve_exact_switching(solver, eps, &last, tol, cfg.max_outer)?;
        let gap = last.sup_diff(&u);
        let record = StageRecord {
            eps,
            delta: None,
            converged: res <= tol,
            iterations,
            final_residual: res,
            gap: Some(gap),
        };
        observe(&record, &u);
        table.stages.push(record);
        (u, Some(gap))
    } else {
        (last, None)
    };
    let u_eps = u_eps.with_kind(FieldKind::EpsLimit { eps });
    let pc1 = pc1_residual(&solver.disc, &u_eps, eps, default_tol_hjb(&solver.disc))?;
    Ok(DeltaLimit {
        u_eps,
        table,
        stage_fields,
        reports,
        pc1,
        tail_gap,
    })
}

/// Residual of `max{[c − L]u + ψ_ε(|∇u|² − g²) − h, u − Mu}` at every
/// interior row, with the switching target chosen where the second branch
/// is strictly larger.
fn exact_residual(
    disc: &Discretization,
    pe: &Penalty,
    u: &FieldMatrix,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let rows = disc.interior_rows();
    let bsz = disc.blocks();
    let mut res = vec![0.0; u.values().len()];
    let mut policy = vec![None; u.values().len()];
    for (k, row) in rows.iter().enumerate() {
        let Some(r) = *row else { continue };
        for l in 0..disc.m() {
            for s in 0..disc.n() {
                let f = equation_residual(disc, pe, u, l, s, k, r);
                let (mu, target) = min_switch(&disc.spec.costs, l, |lp| u.get(lp, s, k));
                let sw = u.get(l, s, k) - mu;
                let o = k * bsz + l * disc.n() + s;
                if sw > f {
                    res[o] = sw;
                    policy[o] = target;
                } else {
                    res[o] = f;
                }
            }
        }
        // A switching cycle at one node would make the linearization
        // singular; release the member closest to indifference.
        for s in 0..disc.n() {
            break_cycles(disc, u, pe, k, s, r, &mut policy);
        }
    }
    (res, policy)
}

fn break_cycles(
    disc: &Discretization,
    u: &FieldMatrix,
    pe: &Penalty,
    k: usize,
    s: usize,
    r: usize,
    policy: &mut [Option<usize>],
) {
    let m = disc.m();
    let bsz = disc.blocks();
    let at = |l: usize| k * bsz + l * disc.n() + s;
    loop {
        let mut cycle = None;
        'outer: for start in 0..m {
            let mut seen = vec![false; m];
            let mut l = start;
            while let Some(next) = policy[at(l)] {
                if seen[l] {
                    cycle = Some(l);
                    break 'outer;
                }
                seen[l] = true;
                l = next;
            }
        }
        let Some(entry) = cycle else { return };
        let mut members = vec![entry];
        let mut l = policy[at(entry)].unwrap();
        while l != entry {
            members.push(l);
            l = policy[at(l)].unwrap();
        }
        let margin = |l: usize| {
            let f = equation_residual(disc, pe, u, l, s, k, r);
            let (mu, _) = min_switch(&disc.spec.costs, l, |lp| u.get(lp, s, k));
            u.get(l, s, k) - mu - f
        };
        let release = members
            .iter()
            .copied()
            .min_by(|a, b| margin(*a).total_cmp(&margin(*b)))
            .unwrap();
        policy[at(release)] = None;
    }
}

#[inline]
fn equation_residual(
    disc: &Discretization,
    pe: &Penalty,
    u: &FieldMatrix,
    l: usize,
    s: usize,
    k: usize,
    r: usize,
) -> f64 {
    let p = disc.coeffs.at(s, k);
    let gr = disc.gradient(u, l, s, k);
    disc.apply_linear(u, l, s, r) + pe.value(gr[0] * gr[0] + gr[1] * gr[1] - p.g * p.g) - p.h
}

/// Semismooth Newton (policy iteration) on the `δ = 0` system, started from
/// the last penalized iterate. Returns the field, iteration count and final
/// sup residual.
pub fn solve_exact_switching(
    solver: &NpdsSolver,
    eps: f64,
    start: &FieldMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<(FieldMatrix, usize, f64)> {
    let disc = &solver.disc;
    let pe = Penalty::new(eps)?;
    let mut u = start.clone();
    disc.impose_boundary(&mut u);
    let (mut res_vec, mut policy) = exact_residual(disc, &pe, &u);
    let mut res = sup(&res_vec);
    let mut iter = 0;
    let rows = disc.interior_rows();
    while res > tol && iter < max_iter {
        iter += 1;
        let mut b = CsrBuilder::new(u.values().len());
        for k in 0..disc.grid.len() {
            for l in 0..disc.m() {
                for s in 0..disc.n() {
                    let o = disc.unknown(l, s, k);
                    match (rows[k], policy[o]) {
                        (None, _) => b.add(o, 1.0),
                        (Some(_), Some(target)) => {
                            b.add(o, 1.0);
                            b.add(disc.unknown(target, s, k), -1.0);
                        }
                        (Some(r), None) => solver.add_operator_row(&mut b, &u, &pe, l, s, k, r),
                    }
                    b.finish_row();
                }
            }
        }
        let jac = b.build();
        let rhs: Vec<f64> = res_vec.iter().map(|v| -v).collect();
        let step = linalg::solve(&jac, &rhs, None)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let mut next = u.clone();
            for (x, d) in next.values_mut().iter_mut().zip(&step) {
                *x += alpha * d;
            }
            disc.impose_boundary(&mut next);
            let (nr, np) = exact_residual(disc, &pe, &next);
            let nres = sup(&nr);
            if nres < (1.0 - 1e-4 * alpha) * res {
                accepted = Some((next, nr, np, nres));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, nr, np, nres)) = accepted else {
            break;
        };
        u = next;
        res_vec = nr;
        policy = np;
        res = nres;
    }
    Ok((u, iter, res))
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(
        0.0,
        |a: f64, x| if x.is_nan() { f64::NAN } else { a.max(x.abs()) },
    )
}

/// Complementarity check for the `δ → 0` system at fixed `eps`.
pub fn pc1_residual(
    disc: &Discretization,
    u: &FieldMatrix,
    eps: f64,
    tol_hjb: f64,
) -> Result<Pc1Report> {
    let pe = Penalty::new(eps)?;
    let rows = disc.interior_rows();
    let (mut max_positive, mut max_min_abs, mut violations) = (0.0f64, 0.0f64, 0);
    for (k, row) in rows.iter().enumerate() {
        let Some(r) = *row else { continue };
        for l in 0..disc.m() {
            for s in 0..disc.n() {
                let r1 = equation_residual(disc, &pe, u, l, s, k, r);
                let (mu, _) = min_switch(&disc.spec.costs, l, |lp| u.get(lp, s, k));
                let r3 = u.get(l, s, k) - mu;
                let pos = r1.max(r3).max(0.0);
                let mn = r1.abs().min(r3.abs());
                max_positive = max_positive.max(pos);
                max_min_abs = max_min_abs.max(mn);
                if pos > tol_hjb || mn > tol_hjb {
                    violations += 1;
                }
            }
        }
    }
    Ok(Pc1Report {
        tol_hjb,
        max_positive,
        max_min_abs,
        violations,
        passed: violations == 0,
    })
}

/// Branch residuals of `max{[c − L]u − h, |∇u| − g, u − Mu} = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbResidualReport {
    pub tol_hjb: f64,
    /// `[c − L]u − h`, zero on the boundary.
    pub r1: FieldMatrix,
    /// `|∇u| − g`.
    pub r2: FieldMatrix,
    /// `u − Mu` (`−∞` is stored as `f64::MIN` for a single regime).
    pub r3: FieldMatrix,
    /// Sup over interior nodes of `max(r₁, r₂, r₃)⁺`.
    pub max_positive: f64,
    /// Sup over interior nodes of `min(|r₁|, |r₂|, |r₃|)`.
    pub max_min_abs: f64,
    /// Largest `|∇u| − g` over interior nodes.
    pub max_gradient_excess: f64,
    /// Interior rows failing either complementarity condition.
    pub violations: usize,
    /// First failing row `(regime, state, node)` with its residuals.
    pub worst: Option<(usize, usize, usize, [f64; 3])>,
    pub complementarity_ok: bool,
    pub gradient_ok: bool,
}

pub fn hjb_residual(
    disc: &Discretization,
    u: &FieldMatrix,
    tol_hjb: f64,
) -> Result<HjbResidualReport> {
    let (m, n) = (disc.m(), disc.n());
    let mut r1 = FieldMatrix::zeros(m, n, &disc.grid, FieldKind::Other);
    let mut r2 = r1.clone();
    let mut r3 = r1.clone();
    let rows = disc.interior_rows();
    let (mut max_positive, mut max_min_abs, mut max_grad) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    let mut violations = 0;
    let mut worst: Option<(usize, usize, usize, [f64; 3])> = None;
    let mut worst_score = 0.0;
    for (k, row) in rows.iter().enumerate() {
        let Some(r) = *row else { continue };
        for l in 0..m {
            for s in 0..n {
                let p = disc.coeffs.at(s, k);
                let a = disc.apply_linear(u, l, s, r) - p.h;
                let gr = disc.gradient(u, l, s, k);
                let b = (gr[0] * gr[0] + gr[1] * gr[1]).sqrt() - p.g;
                let (mu, _) = min_switch(&disc.spec.costs, l, |lp| u.get(lp, s, k));
                let c = u.get(l, s, k) - mu;
                r1.set(l, s, k, a);
                r2.set(l, s, k, b);
                r3.set(l, s, k, if c.is_finite() { c } else { f64::MIN });
                let pos = a.max(b).max(c).max(0.0);
                let mn = a.abs().min(b.abs()).min(c.abs());
                max_positive = max_positive.max(pos);
                max_min_abs = max_min_abs.max(mn);
                max_grad = max_grad.max(b);
                let score = (pos - tol_hjb).max(mn - tol_hjb);
                if score > 0.0 {
                    violations += 1;
                    if score > worst_score {
                        worst_score = score;
                        worst = Some((l, s, k, [a, b, c]));
                    }
                }
            }
        }
    }
    Ok(HjbResidualReport {
        tol_hjb,
        r1,
        r2,
        r3,
        max_positive,
        max_min_abs,
        max_gradient_excess: max_grad,
        violations,
        worst,
        complementarity_ok: violations == 0,
        gradient_ok: max_grad <= tol_hjb,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsLimit {
    pub u: FieldMatrix,
    pub sweeps: Vec<DeltaLimit>,
    pub table: ConvergenceTable,
    pub hjb: HjbResidualReport,
    /// Largest `u − u^ε` over all nodes and sweeps; the relaxation should
    /// keep this at or below zero up to discretization error.
    pub ordering_excess: f64,
}

impl EpsLimit {
    /// Whether `u ≤ u^ε + tol` holds for every solved `ε`.
    pub fn ordered(&self, tol: f64) -> bool {
        self.ordering_excess <= tol
    }

    /// `u^ε` for the smallest `ε` of the schedule.
    pub fn last_sweep(&self) -> &DeltaLimit {
        self.sweeps.last().expect("schedule is non-empty")
    }
}

/// Chains the `δ` sweeps over the `ε` schedule with warm starts.
pub fn run_eps_limit(solver: &NpdsSolver, schedule: &ContinuationSchedule) -> Result<EpsLimit> {
    run_eps_limit_observed(solver, schedule, &mut |_, _| {})
}

/// [`run_eps_limit`] reporting each stage as it completes, so callers can
/// keep partial results when the schedule stalls.
pub fn run_eps_limit_observed(
    solver: &NpdsSolver,
    schedule: &ContinuationSchedule,
    observe: StageObserver,
) -> Result<EpsLimit> {
    schedule.check()?;
    let mut sweeps: Vec<DeltaLimit> = Vec::new();
    let mut table = ConvergenceTable::default();
    for (i, &eps) in schedule.epsilons.iter().enumerate() {
        let initial = sweeps.last().map(|s| s.u_eps.clone());
        let sweep = delta_sweep(solver, eps, schedule, initial, &mut *observe)?;
        table.stages.extend(sweep.table.stages.iter().cloned());
        if let Some(prev) = sweeps.last() {
            table.eps_gaps.push(prev.u_eps.sup_diff(&sweep.u_eps));
            check_stall(&table.eps_gaps, i)?;
        }
        sweeps.push(sweep);
    }
    let u = sweeps
        .last()
        .unwrap()
        .u_eps
        .clone()
        .with_kind(FieldKind::Limit);
    let hjb = hjb_residual(&solver.disc, &u, default_tol_hjb(&solver.disc))?;
    let ordering_excess = sweeps
        .iter()
        .flat_map(|s| u.values().iter().zip(s.u_eps.values()).map(|(a, b)| a - b))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EpsLimit {
        u,
        sweeps,
        table,
        hjb,
        ordering_excess,
    })
}

/// Region label of one `(regime, state, node)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegionLabel {
    Diffusion,
    GradientActive,
    Switch { target: usize },
}

impl RegionLabel {
    pub fn name(&self) -> &'static str {
        match self {
            RegionLabel::Diffusion => "DIFFUSION",
            RegionLabel::GradientActive => "GRADIENT_ACTIVE",
            RegionLabel::Switch { .. } => "SWITCH",
        }
    }
}

/// A SWITCH row whose target is itself in a switching region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optim1Violation {
    pub regime: usize,
    pub state: usize,
    pub node: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub m: usize,
    pub n: usize,
    pub grid: GridMeta,
    pub tol_switch: f64,
    /// Node-major like [`FieldMatrix`]; `None` on boundary nodes.
    pub labels: Vec<Option<RegionLabel>>,
    pub optim1_violations: Vec<Optim1Violation>,
}

impl RegionMap {
    #[inline]
    pub fn label(&self, regime: usize, state: usize, node: usize) -> Option<RegionLabel> {
        self.labels[node * self.m * self.n + regime * self.n + state]
    }

    pub fn count(&self, pred: impl Fn(&RegionLabel) -> bool) -> usize {
        self.labels.iter().flatten().filter(|l| pred(l)).count()
    }

    pub fn switch_count(&self) -> usize {
        self.count(|l| matches!(l, RegionLabel::Switch { .. }))
    }

    /// CSV rows `node,x[,y],regime,state,label,target` with 1-based regimes
    /// and states.
    pub fn to_csv(&self, disc: &Discretization) -> String {
        let grid = &disc.grid;
        let mut header = vec!["node", "x"];
        if grid.dim() == 2 {
            header.push("y");
        }
        header.extend(["regime", "state", "label", "target"]);
        let mut rows = Vec::new();
        for k in 0..grid.len() {
            let x = grid.coord(k);
            for l in 0..self.m {
                for s in 0..self.n {
                    let Some(lab) = self.label(l, s, k) else {
                        continue;
                    };
                    let mut r = vec![k.to_string()];
                    r.extend((0..grid.dim()).map(|a| num(x[a])));
                    let target = match lab {
                        RegionLabel::Switch { target } => (target + 1).to_string(),
                        _ => String::new(),
                    };
                    r.extend([
                        (l + 1).to_string(),
                        (s + 1).to_string(),
                        lab.name().to_string(),
                        target,
                    ]);
                    rows.push(r);
                }
            }
        }
        csv_document(&header, rows)
    }
}

/// Labels interior rows: SWITCH where `u − Mu ≥ −tol_switch`, otherwise
/// GRADIENT_ACTIVE where `|∇u| − g ≥ −tol_switch`, otherwise DIFFUSION.
pub fn extract_regions(disc: &Discretization, u: &FieldMatrix, tol_switch: f64) -> RegionMap {
    let (m, n) = (disc.m(), disc.n());
    let mut labels = vec![None; u.values().len()];
    for &k in disc.grid.interior() {
        for l in 0..m {
            for s in 0..n {
                let (mu, target) = min_switch(&disc.spec.costs, l, |lp| u.get(lp, s, k));
                let p = disc.coeffs.at(s, k);
                let label = match target {
                    Some(t) if u.get(l, s, k) - mu >= -tol_switch => {
                        RegionLabel::Switch { target: t }
                    }
                    _ => {
                        let gr = disc.gradient(u, l, s, k);
                        if (gr[0] * gr[0] + gr[1] * gr[1]).sqrt() - p.g >= -tol_switch {
                            RegionLabel::GradientActive
                        } else {
                            RegionLabel::Diffusion
                        }
                    }
                };
                labels[disc.unknown(l, s, k)] = Some(label);
            }
        }
    }
    let mut optim1_violations = Vec::new();
    for &k in disc.grid.interior() {
        for l in 0..m {
            for s in 0..n {
                if let Some(RegionLabel::Switch { target }) = labels[disc.unknown(l, s, k)] {
                    if matches!(
                        labels[disc.unknown(target, s, k)],
                        Some(RegionLabel::Switch { .. })
                    ) {
                        optim1_violations.push(Optim1Violation {
                            regime: l,
                            state: s,
                            node: k,
                            target,
                        });
                    }
                }
            }
        }
    }
    RegionMap {
        m,
        n,
        grid: disc.grid.meta(),
        tol_switch,
        labels,
        optim1_violations,
    }
}

/// Cutoff equal to 1 on the inner half-box, decaying smoothly to 0 on the
/// boundary.
pub fn cutoff(disc: &Discretization, node: usize) -> f64 {
    let x = disc.grid.coord(node);
    let (lo, hi) = (disc.grid.lower(), disc.grid.upper());
    let mut w = 1.0;
    for a in 0..disc.grid.dim() {
        let mid = 0.5 * (lo[a] + hi[a]);
        let half = 0.5 * (hi[a] - lo[a]);
        let s = ((x[a] - mid) / half).abs();
        w *= smooth_step(s);
    }
    w
}

fn smooth_step(s: f64) -> f64 {
    if s <= 0.5 {
        return 1.0;
    }
    if s >= 1.0 {
        return 0.0;
    }
    let e = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    let tau = (1.0 - s) / 0.5;
    e(tau) / (e(tau) + e(1.0 - tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBounds {
    pub eps: f64,
    pub delta: Option<f64>,
    pub gradient_sup: f64,
    pub hessian_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub stages: Vec<StageBounds>,
    /// `max/min` of the windowed gradient sups over the stages.
    pub gradient_ratio: f64,
    pub hessian_ratio: f64,
    /// Largest stage-to-stage growth factor.
    pub max_gradient_growth: f64,
    pub max_hessian_growth: f64,
    pub passed: bool,
}

/// Windowed sups of `|∇u|` and of the discrete Hessian across solved stages.
pub fn diagnostics_bounds(disc: &Discretization, fields: &[&FieldMatrix]) -> Result<BoundsReport> {
    if fields.len() < 2 {
        return Err(Error::InvalidConfig(
            "bounds diagnostics need at least two stages".into(),
        ));
    }
    let weights: Vec<f64> = (0..disc.grid.len()).map(|k| cutoff(disc, k)).collect();
    let mut stages = Vec::new();
    for f in fields {
        let (mut gs, mut hs) = (0.0f64, 0.0f64);
        for &k in disc.grid.interior() {
            if weights[k] == 0.0 {
                continue;
            }
            for l in 0..disc.m() {
                for s in 0..disc.n() {
                    let gr = disc.gradient(f, l, s, k);
                    gs = gs.max(weights[k] * (gr[0] * gr[0] + gr[1] * gr[1]).sqrt());
                    hs = hs.max(weights[k] * disc.hessian_norm(f, l, s, k));
                }
            }
        }
        let (eps, delta) = match f.kind {
            FieldKind::Penalized { eps, delta } => (eps, Some(delta)),
            FieldKind::EpsLimit { eps } => (eps, None),
            _ => (0.0, None),
        };
        stages.push(StageBounds {
            eps,
            delta,
            gradient_sup: gs,
            hessian_sup: hs,
        });
    }
    let ratio = |v: Vec<f64>| {
        let max = v.iter().copied().fold(0.0, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        if max == 0.0 {
            1.0
        } else {
            max / min
        }
    };
    let growth = |v: Vec<f64>| {
        v.windows(2)
            .map(|w| {
                if w[0] == 0.0 {
                    if w[1] == 0.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    w[1] / w[0]
                }
            })
            .fold(0.0, f64::max)
    };
    let gv: Vec<f64> = stages.iter().map(|s| s.gradient_sup).collect();
    let hv: Vec<f64> = stages.iter().map(|s| s.hessian_sup).collect();
    let max_gradient_growth = growth(gv.clone());
    let max_hessian_growth = growth(hv.clone());
    Ok(BoundsReport {
        gradient_ratio: ratio(gv),
        hessian_ratio: ratio(hv),
        passed: max_gradient_growth <= 1.05 && max_hessian_growth <= 1.05,
        max_gradient_growth,
        max_hessian_growth,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::{
        Coefficients, Domain, GeneratorMatrix, ProblemSpec, StateCoefficients, SwitchingCosts,
    };

    fn benchmark(nodes: usize) -> NpdsSolver {
        let q1 = GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let q2 = GeneratorMatrix::from_rows(&[vec![-2.0, 2.0], vec![2.0, -2.0]]).unwrap();
        let s1 = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 2.0, 0.6, 0.0);
        let s2 = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 0.5, 0.6, 0.0);
        let spec = ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            vec![q1, q2],
            Coefficients::new(vec![s1, s2]),
            SwitchingCosts::new(&[vec![0.0, 0.1], vec![0.1, 0.0]]).unwrap(),
        )
        .unwrap();
        NpdsSolver::new(&spec, &Grid::uniform(&spec.domain, nodes).unwrap()).unwrap()
    }

    /// Regime 2 drives the chain into the cheap absorbing state 2.
    fn switching(nodes: usize) -> NpdsSolver {
        let q1 = GeneratorMatrix::zero(2);
        let q2 = GeneratorMatrix::from_rows(&[vec![-10.0, 10.0], vec![0.0, 0.0]]).unwrap();
        let s1 = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 2.0, 0.6, 0.0);
        let s2 = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 0.0, 0.6, 0.0);
        let spec = ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            vec![q1, q2],
            Coefficients::new(vec![s1, s2]),
            SwitchingCosts::new(&[vec![0.0, 0.05], vec![0.05, 0.0]]).unwrap(),
        )
        .unwrap();
        NpdsSolver::new(&spec, &Grid::uniform(&spec.domain, nodes).unwrap()).unwrap()
    }

    fn one_regime(g: f64, f: f64) -> NpdsSolver {
        let s = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 1.0, g, f);
        let spec = ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            vec![GeneratorMatrix::zero(1)],
            Coefficients::new(vec![s]),
            SwitchingCosts::single_regime(),
        )
        .unwrap();
        NpdsSolver::new(&spec, &Grid::uniform(&spec.domain, 41).unwrap()).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(ContinuationSchedule::default().check().is_ok());
        let mut s = ContinuationSchedule {
            deltas: vec![0.1, 0.2],
            ..ContinuationSchedule::default()
        };
        assert!(s.check().is_err());
        s.deltas = vec![];
        assert!(s.check().is_err());
    }

    #[test]
    fn stall_detection() {
        assert!(check_stall(&[1.0, 0.5, 0.25], 3).is_ok());
        assert!(check_stall(&[0.0, 0.0, 0.0, 0.0, 0.0], 5).is_ok());
        assert!(check_stall(&[1.0, 1.0, 1.0, 1.0], 4).is_err());
        assert!(check_stall(&[1.0, 1.0, 0.5, 0.6, 0.6], 5).is_ok());
    }

    #[test]
    fn single_regime_has_no_delta_dependence() {
        let solver = one_regime(0.5, 0.0);
        let lim = run_delta_limit(&solver, 0.1, &ContinuationSchedule::default(), None).unwrap();
        for g in lim.table.delta_gaps(0.1) {
            assert!(g < 1e-9, "{g}");
        }
        assert!(lim.pc1.passed);
    }

    #[test]
    fn inactive_constraints_reduce_to_dirichlet() {
        let s = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 1.0, 1e6, 0.0);
        let spec = ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            vec![GeneratorMatrix::zero(1), GeneratorMatrix::zero(1)],
            Coefficients::new(vec![s]),
            SwitchingCosts::new(&[vec![0.0, 1e6], vec![1e6, 0.0]]).unwrap(),
        )
        .unwrap();
        let solver = NpdsSolver::new(&spec, &Grid::uniform(&spec.domain, 41).unwrap()).unwrap();
        let lim = run_eps_limit(&solver, &ContinuationSchedule::default()).unwrap();
        assert!(lim.u.sup_diff(&solver.upper) < 1e-10);
        assert!(lim.hjb.complementarity_ok);
        let r1_max = lim.hjb.r1.sup_norm();
        assert!(r1_max < 1e-8, "{r1_max}");
        let map = extract_regions(&solver.disc, &lim.u, default_tol_switch(&lim.u));
        assert_eq!(map.count(|l| *l != RegionLabel::Diffusion), 0);
    }

    #[test]
    fn zero_gradient_bound_forces_constant() {
        // g ≡ 0 with f ≡ 0.3: the only admissible field is the constant 0.3,
        // which satisfies [c − L]u − h = 0.3 − 1 < 0.
        let solver = one_regime(0.0, 0.3);
        let sched = ContinuationSchedule {
            epsilons: vec![0.1, 1e-2, 1e-3, 1e-4, 1e-5],
            ..ContinuationSchedule::default()
        };
        let lim = run_eps_limit(&solver, &sched).unwrap();
        let dev = lim
            .u
            .values()
            .iter()
            .map(|v| (v - 0.3).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.01, "{dev}");
    }

    #[test]
    fn benchmark_limit_lies_below_every_relaxation() {
        let solver = benchmark(81);
        let lim = run_eps_limit(&solver, &ContinuationSchedule::default()).unwrap();
        let tol = default_tol_hjb(&solver.disc);
        assert!(lim.ordering_excess >= 0.0);
        assert!(lim.ordered(tol), "{}", lim.ordering_excess);
    }

    #[test]
    fn benchmark_regions_are_consistent() {
        let solver = benchmark(81);
        let lim = run_delta_limit(&solver, 0.1, &ContinuationSchedule::default(), None).unwrap();
        assert!(lim.pc1.passed, "{:?}", lim.pc1);
        let map = extract_regions(&solver.disc, &lim.u_eps, default_tol_switch(&lim.u_eps));
        assert!(map.optim1_violations.is_empty());
        for (v, ub) in lim.u_eps.values().iter().zip(solver.upper.values()) {
            assert!(*v >= -1e-8 && *v <= ub + 1e-8);
        }
    }

    #[test]
    fn asymmetric_sweep_switches_toward_cheap_regime() {
        let solver = switching(81);
        let sched = ContinuationSchedule::default();
        let lim = run_delta_limit(&solver, 0.1, &sched, None).unwrap();
        let gaps = lim.table.delta_gaps(0.1);
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        assert!(lim.pc1.passed, "{:?}", lim.pc1);
        let map = extract_regions(&solver.disc, &lim.u_eps, default_tol_switch(&lim.u_eps));
        assert!(map.optim1_violations.is_empty());
        let switching = (0..solver.disc.grid.len())
            .filter(|&k| matches!(map.label(0, 0, k), Some(RegionLabel::Switch { target: 1 })))
            .count();
        assert!(switching > 0);
        // Switching rows satisfy u = Mu to solver precision.
        for &k in solver.disc.grid.interior() {
            if let Some(RegionLabel::Switch { target }) = map.label(0, 0, k) {
                let d = lim.u_eps.get(0, 0, k) - lim.u_eps.get(target, 0, k) - 0.05;
                assert!(d.abs() < 1e-7, "{d}");
            }
        }
        let again = extract_regions(&solver.disc, &lim.u_eps, map.tol_switch);
        assert_eq!(again, map);
        // Bounds 0 ≤ u^ε ≤ ū.
        for (v, ub) in lim.u_eps.values().iter().zip(solver.upper.values()) {
            assert!(*v >= -1e-8 && *v <= ub + 1e-8);
        }
    }

    #[test]
    fn cutoff_support() {
        let solver = one_regime(1.0, 0.0);
        let g = &solver.disc.grid;
        for k in 0..g.len() {
            let x = g.coord(k)[0];
            let w = cutoff(&solver.disc, k);
            if g.is_boundary(k) {
                assert_eq!(w, 0.0);
            }
            if x.abs() <= 0.5 {
                assert_eq!(w, 1.0);
            }
            assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn bounds_identical_for_inactive_penalties() {
        let solver = one_regime(1e6, 0.0);
        let fields: Vec<FieldMatrix> = [0.2, 0.1]
            .iter()
            .map(|&e| solver.solve(&NpdsConfig::new(e, e)).unwrap().0)
            .collect();
        let refs: Vec<&FieldMatrix> = fields.iter().collect();
        let rep = diagnostics_bounds(&solver.disc, &refs).unwrap();
        assert_eq!(rep.gradient_ratio, 1.0);
        assert!(rep.passed);
    }
}
