//! Solver for the penalized system
//!
//! ```text
//! [c − L]u_{ℓ,ι} + ψ_ε(|∇u_{ℓ,ι}|² − g_ι²) + Σ_{ℓ'≠ℓ} ψ_δ(u_{ℓ,ι} − u_{ℓ',ι} − ϑ_{ℓ,ℓ'}) = h_ι
//! ```
//!
//! with `u = f` on the boundary. The basic iteration freezes the nonlinear
//! terms and the chain coupling and solves one linear problem per block
//! (the map `T̄`); Newton's method on the full system is the default, with
//! damped `T̄` steps as the fallback whenever a Newton step fails to reduce
//! the residual.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{dirichlet_solution, Discretization};
use crate::error::{Error, Result};
use crate::grid::{FieldKind, FieldMatrix, Grid};
use crate::linalg::{self, BandLu, CsrBuilder, CsrMatrix, Ilu0};
use crate::model::ProblemSpec;
use crate::penalty::Penalty;

/// Outer iteration used by [`NpdsSolver::solve`].
const MIN_DAMPING: f64 = 1.0 / 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Newton,
    Picard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpdsConfig {
    pub eps: f64,
    pub delta: f64,
    /// Relaxation of the fixed-point step, halved whenever the residual grows.
    pub damping: f64,
    /// Base tolerance; the effective tolerance is `tol_residual · (1 + ‖h‖∞)`.
    pub tol_residual: f64,
    pub max_outer: usize,
    pub method: Method,
    /// Starting iterate; the Dirichlet super-solution when absent.
    #[serde(skip)]
    pub initial: Option<FieldMatrix>,
}

impl NpdsConfig {
    pub fn new(eps: f64, delta: f64) -> Self {
        Self {
            eps,
            delta,
            damping: 0.5,
            tol_residual: 1e-8,
            max_outer: 500,
            method: Method::Newton,
            initial: None,
        }
    }

    pub fn with_initial(mut self, initial: FieldMatrix) -> Self {
        self.initial = Some(initial);
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("eps", self.eps), ("delta", self.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.tol_residual > 0.0) {
            return Err(Error::InvalidConfig("tol_residual must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidConfig("max_outer must be at least 1".into()));
        }
        Ok(())
    }
}

/// A node where the solution left `[0, ū]` by more than the tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub regime: usize,
    pub state: usize,
    pub node: usize,
    /// Positive amount by which the bound is exceeded.
    pub amount: f64,
    pub side: BoundSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub newton_steps: usize,
    pub picard_steps: usize,
    pub final_residual_sup: f64,
    pub tolerance: f64,
    pub residual_history: Vec<f64>,
    pub final_damping: f64,
    pub bound_violations: Vec<BoundViolation>,
}

/// Per-block factorization of `c − L̃` used by the `T̄` map.
enum BlockSolver {
    Band(BandLu),
    Iterative(CsrMatrix, Ilu0),
}

impl BlockSolver {
    fn solve(&self, rhs: &mut [f64], guess: &[f64]) -> Result<()> {
        match self {
            BlockSolver::Band(lu) => {
                lu.solve_in_place(rhs);
                Ok(())
            }
            BlockSolver::Iterative(a, pre) => {
                let mut x = guess.to_vec();
                linalg::bicgstab(a, pre, rhs, &mut x, linalg::REL_TOL, linalg::MAX_ITER)?;
                rhs.copy_from_slice(&x);
                Ok(())
            }
        }
    }
}

/// Discretized problem together with its Dirichlet super-solution.
pub struct NpdsSolver {
    pub disc: Discretization,
    pub upper: FieldMatrix,
    block_solvers: std::sync::OnceLock<Result<Vec<BlockSolver>>>,
}

impl NpdsSolver {
    pub fn new(spec: &ProblemSpec, grid: &Grid) -> Result<Self> {
        Self::from_discretization(Discretization::new(spec, grid)?)
    }

    pub fn from_discretization(disc: Discretization) -> Result<Self> {
        let upper = dirichlet_solution(&disc)?;
        Ok(Self {
            disc,
            upper,
            block_solvers: std::sync::OnceLock::new(),
        })
    }

    /// Effective residual tolerance `tol · (1 + ‖h‖∞)`.
    pub fn tolerance(&self, cfg: &NpdsConfig) -> f64 {
        let mut hmax: f64 = 0.0;
        for s in 0..self.disc.n() {
            for k in 0..self.disc.grid.len() {
                hmax = hmax.max(self.disc.coeffs.at(s, k).h.abs());
            }
        }
        cfg.tol_residual * (1.0 + hmax)
    }

    /// Pointwise residual of the penalized system; zero on the boundary.
    pub fn residual(&self, u: &FieldMatrix, eps: f64, delta: f64) -> Result<FieldMatrix> {
        let pe = Penalty::new(eps)?;
        let pd = Penalty::new(delta)?;
        let values = self.residual_values(u, &pe, &pd);
        FieldMatrix::from_values(u.m, u.n, &self.disc.grid, FieldKind::Other, values)
    }

    fn residual_values(&self, u: &FieldMatrix, pe: &Penalty, pd: &Penalty) -> Vec<f64> {
        let disc = &self.disc;
        let bsz = disc.blocks();
        let rows = disc.interior_rows();
        let mut out = vec![0.0; u.values().len()];
        out.par_chunks_mut(bsz).enumerate().for_each(|(k, chunk)| {
            let Some(r) = rows[k] else { return };
            for l in 0..disc.m() {
                for s in 0..disc.n() {
                    chunk[l * disc.n() + s] = self.row_residual(u, pe, pd, l, s, k, r);
                }
            }
        });
        out
    }

    #[inline]
    fn row_residual(
        &self,
        u: &FieldMatrix,
        pe: &Penalty,
        pd: &Penalty,
        l: usize,
        s: usize,
        k: usize,
        r: usize,
    ) -> f64 {
        let disc = &self.disc;
        let p = disc.coeffs.at(s, k);
        let mut acc = disc.apply_linear(u, l, s, r) - p.h;
        let gr = disc.gradient(u, l, s, k);
        acc += pe.value(gr[0] * gr[0] + gr[1] * gr[1] - p.g * p.g);
        acc += self.switch_penalty(u, pd, l, s, k);
        acc
    }

    #[inline]
    fn switch_penalty(&self, u: &FieldMatrix, pd: &Penalty, l: usize, s: usize, k: usize) -> f64 {
        let costs = &self.disc.spec.costs;
        let own = u.get(l, s, k);
        (0..self.disc.m())
            .filter(|&lp| lp != l)
            .map(|lp| pd.value(own - u.get(lp, s, k) - costs.cost(l, lp)))
            .sum()
    }

    /// Frozen part `Ξ(u)`: both penalties plus the chain coupling.
    fn frozen_terms(
        &self,
        u: &FieldMatrix,
        pe: &Penalty,
        pd: &Penalty,
        l: usize,
        s: usize,
        k: usize,
    ) -> f64 {
        let disc = &self.disc;
        let p = disc.coeffs.at(s, k);
        let st = disc.stencil(l, s);
        let mut xi = st.coupling_diag * u.get(l, s, k);
        for &(kappa, w) in &st.coupling {
            xi += w * u.get(l, kappa, k);
        }
        let gr = disc.gradient(u, l, s, k);
        xi += pe.value(gr[0] * gr[0] + gr[1] * gr[1] - p.g * p.g);
        xi + self.switch_penalty(u, pd, l, s, k)
    }

    fn block_solvers(&self) -> Result<&Vec<BlockSolver>> {
        let cached = self.block_solvers.get_or_init(|| {
            let disc = &self.disc;
            let rows = disc.interior_rows();
            (0..disc.blocks())
                .into_par_iter()
                .map(|b| {
                    let st = disc.stencil(b / disc.n(), b % disc.n());
                    let mut builder = CsrBuilder::new(disc.grid.len());
                    for k in 0..disc.grid.len() {
                        match rows[k] {
                            None => builder.add(k, 1.0),
                            Some(r) => {
                                let row = &st.rows[r];
                                builder.add(k, row.diag);
                                for &(kk, w) in &row.neighbors {
                                    builder.add(kk, w);
                                }
                            }
                        }
                        builder.finish_row();
                    }
                    let a = builder.build();
                    let (kl, ku) = a.bandwidth();
                    if kl + ku <= 64 {
                        Ok(BlockSolver::Band(BandLu::factor(&a)?))
                    } else {
                        let pre = Ilu0::new(&a)?;
                        Ok(BlockSolver::Iterative(a, pre))
                    }
                })
                .collect()
        });
        match cached {
            Ok(v) => Ok(v),
            Err(e) => Err(Error::InvalidGrid(format!(
                "block factorization failed: {e}"
            ))),
        }
    }

    /// One application of `T̄`: solves `[c − L̃]v = h − Ξ(u)` per block with
    /// `v = f` on the boundary.
    pub fn picard_map(&self, u: &FieldMatrix, eps: f64, delta: f64) -> Result<FieldMatrix> {
        let pe = Penalty::new(eps)?;
        let pd = Penalty::new(delta)?;
        self.picard_map_with(u, &pe, &pd)
    }

    fn picard_map_with(&self, u: &FieldMatrix, pe: &Penalty, pd: &Penalty) -> Result<FieldMatrix> {
        let disc = &self.disc;
        let solvers = self.block_solvers()?;
        let len = disc.grid.len();
        let blocks: Vec<Vec<f64>> = (0..disc.blocks())
            .into_par_iter()
            .map(|b| {
                let (l, s) = (b / disc.n(), b % disc.n());
                let mut rhs = vec![0.0; len];
                for (k, slot) in rhs.iter_mut().enumerate() {
                    let p = disc.coeffs.at(s, k);
                    *slot = if disc.grid.is_boundary(k) {
                        p.f
                    } else {
                        p.h - self.frozen_terms(u, pe, pd, l, s, k)
                    };
                }
                let guess = u.block(l, s);
                solvers[b].solve(&mut rhs, &guess)?;
                Ok(rhs)
            })
            .collect::<Result<_>>()?;
        let mut v = u.clone();
        for (b, vals) in blocks.iter().enumerate() {
            let (l, s) = (b / disc.n(), b % disc.n());
            for (k, &x) in vals.iter().enumerate() {
                v.set(l, s, k, x);
            }
        }
        disc.impose_boundary(&mut v);
        Ok(v)
    }

    /// Jacobian of the penalized residual at `u`; boundary rows are identities.
    fn jacobian(&self, u: &FieldMatrix, pe: &Penalty, pd: &Penalty) -> CsrMatrix {
        let disc = &self.disc;
        let rows = disc.interior_rows();
        let total = u.values().len();
        let mut b = CsrBuilder::new(total);
        for k in 0..disc.grid.len() {
            for l in 0..disc.m() {
                for s in 0..disc.n() {
                    match rows[k] {
                        None => b.add(disc.unknown(l, s, k), 1.0),
                        Some(r) => {
                            self.add_operator_row(&mut b, u, pe, l, s, k, r);
                            self.add_switch_penalty_row(&mut b, u, pd, l, s, k);
                        }
                    }
                    b.finish_row();
                }
            }
        }
        b.build()
    }

    /// Adds the derivative of `[c − L]u + ψ_ε(|∇u|² − g²)` at interior
    /// row `(l, s, k)` to the open builder row.
    pub(crate) fn add_operator_row(
        &self,
        b: &mut CsrBuilder,
        u: &FieldMatrix,
        pe: &Penalty,
        l: usize,
        s: usize,
        k: usize,
        r: usize,
    ) {
        let disc = &self.disc;
        let st = disc.stencil(l, s);
        let row = &st.rows[r];
        b.add(disc.unknown(l, s, k), row.diag + st.coupling_diag);
        for &(kk, w) in &row.neighbors {
            b.add(disc.unknown(l, s, kk), w);
        }
        for &(kappa, w) in &st.coupling {
            b.add(disc.unknown(l, kappa, k), w);
        }
        let p = disc.coeffs.at(s, k);
        let gr = disc.gradient(u, l, s, k);
        let d = pe.d1(gr[0] * gr[0] + gr[1] * gr[1] - p.g * p.g);
        if d != 0.0 {
            let h = disc.grid.spacing();
            for axis in 0..disc.grid.dim() {
                let stride = disc.grid.stride(axis);
                let w = 2.0 * d * gr[axis] / (2.0 * h[axis]);
                b.add(disc.unknown(l, s, k + stride), w);
                b.add(disc.unknown(l, s, k - stride), -w);
            }
        }
    }

    fn add_switch_penalty_row(
        &self,
        b: &mut CsrBuilder,
        u: &FieldMatrix,
        pd: &Penalty,
        l: usize,
        s: usize,
        k: usize,
    ) {
        let disc = &self.disc;
        let costs = &disc.spec.costs;
        let own = u.get(l, s, k);
        for lp in 0..disc.m() {
            if lp == l {
                continue;
            }
            let d = pd.d1(own - u.get(lp, s, k) - costs.cost(l, lp));
            if d != 0.0 {
                b.add(disc.unknown(l, s, k), d);
                b.add(disc.unknown(lp, s, k), -d);
            }
        }
    }

    /// Solves the penalized system for `cfg.eps`, `cfg.delta`.
    pub fn solve(&self, cfg: &NpdsConfig) -> Result<(FieldMatrix, SolveReport)> {
        cfg.check()?;
        let pe = Penalty::new(cfg.eps)?;
        let pd = Penalty::new(cfg.delta)?;
        let tol = self.tolerance(cfg);
        let disc = &self.disc;
        let mut u = match &cfg.initial {
            Some(init) => {
                init.check_shape(disc.m(), disc.n(), &disc.grid)?;
                init.clone()
            }
            None => self.upper.clone(),
        };
        disc.impose_boundary(&mut u);
        let mut res = sup(&self.residual_values(&u, &pe, &pd));
        let mut history = vec![res];
        let mut damping = cfg.damping;
        let (mut newton_steps, mut picard_steps, mut outer) = (0, 0, 0);
        let mut use_newton = cfg.method == Method::Newton;
        while res > tol && outer < cfg.max_outer {
            outer += 1;
            let mut accepted = false;
            if use_newton {
                if let Some((next, next_res)) = self.newton_step(&u, &pe, &pd, res)? {
                    u = next;
                    res = next_res;
                    newton_steps += 1;
                    accepted = true;
                } else {
                    // One failed Newton step hands the next few iterations to T̄.
                    use_newton = false;
                }
            } else if cfg.method == Method::Newton && picard_steps % 5 == 4 {
                use_newton = true;
            }
            if !accepted {
                // A step that raises the residual is retried with half the
                // relaxation; at the floor it is taken anyway.
                let tv = self.picard_map_with(&u, &pe, &pd)?;
                loop {
                    let mut next = u.clone();
                    for (x, t) in next.values_mut().iter_mut().zip(tv.values()) {
                        *x = (1.0 - damping) * *x + damping * t;
                    }
                    let next_res = sup(&self.residual_values(&next, &pe, &pd));
                    if next_res <= res || damping <= MIN_DAMPING {
                        u = next;
                        res = next_res;
                        break;
                    }
                    damping = (0.5 * damping).max(MIN_DAMPING);
                }
                picard_steps += 1;
            }
            history.push(res);
            if !res.is_finite() {
                break;
            }
        }
        let report = SolveReport {
            converged: res <= tol,
            outer_iterations: outer,
            newton_steps,
            picard_steps,
            final_residual_sup: res,
            tolerance: tol,
            residual_history: history,
            final_damping: damping,
            bound_violations: self.bound_violations(&u, tol),
        };
        Ok((
            u.with_kind(FieldKind::Penalized {
                eps: cfg.eps,
                delta: cfg.delta,
            }),
            report,
        ))
    }

    /// Newton step with backtracking; `None` when no step length reduces the
    /// residual.
    fn newton_step(
        &self,
        u: &FieldMatrix,
        pe: &Penalty,
        pd: &Penalty,
        res: f64,
    ) -> Result<Option<(FieldMatrix, f64)>> {
        let r = self.residual_values(u, pe, pd);
        let jac = self.jacobian(u, pe, pd);
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = match linalg::solve(&jac, &rhs, None) {
            Ok(s) => s,
            Err(_) => return Ok(None),
        };
        let mut alpha = 1.0;
        for _ in 0..8 {
            let mut next = u.clone();
            for (x, d) in next.values_mut().iter_mut().zip(&step) {
                *x += alpha * d;
            }
            self.disc.impose_boundary(&mut next);
            let next_res = sup(&self.residual_values(&next, pe, pd));
            if next_res < (1.0 - 1e-4 * alpha) * res {
                return Ok(Some((next, next_res)));
            }
            alpha *= 0.5;
        }
        Ok(None)
    }

    /// Nodes outside `[−tol, ū + tol]`.
    pub fn bound_violations(&self, u: &FieldMatrix, tol: f64) -> Vec<BoundViolation> {
        let mut out = Vec::new();
        for k in 0..self.disc.grid.len() {
            for l in 0..u.m {
                for s in 0..u.n {
                    let v = u.get(l, s, k);
                    let ub = self.upper.get(l, s, k);
                    if v < -tol {
                        out.push(BoundViolation {
                            regime: l,
                            state: s,
                            node: k,
                            amount: -v,
                            side: BoundSide::Lower,
                        });
                    } else if v > ub + tol {
                        out.push(BoundViolation {
                            regime: l,
                            state: s,
                            node: k,
                            amount: v - ub,
                            side: BoundSide::Upper,
                        });
                    }
                }
            }
        }
        out
    }

    /// Compares a sub-solution with a super-solution of the penalized system.
    pub fn check_comparison(
        &self,
        sub: &FieldMatrix,
        sup_field: &FieldMatrix,
        cfg: &NpdsConfig,
    ) -> Result<ComparisonReport> {
        let disc = &self.disc;
        sub.check_shape(disc.m(), disc.n(), &disc.grid)?;
        sup_field.check_shape(disc.m(), disc.n(), &disc.grid)?;
        let tol = self.tolerance(cfg);
        let rs = self.residual(sub, cfg.eps, cfg.delta)?;
        let rp = self.residual(sup_field, cfg.eps, cfg.delta)?;
        let sub_residual_max = rs
            .values()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let super_residual_min = rp.values().iter().copied().fold(f64::INFINITY, f64::min);
        let mut boundary_witness = None;
        let mut max_violation: f64 = 0.0;
        let mut witness = None;
        for k in 0..disc.grid.len() {
            for l in 0..disc.m() {
                for s in 0..disc.n() {
                    let (a, b) = (sub.get(l, s, k), sup_field.get(l, s, k));
                    if disc.grid.is_boundary(k) && boundary_witness.is_none() {
                        let f = disc.coeffs.at(s, k).f;
                        if a > f + tol || b < f - tol {
                            boundary_witness = Some(BoundaryWitness {
                                regime: l,
                                state: s,
                                node: k,
                                sub: a,
                                sup: b,
                                f,
                            });
                        }
                    }
                    if a - b > max_violation {
                        max_violation = a - b;
                        witness = Some((l, s, k));
                    }
                }
            }
        }
        let preconditions_hold =
            boundary_witness.is_none() && sub_residual_max <= tol && super_residual_min >= -tol;
        Ok(ComparisonReport {
            preconditions_hold,
            sub_residual_max,
            super_residual_min,
            boundary_witness,
            max_violation,
            witness,
            tolerance: tol,
            passed: preconditions_hold && max_violation <= tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryWitness {
    pub regime: usize,
    pub state: usize,
    pub node: usize,
    pub sub: f64,
    pub sup: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Boundary data and residual signs are consistent with a
    /// sub-/super-solution pair.
    pub preconditions_hold: bool,
    pub sub_residual_max: f64,
    pub super_residual_min: f64,
    pub boundary_witness: Option<BoundaryWitness>,
    /// `max(sub − super)`, at least 0.
    pub max_violation: f64,
    pub witness: Option<(usize, usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(
        0.0,
        |a: f64, x| if x.is_nan() { f64::NAN } else { a.max(x.abs()) },
    )
}

/// Residual of the penalized system for `u`.
pub fn npds_residual(
    spec: &ProblemSpec,
    grid: &Grid,
    u: &FieldMatrix,
    eps: f64,
    delta: f64,
) -> Result<FieldMatrix> {
    NpdsSolver::new(spec, grid)?.residual(u, eps, delta)
}

/// Solves the penalized system on `grid`.
pub fn solve_npds(
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &NpdsConfig,
) -> Result<(FieldMatrix, SolveReport)> {
    NpdsSolver::new(spec, grid)?.solve(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coefficients, Domain, GeneratorMatrix, StateCoefficients, SwitchingCosts};

    pub(crate) fn benchmark(nodes: usize) -> (ProblemSpec, Grid) {
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
        let grid = Grid::uniform(&spec.domain, nodes).unwrap();
        (spec, grid)
    }

    fn single(h: f64, g: f64) -> (ProblemSpec, Grid) {
        let s = StateCoefficients::constant(1, 1.0, 0.3, 1.0, h, g, 0.0);
        let spec = ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            vec![GeneratorMatrix::zero(1)],
            Coefficients::new(vec![s]),
            SwitchingCosts::single_regime(),
        )
        .unwrap();
        let grid = Grid::uniform(&spec.domain, 41).unwrap();
        (spec, grid)
    }

    #[test]
    fn inactive_penalties_reproduce_dirichlet() {
        let (spec, grid) = single(1.0, 1e6);
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        let (u, rep) = solver.solve(&NpdsConfig::new(0.1, 0.1)).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.outer_iterations, 0);
        assert_eq!(u.values(), solver.upper.values());
    }

    #[test]
    fn zero_data_is_fixed_point() {
        let (spec, grid) = single(0.0, 0.5);
        let (u, rep) = solve_npds(&spec, &grid, &NpdsConfig::new(0.1, 0.1)).unwrap();
        assert!(rep.converged);
        assert_eq!(u.sup_norm(), 0.0);
    }

    #[test]
    fn residual_at_super_solution_is_gradient_penalty() {
        let (spec, grid) = single(3.0, 0.2);
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        let r = solver.residual(&solver.upper, 0.1, 0.1).unwrap();
        let pe = Penalty::new(0.1).unwrap();
        for &k in grid.interior() {
            let gr = solver.disc.gradient(&solver.upper, 0, 0, k);
            let expected = pe.value(gr[0] * gr[0] - 0.04);
            assert!(r.get(0, 0, k) >= -1e-10);
            assert!((r.get(0, 0, k) - expected).abs() < 1e-9);
        }
    }

    /// Direct transcription of the penalized equation on a five-node grid.
    #[test]
    fn residual_matches_hand_assembly() {
        let q = GeneratorMatrix::from_rows(&[vec![-1.5, 1.5], vec![0.5, -0.5]]).unwrap();
        let s1 = StateCoefficients::constant(1, 0.7, 0.4, 1.2, 1.0, 0.3, 0.2);
        let s2 = StateCoefficients::constant(1, 1.1, -0.8, 0.9, 0.4, 0.5, 0.1);
        let spec = ProblemSpec::new(
            Domain::interval(0.0, 1.0).unwrap(),
            vec![q.clone(), q],
            Coefficients::new(vec![s1, s2]),
            SwitchingCosts::new(&[vec![0.0, 0.05], vec![0.2, 0.0]]).unwrap(),
        )
        .unwrap();
        let grid = Grid::uniform(&spec.domain, 5).unwrap();
        let mut u = FieldMatrix::zeros(2, 2, &grid, FieldKind::Other);
        for (i, v) in u.values_mut().iter_mut().enumerate() {
            *v = 0.3 + 0.17 * ((i * 7) % 5) as f64;
        }
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        solver.disc.impose_boundary(&mut u);
        let (eps, delta) = (0.2, 0.1);
        let r = solver.residual(&u, eps, delta).unwrap();
        let h = 0.25;
        let a = [0.7, 1.1];
        let b = [0.4, -0.8];
        let c = [1.2, 0.9];
        let hh = [1.0, 0.4];
        let g = [0.3, 0.5];
        let qm = [[-1.5, 1.5], [0.5, -0.5]];
        let theta = [[0.0, 0.05], [0.2, 0.0]];
        for k in 1..4 {
            for l in 0..2 {
                for s in 0..2 {
                    let v = |kk: usize| u.get(l, s, kk);
                    let mu: f64 = -b[s];
                    let uxx = (v(k + 1) - 2.0 * v(k) + v(k - 1)) / (h * h);
                    let ux_up = if mu > 0.0 {
                        (v(k + 1) - v(k)) / h
                    } else {
                        (v(k) - v(k - 1)) / h
                    };
                    let mut lu = a[s] * uxx + mu * ux_up;
                    for kappa in 0..2 {
                        lu += qm[s][kappa] * (u.get(l, kappa, k) - v(k));
                    }
                    let grad = (v(k + 1) - v(k - 1)) / (2.0 * h);
                    let mut expected =
                        c[s] * v(k) - lu - hh[s] + phi_scaled(grad * grad - g[s] * g[s], eps);
                    let other = 1 - l;
                    expected += phi_scaled(v(k) - u.get(other, s, k) - theta[l][other], delta);
                    assert!((r.get(l, s, k) - expected).abs() < 1e-10, "{k} {l} {s}");
                }
            }
        }
        for l in 0..2 {
            for s in 0..2 {
                assert_eq!(r.get(l, s, 0), 0.0);
                assert_eq!(r.get(l, s, 4), 0.0);
            }
        }
    }

    fn phi_scaled(t: f64, e: f64) -> f64 {
        let t = t / e;
        if t <= 0.0 {
            0.0
        } else if t >= 2.0 {
            t - 1.0
        } else {
            t * t * t / 4.0 - t * t * t * t / 16.0
        }
    }

    #[test]
    fn benchmark_converges_within_bounds_from_two_starts() {
        let (spec, grid) = benchmark(101);
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        let (u1, r1) = solver.solve(&NpdsConfig::new(0.1, 0.1)).unwrap();
        assert!(r1.converged, "{r1:?}");
        assert!(r1.bound_violations.is_empty());
        let zero = solver.disc.boundary_field(FieldKind::Other);
        let (u2, r2) = solver
            .solve(&NpdsConfig::new(0.1, 0.1).with_initial(zero))
            .unwrap();
        assert!(r2.converged);
        assert!(u1.sup_diff(&u2) <= 10.0 * r1.tolerance);
        // A further T̄ application barely moves the fixed point.
        let t = solver.picard_map(&u1, 0.1, 0.1).unwrap();
        assert!(t.sup_diff(&u1) <= 2.0 * r1.tolerance);
    }

    #[test]
    fn picard_agrees_with_newton() {
        let (spec, grid) = benchmark(41);
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        let (un, _) = solver.solve(&NpdsConfig::new(0.2, 0.2)).unwrap();
        let (up, rp) = solver
            .solve(&NpdsConfig::new(0.2, 0.2).with_method(Method::Picard))
            .unwrap();
        assert!(rp.converged, "{rp:?}");
        assert!(rp.newton_steps == 0 && rp.picard_steps > 0);
        assert!(un.sup_diff(&up) < 1e-7);
    }

    #[test]
    fn picard_never_raises_the_residual_above_the_start() {
        let (spec, grid) = benchmark(201);
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        let mut cfg = NpdsConfig::new(0.025, 0.025).with_method(Method::Picard);
        cfg.max_outer = 60;
        let (u, rep) = solver.solve(&cfg).unwrap();
        assert!(u.all_finite());
        let start = rep.residual_history[0];
        assert!(
            rep.residual_history.iter().all(|r| *r <= start),
            "{:?}",
            rep.residual_history
        );
    }

    #[test]
    fn comparison_reports() {
        let (spec, grid) = benchmark(41);
        let solver = NpdsSolver::new(&spec, &grid).unwrap();
        let cfg = NpdsConfig::new(0.1, 0.1);
        let (u, _) = solver.solve(&cfg).unwrap();
        let zero = solver.disc.boundary_field(FieldKind::Other);
        assert!(
            solver
                .check_comparison(&zero, &solver.upper, &cfg)
                .unwrap()
                .passed
        );
        assert!(
            solver
                .check_comparison(&u, &solver.upper, &cfg)
                .unwrap()
                .passed
        );
        let mut bad = solver.upper.clone();
        bad.values_mut().iter_mut().for_each(|v| *v += 1.0);
        let rep = solver.check_comparison(&bad, &solver.upper, &cfg).unwrap();
        assert!(!rep.preconditions_hold && !rep.passed);
        assert!(rep.boundary_witness.is_some());
    }

    #[test]
    fn dearer_switching_raises_solution() {
        let (spec, grid) = benchmark(41);
        let cfg = NpdsConfig::new(0.1, 0.1);
        let (u, rep) = solve_npds(&spec, &grid, &cfg).unwrap();
        let mut dear = spec.clone();
        dear.costs = spec.costs.shifted(1.0);
        let (v, _) = solve_npds(&dear, &grid, &cfg).unwrap();
        for (a, b) in v.values().iter().zip(u.values()) {
            assert!(*a >= b - rep.tolerance);
        }
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let (spec, grid) = benchmark(61);
        let cfg = NpdsConfig::new(0.05, 0.05);
        let (a, _) = solve_npds(&spec, &grid, &cfg).unwrap();
        let (b, _) = solve_npds(&spec, &grid, &cfg).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_bad_parameters() {
        let (spec, grid) = single(1.0, 1.0);
        assert!(solve_npds(&spec, &grid, &NpdsConfig::new(0.0, 0.1)).is_err());
        assert!(solve_npds(&spec, &grid, &NpdsConfig::new(0.1, 1.5)).is_err());
    }
}
