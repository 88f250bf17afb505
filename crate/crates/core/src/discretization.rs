//! Monotone finite-difference operators on a tensor grid.
//!
//! Diffusion uses central second differences, the drift is upwinded with
//! respect to the drift of the state process (`−b`), and a nonzero `a₁₂` uses
//! the seven-point cross stencil whose diagonal pair follows the sign of
//! `a₁₂`. Every row of `c − L` is then an M-matrix row whenever the grid
//! resolves the cross term, which the assembler checks node by node.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FieldKind, FieldMatrix, Grid, NodeCoefficients};
use crate::linalg::{self, CsrBuilder, CsrMatrix};
use crate::model::{ProblemSpec, SwitchingCosts};

/// One interior row of `c − L̃` for a fixed `(regime, state)` block, where
/// `L̃` is the spatial part without the chain coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilRow {
    pub node: usize,
    pub diag: f64,
    /// Off-diagonal entries `(node, weight)`, all `≤ 0`.
    pub neighbors: Vec<(usize, f64)>,
}

/// Rows of `c_ι − L_{ℓ,ι}` for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorStencil {
    pub regime: usize,
    pub state: usize,
    /// One row per interior node, in the grid's interior order.
    pub rows: Vec<StencilRow>,
    /// Chain coupling `−q_ℓ(ι, κ)` to state `κ` at the same node.
    pub coupling: Vec<(usize, f64)>,
    /// `−q_ℓ(ι, ι)`, added to the diagonal by the chain.
    pub coupling_diag: f64,
}

impl OperatorStencil {
    /// `(c − L̃) v` at interior row `r` for a block accessor `v(node)`.
    #[inline]
    pub fn apply_spatial(&self, r: usize, v: impl Fn(usize) -> f64) -> f64 {
        let row = &self.rows[r];
        let mut acc = row.diag * v(row.node);
        for &(k, w) in &row.neighbors {
            acc += w * v(k);
        }
        acc
    }

    /// Smallest diagonal and largest off-diagonal over all rows, including
    /// the chain coupling.
    pub fn sign_pattern(&self) -> (f64, f64) {
        let mut min_diag = f64::INFINITY;
        let mut max_off = f64::NEG_INFINITY;
        for row in &self.rows {
            min_diag = min_diag.min(row.diag + self.coupling_diag);
            for &(_, w) in &row.neighbors {
                max_off = max_off.max(w);
            }
            for &(_, w) in &self.coupling {
                max_off = max_off.max(w);
            }
        }
        (min_diag, max_off)
    }
}

/// Builds the stencil of `c_ι − L_{ℓ,ι}`.
pub fn assemble_l(
    spec: &ProblemSpec,
    grid: &Grid,
    regime: usize,
    state: usize,
) -> Result<OperatorStencil> {
    let coeffs = NodeCoefficients::sample(spec, grid);
    assemble_block(spec, grid, &coeffs, regime, state)
}

fn assemble_block(
    spec: &ProblemSpec,
    grid: &Grid,
    coeffs: &NodeCoefficients,
    regime: usize,
    state: usize,
) -> Result<OperatorStencil> {
    let dim = grid.dim();
    let h = grid.spacing();
    let [nx, _] = grid.nodes();
    let mut rows = Vec::with_capacity(grid.interior().len());
    for &k in grid.interior() {
        let p = coeffs.at(state, k);
        let mut diag = p.c;
        let mut neighbors: Vec<(usize, f64)> = Vec::with_capacity(8);
        let mut axis_w = [[0.0f64; 2]; 2];
        for axis in 0..dim {
            let a = p.a[axis][axis];
            let mu = -p.b[axis];
            let h2 = h[axis] * h[axis];
            axis_w[axis][0] = a / h2 + mu.max(0.0) / h[axis];
            axis_w[axis][1] = a / h2 + (-mu).max(0.0) / h[axis];
        }
        let mut diag_w = Vec::new();
        if dim == 2 {
            let a12 = 0.5 * (p.a[0][1] + p.a[1][0]);
            if a12 != 0.0 {
                let w = a12.abs() / (h[0] * h[1]);
                for axis in 0..2 {
                    axis_w[axis][0] -= w;
                    axis_w[axis][1] -= w;
                }
                let (i, j) = grid.ij(k);
                if a12 > 0.0 {
                    diag_w.push((grid.index(i + 1, j + 1), w));
                    diag_w.push((grid.index(i - 1, j - 1), w));
                } else {
                    diag_w.push((grid.index(i + 1, j - 1), w));
                    diag_w.push((grid.index(i - 1, j + 1), w));
                }
            }
        }
        for axis in 0..dim {
            let s = if axis == 0 { 1 } else { nx };
            let [up, down] = axis_w[axis];
            if up < 0.0 || down < 0.0 {
                return Err(Error::MonotonicityLoss {
                    regime,
                    state,
                    node: k,
                    detail: format!(
                        "cross term |a12| exceeds a{0}{0}·h{1}/h{0} on axis {0}; refine the grid or reduce a12",
                        axis + 1,
                        if axis == 0 { 2 } else { 1 }
                    ),
                });
            }
            diag += up + down;
            neighbors.push((k + s, -up));
            neighbors.push((k - s, -down));
        }
        for (kk, w) in diag_w {
            diag += w;
            neighbors.push((kk, -w));
        }
        neighbors.retain(|&(_, w)| w != 0.0);
        neighbors.sort_by_key(|&(kk, _)| kk);
        rows.push(StencilRow {
            node: k,
            diag,
            neighbors,
        });
    }
    let q = &spec.generators[regime];
    let coupling = (0..spec.idx.n)
        .filter(|&kappa| kappa != state && q.rate(state, kappa) != 0.0)
        .map(|kappa| (kappa, -q.rate(state, kappa)))
        .collect();
    Ok(OperatorStencil {
        regime,
        state,
        rows,
        coupling,
        coupling_diag: q.exit_rate(state),
    })
}

/// `M_{ℓ,ι}u` at a node and its minimizing regime (lowest index on ties).
/// With a single regime the minimum is empty: `(+∞, None)`.
pub fn apply_m(
    u: &FieldMatrix,
    costs: &SwitchingCosts,
    regime: usize,
    state: usize,
    node: usize,
) -> (f64, Option<usize>) {
    min_switch(costs, regime, |l| u.get(l, state, node))
}

/// `min_{ℓ' ≠ ℓ} (value(ℓ') + ϑ_{ℓ,ℓ'})` with lowest-index tie-break.
#[inline]
pub fn min_switch(
    costs: &SwitchingCosts,
    regime: usize,
    value: impl Fn(usize) -> f64,
) -> (f64, Option<usize>) {
    let mut best = f64::INFINITY;
    let mut arg = None;
    for l in 0..costs.regimes() {
        if l == regime {
            continue;
        }
        let v = value(l) + costs.cost(regime, l);
        if v < best {
            best = v;
            arg = Some(l);
        }
    }
    (best, arg)
}

/// Problem discretized on a grid: sampled coefficients and one stencil per
/// `(regime, state)` block.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub spec: ProblemSpec,
    pub grid: Grid,
    pub coeffs: NodeCoefficients,
    stencils: Vec<OperatorStencil>,
}

impl Discretization {
    pub fn new(spec: &ProblemSpec, grid: &Grid) -> Result<Self> {
        if grid.dim() != spec.dim() {
            return Err(Error::InvalidGrid(format!(
                "{}D grid for a {}D domain",
                grid.dim(),
                spec.dim()
            )));
        }
        let coeffs = NodeCoefficients::sample(spec, grid);
        let (m, n) = (spec.idx.m, spec.idx.n);
        let stencils = (0..m * n)
            .into_par_iter()
            .map(|b| assemble_block(spec, grid, &coeffs, b / n, b % n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            grid: grid.clone(),
            coeffs,
            stencils,
        })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.spec.idx.m
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.spec.idx.n
    }

    #[inline]
    pub fn blocks(&self) -> usize {
        self.m() * self.n()
    }

    #[inline]
    pub fn stencil(&self, regime: usize, state: usize) -> &OperatorStencil {
        &self.stencils[regime * self.n() + state]
    }

    /// Global unknown index of `(regime, state, node)`, matching the field
    /// storage order.
    #[inline]
    pub fn unknown(&self, regime: usize, state: usize, node: usize) -> usize {
        node * self.blocks() + regime * self.n() + state
    }

    /// Zero field carrying the boundary data `f`.
    pub fn boundary_field(&self, kind: FieldKind) -> FieldMatrix {
        let mut u = FieldMatrix::zeros(self.m(), self.n(), &self.grid, kind);
        self.impose_boundary(&mut u);
        u
    }

    /// Overwrites boundary nodes with `f`.
    pub fn impose_boundary(&self, u: &mut FieldMatrix) {
        for k in 0..self.grid.len() {
            if self.grid.is_boundary(k) {
                for l in 0..self.m() {
                    for s in 0..self.n() {
                        u.set(l, s, k, self.coeffs.at(s, k).f);
                    }
                }
            }
        }
    }

    /// Largest deviation from the boundary data over boundary nodes, with
    /// the offending `(regime, state, node)`.
    pub fn boundary_violation(&self, u: &FieldMatrix) -> (f64, Option<(usize, usize, usize)>) {
        let mut worst = 0.0;
        let mut at = None;
        for k in 0..self.grid.len() {
            if !self.grid.is_boundary(k) {
                continue;
            }
            for l in 0..self.m() {
                for s in 0..self.n() {
                    let d = (u.get(l, s, k) - self.coeffs.at(s, k).f).abs();
                    if d > worst {
                        worst = d;
                        at = Some((l, s, k));
                    }
                }
            }
        }
        (worst, at)
    }

    /// `(c − L_{ℓ,ι}) u` at interior row `r` (chain coupling included).
    #[inline]
    pub fn apply_linear(&self, u: &FieldMatrix, regime: usize, state: usize, r: usize) -> f64 {
        let st = self.stencil(regime, state);
        let k = st.rows[r].node;
        let mut acc = st.apply_spatial(r, |kk| u.get(regime, state, kk));
        acc += st.coupling_diag * u.get(regime, state, k);
        for &(kappa, w) in &st.coupling {
            acc += w * u.get(regime, kappa, k);
        }
        acc
    }

    /// Central-difference gradient at a node; one-sided on the boundary.
    #[inline]
    pub fn gradient(&self, u: &FieldMatrix, regime: usize, state: usize, node: usize) -> [f64; 2] {
        let mut g = [0.0; 2];
        let nodes = self.grid.nodes();
        let h = self.grid.spacing();
        let (i, j) = self.grid.ij(node);
        for (axis, slot) in g.iter_mut().enumerate().take(self.grid.dim()) {
            let pos = if axis == 0 { i } else { j };
            let s = self.grid.stride(axis);
            let (lo, hi, span) = if pos == 0 {
                (node, node + s, h[axis])
            } else if pos + 1 == nodes[axis] {
                (node - s, node, h[axis])
            } else {
                (node - s, node + s, 2.0 * h[axis])
            };
            *slot = (u.get(regime, state, hi) - u.get(regime, state, lo)) / span;
        }
        g
    }

    /// Frobenius norm of the discrete Hessian at an interior node.
    pub fn hessian_norm(&self, u: &FieldMatrix, regime: usize, state: usize, node: usize) -> f64 {
        let v = |k: usize| u.get(regime, state, k);
        let h = self.grid.spacing();
        let c = v(node);
        let mut sq = 0.0;
        for axis in 0..self.grid.dim() {
            let s = self.grid.stride(axis);
            let d2 = (v(node + s) - 2.0 * c + v(node - s)) / (h[axis] * h[axis]);
            sq += d2 * d2;
        }
        if self.grid.dim() == 2 {
            let nx = self.grid.nodes()[0];
            let dxy = (v(node + 1 + nx) - v(node + 1 - nx) - v(node - 1 + nx) + v(node - 1 - nx))
                / (4.0 * h[0] * h[1]);
            sq += 2.0 * dxy * dxy;
        }
        sq.sqrt()
    }

    /// Global matrix of the block-coupled linear operator `c − L` with
    /// identity rows on the boundary, plus `extra(regime, state, node)` on
    /// interior diagonals.
    pub fn linear_system(&self, extra: impl Fn(usize, usize, usize) -> f64) -> CsrMatrix {
        let (m, n) = (self.m(), self.n());
        let total = self.grid.len() * m * n;
        let mut b = CsrBuilder::new(total);
        let row_of = self.interior_rows();
        for k in 0..self.grid.len() {
            for l in 0..m {
                for s in 0..n {
                    match row_of[k] {
                        None => b.add(self.unknown(l, s, k), 1.0),
                        Some(r) => {
                            let st = self.stencil(l, s);
                            let row = &st.rows[r];
                            b.add(
                                self.unknown(l, s, k),
                                row.diag + st.coupling_diag + extra(l, s, k),
                            );
                            for &(kk, w) in &row.neighbors {
                                b.add(self.unknown(l, s, kk), w);
                            }
                            for &(kappa, w) in &st.coupling {
                                b.add(self.unknown(l, kappa, k), w);
                            }
                        }
                    }
                    b.finish_row();
                }
            }
        }
        b.build()
    }

    /// Map from node to its interior row index.
    pub fn interior_rows(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.grid.len()];
        for (r, &k) in self.grid.interior().iter().enumerate() {
            map[k] = Some(r);
        }
        map
    }

    /// Maximum-principle bound `Λ · max{1, 1/min c}` with
    /// `Λ = max(‖h‖∞, ‖f‖∞)`, from the sampled node coefficients.
    pub fn dirichlet_bound(&self) -> f64 {
        let mut lam: f64 = 0.0;
        let mut cmin = f64::INFINITY;
        for s in 0..self.n() {
            for k in 0..self.grid.len() {
                let p = self.coeffs.at(s, k);
                lam = lam.max(p.h.abs()).max(p.f.abs());
                cmin = cmin.min(p.c);
            }
        }
        lam * 1.0f64.max(1.0 / cmin)
    }
}

/// Solves `[c − L] ū = h` with `ū = f` on the boundary for every block.
pub fn solve_dirichlet_bound(spec: &ProblemSpec, grid: &Grid) -> Result<FieldMatrix> {
    let disc = Discretization::new(spec, grid)?;
    dirichlet_solution(&disc)
}

/// Dirichlet solve on an existing discretization.
pub fn dirichlet_solution(disc: &Discretization) -> Result<FieldMatrix> {
    let a = disc.linear_system(|_, _, _| 0.0);
    let mut rhs = vec![0.0; a.dim()];
    for k in 0..disc.grid.len() {
        for l in 0..disc.m() {
            for s in 0..disc.n() {
                let p = disc.coeffs.at(s, k);
                rhs[disc.unknown(l, s, k)] = if disc.grid.is_boundary(k) { p.f } else { p.h };
            }
        }
    }
    let x = linalg::solve(&a, &rhs, None)?;
    let mut u =
        FieldMatrix::from_values(disc.m(), disc.n(), &disc.grid, FieldKind::SuperSolution, x)?;
    // Boundary rows are identities; make them exact regardless of round-off.
    disc.impose_boundary(&mut u);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coefficients, Domain, GeneratorMatrix, StateCoefficients};

    fn spec_1d(
        states: Vec<StateCoefficients>,
        q: Vec<Vec<f64>>,
        theta: Vec<Vec<f64>>,
    ) -> ProblemSpec {
        let m = theta.len();
        let gens = (0..m)
            .map(|_| GeneratorMatrix::from_rows(&q).unwrap())
            .collect();
        ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            gens,
            Coefficients::new(states),
            SwitchingCosts::new(&theta).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn laplacian_row() {
        let spec = spec_1d(
            vec![StateCoefficients::constant(1, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)],
            vec![vec![0.0]],
            vec![vec![0.0]],
        );
        let grid = Grid::uniform(&spec.domain, 11).unwrap();
        let st = assemble_l(&spec, &grid, 0, 0).unwrap();
        let d = grid.spacing()[0];
        let row = &st.rows[3];
        assert!((row.diag - 2.0 / (d * d)).abs() < 1e-9);
        for &(_, w) in &row.neighbors {
            assert!((w + 1.0 / (d * d)).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_is_upwinded_toward_motion() {
        // b = 2: the state drifts left, so the left neighbour carries the
        // extra weight.
        let spec = spec_1d(
            vec![StateCoefficients::constant(1, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0)],
            vec![vec![0.0]],
            vec![vec![0.0]],
        );
        let grid = Grid::uniform(&spec.domain, 11).unwrap();
        let st = assemble_l(&spec, &grid, 0, 0).unwrap();
        let d = grid.spacing()[0];
        let row = &st.rows[4];
        let left = row
            .neighbors
            .iter()
            .find(|e| e.0 == row.node - 1)
            .unwrap()
            .1;
        let right = row
            .neighbors
            .iter()
            .find(|e| e.0 == row.node + 1)
            .unwrap()
            .1;
        assert!((left + 1.0 / (d * d) + 2.0 / d).abs() < 1e-9);
        assert!((right + 1.0 / (d * d)).abs() < 1e-9);
        let (min_diag, max_off) = st.sign_pattern();
        assert!(min_diag > 0.0 && max_off <= 0.0);
    }

    #[test]
    fn chain_coupling_entries() {
        let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        let st = StateCoefficients::constant(1, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let spec = spec_1d(vec![st.clone(), st], q, vec![vec![0.0]]);
        let grid = Grid::uniform(&spec.domain, 11).unwrap();
        let s = assemble_l(&spec, &grid, 0, 0).unwrap();
        assert_eq!(s.coupling_diag, 1.0);
        assert_eq!(s.coupling, vec![(1, -1.0)]);
    }

    #[test]
    fn constants_map_to_discount() {
        let q = vec![vec![-1.0, 1.0], vec![2.0, -2.0]];
        let a = StateCoefficients::constant(2, 1.0, 0.5, 1.5, 0.0, 0.0, 0.0);
        let mut b = StateCoefficients::constant(2, 2.0, -1.0, 0.7, 0.0, 0.0, 0.0);
        b.a[0][1] = crate::expr::Expr::constant(0.4);
        b.a[1][0] = crate::expr::Expr::constant(0.4);
        let gens = vec![GeneratorMatrix::from_rows(&q).unwrap()];
        let spec = ProblemSpec::new(
            Domain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            gens,
            Coefficients::new(vec![a, b]),
            SwitchingCosts::single_regime(),
        )
        .unwrap();
        let grid = Grid::uniform(&spec.domain, 9).unwrap();
        let disc = Discretization::new(&spec, &grid).unwrap();
        let mut one = FieldMatrix::zeros(1, 2, &grid, FieldKind::Other);
        one.values_mut().fill(1.0);
        for s in 0..2 {
            let c = if s == 0 { 1.5 } else { 0.7 };
            for r in 0..grid.interior().len() {
                assert!((disc.apply_linear(&one, 0, s, r) - c).abs() < 1e-9);
            }
            let (min_diag, max_off) = disc.stencil(0, s).sign_pattern();
            assert!(min_diag > 0.0 && max_off <= 0.0);
        }
    }

    #[test]
    fn unresolved_cross_term_is_rejected() {
        let mut a = StateCoefficients::constant(2, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        a.a[0][1] = crate::expr::Expr::constant(0.9);
        a.a[1][0] = crate::expr::Expr::constant(0.9);
        a.a[1][1] = crate::expr::Expr::constant(1.0);
        // Anisotropic spacing: h1/h2 = 4 so a11·h2/h1 < |a12|.
        let spec = ProblemSpec::new(
            Domain::new(vec![0.0, 0.0], vec![4.0, 1.0]).unwrap(),
            vec![GeneratorMatrix::zero(1)],
            Coefficients::new(vec![a]),
            SwitchingCosts::single_regime(),
        )
        .unwrap();
        let grid = Grid::uniform(&spec.domain, 11).unwrap();
        assert!(matches!(
            Discretization::new(&spec, &grid),
            Err(Error::MonotonicityLoss { .. })
        ));
    }

    #[test]
    fn switching_operator() {
        let grid = Grid::uniform(&Domain::interval(0.0, 1.0).unwrap(), 3).unwrap();
        let mut u = FieldMatrix::zeros(3, 1, &grid, FieldKind::Other);
        u.set(1, 0, 1, 3.0);
        u.set(2, 0, 1, 1.0);
        let costs = SwitchingCosts::new(&[
            vec![0.0, 1.0, 4.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(apply_m(&u, &costs, 0, 0, 1), (4.0, Some(1)));
        let tie = SwitchingCosts::new(&[
            vec![0.0, 1.0, 3.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(apply_m(&u, &tie, 0, 0, 1), (4.0, Some(1)));
        let single = FieldMatrix::zeros(1, 1, &grid, FieldKind::Other);
        assert_eq!(
            apply_m(&single, &SwitchingCosts::single_regime(), 0, 0, 1),
            (f64::INFINITY, None)
        );
    }

    fn cosh_error(nodes: usize) -> f64 {
        let spec = spec_1d(
            vec![StateCoefficients::constant(1, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0)],
            vec![vec![0.0]],
            vec![vec![0.0]],
        );
        let grid = Grid::uniform(&spec.domain, nodes).unwrap();
        let u = solve_dirichlet_bound(&spec, &grid).unwrap();
        (0..grid.len())
            .map(|k| {
                let x = grid.coord(k)[0];
                (u.get(0, 0, k) - (1.0 - x.cosh() / 1f64.cosh())).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn dirichlet_cosh_second_order() {
        let e1 = cosh_error(201);
        let e2 = cosh_error(401);
        let d = 0.01;
        assert!(e1 <= 10.0 * d * d, "{e1}");
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn dirichlet_zero_data_and_bound() {
        let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        let zero = StateCoefficients::constant(1, 1.0, 0.3, 1.0, 0.0, 0.0, 0.0);
        let spec = spec_1d(vec![zero.clone(), zero], q.clone(), vec![vec![0.0]]);
        let grid = Grid::uniform(&spec.domain, 21).unwrap();
        let u = solve_dirichlet_bound(&spec, &grid).unwrap();
        assert_eq!(u.sup_norm(), 0.0);

        let s1 = StateCoefficients::constant(1, 1.0, 0.0, 0.5, 2.0, 0.0, 0.3);
        let s2 = StateCoefficients::constant(1, 0.5, -1.0, 2.0, 0.5, 0.0, 0.1);
        let spec = spec_1d(vec![s1, s2], q, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let disc = Discretization::new(&spec, &grid).unwrap();
        let u = dirichlet_solution(&disc).unwrap();
        assert!(u.values().iter().all(|&v| v >= 0.0));
        assert!(u.sup_norm() <= disc.dirichlet_bound() + 1e-12);
        assert_eq!(disc.boundary_violation(&u).0, 0.0);
    }
}
