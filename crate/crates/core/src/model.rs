//! Problem instances: domain, chain generators, coefficients and switching costs.
//!
//! Regimes and chain states are 0-based internally. Anything printed for a
//! human (validation witnesses, CLI output) is 1-based.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Tolerance for generator row sums and the triangle inequality.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Minimum eigenvalue below which the diffusion is declared degenerate.
pub const ELLIPTICITY_TOL: f64 = 1e-10;
/// Default number of sample points per axis used by the pointwise checks.
pub const DEFAULT_SAMPLES: usize = 33;

/// Axis-aligned open box `∏ (lower_i, upper_i)` in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidModel(format!(
                "domain bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if !(1..=2).contains(&lower.len()) {
            return Err(Error::InvalidModel(format!(
                "domain dimension must be 1 or 2, got {}",
                lower.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidModel(format!(
                    "domain axis {i}: need finite lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains_open(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|i| x[i] > self.lower[i] && x[i] < self.upper[i])
    }

    pub fn contains_closed(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lower[i] && x[i] <= self.upper[i])
    }

    /// Tensor lattice with `per_axis` points per axis, endpoints included.
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let per_axis = per_axis.max(1);
        let axis = |i: usize| -> Vec<f64> {
            if per_axis == 1 {
                return vec![0.5 * (self.lower[i] + self.upper[i])];
            }
            let h = (self.upper[i] - self.lower[i]) / (per_axis - 1) as f64;
            (0..per_axis)
                .map(|k| self.lower[i] + h * k as f64)
                .collect()
        };
        match self.dim() {
            1 => axis(0).into_iter().map(|x| vec![x]).collect(),
            _ => {
                let (xs, ys) = (axis(0), axis(1));
                ys.iter()
                    .flat_map(|&y| xs.iter().map(move |&x| vec![x, y]))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeChainIndex {
    /// Number of regimes.
    pub m: usize,
    /// Number of chain states.
    pub n: usize,
}

impl RegimeChainIndex {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidModel(format!(
                "need at least one regime and one chain state, got m = {m}, n = {n}"
            )));
        }
        Ok(Self { m, n })
    }

    /// Number of `(regime, state)` blocks.
    pub fn blocks(&self) -> usize {
        self.m * self.n
    }

    #[inline]
    pub fn block(&self, regime: usize, state: usize) -> usize {
        regime * self.n + state
    }
}

/// Transition-rate matrix of the chain while one regime is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct GeneratorMatrix {
    n: usize,
    rates: Vec<f64>,
}

impl GeneratorMatrix {
    /// Builds from full rows; off-diagonals must be nonnegative and each row
    /// must sum to zero within [`ROW_SUM_TOL`]. The diagonal is then reset to
    /// minus the off-diagonal sum so rows sum to zero exactly.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidModel("generator matrix is empty".into()));
        }
        let mut rates = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidModel(format!(
                    "generator row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            let mut off = 0.0;
            for (k, &q) in row.iter().enumerate() {
                if !q.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "generator entry ({}, {}) is not finite",
                        i + 1,
                        k + 1
                    )));
                }
                if k != i {
                    if q < 0.0 {
                        return Err(Error::InvalidModel(format!(
                            "generator off-diagonal ({}, {}) = {q} is negative",
                            i + 1,
                            k + 1
                        )));
                    }
                    off += q;
                    rates[i * n + k] = q;
                }
            }
            let sum = off + row[i];
            if sum.abs() > ROW_SUM_TOL * (1.0 + off) {
                return Err(Error::InvalidModel(format!(
                    "generator row {} sums to {sum:e}, expected 0",
                    i + 1
                )));
            }
            rates[i * n + i] = -off;
        }
        Ok(Self { n, rates })
    }

    /// Builds from off-diagonal rates only, filling the diagonal.
    pub fn from_off_diagonal(rows: &[Vec<f64>]) -> Result<Self> {
        let mut full = rows.to_vec();
        for (i, row) in full.iter_mut().enumerate() {
            if i < row.len() {
                row[i] = 0.0;
                let off: f64 = row.iter().sum();
                row[i] = -off;
            }
        }
        Self::from_rows(&full)
    }

    pub fn zero(n: usize) -> Self {
        Self {
            n,
            rates: vec![0.0; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[from * self.n + to]
    }

    /// Total jump intensity `−q(ι,ι)` out of `state`.
    #[inline]
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.rates[state * self.n + state]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.rates.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.rates
            .chunks(self.n)
            .map(|r| r.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<Vec<f64>>> for GeneratorMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<GeneratorMatrix> for Vec<Vec<f64>> {
    fn from(q: GeneratorMatrix) -> Self {
        q.rows()
    }
}

/// Coefficient expressions for one chain state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCoefficients {
    /// Diffusion matrix `a = ½σσᵀ`, `d × d`.
    pub a: Vec<Vec<Expr>>,
    /// Drift field; the state moves with drift `−b`.
    pub b: Vec<Expr>,
    /// Discount rate.
    pub c: Expr,
    /// Running cost.
    pub h: Expr,
    /// Unit cost of the singular control; also the gradient bound.
    pub g: Expr,
    /// Terminal (boundary) cost.
    pub f: Expr,
}

/// Point values of one state's coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointCoefficients {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub c: f64,
    pub h: f64,
    pub g: f64,
    pub f: f64,
}

impl StateCoefficients {
    /// Constant coefficients with `a = a_diag · I`.
    pub fn constant(dim: usize, a_diag: f64, b: f64, c: f64, h: f64, g: f64, f: f64) -> Self {
        let a = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| Expr::constant(if i == j { a_diag } else { 0.0 }))
                    .collect()
            })
            .collect();
        Self {
            a,
            b: (0..dim).map(|_| Expr::constant(b)).collect(),
            c: Expr::constant(c),
            h: Expr::constant(h),
            g: Expr::constant(g),
            f: Expr::constant(f),
        }
    }

    pub fn eval(&self, x: &[f64]) -> PointCoefficients {
        let mut p = PointCoefficients::default();
        for (i, row) in self.a.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                p.a[i][j] = e.eval(x);
            }
        }
        for (i, e) in self.b.iter().enumerate() {
            p.b[i] = e.eval(x);
        }
        p.c = self.c.eval(x);
        p.h = self.h.eval(x);
        p.g = self.g.eval(x);
        p.f = self.f.eval(x);
        p
    }

    fn all_exprs(&self) -> impl Iterator<Item = &Expr> {
        self.a
            .iter()
            .flatten()
            .chain(self.b.iter())
            .chain([&self.c, &self.h, &self.g, &self.f])
    }

    /// True when every coefficient folded to a constant.
    pub fn is_constant(&self) -> bool {
        self.all_exprs().all(|e| e.as_constant().is_some())
    }
}

/// Coefficients for every chain state, shared by all regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coefficients {
    pub states: Vec<StateCoefficients>,
}

impl Coefficients {
    pub fn new(states: Vec<StateCoefficients>) -> Self {
        Self { states }
    }

    #[inline]
    pub fn eval(&self, state: usize, x: &[f64]) -> PointCoefficients {
        self.states[state].eval(x)
    }

    fn check_shape(&self, dim: usize) -> Result<()> {
        for (s, st) in self.states.iter().enumerate() {
            if st.a.len() != dim || st.a.iter().any(|r| r.len() != dim) {
                return Err(Error::InvalidModel(format!(
                    "state {}: diffusion matrix must be {dim}x{dim}",
                    s + 1
                )));
            }
            if st.b.len() != dim {
                return Err(Error::InvalidModel(format!(
                    "state {}: drift must have {dim} components",
                    s + 1
                )));
            }
            if let Some(e) = st.all_exprs().find(|e| e.arity() > dim) {
                return Err(Error::InvalidModel(format!(
                    "state {}: expression '{}' uses coordinates beyond dimension {dim}",
                    s + 1,
                    e
                )));
            }
        }
        Ok(())
    }
}

/// Smallest eigenvalue of the leading `dim × dim` block of a symmetric matrix.
pub fn min_eigenvalue(a: &[[f64; 2]; 2], dim: usize) -> f64 {
    if dim == 1 {
        return a[0][0];
    }
    let mean = 0.5 * (a[0][0] + a[1][1]);
    let half_diff = 0.5 * (a[0][0] - a[1][1]);
    let off = 0.5 * (a[0][1] + a[1][0]);
    mean - (half_diff * half_diff + off * off).sqrt()
}

/// Switching costs `ϑ_{ℓ,ℓ'}`; the diagonal is stored as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SwitchingCosts {
    m: usize,
    theta: Vec<f64>,
}

impl SwitchingCosts {
    /// Requires a square matrix of finite nonnegative off-diagonal entries.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidModel("switching cost matrix is empty".into()));
        }
        let mut theta = vec![0.0; m * m];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidModel(format!(
                    "switching cost row {} has {} entries, expected {m}",
                    i + 1,
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "switching cost ({}, {}) = {v} must be finite and nonnegative",
                        i + 1,
                        j + 1
                    )));
                }
                theta[i * m + j] = v;
            }
        }
        Ok(Self { m, theta })
    }

    pub fn single_regime() -> Self {
        Self {
            m: 1,
            theta: vec![0.0],
        }
    }

    pub fn regimes(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn cost(&self, from: usize, to: usize) -> f64 {
        self.theta[from * self.m + to]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.theta.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    /// Returns a copy with every off-diagonal cost shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.m {
            for j in 0..self.m {
                if i != j {
                    out.theta[i * self.m + j] += delta;
                }
            }
        }
        out
    }

    /// First violation `ϑ_{ℓ₁,ℓ₃} > ϑ_{ℓ₁,ℓ₂} + ϑ_{ℓ₂,ℓ₃}` over distinct triples.
    pub fn triangle_violation(&self) -> Option<(usize, usize, usize)> {
        let m = self.m;
        for l1 in 0..m {
            for l3 in 0..m {
                if l3 == l1 {
                    continue;
                }
                for l2 in 0..m {
                    if l2 == l1 || l2 == l3 {
                        continue;
                    }
                    let direct = self.cost(l1, l3);
                    let via = self.cost(l1, l2) + self.cost(l2, l3);
                    if direct > via + ROW_SUM_TOL * (1.0 + via) {
                        return Some((l1, l2, l3));
                    }
                }
            }
        }
        None
    }
}

impl TryFrom<Vec<Vec<f64>>> for SwitchingCosts {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(&rows)
    }
}

impl From<SwitchingCosts> for Vec<Vec<f64>> {
    fn from(c: SwitchingCosts) -> Self {
        c.rows()
    }
}

/// Directed cycle of regimes whose every edge has zero switching cost, found
/// by depth-first search over the zero-cost edge graph. The cycle is returned
/// closed (`[ℓ₀, ℓ₁, …, ℓ₀]`).
pub fn zero_cost_cycle(costs: &SwitchingCosts) -> Option<Vec<usize>> {
    let m = costs.regimes();
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Fresh,
        OnStack,
        Done,
    }
    fn dfs(
        v: usize,
        costs: &SwitchingCosts,
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        marks[v] = Mark::OnStack;
        stack.push(v);
        for w in 0..costs.regimes() {
            if w == v || costs.cost(v, w) != 0.0 {
                continue;
            }
            match marks[w] {
                Mark::OnStack => {
                    let start = stack.iter().position(|&s| s == w).unwrap();
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(w);
                    return Some(cycle);
                }
                Mark::Fresh => {
                    if let Some(c) = dfs(w, costs, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[v] = Mark::Done;
        None
    }
    let mut marks = vec![Mark::Fresh; m];
    let mut stack = Vec::new();
    for v in 0..m {
        if marks[v] == Mark::Fresh {
            if let Some(c) = dfs(v, costs, &mut marks, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

/// Location of the smallest sampled diffusion eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityWitness {
    pub theta: f64,
    pub point: Vec<f64>,
    pub state: usize,
}

fn min_sampled_eigenvalue(
    coeffs: &Coefficients,
    domain: &Domain,
    per_axis: usize,
) -> EllipticityWitness {
    let dim = domain.dim();
    let mut best = EllipticityWitness {
        theta: f64::INFINITY,
        point: domain.lower().to_vec(),
        state: 0,
    };
    for x in domain.lattice(per_axis) {
        for (s, st) in coeffs.states.iter().enumerate() {
            let p = st.eval(&x);
            let lam = min_eigenvalue(&p.a, dim);
            if lam < best.theta || lam.is_nan() {
                best = EllipticityWitness {
                    theta: lam,
                    point: x.clone(),
                    state: s,
                };
            }
        }
    }
    best
}

/// Minimum over a sampled lattice (`samples` points per axis, endpoints
/// included) and all chain states of the smallest eigenvalue of `a(x, ι)`.
pub fn estimate_theta(coeffs: &Coefficients, domain: &Domain, samples: usize) -> Result<f64> {
    let w = min_sampled_eigenvalue(coeffs, domain, samples.max(1));
    if !(w.theta > ELLIPTICITY_TOL) {
        return Err(Error::NonElliptic {
            theta: w.theta,
            point: w.point,
            state: w.state + 1,
        });
    }
    Ok(w.theta)
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub domain: Domain,
    pub idx: RegimeChainIndex,
    pub generators: Vec<GeneratorMatrix>,
    pub coeffs: Coefficients,
    pub costs: SwitchingCosts,
    /// Estimated ellipticity constant (may be ≤ 0 for an invalid instance;
    /// [`validate`] reports it).
    pub theta_ellipticity: f64,
    /// Optional sub-solution expressions, indexed `[regime][state]`.
    pub subsolution: Option<Vec<Vec<Expr>>>,
}

impl ProblemSpec {
    /// Assembles an instance, checking shapes. Assumption checks live in
    /// [`validate`].
    pub fn new(
        domain: Domain,
        generators: Vec<GeneratorMatrix>,
        coeffs: Coefficients,
        costs: SwitchingCosts,
    ) -> Result<Self> {
        let m = costs.regimes();
        let n = coeffs.states.len();
        let idx = RegimeChainIndex::new(m, n)?;
        if generators.len() != m {
            return Err(Error::InvalidModel(format!(
                "{} generator matrices for {m} regimes",
                generators.len()
            )));
        }
        for (l, q) in generators.iter().enumerate() {
            if q.size() != n {
                return Err(Error::InvalidModel(format!(
                    "generator for regime {} is {}x{0}, expected {n}x{n}",
                    l + 1,
                    q.size()
                )));
            }
        }
        coeffs.check_shape(domain.dim())?;
        let theta_ellipticity =
            min_sampled_eigenvalue(&coeffs, &domain, refined(DEFAULT_SAMPLES)).theta;
        Ok(Self {
            domain,
            idx,
            generators,
            coeffs,
            costs,
            theta_ellipticity,
            subsolution: None,
        })
    }

    pub fn with_subsolution(mut self, sub: Vec<Vec<Expr>>) -> Result<Self> {
        if sub.len() != self.idx.m || sub.iter().any(|r| r.len() != self.idx.n) {
            return Err(Error::InvalidModel(format!(
                "sub-solution must have {} regimes x {} states",
                self.idx.m, self.idx.n
            )));
        }
        self.subsolution = Some(sub);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Smallest discount rate sampled on the refined lattice.
    pub fn min_discount(&self) -> f64 {
        self.sample_extreme(|p| p.c, f64::min, f64::INFINITY)
    }

    pub fn sup_h(&self) -> f64 {
        self.sample_extreme(|p| p.h.abs(), f64::max, 0.0)
    }

    pub fn sup_f(&self) -> f64 {
        self.sample_extreme(|p| p.f.abs(), f64::max, 0.0)
    }

    fn sample_extreme(
        &self,
        pick: impl Fn(&PointCoefficients) -> f64,
        fold: fn(f64, f64) -> f64,
        init: f64,
    ) -> f64 {
        let mut acc = init;
        for x in self.domain.lattice(refined(DEFAULT_SAMPLES)) {
            for st in &self.coeffs.states {
                acc = fold(acc, pick(&st.eval(&x)));
            }
        }
        acc
    }
}

fn refined(per_axis: usize) -> usize {
    4 * (per_axis - 1) + 1
}

/// Outcome of one assumption check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub id: &'static str,
    pub description: &'static str,
    pub passed: bool,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            write!(
                f,
                "[{}] {:<28} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.id,
                c.description
            )?;
            if let Some(w) = &c.witness {
                write!(f, " -- {w}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn fmt_point(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
    format!("({})", parts.join(", "))
}

/// Checks the instance against the structural assumptions: generator
/// structure, cost structure (nonnegativity, triangle inequality, no
/// zero-cost loop), nonnegative costs, symmetric uniformly elliptic diffusion
/// and positive discount. Pointwise conditions are sampled on a lattice plus
/// its 4x refinement. Failures are report entries, never errors.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut checks = Vec::new();
    let dim = spec.dim();

    checks.push(AssumptionCheck {
        id: "domain",
        description: "bounded open box with lower < upper",
        passed: spec
            .domain
            .lower()
            .iter()
            .zip(spec.domain.upper())
            .all(|(l, u)| l < u),
        witness: None,
    });

    let mut gen_witness = None;
    for (l, q) in spec.generators.iter().enumerate() {
        let err = q.max_row_sum_error();
        let neg = (0..q.size())
            .flat_map(|i| (0..q.size()).map(move |k| (i, k)))
            .find(|&(i, k)| i != k && q.rate(i, k) < 0.0);
        if err > ROW_SUM_TOL || neg.is_some() {
            gen_witness = Some(match neg {
                Some((i, k)) => format!("regime {}: q({}, {}) < 0", l + 1, i + 1, k + 1),
                None => format!("regime {}: row sum error {err:e}", l + 1),
            });
            break;
        }
    }
    checks.push(AssumptionCheck {
        id: "generators",
        description: "nonnegative off-diagonal rates, rows sum to zero",
        passed: gen_witness.is_none(),
        witness: gen_witness,
    });

    let m = spec.idx.m;
    let neg_cost = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .find(|&(i, j)| i != j && spec.costs.cost(i, j) < 0.0);
    checks.push(AssumptionCheck {
        id: "switching_costs_nonnegative",
        description: "switching costs are nonnegative",
        passed: neg_cost.is_none(),
        witness: neg_cost
            .map(|(i, j)| format!("cost({}, {}) = {}", i + 1, j + 1, spec.costs.cost(i, j))),
    });

    let tri = spec.costs.triangle_violation();
    checks.push(AssumptionCheck {
        id: "switching_triangle",
        description: "direct switch never dearer than a two-step switch",
        passed: tri.is_none(),
        witness: tri.map(|(a, b, c)| {
            format!(
                "({}, {}, {}): cost({0},{2}) = {} > cost({0},{1}) + cost({1},{2}) = {}",
                a + 1,
                b + 1,
                c + 1,
                spec.costs.cost(a, c),
                spec.costs.cost(a, b) + spec.costs.cost(b, c)
            )
        }),
    });

    let cycle = zero_cost_cycle(&spec.costs);
    checks.push(AssumptionCheck {
        id: "no_zero_cost_loop",
        description: "no closed loop of regimes with zero total switching cost",
        passed: cycle.is_none(),
        witness: cycle.map(|c| {
            let total: f64 = c.windows(2).map(|w| spec.costs.cost(w[0], w[1])).sum();
            let path: Vec<String> = c.iter().map(|l| (l + 1).to_string()).collect();
            format!("{}, total cost {total}", path.join("->"))
        }),
    });

    let lattice = spec.domain.lattice(refined(DEFAULT_SAMPLES));
    let mut neg_running = None;
    let mut asym = None;
    let mut nonpos_c = None;
    let mut non_finite = None;
    for x in &lattice {
        for (s, st) in spec.coeffs.states.iter().enumerate() {
            let p = st.eval(x);
            let vals = [
                p.h, p.g, p.f, p.c, p.a[0][0], p.a[1][1], p.a[0][1], p.b[0], p.b[1],
            ];
            if non_finite.is_none() && vals.iter().any(|v| !v.is_finite()) {
                non_finite = Some(format!("state {} at x = {}", s + 1, fmt_point(x)));
            }
            if neg_running.is_none() {
                for (name, v) in [("h", p.h), ("g", p.g), ("f", p.f)] {
                    if v < 0.0 {
                        neg_running = Some(format!(
                            "{name} = {v} at x = {}, state {}",
                            fmt_point(x),
                            s + 1
                        ));
                        break;
                    }
                }
            }
            if asym.is_none()
                && dim == 2
                && (p.a[0][1] - p.a[1][0]).abs() > 1e-12 * (1.0 + p.a[0][1].abs())
            {
                asym = Some(format!(
                    "a12 = {} != a21 = {} at x = {}",
                    p.a[0][1],
                    p.a[1][0],
                    fmt_point(x)
                ));
            }
            if nonpos_c.is_none() && !(p.c > 0.0) {
                nonpos_c = Some(format!(
                    "c = {} at x = {}, state {}",
                    p.c,
                    fmt_point(x),
                    s + 1
                ));
            }
        }
    }
    checks.push(AssumptionCheck {
        id: "finite_coefficients",
        description: "all coefficients finite on the closed domain",
        passed: non_finite.is_none(),
        witness: non_finite,
    });
    checks.push(AssumptionCheck {
        id: "nonnegative_costs",
        description: "running, control and terminal costs h, g, f >= 0",
        passed: neg_running.is_none(),
        witness: neg_running,
    });
    checks.push(AssumptionCheck {
        id: "symmetric_diffusion",
        description: "diffusion matrix a is symmetric",
        passed: asym.is_none(),
        witness: asym,
    });
    let ell = min_sampled_eigenvalue(&spec.coeffs, &spec.domain, refined(DEFAULT_SAMPLES));
    checks.push(AssumptionCheck {
        id: "uniform_ellipticity",
        description: "smallest eigenvalue of a bounded below by theta > 0",
        passed: ell.theta > ELLIPTICITY_TOL,
        witness: Some(format!(
            "theta = {:.6e} at x = {}, state {}",
            ell.theta,
            fmt_point(&ell.point),
            ell.state + 1
        )),
    });
    checks.push(AssumptionCheck {
        id: "positive_discount",
        description: "discount rate c > 0 on the closed domain",
        passed: nonpos_c.is_none(),
        witness: nonpos_c,
    });

    ValidationReport { checks }
}
