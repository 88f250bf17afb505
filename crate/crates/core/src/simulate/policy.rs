//! Feedback controls built from a solved field.

use crate::discretization::{min_switch, Discretization};
use crate::error::{Error, Result};
use crate::grid::{FieldMatrix, Grid};
use crate::limits::{RegionLabel, RegionMap};
use crate::model::{PointCoefficients, SwitchingCosts};
use crate::penalty::Penalty;

/// What a policy does at `(x, regime, state)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyAction {
    /// Switch immediately to this regime.
    pub switch_to: Option<usize>,
    /// Unit direction `n` of the push; the state moves along `−n`.
    pub direction: [f64; 2],
    /// Control rate `ζ̇ ≥ 0`.
    pub rate: f64,
    /// Running cost `l^ε(ζ̇ n)` of the push.
    pub control_cost: f64,
}

impl PolicyAction {
    pub fn idle() -> Self {
        Self {
            switch_to: None,
            direction: [1.0, 0.0],
            rate: 0.0,
            control_cost: 0.0,
        }
    }
}

/// Control law used by the path simulator.
pub trait ControlPolicy: Sync {
    fn action(
        &self,
        x: &[f64; 2],
        regime: usize,
        state: usize,
        coeffs: &PointCoefficients,
    ) -> Result<PolicyAction>;

    /// Value used when a path is stopped before leaving the domain.
    fn continuation_value(&self, _x: &[f64; 2], _regime: usize, _state: usize) -> Option<f64> {
        None
    }

    /// Upper bound on the control rate enforced by the policy.
    fn rate_cap(&self) -> f64 {
        f64::INFINITY
    }
}

/// Never switches and never pushes.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdlePolicy;

impl ControlPolicy for IdlePolicy {
    fn action(
        &self,
        _x: &[f64; 2],
        _regime: usize,
        _state: usize,
        _coeffs: &PointCoefficients,
    ) -> Result<PolicyAction> {
        Ok(PolicyAction::idle())
    }
}

/// The ε-optimal feedback law from a solved `u^ε`: switch in the switching
/// region, otherwise push along `∇u^ε/|∇u^ε|` at rate
/// `2ψ'_ε(|∇u^ε|² − g²)|∇u^ε|`, capped at `2C/ε` with `C = max |∇u^ε|`.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    grid: Grid,
    m: usize,
    n: usize,
    values: Vec<f64>,
    gradients: Vec<[f64; 2]>,
    labels: Vec<Option<RegionLabel>>,
    extra_switch: Vec<bool>,
    costs: SwitchingCosts,
    penalty: Penalty,
    tol_switch: f64,
    zeta_cap: f64,
    gradient_bound: f64,
}

impl FeedbackPolicy {
    pub fn new(
        disc: &Discretization,
        u: &FieldMatrix,
        regions: &RegionMap,
        eps: f64,
    ) -> Result<Self> {
        u.check_shape(disc.m(), disc.n(), &disc.grid)?;
        let penalty = Penalty::new(eps)?;
        let len = disc.grid.len();
        let mut gradients = vec![[0.0; 2]; u.values().len()];
        let mut c_max: f64 = 0.0;
        for k in 0..len {
            for l in 0..disc.m() {
                for s in 0..disc.n() {
                    let g = disc.gradient(u, l, s, k);
                    c_max = c_max.max((g[0] * g[0] + g[1] * g[1]).sqrt());
                    gradients[disc.unknown(l, s, k)] = g;
                }
            }
        }
        Ok(Self {
            grid: disc.grid.clone(),
            m: disc.m(),
            n: disc.n(),
            values: u.values().to_vec(),
            gradients,
            labels: regions.labels.clone(),
            extra_switch: vec![false; u.values().len()],
            costs: disc.spec.costs.clone(),
            penalty,
            tol_switch: regions.tol_switch,
            zeta_cap: 2.0 * c_max / eps,
            gradient_bound: c_max,
        })
    }

    /// Same law with a different switching tolerance.
    pub fn with_tol_switch(mut self, tol: f64) -> Self {
        self.tol_switch = tol;
        self
    }

    /// Adds unconditional switching at the given `(regime, state, node)`
    /// rows, towards the cheapest alternative regime.
    pub fn with_forced_switches(mut self, rows: &[(usize, usize, usize)]) -> Self {
        for &(l, s, k) in rows {
            let o = self.offset(l, s, k);
            self.extra_switch[o] = true;
        }
        self
    }

    /// The constant `C = max |∇u^ε|` entering the rate cap `2C/ε`.
    pub fn gradient_bound(&self) -> f64 {
        self.gradient_bound
    }

    pub fn zeta_cap(&self) -> f64 {
        self.zeta_cap
    }

    pub fn tol_switch(&self) -> f64 {
        self.tol_switch
    }

    #[inline]
    fn offset(&self, l: usize, s: usize, k: usize) -> usize {
        k * self.m * self.n + l * self.n + s
    }

    /// Multilinear interpolation weights: up to four `(node, weight)` pairs.
    #[inline]
    fn stencil(&self, x: &[f64; 2]) -> ([usize; 4], [f64; 4], usize) {
        let (cell, frac) = self.grid.locate(x);
        if self.grid.dim() == 1 {
            let k = cell[0];
            ([k, k + 1, 0, 0], [1.0 - frac[0], frac[0], 0.0, 0.0], 2)
        } else {
            let k = self.grid.index(cell[0], cell[1]);
            let nx = self.grid.nodes()[0];
            let (fx, fy) = (frac[0], frac[1]);
            (
                [k, k + 1, k + nx, k + nx + 1],
                [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
                4,
            )
        }
    }

    /// Interpolated `u^ε_{ℓ,ι}(x)`.
    pub fn value(&self, x: &[f64; 2], l: usize, s: usize) -> f64 {
        let (nodes, w, len) = self.stencil(x);
        (0..len)
            .map(|i| w[i] * self.values[self.offset(l, s, nodes[i])])
            .sum()
    }

    /// Interpolated nodal gradient of `u^ε_{ℓ,ι}`.
    pub fn gradient(&self, x: &[f64; 2], l: usize, s: usize) -> [f64; 2] {
        let (nodes, w, len) = self.stencil(x);
        let mut g = [0.0; 2];
        for i in 0..len {
            let gi = self.gradients[self.offset(l, s, nodes[i])];
            g[0] += w[i] * gi[0];
            g[1] += w[i] * gi[1];
        }
        g
    }

    fn check_domain(&self, x: &[f64; 2]) -> Result<()> {
        let (lo, hi) = (self.grid.lower(), self.grid.upper());
        for a in 0..self.grid.dim() {
            let slack = 1e-12 * (hi[a] - lo[a]);
            if !(x[a] >= lo[a] - slack && x[a] <= hi[a] + slack) {
                return Err(Error::OutOfDomain {
                    point: x[..self.grid.dim()].to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Switching decision at `x`: the nearest node must be labelled SWITCH
    /// and the interpolated values must confirm `u_ℓ − Mu ≥ −tol`.
    pub fn switch_target(&self, x: &[f64; 2], l: usize, s: usize) -> Option<usize> {
        if self.m < 2 {
            return None;
        }
        let k = self.grid.nearest(x);
        let o = self.offset(l, s, k);
        let forced = self.extra_switch[o];
        if !forced && !matches!(self.labels[o], Some(RegionLabel::Switch { .. })) {
            return None;
        }
        let (mu, target) = min_switch(&self.costs, l, |lp| self.value(x, lp, s));
        if forced || self.value(x, l, s) - mu >= -self.tol_switch {
            target
        } else {
            None
        }
    }

    /// The push `(n, ζ̇, l^ε(ζ̇ n))` at `x` for gradient bound `g`.
    pub fn push(&self, x: &[f64; 2], l: usize, s: usize, g: f64) -> ([f64; 2], f64, f64) {
        let grad = self.gradient(x, l, s);
        let sq = grad[0] * grad[0] + grad[1] * grad[1];
        let norm = sq.sqrt();
        if norm == 0.0 {
            return ([1.0, 0.0], 0.0, 0.0);
        }
        let dir = [grad[0] / norm, grad[1] / norm];
        let rate = self.penalty.control_rate(norm, g);
        if rate <= self.zeta_cap {
            (dir, rate, self.penalty.legendre_at_gradient(sq, g))
        } else {
            (
                dir,
                self.zeta_cap,
                self.penalty.legendre_norm(self.zeta_cap, g),
            )
        }
    }
}

impl ControlPolicy for FeedbackPolicy {
    fn action(
        &self,
        x: &[f64; 2],
        regime: usize,
        state: usize,
        coeffs: &PointCoefficients,
    ) -> Result<PolicyAction> {
        self.check_domain(x)?;
        if let Some(t) = self.switch_target(x, regime, state) {
            return Ok(PolicyAction {
                switch_to: Some(t),
                ..PolicyAction::idle()
            });
        }
        let (direction, rate, control_cost) = self.push(x, regime, state, coeffs.g);
        Ok(PolicyAction {
            switch_to: None,
            direction,
            rate,
            control_cost,
        })
    }

    fn continuation_value(&self, x: &[f64; 2], regime: usize, state: usize) -> Option<f64> {
        Some(self.value(x, regime, state))
    }

    fn rate_cap(&self) -> f64 {
        self.zeta_cap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FieldKind;
    use crate::limits::extract_regions;
    use crate::model::{Coefficients, Domain, GeneratorMatrix, ProblemSpec, StateCoefficients};

    fn setup(values: impl Fn(f64) -> f64, g: f64) -> (Discretization, FieldMatrix) {
        let s = StateCoefficients::constant(1, 1.0, 0.0, 1.0, 1.0, g, 0.0);
        let spec = ProblemSpec::new(
            Domain::interval(-1.0, 1.0).unwrap(),
            vec![GeneratorMatrix::zero(1)],
            Coefficients::new(vec![s]),
            SwitchingCosts::single_regime(),
        )
        .unwrap();
        let grid = Grid::uniform(&spec.domain, 21).unwrap();
        let disc = Discretization::new(&spec, &grid).unwrap();
        let vals = (0..grid.len()).map(|k| values(grid.coord(k)[0])).collect();
        let u = FieldMatrix::from_values(1, 1, &grid, FieldKind::Other, vals).unwrap();
        (disc, u)
    }

    fn coeffs(g: f64) -> PointCoefficients {
        PointCoefficients {
            g,
            ..Default::default()
        }
    }

    #[test]
    fn no_push_inside_constraint_set() {
        let (disc, u) = setup(|x| 0.5 * x, 1.0);
        let map = extract_regions(&disc, &u, 1e-6);
        let p = FeedbackPolicy::new(&disc, &u, &map, 0.1).unwrap();
        let a = p.action(&[0.13, 0.0], 0, 0, &coeffs(1.0)).unwrap();
        assert_eq!(a.rate, 0.0);
        assert_eq!(a.control_cost, 0.0);
        assert!((a.direction[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_field_uses_fixed_direction() {
        let (disc, u) = setup(|_| 0.2, 1.0);
        let map = extract_regions(&disc, &u, 1e-6);
        let p = FeedbackPolicy::new(&disc, &u, &map, 0.1).unwrap();
        let a = p.action(&[0.3, 0.0], 0, 0, &coeffs(1.0)).unwrap();
        assert_eq!(a.direction, [1.0, 0.0]);
        assert_eq!(a.rate, 0.0);
    }

    #[test]
    fn deep_violation_rate_is_linear_branch() {
        // |∇u| = 2, g = 0.5: |∇u|² − g² = 3.75 ≥ 2ε.
        let (disc, u) = setup(|x| -2.0 * x, 0.5);
        let map = extract_regions(&disc, &u, 1e-6);
        let p = FeedbackPolicy::new(&disc, &u, &map, 0.1).unwrap();
        let a = p.action(&[0.05, 0.0], 0, 0, &coeffs(0.5)).unwrap();
        assert!((a.rate - 2.0 * 10.0 * 2.0).abs() < 1e-9);
        assert!((a.direction[0] + 1.0).abs() < 1e-12);
        assert!(a.rate <= p.rate_cap());
    }

    #[test]
    fn outside_domain_is_rejected() {
        let (disc, u) = setup(|x| x, 1.0);
        let map = extract_regions(&disc, &u, 1e-6);
        let p = FeedbackPolicy::new(&disc, &u, &map, 0.1).unwrap();
        assert!(matches!(
            p.action(&[1.5, 0.0], 0, 0, &coeffs(1.0)),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn interpolation_is_exact_for_linear_fields() {
        let (disc, u) = setup(|x| 3.0 * x + 1.0, 1.0);
        let map = extract_regions(&disc, &u, 1e-6);
        let p = FeedbackPolicy::new(&disc, &u, &map, 0.1).unwrap();
        for x in [-0.97, -0.31, 0.0, 0.444, 1.0] {
            assert!((p.value(&[x, 0.0], 0, 0) - (3.0 * x + 1.0)).abs() < 1e-12);
            assert!((p.gradient(&[x, 0.0], 0, 0)[0] - 3.0).abs() < 1e-12);
        }
    }
}
