//! Tensor grids over the box domain and grid functions indexed by
//! `(regime, state, node)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Domain, PointCoefficients, ProblemSpec};

/// Smallest accepted number of nodes per axis.
pub const MIN_NODES: usize = 3;

/// Uniform tensor grid; node `k = i + nx·j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    nodes: [usize; 2],
    lower: [f64; 2],
    upper: [f64; 2],
    spacing: [f64; 2],
    boundary: Vec<bool>,
    interior: Vec<usize>,
}

/// Serializable grid description carried by exported fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl Grid {
    pub fn new(domain: &Domain, nodes_per_axis: &[usize]) -> Result<Self> {
        let dim = domain.dim();
        if nodes_per_axis.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "{} node counts for a {dim}D domain",
                nodes_per_axis.len()
            )));
        }
        let mut nodes = [1usize; 2];
        let mut lower = [0.0; 2];
        let mut upper = [0.0; 2];
        let mut spacing = [1.0; 2];
        for i in 0..dim {
            if nodes_per_axis[i] < MIN_NODES {
                return Err(Error::InvalidGrid(format!(
                    "axis {i} has {} nodes, need at least {MIN_NODES}",
                    nodes_per_axis[i]
                )));
            }
            nodes[i] = nodes_per_axis[i];
            lower[i] = domain.lower()[i];
            upper[i] = domain.upper()[i];
            spacing[i] = (upper[i] - lower[i]) / (nodes[i] - 1) as f64;
        }
        let len = nodes[0] * nodes[1];
        let mut boundary = vec![false; len];
        let mut interior = Vec::new();
        for j in 0..nodes[1] {
            for i in 0..nodes[0] {
                let k = i + nodes[0] * j;
                let on_x = i == 0 || i + 1 == nodes[0];
                let on_y = dim == 2 && (j == 0 || j + 1 == nodes[1]);
                boundary[k] = on_x || on_y;
                if !boundary[k] {
                    interior.push(k);
                }
            }
        }
        Ok(Self {
            dim,
            nodes,
            lower,
            upper,
            spacing,
            boundary,
            interior,
        })
    }

    /// Same node count `n` along every axis.
    pub fn uniform(domain: &Domain, n: usize) -> Result<Self> {
        Self::new(domain, &vec![n; domain.dim()])
    }

    pub fn from_meta(meta: &GridMeta) -> Result<Self> {
        let domain = Domain::new(meta.lower.clone(), meta.upper.clone())?;
        Self::new(&domain, &meta.nodes)
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            lower: self.lower[..self.dim].to_vec(),
            upper: self.upper[..self.dim].to_vec(),
            nodes: self.nodes[..self.dim].to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> [usize; 2] {
        self.nodes
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    /// Largest spacing over the axes.
    pub fn max_spacing(&self) -> f64 {
        self.spacing[..self.dim].iter().copied().fold(0.0, f64::max)
    }

    pub fn lower(&self) -> [f64; 2] {
        self.lower
    }

    pub fn upper(&self) -> [f64; 2] {
        self.upper
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    #[inline]
    pub fn is_boundary(&self, k: usize) -> bool {
        self.boundary[k]
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nodes[0], k / self.nodes[0])
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nodes[0] * j
    }

    /// Coordinates of node `k`; the second entry is 0 in 1D.
    #[inline]
    pub fn coord(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.ij(k);
        let x = self.lower[0] + self.spacing[0] * i as f64;
        let y = if self.dim == 2 {
            self.lower[1] + self.spacing[1] * j as f64
        } else {
            0.0
        };
        [x, y]
    }

    /// Node stride along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.nodes[0]
        }
    }

    /// Index of the node nearest to `x` (clamped to the grid).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut idx = [0usize; 2];
        for a in 0..self.dim {
            let s = ((x[a] - self.lower[a]) / self.spacing[a]).round();
            idx[a] = s.clamp(0.0, (self.nodes[a] - 1) as f64) as usize;
        }
        self.index(idx[0], idx[1])
    }

    /// Lower-left cell corner and local coordinates in `[0, 1]` for
    /// multilinear interpolation.
    pub fn locate(&self, x: &[f64]) -> ([usize; 2], [f64; 2]) {
        let mut cell = [0usize; 2];
        let mut frac = [0.0; 2];
        for a in 0..self.dim {
            let s = (x[a] - self.lower[a]) / self.spacing[a];
            let max_cell = (self.nodes[a] - 2) as f64;
            let c = s.floor().clamp(0.0, max_cell);
            cell[a] = c as usize;
            frac[a] = (s - c).clamp(0.0, 1.0);
        }
        (cell, frac)
    }
}

/// Which object a field represents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    /// Solution of the penalized system for fixed `(ε, δ)`.
    Penalized {
        eps: f64,
        delta: f64,
    },
    /// `δ → 0` limit for fixed `ε`.
    EpsLimit {
        eps: f64,
    },
    /// `ε → 0` limit.
    Limit,
    /// Linear Dirichlet super-solution.
    SuperSolution,
    /// User-supplied sub-solution.
    SubSolution,
    Other,
}

/// Grid function over `(regime, state, node)`, stored node-major:
/// `values[k·m·n + ℓ·n + ι]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMatrix {
    pub m: usize,
    pub n: usize,
    pub grid: GridMeta,
    #[serde(flatten)]
    pub kind: FieldKind,
    values: Vec<f64>,
}

impl FieldMatrix {
    pub fn zeros(m: usize, n: usize, grid: &Grid, kind: FieldKind) -> Self {
        Self {
            m,
            n,
            grid: grid.meta(),
            kind,
            values: vec![0.0; m * n * grid.len()],
        }
    }

    pub fn from_values(
        m: usize,
        n: usize,
        grid: &Grid,
        kind: FieldKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != m * n * grid.len() {
            return Err(Error::InvalidGrid(format!(
                "field has {} values, expected {}",
                values.len(),
                m * n * grid.len()
            )));
        }
        Ok(Self {
            m,
            n,
            grid: grid.meta(),
            kind,
            values,
        })
    }

    #[inline]
    pub fn blocks(&self) -> usize {
        self.m * self.n
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.blocks()
    }

    #[inline]
    pub fn offset(&self, regime: usize, state: usize, node: usize) -> usize {
        node * self.m * self.n + regime * self.n + state
    }

    #[inline]
    pub fn get(&self, regime: usize, state: usize, node: usize) -> f64 {
        self.values[self.offset(regime, state, node)]
    }

    #[inline]
    pub fn set(&mut self, regime: usize, state: usize, node: usize, v: f64) {
        let o = self.offset(regime, state, node);
        self.values[o] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Copy of one `(regime, state)` block in node order.
    pub fn block(&self, regime: usize, state: usize) -> Vec<f64> {
        (0..self.nodes())
            .map(|k| self.get(regime, state, k))
            .collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn sup_diff(&self, other: &FieldMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |a, (p, q)| a.max((p - q).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    /// Checks that the field lives on `grid` with `m × n` blocks.
    pub fn check_shape(&self, m: usize, n: usize, grid: &Grid) -> Result<()> {
        if self.m != m
            || self.n != n
            || self.grid != grid.meta()
            || self.values.len() != m * n * grid.len()
        {
            return Err(Error::InvalidGrid(format!(
                "field shape ({} regimes, {} states, grid {:?}) does not match ({m}, {n}, {:?})",
                self.m,
                self.n,
                self.grid.nodes,
                grid.meta().nodes
            )));
        }
        Ok(())
    }
}

/// Coefficients sampled at every grid node, `[state · len + node]`.
#[derive(Debug, Clone)]
pub struct NodeCoefficients {
    len: usize,
    data: Vec<PointCoefficients>,
}

impl NodeCoefficients {
    pub fn sample(spec: &ProblemSpec, grid: &Grid) -> Self {
        let len = grid.len();
        let dim = grid.dim();
        let mut data = Vec::with_capacity(spec.idx.n * len);
        for st in &spec.coeffs.states {
            for k in 0..len {
                let x = grid.coord(k);
                data.push(st.eval(&x[..dim]));
            }
        }
        Self { len, data }
    }

    #[inline]
    pub fn at(&self, state: usize, node: usize) -> &PointCoefficients {
        &self.data[state * self.len + node]
    }
}

/// Evaluates the optional sub-solution expressions on the grid, with the
/// boundary overwritten by `f`.
pub fn sample_subsolution(spec: &ProblemSpec, grid: &Grid) -> Option<FieldMatrix> {
    let sub = spec.subsolution.as_ref()?;
    let coeffs = NodeCoefficients::sample(spec, grid);
    let mut field = FieldMatrix::zeros(spec.idx.m, spec.idx.n, grid, FieldKind::SubSolution);
    for k in 0..grid.len() {
        let x = grid.coord(k);
        for (l, row) in sub.iter().enumerate() {
            for (s, e) in row.iter().enumerate() {
                let v = if grid.is_boundary(k) {
                    coeffs.at(s, k).f
                } else {
                    e.eval(&x[..grid.dim()])
                };
                field.set(l, s, k, v);
            }
        }
    }
    Some(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_and_spacing() {
        let d = Domain::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let g = Grid::new(&d, &[5, 9]).unwrap();
        assert_eq!(g.len(), 45);
        assert_eq!(g.interior().len(), 3 * 7);
        assert_eq!(g.spacing(), [0.25, 0.25]);
        let boundary = (0..g.len()).filter(|&k| g.is_boundary(k)).count();
        assert_eq!(boundary + g.interior().len(), g.len());
        assert_eq!(g.coord(g.index(4, 8)), [1.0, 1.0]);
    }

    #[test]
    fn rejects_tiny_grids() {
        let d = Domain::interval(0.0, 1.0).unwrap();
        assert!(Grid::uniform(&d, 2).is_err());
    }

    #[test]
    fn locate_and_nearest() {
        let d = Domain::interval(-1.0, 1.0).unwrap();
        let g = Grid::uniform(&d, 5).unwrap();
        let (c, f) = g.locate(&[0.25]);
        assert_eq!(c[0], 2);
        assert!((f[0] - 0.5).abs() < 1e-15);
        let (c, f) = g.locate(&[1.0]);
        assert_eq!(c[0], 3);
        assert!((f[0] - 1.0).abs() < 1e-15);
        assert_eq!(g.nearest(&[0.3]), 3);
    }

    #[test]
    fn field_json_round_trip_is_exact() {
        let d = Domain::interval(-1.0, 1.0).unwrap();
        let g = Grid::uniform(&d, 7).unwrap();
        let vals: Vec<f64> = (0..2 * 7)
            .map(|i| (i as f64 * 0.1).sin() / 3.0 + 1e-17 * i as f64)
            .collect();
        let f = FieldMatrix::from_values(
            2,
            1,
            &g,
            FieldKind::Penalized {
                eps: 0.1,
                delta: 0.05,
            },
            vals,
        )
        .unwrap();
        let s = serde_json::to_string(&f).unwrap();
        let back: FieldMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
