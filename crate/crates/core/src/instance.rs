//! Instance files: TOML with nested tables.
//!
//! ```toml
//! [domain]
//! lower = [-1.0]
//! upper = [1.0]
//!
//! [regimes]
//! switching_costs = [[0.0, 0.1], [0.1, 0.0]]
//! generators = [                      # one n×n matrix per regime
//!   [[-1.0, 1.0], [1.0, -1.0]],
//!   [[-2.0, 2.0], [2.0, -2.0]],
//! ]
//!
//! [[states]]                          # one table per chain state
//! a = 1.0                             # scalar, diagonal or full matrix
//! b = 0.0                             # scalar or vector
//! c = 1.0
//! h = "2 + 0*x"                       # numbers or expressions in x, y
//! g = 0.6
//! f = 0.0
//! ```
//!
//! Optional `[solver]` and `[simulation]` tables carry run defaults; regime
//! and state indices are 1-based in files. A top-level `subsolution` array,
//! indexed `[regime][state]`, supplies a lower barrier that `solve` checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::expr::Expr;
use crate::limits::{ContinuationSchedule, DEFAULT_SCHEDULE};
use crate::model::{
    Coefficients, Domain, GeneratorMatrix, ProblemSpec, StateCoefficients, SwitchingCosts,
};
use crate::npds::Method;

/// A number or an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprValue {
    Number(f64),
    Text(String),
}

impl ExprValue {
    fn to_expr(&self, field: &str) -> std::result::Result<Expr, ParseError> {
        match self {
            ExprValue::Number(v) => Ok(Expr::constant(*v)),
            ExprValue::Text(s) => {
                Expr::parse(s).map_err(|e| ParseError::field(field, e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(ExprValue),
    Diagonal(Vec<ExprValue>),
    Full(Vec<Vec<ExprValue>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorValue {
    Scalar(ExprValue),
    Full(Vec<ExprValue>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    /// Defaults to one regime with no switching.
    #[serde(default)]
    pub switching_costs: Option<Vec<Vec<f64>>>,
    /// Defaults to zero generators.
    #[serde(default)]
    pub generators: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSection {
    pub a: MatrixValue,
    #[serde(default = "zero_vector")]
    pub b: VectorValue,
    pub c: ExprValue,
    pub h: ExprValue,
    pub g: ExprValue,
    #[serde(default = "zero_value")]
    pub f: ExprValue,
}

fn zero_value() -> ExprValue {
    ExprValue::Number(0.0)
}

fn zero_vector() -> VectorValue {
    VectorValue::Scalar(zero_value())
}

/// Solver defaults; every field is echoed into run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Nodes per axis.
    pub grid: usize,
    pub eps: f64,
    pub delta: f64,
    pub tol_residual: f64,
    pub max_outer: usize,
    pub damping: f64,
    pub method: Method,
    pub epsilons: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Exact `δ = 0` solve after each `δ` sweep.
    pub exact_switching: bool,
    pub tol_hjb: Option<f64>,
    pub tol_switch: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            grid: 201,
            eps: 0.1,
            delta: 0.1,
            tol_residual: 1e-8,
            max_outer: 500,
            damping: 0.5,
            method: Method::Newton,
            epsilons: DEFAULT_SCHEDULE.to_vec(),
            deltas: DEFAULT_SCHEDULE.to_vec(),
            exact_switching: true,
            tol_hjb: None,
            tol_switch: None,
        }
    }
}

impl SolverSection {
    pub fn schedule(&self) -> ContinuationSchedule {
        let mut s = ContinuationSchedule {
            deltas: self.deltas.clone(),
            epsilons: self.epsilons.clone(),
            exact_switching: self.exact_switching,
            ..ContinuationSchedule::default()
        };
        s.overrides.tol_residual = Some(self.tol_residual);
        s.overrides.max_outer = Some(self.max_outer);
        s.overrides.damping = Some(self.damping);
        s.overrides.method = Some(self.method);
        s
    }
}

/// Simulation defaults. `regime` and `state` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub x0: Option<Vec<f64>>,
    pub regime: usize,
    pub state: usize,
    pub probe_time: f64,
    pub horizon_cap: Option<f64>,
    pub bridge_exit: bool,
    /// Number of full paths written to the path dump.
    pub dump_paths: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            paths: 100_000,
            dt: 1e-3,
            seed: 1,
            x0: None,
            regime: 1,
            state: 1,
            probe_time: 0.5,
            horizon_cap: None,
            bridge_exit: true,
            dump_paths: 0,
        }
    }
}

/// Raw file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    #[serde(default)]
    pub name: Option<String>,
    pub domain: DomainSection,
    #[serde(default)]
    pub regimes: Option<RegimeSection>,
    pub states: Vec<StateSection>,
    /// `u̲_{ℓ,ι}` expressions, `[regime][state]`.
    #[serde(default)]
    pub subsolution: Option<Vec<Vec<ExprValue>>>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

/// A parsed instance with its run defaults.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: Option<String>,
    pub spec: ProblemSpec,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
}

fn field(name: &str, msg: impl Into<String>) -> Error {
    Error::Parse(ParseError::field(name, msg))
}

fn matrix(v: &MatrixValue, dim: usize, name: &str) -> Result<Vec<Vec<Expr>>> {
    let zero = || Expr::constant(0.0);
    match v {
        MatrixValue::Scalar(e) => {
            let e = e.to_expr(name)?;
            Ok((0..dim)
                .map(|i| {
                    (0..dim)
                        .map(|j| if i == j { e.clone() } else { zero() })
                        .collect()
                })
                .collect())
        }
        MatrixValue::Diagonal(d) => {
            if d.len() != dim {
                return Err(field(
                    name,
                    format!("diagonal has {} entries, expected {dim}", d.len()),
                ));
            }
            let d = d
                .iter()
                .map(|e| e.to_expr(name))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((0..dim)
                .map(|i| {
                    (0..dim)
                        .map(|j| if i == j { d[i].clone() } else { zero() })
                        .collect()
                })
                .collect())
        }
        MatrixValue::Full(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(field(name, format!("matrix must be {dim}x{dim}")));
            }
            rows.iter()
                .map(|r| r.iter().map(|e| Ok(e.to_expr(name)?)).collect())
                .collect()
        }
    }
}

fn vector(v: &VectorValue, dim: usize, name: &str) -> Result<Vec<Expr>> {
    match v {
        VectorValue::Scalar(e) => {
            let e = e.to_expr(name)?;
            Ok(vec![e; dim])
        }
        VectorValue::Full(items) => {
            if items.len() != dim {
                return Err(field(
                    name,
                    format!("vector has {} entries, expected {dim}", items.len()),
                ));
            }
            items.iter().map(|e| Ok(e.to_expr(name)?)).collect()
        }
    }
}

fn with_field(name: String) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidModel(msg) => field(&name, msg),
        other => other,
    }
}

impl InstanceFile {
    pub fn build(&self) -> Result<Instance> {
        let domain = Domain::new(self.domain.lower.clone(), self.domain.upper.clone())
            .map_err(with_field("domain".into()))?;
        let dim = domain.dim();
        if self.states.is_empty() {
            return Err(field("states", "at least one [[states]] table is required"));
        }
        let n = self.states.len();
        let states = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = |k: &str| format!("states[{}].{k}", i + 1);
                Ok(StateCoefficients {
                    a: matrix(&s.a, dim, &p("a"))?,
                    b: vector(&s.b, dim, &p("b"))?,
                    c: s.c.to_expr(&p("c"))?,
                    h: s.h.to_expr(&p("h"))?,
                    g: s.g.to_expr(&p("g"))?,
                    f: s.f.to_expr(&p("f"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let regimes = self.regimes.clone().unwrap_or(RegimeSection {
            switching_costs: None,
            generators: None,
        });
        let costs = match &regimes.switching_costs {
            Some(rows) => {
                SwitchingCosts::new(rows).map_err(with_field("regimes.switching_costs".into()))?
            }
            None => SwitchingCosts::single_regime(),
        };
        let m = costs.regimes();
        let generators = match &regimes.generators {
            Some(list) => {
                if list.len() != m {
                    return Err(field(
                        "regimes.generators",
                        format!("{} matrices given for {m} regimes", list.len()),
                    ));
                }
                list.iter()
                    .enumerate()
                    .map(|(l, rows)| {
                        GeneratorMatrix::from_rows(rows)
                            .map_err(with_field(format!("regimes.generators[{}]", l + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => vec![GeneratorMatrix::zero(n); m],
        };
        let mut spec = ProblemSpec::new(domain, generators, Coefficients::new(states), costs)
            .map_err(with_field("states".into()))?;
        if let Some(sub) = &self.subsolution {
            let exprs = sub
                .iter()
                .enumerate()
                .map(|(l, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(s, e)| {
                            Ok(e.to_expr(&format!("subsolution[{}][{}]", l + 1, s + 1))?)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            spec = spec
                .with_subsolution(exprs)
                .map_err(with_field("subsolution".into()))?;
        }
        let sim = &self.simulation;
        if sim.regime == 0 || sim.regime > m {
            return Err(field("simulation.regime", format!("must lie in 1..={m}")));
        }
        if sim.state == 0 || sim.state > n {
            return Err(field("simulation.state", format!("must lie in 1..={n}")));
        }
        if let Some(x0) = &sim.x0 {
            if x0.len() != dim {
                return Err(field(
                    "simulation.x0",
                    format!("expected {dim} coordinates"),
                ));
            }
        }
        Ok(Instance {
            name: self.name.clone(),
            spec,
            solver: self.solver.clone(),
            simulation: self.simulation.clone(),
        })
    }
}

/// Parses instance text. Syntax errors carry line and column.
pub fn parse_instance(text: &str) -> Result<Instance> {
    let file: InstanceFile =
        toml::from_str(text).map_err(|e| Error::Parse(ParseError::Syntax(e.to_string())))?;
    file.build()
}

pub fn load_instance(path: &Path) -> Result<Instance> {
    parse_instance(&std::fs::read_to_string(path)?)
}

impl Instance {
    /// Start point from the simulation table, defaulting to the domain centre.
    pub fn start_point(&self) -> crate::simulate::StartPoint {
        let d = &self.spec.domain;
        let x: Vec<f64> = match &self.simulation.x0 {
            Some(x) => x.clone(),
            None => (0..d.dim())
                .map(|i| 0.5 * (d.lower()[i] + d.upper()[i]))
                .collect(),
        };
        crate::simulate::StartPoint::new(&x, self.simulation.regime - 1, self.simulation.state - 1)
    }
}
