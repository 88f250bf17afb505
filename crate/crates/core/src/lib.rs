//! Penalized finite-difference solver for HJB systems with a gradient
//! constraint and optimal regime switching, plus a Monte Carlo engine that
//! simulates the controlled regime-modulated diffusion.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod discretization;
pub mod error;
pub mod export;
pub mod expr;
pub mod grid;
pub mod instance;
pub mod limits;
pub mod linalg;
pub mod model;
pub mod npds;
pub mod penalty;
pub mod simulate;

pub use discretization::{
    apply_m, assemble_l, solve_dirichlet_bound, Discretization, OperatorStencil,
};
pub use error::{Error, ParseError, Result};
pub use expr::Expr;
pub use grid::{FieldKind, FieldMatrix, Grid, GridMeta};
pub use instance::{load_instance, parse_instance, Instance};
pub use limits::{
    ContinuationSchedule, ConvergenceTable, HjbResidualReport, RegionLabel, RegionMap,
};
pub use model::{
    validate, Coefficients, Domain, GeneratorMatrix, ProblemSpec, RegimeChainIndex,
    StateCoefficients, SwitchingCosts, ValidationReport,
};
pub use npds::{Method, NpdsConfig, NpdsSolver, SolveReport};
pub use penalty::Penalty;
pub use simulate::{CostEstimate, FeedbackPolicy, SimConfig, StartPoint};
