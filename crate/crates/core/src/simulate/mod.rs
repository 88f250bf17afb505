//! Monte Carlo verification of feedback policies.

mod chain;
mod estimate;
mod jump;
mod path;
mod policy;

pub use chain::step_chain;
pub use estimate::{
    estimate_value, martingale_check, pairwise_sum, random_switch_rows, sample_paths,
    tolerance_sensitivity, CostEstimate, MartingaleReport, SensitivityReport,
};
pub use jump::{gauss_legendre, jump_cost};
pub use path::{
    diffusion_factor, path_rng, simulate_path, PathEvent, PathRecord, PathSimulator, SimConfig,
    StartPoint,
};
pub use policy::{ControlPolicy, FeedbackPolicy, IdlePolicy, PolicyAction};
