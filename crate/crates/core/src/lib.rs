//! Two-step compositional risk-constrained learning on finite scenario
//! models.
//!
//! Instances pair an outer risk over features with an inner conditional risk
//! over labels for each of the objective and `m` constraints. [`problem::lower`]
//! puts every term on one base measure through density weights, after which
//! the Lagrangian decomposes per scenario and [`dual`] solves the dual
//! exactly. [`oracle`] holds the brute-force references used to check the
//! duality gap.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundled;
pub mod composite;
pub mod condrisk;
pub mod config;
pub mod csv;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod loss;
pub mod oracle;
pub mod problem;
pub mod risk;
pub mod scenario;

pub use composite::{compose, reweighted_compose, CompositeFunctional};
pub use condrisk::{inner_cost_table, substitution_check, ActionGrid, CostTable};
pub use config::{ConfigDocument, ConfigError};
pub use dual::{bisect_dual_m1, dual_ascent, dual_function, AscentParams, DualReport, Multipliers};
pub use error::{Error, Result};
pub use expr::{parse_loss_expr, ExprError, LossExpr};
pub use loss::LossSpec;
pub use oracle::{brute_primal, grid_dual, mixed_primal_m1, OracleBudget, PrimalResult};
pub use problem::{check_slater, lower, MixedPolicy, Policy, RCL0Tables, RCLInstance};
pub use risk::{axiom_report, cvar_envelope, evaluate, RandomCost, RiskSpec};
pub use scenario::{build_marginal, compute_weights, refine, DiscreteMarginal, JointModel, WeightVector};
