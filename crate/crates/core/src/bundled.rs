//! Instance files shipped with the crate, plus the two-scenario instance in
//! code form for tests.

use crate::condrisk::ActionGrid;
use crate::loss::LossSpec;
use crate::problem::RCLInstance;
use crate::risk::RiskSpec;
use crate::scenario::{ConditionalLabelDist, DiscreteMarginal, JointModel};

pub const T1: &str = include_str!("../configs/t1.ini");
pub const LYAPUNOV_FAMILY: &str = include_str!("../configs/lyapunov-family.ini");
pub const CONVEX_REGRESSION: &str = include_str!("../configs/convex-regression.ini");
pub const CVAR_DEMO: &str = include_str!("../configs/cvar-demo.ini");

pub const CONFIGS: [(&str, &str); 4] = [
    ("t1", T1),
    ("lyapunov-family", LYAPUNOV_FAMILY),
    ("convex-regression", CONVEX_REGRESSION),
    ("cvar-demo", CVAR_DEMO),
];

pub fn config(name: &str) -> Option<&'static str> {
    CONFIGS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Scenarios `x ∈ {0, 1}` with `y = x`, actions `{0, 1}`, objective
/// `E|a - y|`, constraint `E[a] ≤ c1`.
pub fn t1_instance(c1: f64) -> RCLInstance {
    let base = DiscreteMarginal::from_scalars(&[0.0, 1.0], &[0.5, 0.5]).expect("valid marginal");
    let joint = JointModel::new(
        base.clone(),
        ConditionalLabelDist::point_mass(&[0.0, 1.0]).expect("valid labels"),
    )
    .expect("aligned joint");
    RCLInstance {
        base,
        joints: vec![joint.clone(), joint],
        losses: vec![LossSpec::AbsDev, "expr:z1".parse().expect("valid expression")],
        inner: vec![RiskSpec::Expectation; 2],
        outer: vec![RiskSpec::Expectation; 2],
        thresholds: vec![c1],
        grid: ActionGrid::scalar(&[0.0, 1.0]).expect("valid grid"),
    }
}
