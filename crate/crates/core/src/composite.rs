//! Two-step compositional risk: an outer risk of the inner cost table, and
//! the same value written on a common base measure through density weights.
//!
//! The reweighted functional is kept as the pair (outer spec, weights): the
//! outer risk is evaluated with atom masses `p0_j · w_j`. For CVaR this puts
//! the weight on the hinge, `Σ p0 w (z - t)_+`, never inside it. The pair is
//! only meaningful on costs of the form `Z · w`, which is all we ever build.

use crate::condrisk::CostTable;
use crate::error::{Error, Result};
use crate::problem::Policy;
use crate::risk::RiskSpec;
use crate::scenario::{DiscreteMarginal, WeightVector};

/// `ρ̃(G)` with `G = F · w` on the base marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFunctional {
    pub outer: RiskSpec,
    pub table: CostTable,
    pub weights: WeightVector,
    pub base: DiscreteMarginal,
}

impl CompositeFunctional {
    pub fn new(
        outer: RiskSpec,
        table: CostTable,
        weights: WeightVector,
        base: DiscreteMarginal,
    ) -> Result<Self> {
        if table.n_scenarios() != base.len() || weights.len() != base.len() {
            return Err(Error::AlignmentError(format!(
                "table rows {}, weights {}, base scenarios {}",
                table.n_scenarios(),
                weights.len(),
                base.len()
            )));
        }
        outer.validate()?;
        Ok(Self {
            outer,
            table,
            weights,
            base,
        })
    }

    /// Atom masses `p0_j · w_j`.
    pub fn masses(&self) -> Vec<f64> {
        self.base
            .probs()
            .iter()
            .zip(self.weights.as_slice())
            .map(|(p, w)| p * w)
            .collect()
    }
}

fn check_policy(table: &CostTable, policy: &Policy) -> Result<()> {
    if policy.choice.len() != table.n_scenarios() {
        return Err(Error::AlignmentError(format!(
            "policy covers {} scenarios, table has {}",
            policy.choice.len(),
            table.n_scenarios()
        )));
    }
    if let Some(&a) = policy.choice.iter().find(|&&a| a >= table.n_actions()) {
        return Err(Error::AlignmentError(format!(
            "action index {a} out of range for {} actions",
            table.n_actions()
        )));
    }
    Ok(())
}

/// `outer(F(f(X), X))` under `marginal`, whose atoms are the table rows.
pub fn compose(outer: &RiskSpec, table: &CostTable, marginal: &DiscreteMarginal, policy: &Policy) -> Result<f64> {
    if table.n_scenarios() != marginal.len() {
        return Err(Error::AlignmentError(format!(
            "table rows {} but marginal has {} scenarios",
            table.n_scenarios(),
            marginal.len()
        )));
    }
    check_policy(table, policy)?;
    outer.eval_weighted(&table.select(&policy.choice), marginal.probs())
}

/// `ρ̃(G(f(X0), X0))` evaluated on the base measure.
pub fn reweighted_compose(cf: &CompositeFunctional, policy: &Policy) -> Result<f64> {
    check_policy(&cf.table, policy)?;
    cf.outer.eval_weighted(&cf.table.select(&policy.choice), &cf.masses())
}
