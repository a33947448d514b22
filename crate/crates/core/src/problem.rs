//! Risk-constrained learning instances and their lowering onto a single base
//! measure.
//!
//! An [`RCLInstance`] carries one joint model per term (index 0 is the
//! objective). [`lower`] turns it into [`RCL0Tables`]: cost tables aligned to
//! the base support plus density weights, so every term becomes a weighted
//! outer risk of a table row selection. Policies choose one grid action per
//! base scenario independently, which is all decomposability asks for.

use crate::composite::compose;
use crate::condrisk::{inner_cost_table, ActionGrid, CostTable};
use crate::error::{Error, Result};
pub use crate::loss::LossSpec;
use crate::risk::RiskSpec;
use crate::scenario::{compute_weights, DiscreteMarginal, JointModel, WeightVector};

/// Slack allowed when deciding whether a constraint value satisfies `≤ c`.
pub const FEAS_TOL: f64 = 1e-9;

/// One action index per base scenario.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    pub choice: Vec<usize>,
}

impl Policy {
    pub fn new(choice: Vec<usize>) -> Self {
        Self { choice }
    }

    pub fn len(&self) -> usize {
        self.choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_empty()
    }
}

/// Per-scenario distribution over grid actions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPolicy {
    rows: Vec<Vec<f64>>,
}

impl MixedPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (j, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::AlignmentError(format!(
                    "mixed policy row {j} is not a distribution"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_policy(policy: &Policy, n_actions: usize) -> Self {
        let rows = policy
            .choice
            .iter()
            .map(|&a| {
                let mut r = vec![0.0; n_actions];
                r[a] = 1.0;
                r
            })
            .collect();
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// The deterministic policy if every row is one-hot.
    pub fn as_deterministic(&self) -> Option<Policy> {
        self.rows
            .iter()
            .map(|r| r.iter().position(|&p| p == 1.0))
            .collect::<Option<Vec<_>>>()
            .map(Policy::new)
    }
}

/// A risk-constrained learning problem over finite scenario models.
#[derive(Debug, Clone, PartialEq)]
pub struct RCLInstance {
    pub base: DiscreteMarginal,
    /// `joints[0]` drives the objective, `joints[i]` constraint `i`.
    pub joints: Vec<JointModel>,
    pub losses: Vec<LossSpec>,
    pub inner: Vec<RiskSpec>,
    pub outer: Vec<RiskSpec>,
    /// `c_1..c_m`.
    pub thresholds: Vec<f64>,
    pub grid: ActionGrid,
}

impl RCLInstance {
    pub fn m(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let terms = self.joints.len();
        if terms < 2 {
            return Err(Error::InvalidInstance("need an objective and at least one constraint".into()));
        }
        if self.losses.len() != terms || self.inner.len() != terms || self.outer.len() != terms {
            return Err(Error::InvalidInstance(format!(
                "{terms} joints but {} losses, {} inner and {} outer specs",
                self.losses.len(),
                self.inner.len(),
                self.outer.len()
            )));
        }
        if self.thresholds.len() + 1 != terms {
            return Err(Error::InvalidInstance(format!(
                "{} thresholds for {} constraints",
                self.thresholds.len(),
                terms - 1
            )));
        }
        if let Some(c) = self.thresholds.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidInstance(format!("threshold {c} is not finite")));
        }
        for j in &self.joints {
            j.marginal.embed_in(&self.base)?;
        }
        for s in self.inner.iter().chain(&self.outer) {
            s.validate()?;
        }
        Ok(())
    }

    /// Term `i` evaluated in the original form, under the joint's own
    /// marginal without any reweighting. `policy` indexes base scenarios.
    pub fn direct_value(&self, i: usize, policy: &Policy) -> Result<f64> {
        let joint = &self.joints[i];
        let embed = joint.marginal.embed_in(&self.base)?;
        if policy.choice.len() != self.base.len() {
            return Err(Error::AlignmentError("policy does not cover the base support".into()));
        }
        let table = inner_cost_table(&self.losses[i], joint, &self.grid, &self.inner[i])?;
        let restricted = Policy::new(embed.iter().map(|&j| policy.choice[j]).collect());
        compose(&self.outer[i], &table, &joint.marginal, &restricted)
    }
}

/// A lowered instance: every term is `outer_i` applied to a table selection
/// with atom masses `p0_j · w_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct RCL0Tables {
    base: DiscreteMarginal,
    weights: Vec<WeightVector>,
    tables: Vec<CostTable>,
    outer: Vec<RiskSpec>,
    thresholds: Vec<f64>,
    masses: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

impl RCL0Tables {
    pub fn new(
        base: DiscreteMarginal,
        weights: Vec<WeightVector>,
        tables: Vec<CostTable>,
        outer: Vec<RiskSpec>,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let terms = tables.len();
        if terms < 2 || weights.len() != terms || outer.len() != terms || thresholds.len() + 1 != terms {
            return Err(Error::InvalidInstance(format!(
                "inconsistent term counts: {} tables, {} weights, {} outer, {} thresholds",
                terms,
                weights.len(),
                outer.len(),
                thresholds.len()
            )));
        }
        let n_actions = tables[0].n_actions();
        for (i, (t, w)) in tables.iter().zip(&weights).enumerate() {
            if t.n_scenarios() != base.len() || w.len() != base.len() || t.n_actions() != n_actions {
                return Err(Error::AlignmentError(format!("term {i} is not aligned to the base support")));
            }
        }
        if let Some(c) = thresholds.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidInstance(format!("threshold {c} is not finite")));
        }
        for s in &outer {
            s.validate()?;
        }
        let masses = weights
            .iter()
            .map(|w| base.probs().iter().zip(w.as_slice()).map(|(p, w)| p * w).collect())
            .collect();
        Ok(Self {
            base,
            weights,
            tables,
            outer,
            thresholds,
            masses,
            warnings: Vec::new(),
        })
    }

    pub fn base(&self) -> &DiscreteMarginal {
        &self.base
    }

    pub fn weights(&self) -> &[WeightVector] {
        &self.weights
    }

    pub fn tables(&self) -> &[CostTable] {
        &self.tables
    }

    pub fn outer(&self) -> &[RiskSpec] {
        &self.outer
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Atom masses `p0_j · w_ij` of term `i`.
    pub fn masses(&self, i: usize) -> &[f64] {
        &self.masses[i]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn m(&self) -> usize {
        self.thresholds.len()
    }

    pub fn n_scenarios(&self) -> usize {
        self.base.len()
    }

    pub fn n_actions(&self) -> usize {
        self.tables[0].n_actions()
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.choice.len() != self.n_scenarios() {
            return Err(Error::AlignmentError(format!(
                "policy covers {} scenarios, base has {}",
                policy.choice.len(),
                self.n_scenarios()
            )));
        }
        if policy.choice.iter().any(|&a| a >= self.n_actions()) {
            return Err(Error::AlignmentError("action index out of range".into()));
        }
        Ok(())
    }

    /// `ρ̃_i(G_i(f))`.
    pub fn term_value(&self, i: usize, policy: &Policy) -> Result<f64> {
        self.check_policy(policy)?;
        self.term_value_unchecked(i, &policy.choice)
    }

    pub(crate) fn term_value_unchecked(&self, i: usize, choice: &[usize]) -> Result<f64> {
        let t = &self.tables[i];
        let m = &self.masses[i];
        if self.outer[i] == RiskSpec::Expectation {
            return Ok(choice.iter().enumerate().map(|(j, &a)| m[j] * t.get(j, a)).sum());
        }
        self.outer[i].eval_weighted(&t.select(choice), m)
    }

    /// Term value under a randomized policy: each scenario splits into
    /// `(scenario, action)` atoms with mass `p0_j w_ij π_j(a)`.
    pub fn term_value_mixed(&self, i: usize, mix: &MixedPolicy) -> Result<f64> {
        if mix.rows.len() != self.n_scenarios() || mix.rows.iter().any(|r| r.len() != self.n_actions()) {
            return Err(Error::AlignmentError("mixed policy shape mismatch".into()));
        }
        let (mut values, mut probs) = (Vec::new(), Vec::new());
        for (j, row) in mix.rows.iter().enumerate() {
            for (a, &pi) in row.iter().enumerate() {
                if pi > 0.0 {
                    values.push(self.tables[i].get(j, a));
                    probs.push(self.masses[i][j] * pi);
                }
            }
        }
        self.outer[i].eval_weighted(&values, &probs)
    }

    pub fn objective(&self, policy: &Policy) -> Result<f64> {
        self.term_value(0, policy)
    }

    /// `ρ̃_i(G_i(f))` for `i = 1..m`.
    pub fn constraint_values(&self, policy: &Policy) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        (1..=self.m()).map(|i| self.term_value_unchecked(i, &policy.choice)).collect()
    }

    /// `c_i - ρ̃_i(G_i(f))`.
    pub fn slacks(&self, policy: &Policy) -> Result<Vec<f64>> {
        Ok(self
            .constraint_values(policy)?
            .iter()
            .zip(&self.thresholds)
            .map(|(g, c)| c - g)
            .collect())
    }

    pub fn is_feasible(&self, policy: &Policy) -> Result<bool> {
        Ok(self.slacks(policy)?.iter().all(|&s| s >= -FEAS_TOL))
    }

    /// Multiplies every table and threshold by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            tables: self.tables.iter().map(|t| t.scaled(factor)).collect(),
            thresholds: self.thresholds.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    pub fn with_thresholds(&self, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != self.m() {
            return Err(Error::InvalidInstance("threshold count changed".into()));
        }
        Ok(Self {
            thresholds,
            ..self.clone()
        })
    }

    pub fn pointwise_candidates(&self) -> u128 {
        (self.n_actions() as u128).saturating_pow(self.n_scenarios() as u32)
    }
}

/// Materializes weights and inner cost tables on the base support.
///
/// Base rows outside a joint's support carry weight 0 and are filled with
/// zeros; they never reach any risk evaluation.
pub fn lower(instance: &RCLInstance) -> Result<RCL0Tables> {
    instance.validate()?;
    let n = instance.base.len();
    let mut weights = Vec::with_capacity(instance.joints.len());
    let mut tables = Vec::with_capacity(instance.joints.len());
    let mut warnings = Vec::new();
    for (i, joint) in instance.joints.iter().enumerate() {
        let w = compute_weights(&instance.base, &joint.marginal)?;
        let local = inner_cost_table(&instance.losses[i], joint, &instance.grid, &instance.inner[i])?;
        if local.clamped() > 0 {
            warnings.push(format!(
                "loss {i}: {} negative evaluation(s) clamped to 0",
                local.clamped()
            ));
        }
        let embed = joint.marginal.embed_in(&instance.base)?;
        let cols = instance.grid.len();
        let mut entries = vec![0.0; n * cols];
        for (k, &j) in embed.iter().enumerate() {
            entries[j * cols..(j + 1) * cols].copy_from_slice(local.row(k));
        }
        weights.push(w);
        tables.push(CostTable::new(n, cols, entries)?);
    }
    let mut out = RCL0Tables::new(
        instance.base.clone(),
        weights,
        tables,
        instance.outer.clone(),
        instance.thresholds.clone(),
    )?;
    out.warnings = warnings;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlaterMethod {
    Greedy,
    Exhaustive,
    /// Greedy failed and enumeration was over budget.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlaterReport {
    pub found: bool,
    pub method: SlaterMethod,
    /// Best candidate seen (the witness when `found`).
    pub witness: Option<Policy>,
    /// `c_i - ρ̃_i` at the best candidate.
    pub slack: Vec<f64>,
    /// Best slack reachable by randomized policies, for a single
    /// expectation constraint.
    pub mixed_slack: Option<f64>,
}

/// Default enumeration budget for the exhaustive Slater search.
pub const SLATER_BUDGET: u64 = 1_000_000;

pub fn check_slater(t: &RCL0Tables, margin: f64) -> Result<SlaterReport> {
    check_slater_with_budget(t, margin, SLATER_BUDGET)
}

/// Searches for a policy with every constraint at least `margin` below its
/// threshold: pointwise greedy first, exhaustive enumeration if needed and
/// affordable.
pub fn check_slater_with_budget(t: &RCL0Tables, margin: f64, budget: u64) -> Result<SlaterReport> {
    if !(margin > 0.0) {
        return Err(Error::InvalidInstance(format!("Slater margin must be positive, got {margin}")));
    }
    let m = t.m();
    let scale: Vec<f64> = (1..=m)
        .map(|i| {
            let e = t.tables[i].entries();
            let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > 0.0 {
                hi - lo
            } else {
                1.0
            }
        })
        .collect();
    let greedy: Vec<usize> = (0..t.n_scenarios())
        .map(|j| {
            let score = |a: usize| -> f64 {
                (1..=m)
                    .map(|i| t.masses[i][j] * t.tables[i].get(j, a) / scale[i - 1])
                    .sum()
            };
            argmin((0..t.n_actions()).map(score))
        })
        .collect();
    let greedy = Policy::new(greedy);
    let greedy_slack = t.slacks(&greedy)?;
    let min_slack = |s: &[f64]| s.iter().copied().fold(f64::INFINITY, f64::min);

    let mixed_slack = (m == 1 && t.outer[1] == RiskSpec::Expectation).then(|| {
        let best: f64 = (0..t.n_scenarios())
            .map(|j| {
                (0..t.n_actions())
                    .map(|a| t.masses[1][j] * t.tables[1].get(j, a))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        t.thresholds[0] - best
    });

    if min_slack(&greedy_slack) >= margin {
        return Ok(SlaterReport {
            found: true,
            method: SlaterMethod::Greedy,
            witness: Some(greedy),
            slack: greedy_slack,
            mixed_slack,
        });
    }
    if t.pointwise_candidates() > budget as u128 {
        return Ok(SlaterReport {
            found: false,
            method: SlaterMethod::Inconclusive,
            witness: Some(greedy),
            slack: greedy_slack,
            mixed_slack,
        });
    }
    let mut best = (min_slack(&greedy_slack), greedy, greedy_slack);
    for_each_policy(t.n_scenarios(), t.n_actions(), |choice| {
        let slack: Vec<f64> = (1..=m)
            .map(|i| t.thresholds[i - 1] - t.term_value_unchecked(i, choice).unwrap_or(f64::INFINITY))
            .collect();
        let s = min_slack(&slack);
        if s > best.0 {
            best = (s, Policy::new(choice.to_vec()), slack);
        }
    });
    Ok(SlaterReport {
        found: best.0 >= margin,
        method: SlaterMethod::Exhaustive,
        witness: Some(best.1),
        slack: best.2,
        mixed_slack,
    })
}

/// Index of the first minimum.
pub(crate) fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Visits every deterministic policy in lexicographic order (last scenario
/// varies fastest).
pub(crate) fn for_each_policy(n: usize, a: usize, mut visit: impl FnMut(&[usize])) {
    let mut choice = vec![0usize; n];
    loop {
        visit(&choice);
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            choice[k] += 1;
            if choice[k] < a {
                break;
            }
            choice[k] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    #[test]
    fn t1_lowering() {
        let inst = bundled::t1_instance(0.25);
        let t = lower(&inst).unwrap();
        assert_eq!(t.tables()[0].entries(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(t.tables()[1].entries(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(t.weights().iter().all(|w| w.as_slice() == [1.0, 1.0]));
        for choice in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            let p = Policy::new(choice.to_vec());
            for i in 0..2 {
                assert_eq!(t.term_value(i, &p).unwrap(), inst.direct_value(i, &p).unwrap());
            }
        }
    }

    #[test]
    fn off_support_joint_is_rejected() {
        let mut inst = bundled::t1_instance(0.25);
        inst.joints[1].marginal = DiscreteMarginal::from_scalars(&[0.0, 5.0], &[0.5, 0.5]).unwrap();
        assert!(matches!(lower(&inst), Err(Error::SupportViolation { .. })));
    }

    #[test]
    fn slater_examples() {
        let t = lower(&bundled::t1_instance(0.25)).unwrap();
        let r = check_slater(&t, 0.2).unwrap();
        assert!(r.found);
        assert_eq!(r.witness, Some(Policy::new(vec![0, 0])));
        assert_eq!(r.slack, vec![0.25]);
        assert_eq!(r.mixed_slack, Some(0.25));

        let t = lower(&bundled::t1_instance(-0.1)).unwrap();
        assert!(!check_slater(&t, 1e-6).unwrap().found);

        let t = lower(&bundled::t1_instance(0.0)).unwrap();
        let r = check_slater(&t, 0.1).unwrap();
        assert!(!r.found);
        assert_eq!(r.method, SlaterMethod::Exhaustive);
        assert_eq!(r.slack, vec![0.0]);
        assert!(check_slater(&t, 0.0).is_err());
    }

    #[test]
    fn mixed_policy_matches_deterministic() {
        let t = lower(&bundled::t1_instance(0.25)).unwrap();
        for choice in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            let p = Policy::new(choice.to_vec());
            let mix = MixedPolicy::from_policy(&p, 2);
            assert_eq!(mix.as_deterministic(), Some(p.clone()));
            for i in 0..2 {
                assert_eq!(t.term_value_mixed(i, &mix).unwrap(), t.term_value(i, &p).unwrap());
            }
        }
        assert!(MixedPolicy::new(vec![vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn enumeration_order_is_lexicographic() {
        let mut seen = Vec::new();
        for_each_policy(2, 3, |c| seen.push(c.to_vec()));
        assert_eq!(seen.len(), 9);
        assert_eq!(seen[1], vec![0, 1]);
        assert_eq!(seen[3], vec![1, 0]);
        assert_eq!(seen[8], vec![2, 2]);
    }
}
