//! Conditional risk mappings realized scenario by scenario: the inner risk of
//! `ℓ(a, Y)` under the label posterior at each feature atom.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::risk::RiskSpec;
use crate::scenario::JointModel;

/// The per-scenario choice set of a decomposable policy space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    actions: Vec<Vec<f64>>,
}

impl ActionGrid {
    pub fn new(actions: Vec<Vec<f64>>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidInstance("action grid is empty".into()));
        }
        let k = actions[0].len();
        if k == 0 || actions.iter().any(|a| a.len() != k) {
            return Err(Error::AlignmentError(
                "actions must share a positive dimension".into(),
            ));
        }
        if actions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance("action grid has non-finite values".into()));
        }
        for i in 0..actions.len() {
            for j in 0..i {
                if actions[i] == actions[j] {
                    return Err(Error::InvalidInstance(format!(
                        "actions {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { actions })
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    /// `count` evenly spaced scalar actions on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidInstance("action grid is empty".into()));
        }
        if count == 1 {
            return Self::scalar(&[lo]);
        }
        let h = (hi - lo) / (count - 1) as f64;
        let values: Vec<f64> = (0..count)
            .map(|k| if k + 1 == count { hi } else { lo + h * k as f64 })
            .collect();
        Self::scalar(&values)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn action(&self, a: usize) -> &[f64] {
        &self.actions[a]
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }
}

/// Dense `scenarios × actions` table of inner risk values `F(a, x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    clamped: usize,
}

impl CostTable {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows * cols != entries.len() || rows == 0 || cols == 0 {
            return Err(Error::AlignmentError(format!(
                "{} entries for a {rows}x{cols} table",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::AlignmentError("table entries must be finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            entries,
            clamped: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::AlignmentError("ragged table rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, scenario: usize, action: usize) -> f64 {
        self.entries[scenario * self.cols + action]
    }

    pub fn row(&self, scenario: usize) -> &[f64] {
        &self.entries[scenario * self.cols..(scenario + 1) * self.cols]
    }

    pub fn n_scenarios(&self) -> usize {
        self.rows
    }

    pub fn n_actions(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Number of loss evaluations clamped from negative to 0.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Entry-wise values for a deterministic choice per scenario.
    pub fn select(&self, choice: &[usize]) -> Vec<f64> {
        choice.iter().enumerate().map(|(j, &a)| self.get(j, a)).collect()
    }
}

/// `entries[j][a] = inner(ℓ(a, Y))` with `Y` drawn from the posterior at `x_j`.
pub fn inner_cost_table(
    loss: &LossSpec,
    joint: &JointModel,
    grid: &ActionGrid,
    inner: &RiskSpec,
) -> Result<CostTable> {
    inner.validate()?;
    let rows: Vec<(Vec<f64>, usize)> = (0..joint.marginal.len())
        .into_par_iter()
        .map(|j| {
            let posterior = joint.conditional.row(j);
            let probs: Vec<f64> = posterior.iter().map(|&(_, q)| q).collect();
            let mut clamped = 0;
            let mut row = Vec::with_capacity(grid.len());
            for action in grid.actions() {
                let mut values = Vec::with_capacity(posterior.len());
                for &(y, _) in posterior {
                    let v = loss.eval(action, y)?;
                    clamped += usize::from(v.clamped);
                    values.push(v.value);
                }
                row.push(inner.eval_weighted(&values, &probs)?);
            }
            Ok((row, clamped))
        })
        .collect::<Result<_>>()?;
    let clamped = rows.iter().map(|(_, c)| c).sum();
    let mut table = CostTable::new(
        rows.len(),
        grid.len(),
        rows.into_iter().flat_map(|(r, _)| r).collect(),
    )?;
    table.clamped = clamped;
    Ok(table)
}

/// Largest discrepancy between the table and a direct evaluation that
/// conditions the joint pair distribution on each feature atom.
pub fn substitution_check(
    loss: &LossSpec,
    joint: &JointModel,
    grid: &ActionGrid,
    inner: &RiskSpec,
) -> Result<f64> {
    let table = inner_cost_table(loss, joint, grid, inner)?;
    let pairs = joint.pairs();
    let mut worst: f64 = 0.0;
    for j in 0..joint.marginal.len() {
        let slice: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|(k, _, _)| *k == j)
            .map(|&(_, y, mass)| (y, mass))
            .collect();
        let total: f64 = slice.iter().map(|(_, m)| m).sum();
        let probs: Vec<f64> = slice.iter().map(|(_, m)| m / total).collect();
        for (a, action) in grid.actions().iter().enumerate() {
            let values = slice
                .iter()
                .map(|&(y, _)| loss.eval(action, y).map(|v| v.value))
                .collect::<Result<Vec<_>>>()?;
            let direct = inner.eval_weighted(&values, &probs)?;
            worst = worst.max((table.get(j, a) - direct).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ConditionalLabelDist, DiscreteMarginal};

    fn coin_joint() -> JointModel {
        JointModel::new(
            DiscreteMarginal::from_scalars(&[0.0], &[1.0]).unwrap(),
            ConditionalLabelDist::new(vec![vec![(0.0, 0.5), (1.0, 0.5)]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn point_mass_labels_give_the_loss() {
        let joint = JointModel::new(
            DiscreteMarginal::from_scalars(&[0.0, 1.0], &[0.5, 0.5]).unwrap(),
            ConditionalLabelDist::point_mass(&[0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let grid = ActionGrid::scalar(&[0.0, 1.0]).unwrap();
        for inner in ["expectation", "cvar:0.3", "mad:0.5", "musd:1:2", "gmsd:abs:2:1"] {
            let t = inner_cost_table(&LossSpec::AbsDev, &joint, &grid, &inner.parse().unwrap()).unwrap();
            assert_eq!(t.entries(), &[0.0, 1.0, 1.0, 0.0], "{inner}");
        }
    }

    #[test]
    fn coin_flip_labels() {
        let grid = ActionGrid::scalar(&[0.0]).unwrap();
        let t = inner_cost_table(&LossSpec::AbsDev, &coin_joint(), &grid, &"cvar:1".parse().unwrap()).unwrap();
        assert_eq!(t.get(0, 0), 0.5);
        let t = inner_cost_table(&LossSpec::AbsDev, &coin_joint(), &grid, &"cvar:0.5".parse().unwrap()).unwrap();
        assert_eq!(t.get(0, 0), 1.0);
    }

    #[test]
    fn substitution_on_three_label_posterior() {
        let joint = JointModel::new(
            DiscreteMarginal::from_scalars(&[0.0, 1.0], &[0.3, 0.7]).unwrap(),
            ConditionalLabelDist::new(vec![
                vec![(0.0, 0.2), (1.0, 0.5), (3.0, 0.3)],
                vec![(-1.0, 0.6), (0.5, 0.1), (2.0, 0.3)],
            ])
            .unwrap(),
        )
        .unwrap();
        let grid = ActionGrid::linspace(-1.0, 2.0, 7).unwrap();
        let gap = substitution_check(&LossSpec::Quad, &joint, &grid, &"musd:1:1".parse().unwrap()).unwrap();
        assert!(gap <= 1e-12, "{gap}");
        let gap = substitution_check(&LossSpec::AbsDev, &joint, &grid, &RiskSpec::Expectation).unwrap();
        assert!(gap <= 1e-12, "{gap}");
    }

    #[test]
    fn grid_validation() {
        assert!(ActionGrid::scalar(&[]).is_err());
        assert!(ActionGrid::scalar(&[1.0, 1.0]).is_err());
        assert!(ActionGrid::new(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        let g = ActionGrid::linspace(0.0, 0.9, 10).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.action(9), &[0.9]);
    }

    #[test]
    fn clamped_expression_count() {
        let joint = coin_joint();
        let grid = ActionGrid::scalar(&[0.0, 2.0]).unwrap();
        let t = inner_cost_table(&"expr:z1 - y".parse().unwrap(), &joint, &grid, &RiskSpec::Expectation).unwrap();
        assert_eq!(t.clamped(), 1);
        assert_eq!(t.row(0), &[0.0, 1.5]);
    }
}
