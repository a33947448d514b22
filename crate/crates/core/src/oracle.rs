//! Brute-force references for the duality-gap checks.
//!
//! These are deliberately plain: full policy enumeration, a λ grid, and for
//! one expectation constraint, the randomized policy built from the two
//! supporting minimizers at the dual optimum.

use rayon::prelude::*;

use crate::dual::{bisect_dual_m1, dual_function, DualEval, Multipliers};
use crate::error::{Error, Result};
use crate::problem::{MixedPolicy, Policy, RCL0Tables, FEAS_TOL};
use crate::risk::RiskSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBudget {
    pub max_policies: u64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub lambda_step: f64,
    /// Cap on λ grid points for two constraints; the step is coarsened to fit.
    pub max_grid_evals: u64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_policies: 1_000_000,
            lambda_lo: 0.0,
            lambda_hi: 3.0,
            lambda_step: 1e-3,
            max_grid_evals: 40_000,
        }
    }
}

impl OracleBudget {
    fn validate(&self) -> Result<()> {
        let ok = self.max_policies > 0
            && self.lambda_lo >= 0.0
            && self.lambda_hi > self.lambda_lo
            && self.lambda_step > 0.0
            && self.lambda_hi.is_finite()
            && self.max_grid_evals > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInstance(format!("invalid oracle budget {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrimalResult {
    Optimal { value: f64, policy: Policy },
    Infeasible,
}

impl PrimalResult {
    pub fn value(&self) -> Option<f64> {
        match self {
            PrimalResult::Optimal { value, .. } => Some(*value),
            PrimalResult::Infeasible => None,
        }
    }
}

fn decode(mut index: u64, n: usize, a: usize, out: &mut [usize]) {
    for k in (0..n).rev() {
        out[k] = (index % a as u64) as usize;
        index /= a as u64;
    }
}

/// Exhaustive search over deterministic policies in lexicographic order;
/// ties keep the first policy.
pub fn brute_primal(t: &RCL0Tables, b: &OracleBudget) -> Result<PrimalResult> {
    b.validate()?;
    let needed = t.pointwise_candidates();
    if needed > b.max_policies as u128 {
        return Err(Error::BudgetExceeded {
            needed,
            budget: b.max_policies,
        });
    }
    let (n, a) = (t.n_scenarios(), t.n_actions());
    let total = needed as u64;
    let chunk = 4096u64;
    let best = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| -> Result<Option<(f64, u64)>> {
            let mut choice = vec![0usize; n];
            let mut best: Option<(f64, u64)> = None;
            for idx in c * chunk..((c + 1) * chunk).min(total) {
                decode(idx, n, a, &mut choice);
                let mut feasible = true;
                for i in 1..=t.m() {
                    if t.term_value_unchecked(i, &choice)? > t.thresholds()[i - 1] + FEAS_TOL {
                        feasible = false;
                        break;
                    }
                }
                if !feasible {
                    continue;
                }
                let v = t.term_value_unchecked(0, &choice)?;
                if best.is_none_or(|(bv, _)| v < bv) {
                    best = Some((v, idx));
                }
            }
            Ok(best)
        })
        .try_reduce_with(|x, y| {
            Ok(match (x, y) {
                (Some(p), Some(q)) => Some(if q.0 < p.0 || (q.0 == p.0 && q.1 < p.1) { q } else { p }),
                (p, q) => p.or(q),
            })
        })
        .transpose()?
        .flatten();
    Ok(match best {
        Some((value, idx)) => {
            let mut choice = vec![0usize; n];
            decode(idx, n, a, &mut choice);
            PrimalResult::Optimal {
                value,
                policy: Policy::new(choice),
            }
        }
        None => PrimalResult::Infeasible,
    })
}

fn q_at(t: &RCL0Tables, lam: Vec<f64>) -> Result<f64> {
    Ok(dual_function(t, &Multipliers::new(lam)?)?.q)
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|k| (lo + step * k as f64).min(hi)).collect()
}

/// Maximum of `q` over the λ grid. One constraint: refined by the line
/// search. Two constraints: the grid (coarsened to the evaluation cap) is
/// followed by zoomed sub-grids around the incumbent. Every returned value is
/// attained, so it is a valid lower bound on the dual optimum.
pub fn grid_dual(t: &RCL0Tables, b: &OracleBudget) -> Result<f64> {
    b.validate()?;
    match t.m() {
        1 => {
            let values = axis(b.lambda_lo, b.lambda_hi, b.lambda_step)
                .into_par_iter()
                .map(|l| q_at(t, vec![l]))
                .collect::<Result<Vec<_>>>()?;
            let grid_best = values.into_iter().fold(f64::NEG_INFINITY, f64::max);
            let refined = match bisect_dual_m1(t, 1e-10) {
                Ok((d, _)) => d,
                Err(Error::DualUnbounded) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok(grid_best.max(refined))
        }
        2 => {
            let per_axis = (b.max_grid_evals as f64).sqrt().floor().max(2.0);
            let step = b.lambda_step.max((b.lambda_hi - b.lambda_lo) / (per_axis - 1.0));
            let ax = axis(b.lambda_lo, b.lambda_hi, step);
            let points: Vec<(f64, f64)> = ax.iter().flat_map(|&x| ax.iter().map(move |&y| (x, y))).collect();
            let mut best = best_of(t, &points)?;
            let mut h = step;
            while h > b.lambda_step.min(1e-6) {
                let local: Vec<(f64, f64)> = (-10..=10)
                    .flat_map(|i| (-10..=10).map(move |k| (i as f64 * h / 10.0, k as f64 * h / 10.0)))
                    .map(|(dx, dy)| ((best.0 .0 + dx).max(0.0), (best.0 .1 + dy).max(0.0)))
                    .collect();
                let cand = best_of(t, &local)?;
                if cand.1 > best.1 {
                    best = cand;
                }
                h /= 10.0;
            }
            Ok(best.1)
        }
        m => Err(Error::GridDimensionExceeded(m)),
    }
}

fn best_of(t: &RCL0Tables, points: &[(f64, f64)]) -> Result<((f64, f64), f64)> {
    let values = points
        .par_iter()
        .map(|&(x, y)| q_at(t, vec![x, y]))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (points[0], values[0]);
    for (p, v) in points.iter().zip(values) {
        if v > best.1 {
            best = (*p, v);
        }
    }
    Ok(best)
}

/// Optimum of the randomized problem for one expectation constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSolution {
    pub value: f64,
    pub mix: MixedPolicy,
    pub lambda: f64,
    /// Scenario split between two actions, if any.
    pub randomized: Option<usize>,
    /// Deterministic feasible policy obtained by resolving the split toward
    /// the lower-constraint action.
    pub rounded: Policy,
    pub rounded_value: f64,
}

fn eval_at(t: &RCL0Tables, l: f64) -> Result<DualEval> {
    dual_function(t, &Multipliers::new(vec![l])?)
}

/// Value at `λ` of the affine Lagrangian piece belonging to `e`.
fn line(e: &DualEval, c: f64, l: f64) -> f64 {
    e.objective + l * (e.constraints[0] - c)
}

/// Randomized optimum for `m = 1` with expectation outer risks.
///
/// Finds the breakpoint `λ*` of the piecewise-linear dual by intersecting
/// supporting lines, takes the minimizers `f⁻` (constraint above `c`) and
/// `f⁺` (below) on either side, and moves scenarios from `f⁻` to `f⁺` one at
/// a time; the scenario where the constraint crosses `c` is split so that it
/// holds with equality. Both minimizers attain `q(λ*)`, so the mixture does
/// too.
pub fn mixed_primal_m1(t: &RCL0Tables) -> Result<MixedSolution> {
    if t.m() != 1 {
        return Err(Error::NotSupported(format!("mixed oracle needs one constraint, got {}", t.m())));
    }
    if t.outer().iter().any(|s| *s != RiskSpec::Expectation) {
        return Err(Error::NotSupported("mixed oracle needs expectation outer risks".into()));
    }
    let c = t.thresholds()[0];
    let (n, na) = (t.n_scenarios(), t.n_actions());
    let contrib = |j: usize, a: usize| t.masses(1)[j] * t.tables()[1].get(j, a);
    let min_constraint: f64 = (0..n)
        .map(|j| (0..na).map(|a| contrib(j, a)).fold(f64::INFINITY, f64::min))
        .sum();
    if min_constraint > c + FEAS_TOL {
        return Err(Error::DualUnbounded);
    }

    let mut lo = (0.0, eval_at(t, 0.0)?);
    if lo.1.constraints[0] <= c + FEAS_TOL {
        return Ok(deterministic(t, lo.1.policy.clone(), 0.0));
    }
    let mut hi = (1.0, eval_at(t, 1.0)?);
    let mut doublings = 0;
    while hi.1.constraints[0] > c + FEAS_TOL {
        lo = hi;
        let l = lo.0 * 2.0;
        hi = (l, eval_at(t, l)?);
        doublings += 1;
        if doublings > 1100 || !l.is_finite() {
            return Err(Error::DualUnbounded);
        }
    }
    if hi.1.constraints[0] >= c - FEAS_TOL {
        return Ok(deterministic(t, hi.1.policy.clone(), hi.0));
    }
    // Invariant: g(lo) > c > g(hi).
    let mut lambda = hi.0;
    for _ in 0..10_000 {
        let (ga, gb) = (lo.1.constraints[0], hi.1.constraints[0]);
        let x = ((hi.1.objective - lo.1.objective) / (ga - gb)).clamp(lo.0, hi.0);
        let mid = eval_at(t, x)?;
        let tol = 1e-12 * (1.0 + mid.q.abs());
        if line(&lo.1, c, x) <= mid.q + tol || x == lo.0 || x == hi.0 {
            lambda = x;
            break;
        }
        let g = mid.constraints[0];
        if (g - c).abs() <= FEAS_TOL {
            return Ok(deterministic(t, mid.policy, x));
        } else if g > c {
            lo = (x, mid);
        } else {
            hi = (x, mid);
        }
        lambda = x;
    }

    let (fm, fp) = (&lo.1.policy.choice, &hi.1.policy.choice);
    let mut current: f64 = (0..n).map(|j| contrib(j, fm[j])).sum();
    let mut choice = fm.clone();
    let mut rows: Vec<Vec<f64>> = fm
        .iter()
        .map(|&a| {
            let mut r = vec![0.0; na];
            r[a] = 1.0;
            r
        })
        .collect();
    let mut randomized = None;
    for j in 0..n {
        if fm[j] == fp[j] {
            continue;
        }
        let drop = contrib(j, fm[j]) - contrib(j, fp[j]);
        let next = current - drop;
        if next <= c {
            let theta = if drop > 0.0 { ((current - c) / drop).clamp(0.0, 1.0) } else { 1.0 };
            rows[j] = vec![0.0; na];
            rows[j][fp[j]] += theta;
            rows[j][fm[j]] += 1.0 - theta;
            choice[j] = fp[j];
            if theta < 1.0 {
                randomized = Some(j);
            } else {
                rows[j] = vec![0.0; na];
                rows[j][fp[j]] = 1.0;
            }
            break;
        }
        current = next;
        choice[j] = fp[j];
        rows[j] = vec![0.0; na];
        rows[j][fp[j]] = 1.0;
    }
    let mix = MixedPolicy::new(rows)?;
    let value = t.term_value_mixed(0, &mix)?;
    let rounded = Policy::new(choice);
    let rounded_value = t.objective(&rounded)?;
    Ok(MixedSolution {
        value,
        mix,
        lambda,
        randomized,
        rounded,
        rounded_value,
    })
}

fn deterministic(t: &RCL0Tables, policy: Policy, lambda: f64) -> MixedSolution {
    let value = t.objective(&policy).expect("aligned policy");
    MixedSolution {
        value,
        mix: MixedPolicy::from_policy(&policy, t.n_actions()),
        lambda,
        randomized: None,
        rounded_value: value,
        rounded: policy,
    }
}
