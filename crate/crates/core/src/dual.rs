//! Lagrangian dual of a lowered instance.
//!
//! With decomposable policies the Lagrangian separates over base scenarios
//! once every outer CVaR anchor `t` is fixed, so `q(λ)` is an anchor
//! enumeration wrapped around a pointwise argmin. Outer risks other than
//! expectation and CVaR couple scenarios through the mean and are rejected.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::{Policy, RCL0Tables, FEAS_TOL};
use crate::risk::RiskSpec;

/// Default cap on the number of anchor tuples enumerated exactly.
pub const ANCHOR_CAP: u64 = 100_000;

const FALLBACK_STARTS: usize = 5;

/// Nonnegative Lagrange multipliers `λ_1..λ_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers(Vec<f64>);

impl Multipliers {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidInstance(format!(
                "multipliers must be finite and nonnegative: {lambda:?}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// CVaR anchors used by the minimizer, as `(term index, t)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorVector(pub Vec<(usize, f64)>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptions {
    pub anchor_cap: u64,
    /// Seeds the coordinate-descent starts used past the cap.
    pub seed: u64,
    /// When false, exceeding the cap is an error instead of a fallback.
    pub allow_fallback: bool,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            anchor_cap: ANCHOR_CAP,
            seed: 0,
            allow_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEval {
    pub q: f64,
    pub policy: Policy,
    pub anchors: AnchorVector,
    /// Constraint values `ρ̃_i(G_i(f))` at the minimizer; `g - c` is a
    /// supergradient of `q`.
    pub constraints: Vec<f64>,
    pub objective: f64,
    /// False when the anchor search fell back to coordinate descent.
    pub exact: bool,
}

impl DualEval {
    pub fn supergradient(&self, t: &RCL0Tables) -> Vec<f64> {
        self.constraints.iter().zip(t.thresholds()).map(|(g, c)| g - c).collect()
    }
}

/// Per-term coefficient in the Lagrangian and, for CVaR, its level.
struct Term {
    index: usize,
    coef: f64,
    alpha: Option<f64>,
}

struct Lagrangian<'a> {
    t: &'a RCL0Tables,
    terms: Vec<Term>,
    /// Position in `terms` and anchor candidates of each CVaR term.
    cvar: Vec<(usize, Vec<f64>)>,
}

impl<'a> Lagrangian<'a> {
    fn new(t: &'a RCL0Tables, lam: &Multipliers) -> Result<Self> {
        if lam.len() != t.m() {
            return Err(Error::AlignmentError(format!(
                "{} multipliers for {} constraints",
                lam.len(),
                t.m()
            )));
        }
        for spec in t.outer() {
            if !matches!(spec, RiskSpec::Expectation | RiskSpec::Cvar { .. }) {
                return Err(Error::UnsupportedOuter(spec.to_string()));
            }
        }
        let mut terms = Vec::new();
        let mut cvar = Vec::new();
        for i in 0..=t.m() {
            let coef = if i == 0 { 1.0 } else { lam.as_slice()[i - 1] };
            if coef == 0.0 {
                continue;
            }
            let alpha = match t.outer()[i] {
                RiskSpec::Cvar { alpha } => Some(alpha),
                _ => None,
            };
            if alpha.is_some() {
                cvar.push((terms.len(), anchor_candidates(t, i)));
            }
            terms.push(Term { index: i, coef, alpha });
        }
        Ok(Self { t, terms, cvar })
    }

    fn product_size(&self) -> u128 {
        self.cvar
            .iter()
            .fold(1u128, |acc, (_, c)| acc.saturating_mul(c.len() as u128))
    }

    /// Pointwise minimum for fixed anchors (one per CVaR term, in order).
    /// Returns the Lagrangian value without the `-Σλc` constant.
    fn pointwise(&self, anchors: &[f64]) -> (f64, Vec<usize>) {
        let t = self.t;
        let mut anchor_of = vec![0.0; self.terms.len()];
        let mut constant = 0.0;
        for ((pos, _), &a) in self.cvar.iter().zip(anchors) {
            anchor_of[*pos] = a;
            constant += self.terms[*pos].coef * a;
        }
        let mut total = constant;
        let mut choice = Vec::with_capacity(t.n_scenarios());
        for j in 0..t.n_scenarios() {
            let mut best = (0, f64::INFINITY);
            for a in 0..t.n_actions() {
                let mut s = 0.0;
                for (k, term) in self.terms.iter().enumerate() {
                    let mass = t.masses(term.index)[j];
                    if mass == 0.0 {
                        continue;
                    }
                    let z = t.tables()[term.index].get(j, a);
                    s += term.coef
                        * match term.alpha {
                            None => mass * z,
                            Some(alpha) => mass * (z - anchor_of[k]).max(0.0) / alpha,
                        };
                }
                if s < best.1 {
                    best = (a, s);
                }
            }
            total += best.1;
            choice.push(best.0);
        }
        (total, choice)
    }

    fn decode(&self, mut index: u128) -> Vec<f64> {
        let mut out = vec![0.0; self.cvar.len()];
        for (k, (_, cands)) in self.cvar.iter().enumerate().rev() {
            let base = cands.len() as u128;
            out[k] = cands[(index % base) as usize];
            index /= base;
        }
        out
    }

    fn exact(&self) -> (f64, Vec<usize>, Vec<f64>) {
        let size = self.product_size() as u64;
        let (value, index, choice) = (0..size)
            .into_par_iter()
            .map(|idx| {
                let (v, c) = self.pointwise(&self.decode(idx as u128));
                (v, idx, c)
            })
            .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
            .expect("nonempty anchor product");
        (value, choice, self.decode(index as u128))
    }

    /// Cyclic coordinate descent over anchors from seeded random starts.
    fn coordinate_descent(&self, seed: u64) -> (f64, Vec<usize>, Vec<f64>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
        for _ in 0..FALLBACK_STARTS {
            let mut anchors: Vec<f64> = self
                .cvar
                .iter()
                .map(|(_, c)| c[rng.random_range(0..c.len())])
                .collect();
            let (mut value, mut choice) = self.pointwise(&anchors);
            loop {
                let mut improved = false;
                for k in 0..anchors.len() {
                    let cands = &self.cvar[k].1;
                    let sweep = cands
                        .par_iter()
                        .enumerate()
                        .map(|(ci, &cand)| {
                            let mut trial = anchors.clone();
                            trial[k] = cand;
                            let (v, c) = self.pointwise(&trial);
                            (v, ci, c)
                        })
                        .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
                        .expect("nonempty candidates");
                    if sweep.0 < value - 1e-15 * value.abs().max(1.0) {
                        value = sweep.0;
                        choice = sweep.2;
                        anchors[k] = cands[sweep.1];
                        improved = true;
                    }
                }
                if !improved {
                    break;
                }
            }
            if best.as_ref().is_none_or(|b| value < b.0) {
                best = Some((value, choice, anchors));
            }
        }
        best.expect("at least one start")
    }
}

/// Distinct table values of term `i` over scenarios with positive mass.
fn anchor_candidates(t: &RCL0Tables, i: usize) -> Vec<f64> {
    let mut values: Vec<f64> = (0..t.n_scenarios())
        .filter(|&j| t.masses(i)[j] > 0.0)
        .flat_map(|j| t.tables()[i].row(j).iter().copied())
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
}

pub fn dual_function(t: &RCL0Tables, lam: &Multipliers) -> Result<DualEval> {
    dual_function_with(t, lam, &DualOptions::default())
}

/// `q(λ) = min_f ρ̃_0(G_0(f)) + Σ λ_i (ρ̃_i(G_i(f)) - c_i)`.
///
/// The returned `q` is the Lagrangian evaluated at the minimizer, so
/// `q(λ') ≤ q + (g - c)·(λ' - λ)` holds with the reported constraint values.
pub fn dual_function_with(t: &RCL0Tables, lam: &Multipliers, opts: &DualOptions) -> Result<DualEval> {
    let lag = Lagrangian::new(t, lam)?;
    let size = lag.product_size();
    let (choice, anchors, exact) = if size <= opts.anchor_cap as u128 {
        let (_, c, a) = lag.exact();
        (c, a, true)
    } else if opts.allow_fallback {
        let (_, c, a) = lag.coordinate_descent(opts.seed);
        (c, a, false)
    } else {
        return Err(Error::AnchorBudgetExceeded {
            size,
            cap: opts.anchor_cap,
        });
    };
    let policy = Policy::new(choice);
    let objective = t.term_value_unchecked(0, &policy.choice)?;
    let constraints = (1..=t.m())
        .map(|i| t.term_value_unchecked(i, &policy.choice))
        .collect::<Result<Vec<_>>>()?;
    let q = objective
        + lam
            .as_slice()
            .iter()
            .zip(constraints.iter().zip(t.thresholds()))
            .map(|(l, (g, c))| l * (g - c))
            .sum::<f64>();
    let anchors = AnchorVector(
        lag.cvar
            .iter()
            .zip(anchors)
            .map(|((pos, _), a)| (lag.terms[*pos].index, a))
            .collect(),
    );
    Ok(DualEval {
        q,
        policy,
        anchors,
        constraints,
        objective,
        exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentParams {
    pub step0: f64,
    pub iters: usize,
    pub seed: u64,
    pub anchor_cap: u64,
}

impl Default for AscentParams {
    fn default() -> Self {
        Self {
            step0: 1.0,
            iters: 500,
            seed: 0,
            anchor_cap: ANCHOR_CAP,
        }
    }
}

/// One iterate: `q(λ^k)` and the best feasible value seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStep {
    pub iter: usize,
    pub lambda: Vec<f64>,
    pub q: f64,
    pub best_feasible: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualReport {
    pub trajectory: Vec<DualStep>,
    pub dstar: f64,
    pub lambda_star: Vec<f64>,
    pub best_feasible: Option<(f64, Policy)>,
    pub iterations: usize,
    pub converged: bool,
    /// No feasible minimizer and multipliers growing without bound.
    pub diverged: bool,
    /// Every dual evaluation used exact anchor enumeration.
    pub exact: bool,
}

impl DualReport {
    pub fn phat(&self) -> Option<f64> {
        self.best_feasible.as_ref().map(|(v, _)| *v)
    }

    pub fn gap(&self) -> Option<f64> {
        self.phat().map(|p| p - self.dstar)
    }
}

/// Projected supergradient ascent from `λ = 0` with steps `step0/√(k+1)`.
pub fn dual_ascent(t: &RCL0Tables, params: &AscentParams) -> Result<DualReport> {
    if !(params.step0 > 0.0 && params.step0.is_finite()) || params.iters == 0 {
        return Err(Error::InvalidInstance("step0 and iters must be positive".into()));
    }
    let opts = DualOptions {
        anchor_cap: params.anchor_cap,
        seed: params.seed,
        allow_fallback: true,
    };
    let mut lam = vec![0.0; t.m()];
    let mut trajectory = Vec::with_capacity(params.iters);
    let mut dstar = f64::NEG_INFINITY;
    let mut lambda_star = lam.clone();
    let mut best: Option<(f64, Policy)> = None;
    let mut exact = true;
    for k in 0..params.iters {
        let eval = dual_function_with(t, &Multipliers(lam.clone()), &opts)?;
        exact &= eval.exact;
        if eval.q > dstar {
            dstar = eval.q;
            lambda_star = lam.clone();
        }
        let feasible = eval
            .constraints
            .iter()
            .zip(t.thresholds())
            .all(|(g, c)| *g <= c + FEAS_TOL);
        if feasible && best.as_ref().is_none_or(|(v, _)| eval.objective < *v) {
            best = Some((eval.objective, eval.policy.clone()));
        }
        let best_value = best.as_ref().map(|(v, _)| *v);
        trajectory.push(DualStep {
            iter: k,
            lambda: lam.clone(),
            q: eval.q,
            best_feasible: best_value,
            gap: best_value.map(|p| p - dstar),
        });
        let step = params.step0 / ((k + 1) as f64).sqrt();
        for (l, g) in lam.iter_mut().zip(eval.supergradient(t)) {
            *l = (*l + step * g).max(0.0);
        }
    }
    let diverged = best.is_none() && growing(&trajectory);
    let tail = &trajectory[trajectory.len() - trajectory.len().div_ceil(10)..];
    let tail_best = tail.iter().map(|s| s.q).fold(f64::NEG_INFINITY, f64::max);
    let head_best = trajectory[..trajectory.len() - tail.len()]
        .iter()
        .map(|s| s.q)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap_closed = best
        .as_ref()
        .is_some_and(|(p, _)| p - dstar <= 1e-9 * (1.0 + p.abs()));
    let plateau = tail_best - head_best.min(tail_best) <= 1e-9 * (1.0 + dstar.abs());
    Ok(DualReport {
        iterations: trajectory.len(),
        trajectory,
        dstar,
        lambda_star,
        best_feasible: best,
        converged: !diverged && (gap_closed || plateau),
        diverged,
        exact,
    })
}

/// Multipliers and dual values still climbing like the step sum.
fn growing(trajectory: &[DualStep]) -> bool {
    if trajectory.len() < 4 {
        return false;
    }
    let norm = |s: &DualStep| s.lambda.iter().map(|l| l * l).sum::<f64>().sqrt();
    let mid = &trajectory[trajectory.len() / 2];
    let last = &trajectory[trajectory.len() - 1];
    norm(last) > 1.3 * norm(mid) && last.q > mid.q
}

/// Upper bound on `|g - c|`, the Lipschitz constant of `q` for one constraint.
fn slope_bound(t: &RCL0Tables) -> f64 {
    let e = t.tables()[1].entries();
    e.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) + t.thresholds()[0].abs()
}

/// Maximizes the concave `q` for a single constraint.
///
/// The bracket `[0, 2h]` is found by doubling `h` until `q(2h) ≤ q(h)`;
/// golden-section search then narrows it until the slope bound times the
/// width is below `tol (1 + |q|)`, and the two supporting lines at the final
/// bracket are intersected to land on the breakpoint.
pub fn bisect_dual_m1(t: &RCL0Tables, tol: f64) -> Result<(f64, f64)> {
    if t.m() != 1 {
        return Err(Error::NotSingleConstraint(t.m()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInstance(format!("tolerance must be positive, got {tol}")));
    }
    let q = |l: f64| dual_function(t, &Multipliers(vec![l]));
    let mut best = (0.0, q(0.0)?.q);
    let mut h = 1.0;
    let mut qh = q(h)?.q;
    if qh > best.1 {
        best = (h, qh);
    }
    let mut doublings = 0;
    loop {
        let q2 = q(2.0 * h)?.q;
        if q2 > best.1 {
            best = (2.0 * h, q2);
        }
        if q2 <= qh {
            break;
        }
        h *= 2.0;
        qh = q2;
        doublings += 1;
        if doublings > 200 || !h.is_finite() {
            return Err(Error::DualUnbounded);
        }
    }
    let g_bound = slope_bound(t);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, 2.0 * h);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (q(x1)?.q, q(x2)?.q);
    for _ in 0..400 {
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f > best.1 {
                best = (x, f);
            }
        }
        if (b - a) * g_bound <= tol * (1.0 + best.1.abs()) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = q(x2)?.q;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = q(x1)?.q;
        }
    }
    // Supporting lines at the bracket ends meet at the breakpoint when only
    // one lies inside.
    let (ea, eb) = (dual_function(t, &Multipliers(vec![a]))?, dual_function(t, &Multipliers(vec![b]))?);
    let (sa, sb) = (ea.supergradient(t)[0], eb.supergradient(t)[0]);
    if sa > sb {
        let x = (eb.q - ea.q + sa * a - sb * b) / (sa - sb);
        if x.is_finite() && (a..=b).contains(&x) {
            let fx = q(x)?.q;
            if fx > best.1 {
                best = (x, fx);
            }
        }
    }
    let q0 = q(0.0)?.q;
    if q0 >= best.1 - 1e-15 * (1.0 + best.1.abs()) {
        best = (0.0, q0);
    }
    Ok((best.1, best.0))
}
