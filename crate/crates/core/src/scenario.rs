//! Finite scenario models: feature marginals, label posteriors, density
//! ratios between marginals, and gridded refinements of continuous feature
//! densities.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::expr::{parse_expr, Env, LossExpr, Scope};

/// Tolerance on `Σ p = 1` for validated distributions.
pub const PROB_SUM_TOL: f64 = 1e-12;

fn point_key(p: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 are the same location.
    p.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptySupport);
    }
    for (index, &value) in probs.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveProb { index, value });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::ProbSumMismatch { sum });
    }
    Ok(())
}

/// A finitely supported feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMarginal {
    points: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

/// Validates and builds a marginal from atoms and their masses.
pub fn build_marginal(points: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<DiscreteMarginal> {
    if points.len() != probs.len() {
        return Err(Error::AlignmentError(format!(
            "{} points but {} probabilities",
            points.len(),
            probs.len()
        )));
    }
    check_probs(&probs)?;
    let dim = points[0].len();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::AlignmentError(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::AlignmentError(format!("point {i} is not finite")));
        }
        if let Some(&first) = seen.get(&point_key(p)) {
            return Err(Error::DuplicatePoint { first, second: i });
        }
        seen.insert(point_key(p), i);
    }
    Ok(DiscreteMarginal { points, probs })
}

impl DiscreteMarginal {
    /// One-dimensional convenience constructor.
    pub fn from_scalars(points: &[f64], probs: &[f64]) -> Result<Self> {
        build_marginal(points.iter().map(|&x| vec![x]).collect(), probs.to_vec())
    }

    /// Uniform masses on `n` scalar atoms `0, 1, ..., n-1`.
    pub fn uniform(n: usize) -> Result<Self> {
        let pts: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let probs = vec![1.0 / n as f64; n];
        Self::from_scalars(&pts, &probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Index of the atom located at `point`, if any.
    pub fn index_of(&self, point: &[f64]) -> Option<usize> {
        let key = point_key(point);
        self.points.iter().position(|p| point_key(p) == key)
    }

    /// Maps each atom of `self` to its index in `base`.
    pub fn embed_in(&self, base: &DiscreteMarginal) -> Result<Vec<usize>> {
        let lookup: HashMap<Vec<u64>, usize> = base
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (point_key(p), i))
            .collect();
        self.points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                lookup
                    .get(&point_key(p))
                    .copied()
                    .ok_or(Error::SupportViolation { index })
            })
            .collect()
    }
}

/// Label posterior per feature scenario, as `(label, prob)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLabelDist {
    rows: Vec<Vec<(f64, f64)>>,
}

impl ConditionalLabelDist {
    pub fn new(rows: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        for (j, row) in rows.iter().enumerate() {
            let probs: Vec<f64> = row.iter().map(|&(_, p)| p).collect();
            check_probs(&probs).map_err(|e| match e {
                Error::EmptySupport => {
                    Error::AlignmentError(format!("scenario {j} has no labels"))
                }
                other => other,
            })?;
            if row.iter().any(|&(y, _)| !y.is_finite()) {
                return Err(Error::AlignmentError(format!(
                    "scenario {j} has a non-finite label"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Deterministic labels, one per scenario.
    pub fn point_mass(labels: &[f64]) -> Result<Self> {
        Self::new(labels.iter().map(|&y| vec![(y, 1.0)]).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, j: usize) -> &[(f64, f64)] {
        &self.rows[j]
    }

    pub fn rows(&self) -> &[Vec<(f64, f64)>] {
        &self.rows
    }
}

/// Joint distribution of `(x, y)` given as a marginal and a posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub marginal: DiscreteMarginal,
    pub conditional: ConditionalLabelDist,
}

impl JointModel {
    pub fn new(marginal: DiscreteMarginal, conditional: ConditionalLabelDist) -> Result<Self> {
        if marginal.len() != conditional.len() {
            return Err(Error::AlignmentError(format!(
                "marginal has {} scenarios, conditional has {}",
                marginal.len(),
                conditional.len()
            )));
        }
        Ok(Self {
            marginal,
            conditional,
        })
    }

    /// All `(x_j, y, P(x_j, y))` triples with positive mass.
    pub fn pairs(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for (j, &pj) in self.marginal.probs().iter().enumerate() {
            for &(y, q) in self.conditional.row(j) {
                out.push((j, y, pj * q));
            }
        }
        out
    }
}

/// Density ratio of one marginal with respect to a base marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Takes raw weights and checks `Σ p0_j w_j = 1` within 1e-10.
    pub fn new(w: Vec<f64>, base: &DiscreteMarginal) -> Result<Self> {
        if w.len() != base.len() {
            return Err(Error::AlignmentError(format!(
                "{} weights for {} base scenarios",
                w.len(),
                base.len()
            )));
        }
        if let Some(index) = w.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonPositiveProb {
                index,
                value: w[index],
            });
        }
        let total: f64 = w.iter().zip(base.probs()).map(|(w, p)| w * p).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::ProbSumMismatch { sum: total });
        }
        Ok(Self(w))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
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

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&w| w == 1.0)
    }
}

/// Radon–Nikodym weights `w_j = other(x_j) / base(x_j)`.
///
/// Base atoms that `other` does not charge get weight 0; an atom of `other`
/// outside the base support is a `SupportViolation`.
pub fn compute_weights(base: &DiscreteMarginal, other: &DiscreteMarginal) -> Result<WeightVector> {
    let embed = other.embed_in(base)?;
    let mut w = vec![0.0; base.len()];
    for (k, &j) in embed.iter().enumerate() {
        w[j] = other.probs[k] / base.probs[j];
    }
    WeightVector::new(w, base)
}

/// Continuous feature densities on a bounded interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density {
    Uniform { lo: f64, hi: f64 },
    TruncGauss { mu: f64, sigma: f64, lo: f64, hi: f64 },
}

/// Raw parameters for registry lookup; unused ones are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityParams {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            sigma: 1.0,
            lo: 0.0,
            hi: 1.0,
        }
    }
}

impl Density {
    /// Registry lookup: `uniform` or `truncgauss`.
    pub fn from_name(name: &str, params: DensityParams) -> Result<Self> {
        let DensityParams { mu, sigma, lo, hi } = params;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInstance(format!(
                "density box [{lo}, {hi}] is empty"
            )));
        }
        match name {
            "uniform" => Ok(Density::Uniform { lo, hi }),
            "truncgauss" => {
                if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
                    return Err(Error::InvalidInstance(format!(
                        "truncgauss needs finite mu and sigma > 0, got mu={mu} sigma={sigma}"
                    )));
                }
                Ok(Density::TruncGauss { mu, sigma, lo, hi })
            }
            other => Err(Error::UnsupportedDensity(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Density::Uniform { .. } => "uniform",
            Density::TruncGauss { .. } => "truncgauss",
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Density::Uniform { lo, hi } | Density::TruncGauss { lo, hi, .. } => (lo, hi),
        }
    }

    /// Unnormalized mass of `[a, b]`.
    fn mass(&self, a: f64, b: f64) -> f64 {
        match *self {
            Density::Uniform { .. } => b - a,
            Density::TruncGauss { mu, sigma, .. } => {
                let s = sigma * std::f64::consts::SQRT_2;
                let (za, zb) = ((a - mu) / s, (b - mu) / s);
                // Work in the tail with erfc to avoid cancellation.
                if za >= 0.0 {
                    0.5 * (libm::erfc(za) - libm::erfc(zb))
                } else if zb <= 0.0 {
                    0.5 * (libm::erfc(-zb) - libm::erfc(-za))
                } else {
                    0.5 * (libm::erf(zb) - libm::erf(za))
                }
            }
        }
    }

    /// Normalized masses of `n` equal-width cells.
    pub fn cell_masses(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        let edges = cell_edges(lo, hi, n);
        let raw: Vec<f64> = edges.windows(2).map(|e| self.mass(e[0], e[1])).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|m| m / total).collect()
    }
}

fn cell_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..=n)
        .map(|k| if k == n { hi } else { lo + h * k as f64 })
        .collect()
}

/// Cell midpoints of the `n`-cell grid on `[lo, hi]`.
pub fn cell_midpoints(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|k| lo + h * (k as f64 + 0.5)).collect()
}

/// How labels are generated from a feature value.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelRule {
    /// `y = x1`.
    Identity,
    /// `y = 1{x1 ≥ at}`.
    Step { at: f64 },
    /// Step label flipped with probability `eps`.
    Flip { at: f64, eps: f64 },
    /// `y = expr(x)`.
    Expr(LossExpr),
    /// `y = center(x) ± spread`, each with probability 1/2.
    Noisy { spread: f64, center: LossExpr },
}

impl LabelRule {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = |msg: &str| Error::InvalidSpec(format!("label rule `{text}`: {msg}"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("expected a number"));
        let (head, rest) = match text.split_once(':') {
            Some((h, r)) => (h.trim(), Some(r)),
            None => (text, None),
        };
        match (head, rest) {
            ("identity", None) => Ok(LabelRule::Identity),
            ("step", Some(r)) => Ok(LabelRule::Step { at: num(r)? }),
            ("flip", Some(r)) => {
                let (a, e) = r.split_once(':').ok_or_else(|| bad("expected flip:AT:EPS"))?;
                let eps = num(e)?;
                if !(eps > 0.0 && eps < 1.0) {
                    return Err(bad("flip probability must lie in (0, 1)"));
                }
                Ok(LabelRule::Flip { at: num(a)?, eps })
            }
            ("expr", Some(r)) => parse_expr(r, Scope::FEATURE)
                .map(LabelRule::Expr)
                .map_err(|e| bad(&e.to_string())),
            ("noisy", Some(r)) => {
                let (s, e) = r.split_once(':').ok_or_else(|| bad("expected noisy:SPREAD:EXPR"))?;
                let spread = num(s)?;
                if !(spread > 0.0 && spread.is_finite()) {
                    return Err(bad("spread must be positive"));
                }
                let center = parse_expr(e, Scope::FEATURE).map_err(|e| bad(&e.to_string()))?;
                Ok(LabelRule::Noisy { spread, center })
            }
            _ => Err(bad("unknown rule")),
        }
    }

    /// Label posterior at feature `x`.
    pub fn labels_at(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        let eval = |e: &LossExpr| {
            e.eval(&Env {
                feature: x,
                ..Env::default()
            })
            .map_err(|err| Error::LossEvalError(err.to_string()))
        };
        let step = |at: f64| if x[0] >= at { 1.0 } else { 0.0 };
        Ok(match self {
            LabelRule::Identity => vec![(x[0], 1.0)],
            LabelRule::Step { at } => vec![(step(*at), 1.0)],
            LabelRule::Flip { at, eps } => {
                let y = step(*at);
                vec![(y, 1.0 - eps), (1.0 - y, *eps)]
            }
            LabelRule::Expr(e) => vec![(eval(e)?, 1.0)],
            LabelRule::Noisy { spread, center } => {
                let c = eval(center)?;
                vec![(c - spread, 0.5), (c + spread, 0.5)]
            }
        })
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelRule::Identity => write!(f, "identity"),
            LabelRule::Step { at } => write!(f, "step:{at}"),
            LabelRule::Flip { at, eps } => write!(f, "flip:{at}:{eps}"),
            LabelRule::Expr(e) => write!(f, "expr:{e}"),
            LabelRule::Noisy { spread, center } => write!(f, "noisy:{spread}:{center}"),
        }
    }
}

/// A continuous feature density plus label rule; each level `n` is an
/// `n`-cell discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementFamily {
    pub density: Density,
    pub label_rule: LabelRule,
    pub levels: Vec<usize>,
}

/// Discretizes `family` into `n` equal cells (midpoint atoms, cell masses).
pub fn refine(family: &RefinementFamily, n: usize) -> Result<JointModel> {
    if n == 0 {
        return Err(Error::InvalidInstance("refinement level must be ≥ 1".into()));
    }
    let (lo, hi) = family.density.bounds();
    let points: Vec<Vec<f64>> = cell_midpoints(lo, hi, n).into_iter().map(|x| vec![x]).collect();
    let probs = family.density.cell_masses(n);
    let rows = points
        .iter()
        .map(|x| family.label_rule.labels_at(x))
        .collect::<Result<Vec<_>>>()?;
    JointModel::new(build_marginal(points, probs)?, ConditionalLabelDist::new(rows)?)
}
