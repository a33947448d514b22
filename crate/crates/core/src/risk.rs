//! Risk measures on finitely supported distributions.
//!
//! Every functional is evaluated on `(values, probs)` pairs. Atoms with zero
//! mass are dropped before evaluation, so reweightings that switch atoms
//! off never influence the result.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::expr::{parse_expr, Env, LossExpr, Scope};
use crate::scenario::DiscreteMarginal;

/// Nonnegative deviation penalty used by generalized mean semideviations.
#[derive(Debug, Clone, PartialEq)]
pub enum RFun {
    Abs,
    Relu,
    SquareRelu,
    /// User expression in the variable `u`; negative values are clamped to 0.
    Expr(LossExpr),
}

impl RFun {
    pub fn apply(&self, u: f64) -> Result<f64> {
        Ok(match self {
            RFun::Abs => u.abs(),
            RFun::Relu => u.max(0.0),
            RFun::SquareRelu => {
                let r = u.max(0.0);
                r * r
            }
            RFun::Expr(e) => e
                .eval(&Env {
                    deviation: u,
                    ..Env::default()
                })
                .map_err(|err| Error::LossEvalError(err.to_string()))?
                .max(0.0),
        })
    }

    fn parse(text: &str) -> Result<Self> {
        Ok(match text.trim() {
            "abs" => RFun::Abs,
            "relu" => RFun::Relu,
            "square-relu" => RFun::SquareRelu,
            other => RFun::Expr(
                parse_expr(other, Scope::DEVIATION)
                    .map_err(|e| Error::InvalidSpec(format!("deviation function: {e}")))?,
            ),
        })
    }
}

impl fmt::Display for RFun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RFun::Abs => f.write_str("abs"),
            RFun::Relu => f.write_str("relu"),
            RFun::SquareRelu => f.write_str("square-relu"),
            RFun::Expr(e) => write!(f, "{e}"),
        }
    }
}

/// One risk functional.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskSpec {
    Expectation,
    /// Conditional value-at-risk at level `alpha ∈ (0, 1]`.
    Cvar { alpha: f64 },
    /// Mean plus `c` times mean absolute deviation.
    Mad { c: f64 },
    /// Mean plus `c` times the upper semideviation of order `order`.
    Musd { c: f64, order: f64 },
    /// Mean plus `c` times `(E[R(z - E z)^order])^(1/order)`.
    Gmsd { rfun: RFun, c: f64, order: f64 },
}

impl RiskSpec {
    pub fn cvar(alpha: f64) -> Result<Self> {
        let s = RiskSpec::Cvar { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let check_c = |c: f64| {
            if c >= 0.0 && c.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("coefficient must be ≥ 0, got {c}")))
            }
        };
        let check_order = |p: f64| {
            if p >= 1.0 && p.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("order must be ≥ 1, got {p}")))
            }
        };
        match self {
            RiskSpec::Expectation => Ok(()),
            RiskSpec::Cvar { alpha } => {
                if *alpha > 0.0 && *alpha <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidAlpha(*alpha))
                }
            }
            RiskSpec::Mad { c } => check_c(*c),
            RiskSpec::Musd { c, order } | RiskSpec::Gmsd { c, order, .. } => {
                check_c(*c)?;
                check_order(*order)
            }
        }
    }

    /// Whether the parameters lie in the range where the functional is a
    /// coherent risk measure. Generalized semideviations never are.
    pub fn is_coherent(&self) -> bool {
        match *self {
            RiskSpec::Expectation | RiskSpec::Cvar { .. } => true,
            RiskSpec::Mad { c } => (0.0..=0.5).contains(&c),
            RiskSpec::Musd { c, .. } => (0.0..=1.0).contains(&c),
            RiskSpec::Gmsd { .. } => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RiskSpec::Expectation => "expectation",
            RiskSpec::Cvar { .. } => "cvar",
            RiskSpec::Mad { .. } => "mad",
            RiskSpec::Musd { .. } => "musd",
            RiskSpec::Gmsd { .. } => "gmsd",
        }
    }

    /// Evaluates the functional on atoms `values` with masses `probs`.
    ///
    /// `probs` must be nonnegative; they are expected to sum to one (the
    /// caller's responsibility, this is the hot path).
    pub fn eval_weighted(&self, values: &[f64], probs: &[f64]) -> Result<f64> {
        if values.len() != probs.len() {
            return Err(Error::AlignmentError(format!(
                "{} values for {} probabilities",
                values.len(),
                probs.len()
            )));
        }
        self.validate()?;
        let (z, p): (Vec<f64>, Vec<f64>) = values
            .iter()
            .zip(probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&z, &p)| (z, p))
            .unzip();
        if z.is_empty() {
            return Err(Error::EmptySupport);
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::AlignmentError(format!("non-finite cost {bad}")));
        }
        let mean = dot(&z, &p);
        let value = match self {
            RiskSpec::Expectation => mean,
            RiskSpec::Cvar { alpha } => cvar_variational(*alpha, &z, &p).0,
            RiskSpec::Mad { c } => {
                let dev: f64 = z.iter().zip(&p).map(|(z, p)| p * (z - mean).abs()).sum();
                mean + c * dev
            }
            RiskSpec::Musd { c, order } => {
                let dev = power_mean(z.iter().zip(&p).map(|(z, p)| (*p, (z - mean).max(0.0))), *order);
                mean + c * dev
            }
            RiskSpec::Gmsd { rfun, c, order } => {
                let r = z
                    .iter()
                    .map(|z| rfun.apply(z - mean))
                    .collect::<Result<Vec<_>>>()?;
                let dev = power_mean(p.iter().copied().zip(r), *order);
                mean + c * dev
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::InvalidSpec(format!("{self} produced a non-finite value")))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(Σ p r^q)^(1/q)` for nonnegative `r`.
fn power_mean(terms: impl Iterator<Item = (f64, f64)>, order: f64) -> f64 {
    if order == 1.0 {
        terms.map(|(p, r)| p * r).sum()
    } else {
        terms.map(|(p, r)| p * r.powf(order)).sum::<f64>().powf(1.0 / order)
    }
}

/// `min_t t + α⁻¹ Σ p (z - t)_+`, minimized exactly over the atom values.
/// Returns the value and the minimizing anchor `t`.
fn cvar_variational(alpha: f64, z: &[f64], p: &[f64]) -> (f64, f64) {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal));
    // Walk candidates from the largest atom down; the hinge sum grows by the
    // mass above times the step.
    let mut best = (f64::INFINITY, z[order[0]]);
    let mut hinge = 0.0;
    let mut mass_above = 0.0;
    let mut prev = z[order[0]];
    for &j in &order {
        let t = z[j];
        hinge += mass_above * (prev - t);
        let v = t + hinge / alpha;
        if v < best.0 {
            best = (v, t);
        }
        mass_above += p[j];
        prev = t;
    }
    best
}

/// An optimal variational anchor of CVaR(α) on the positive-mass atoms.
pub fn cvar_anchor(alpha: f64, values: &[f64], probs: &[f64]) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let (z, p): (Vec<f64>, Vec<f64>) = values
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&z, &p)| (z, p))
        .unzip();
    if z.is_empty() {
        return Err(Error::EmptySupport);
    }
    Ok(cvar_variational(alpha, &z, &p).1)
}

/// A cost aligned with the scenarios of a marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCost(Vec<f64>);

impl RandomCost {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::AlignmentError(format!("non-finite cost {bad}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn check_aligned(z: &RandomCost, m: &DiscreteMarginal) -> Result<()> {
    if z.0.len() != m.len() {
        return Err(Error::AlignmentError(format!(
            "cost has {} entries, marginal has {} scenarios",
            z.0.len(),
            m.len()
        )));
    }
    Ok(())
}

/// `spec(z)` under the marginal `m`.
pub fn evaluate(spec: &RiskSpec, z: &RandomCost, m: &DiscreteMarginal) -> Result<f64> {
    check_aligned(z, m)?;
    spec.eval_weighted(&z.0, m.probs())
}

/// A density in the CVaR risk envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeElement(Vec<f64>);

impl EnvelopeElement {
    pub fn zeta(&self) -> &[f64] {
        &self.0
    }
}

/// Dual evaluation of CVaR: the greedy maximizer of `Σ p ζ z` over
/// `0 ≤ ζ ≤ 1/α`, `Σ p ζ = 1`.
pub fn cvar_envelope(alpha: f64, z: &RandomCost, m: &DiscreteMarginal) -> Result<(f64, EnvelopeElement)> {
    check_aligned(z, m)?;
    let (value, zeta) = cvar_envelope_weighted(alpha, &z.0, m.probs())?;
    Ok((value, EnvelopeElement(zeta)))
}

/// Greedy envelope on raw atoms. Ties in `z` go to the lower index first.
pub fn cvar_envelope_weighted(alpha: f64, z: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if z.len() != p.len() {
        return Err(Error::AlignmentError(format!(
            "{} values for {} probabilities",
            z.len(),
            p.len()
        )));
    }
    let cap = 1.0 / alpha;
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut zeta = vec![0.0; z.len()];
    let mut cum = 0.0;
    for &j in &order {
        if p[j] <= 0.0 {
            continue;
        }
        if cum + p[j] <= alpha {
            zeta[j] = cap;
            cum += p[j];
        } else {
            zeta[j] = ((alpha - cum) / (alpha * p[j])).clamp(0.0, cap);
            break;
        }
    }
    let value = z.iter().zip(p).zip(&zeta).map(|((z, p), w)| p * w * z).sum();
    Ok((value, zeta))
}

/// Worst observed violations of the risk-measure axioms.
#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub spec: String,
    pub trials: usize,
    pub coherent: bool,
    pub convexity: f64,
    pub homogeneity: f64,
    /// Only checked for coherent specs.
    pub monotonicity: Option<f64>,
    /// Only checked for coherent specs.
    pub translation: Option<f64>,
}

impl AxiomReport {
    pub fn max_violation(&self) -> f64 {
        [
            self.convexity,
            self.homogeneity,
            self.monotonicity.unwrap_or(0.0),
            self.translation.unwrap_or(0.0),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Randomized sweep over convexity, positive homogeneity and, for coherent
/// specs, monotonicity and translation equivariance.
pub fn axiom_report(spec: &RiskSpec, trials: usize, seed: u64) -> Result<AxiomReport> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let coherent = spec.is_coherent();
    let mut report = AxiomReport {
        spec: spec.to_string(),
        trials,
        coherent,
        convexity: 0.0,
        homogeneity: 0.0,
        monotonicity: coherent.then_some(0.0),
        translation: coherent.then_some(0.0),
    };
    for _ in 0..trials {
        let n = rng.random_range(1..=64);
        let p = random_probs(&mut rng, n);
        let z = random_cost(&mut rng, n);
        let z2 = random_cost(&mut rng, n);
        let theta: f64 = rng.random();
        let a: f64 = rng.random_range(0.01..10.0);
        let b: f64 = rng.random_range(-10.0..10.0);

        let r = spec.eval_weighted(&z, &p)?;
        let r2 = spec.eval_weighted(&z2, &p)?;
        let mix: Vec<f64> = z.iter().zip(&z2).map(|(u, v)| theta * u + (1.0 - theta) * v).collect();
        let rmix = spec.eval_weighted(&mix, &p)?;
        report.convexity = report.convexity.max(rmix - theta * r - (1.0 - theta) * r2);

        let scaled: Vec<f64> = z.iter().map(|v| a * v).collect();
        report.homogeneity = report
            .homogeneity
            .max((spec.eval_weighted(&scaled, &p)? - a * r).abs());

        if coherent {
            let bumped: Vec<f64> = z
                .iter()
                .map(|v| if rng.random_bool(0.5) { v + rng.random_range(0.0..3.0) } else { *v })
                .collect();
            let rb = spec.eval_weighted(&bumped, &p)?;
            let m = report.monotonicity.as_mut().expect("coherent");
            *m = m.max(r - rb);

            let shifted: Vec<f64> = z.iter().map(|v| v + b).collect();
            let rs = spec.eval_weighted(&shifted, &p)?;
            let t = report.translation.as_mut().expect("coherent");
            *t = t.max((rs - r - b).abs());
        }
    }
    Ok(report)
}

fn random_probs(rng: &mut StdRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_cost(rng: &mut StdRng, n: usize) -> Vec<f64> {
    // Quarter-grid values produce ties, which matter for CVaR.
    if rng.random_bool(0.3) {
        (0..n).map(|_| rng.random_range(-8..=8) as f64 * 0.25).collect()
    } else {
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }
}

impl fmt::Display for RiskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskSpec::Expectation => f.write_str("expectation"),
            RiskSpec::Cvar { alpha } => write!(f, "cvar:{alpha}"),
            RiskSpec::Mad { c } => write!(f, "mad:{c}"),
            RiskSpec::Musd { c, order } => write!(f, "musd:{c}:{order}"),
            RiskSpec::Gmsd { rfun, c, order } => write!(f, "gmsd:{rfun}:{c}:{order}"),
        }
    }
}

impl FromStr for RiskSpec {
    type Err = Error;

    /// Parses `expectation`, `cvar:A`, `mad:C`, `musd:C:P` or `gmsd:R:C:P`.
    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = || Error::InvalidSpec(format!("cannot parse risk spec `{text}`"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let (kind, rest) = match text.split_once(':') {
            Some((k, r)) => (k.trim(), r),
            None => (text, ""),
        };
        let spec = match kind {
            "expectation" if rest.is_empty() => RiskSpec::Expectation,
            "cvar" => RiskSpec::Cvar { alpha: num(rest)? },
            "mad" => RiskSpec::Mad { c: num(rest)? },
            "musd" => {
                let (c, p) = rest.split_once(':').ok_or_else(bad)?;
                RiskSpec::Musd {
                    c: num(c)?,
                    order: num(p)?,
                }
            }
            "gmsd" => {
                let (head, p) = rest.rsplit_once(':').ok_or_else(bad)?;
                let (r, c) = head.rsplit_once(':').ok_or_else(bad)?;
                RiskSpec::Gmsd {
                    rfun: RFun::parse(r)?,
                    c: num(c)?,
                    order: num(p)?,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> DiscreteMarginal {
        DiscreteMarginal::uniform(n).unwrap()
    }

    fn eval(spec: &str, z: &[f64]) -> f64 {
        let spec: RiskSpec = spec.parse().unwrap();
        evaluate(&spec, &RandomCost::new(z.to_vec()).unwrap(), &uniform(z.len())).unwrap()
    }

    /// Grid oracle for the CVaR variational formula.
    fn cvar_grid(alpha: f64, z: &[f64]) -> f64 {
        let p = 1.0 / z.len() as f64;
        (0..=40_000)
            .map(|k| {
                let t = k as f64 * 1e-4;
                t + z.iter().map(|v| p * (v - t).max(0.0)).sum::<f64>() / alpha
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn evaluate_examples() {
        let z = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(eval("cvar:1", &z), 2.5);
        let oracle = cvar_grid(0.5, &z);
        assert!((oracle - 3.5).abs() < 1e-12);
        assert!((eval("cvar:0.5", &z) - oracle).abs() < 1e-12);
        assert!((eval("mad:0.5", &[0.0, 2.0]) - 1.5).abs() < 1e-15);
        assert!((eval("musd:1:1", &[0.0, 2.0]) - 1.5).abs() < 1e-15);
        assert_eq!(eval("mad:0", &[0.3, -7.0, 2.0]), eval("expectation", &[0.3, -7.0, 2.0]));
    }

    #[test]
    fn envelope_examples() {
        let m = uniform(4);
        let z = RandomCost::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (v, zeta) = cvar_envelope(0.5, &z, &m).unwrap();
        assert_eq!(v, 3.5);
        assert_eq!(zeta.zeta(), &[0.0, 0.0, 2.0, 2.0]);
        let (v, zeta) = cvar_envelope(1.0, &z, &m).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(zeta.zeta(), &[1.0; 4]);
        let (v, zeta) = cvar_envelope(0.25, &z, &m).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(zeta.zeta(), &[0.0, 0.0, 0.0, 4.0]);
        assert_eq!(cvar_envelope(0.0, &z, &m), Err(Error::InvalidAlpha(0.0)));
        assert_eq!(cvar_envelope(1.5, &z, &m), Err(Error::InvalidAlpha(1.5)));
    }

    #[test]
    fn envelope_ties_prefer_lower_index() {
        let (v, zeta) = cvar_envelope_weighted(0.25, &[3.0, 3.0, 1.0], &[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(zeta, vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn spec_text_round_trip() {
        for text in [
            "expectation",
            "cvar:0.1",
            "mad:0.5",
            "musd:1:1",
            "musd:0.5:2",
            "gmsd:abs:0.5:1",
            "gmsd:square-relu:1:1",
            "gmsd:min(abs(u), 1):0.5:2",
        ] {
            let spec: RiskSpec = text.parse().unwrap();
            assert_eq!(spec.to_string().parse::<RiskSpec>().unwrap(), spec, "{text}");
        }
        assert_eq!("musd:1.0:1".parse::<RiskSpec>().unwrap(), RiskSpec::Musd { c: 1.0, order: 1.0 });
        assert!(matches!("cvar:0".parse::<RiskSpec>(), Err(Error::InvalidAlpha(_))));
        assert!(matches!("mad:-1".parse::<RiskSpec>(), Err(Error::InvalidSpec(_))));
        assert!(matches!("musd:1:0.5".parse::<RiskSpec>(), Err(Error::InvalidSpec(_))));
        assert!("var:0.1".parse::<RiskSpec>().is_err());
        assert!("expectation:1".parse::<RiskSpec>().is_err());
    }

    #[test]
    fn coherence_flags() {
        assert!("mad:0.5".parse::<RiskSpec>().unwrap().is_coherent());
        assert!(!"mad:0.6".parse::<RiskSpec>().unwrap().is_coherent());
        assert!("musd:1:2".parse::<RiskSpec>().unwrap().is_coherent());
        assert!(!"musd:1.5:2".parse::<RiskSpec>().unwrap().is_coherent());
        assert!(!"gmsd:abs:0.1:1".parse::<RiskSpec>().unwrap().is_coherent());
    }

    #[test]
    fn axiom_examples() {
        let r = axiom_report(&RiskSpec::cvar(0.3).unwrap(), 1000, 7).unwrap();
        assert!(r.max_violation() <= 1e-9, "{r:?}");
        let r = axiom_report(&RiskSpec::Expectation, 200, 1).unwrap();
        assert!(r.homogeneity <= 1e-12);
        let r = axiom_report(&"gmsd:square-relu:1:1".parse().unwrap(), 500, 3).unwrap();
        assert!(!r.coherent);
        assert!(r.monotonicity.is_none() && r.translation.is_none());
        assert!(r.homogeneity > 1e-3, "squared deviations are not homogeneous");
        let r = axiom_report(&"gmsd:min(abs(u), 1):1:1".parse().unwrap(), 500, 3).unwrap();
        assert!(r.convexity > 1e-6, "capped deviation is not convex: {r:?}");
    }

    #[test]
    fn small_alpha_returns_max() {
        let z = [0.5, -1.0, 3.25, 3.0];
        assert!((eval("cvar:0.2", &z) - 3.25).abs() < 1e-10);
    }

    #[test]
    fn zero_mass_atoms_are_ignored() {
        let spec: RiskSpec = "cvar:0.5".parse().unwrap();
        let a = spec.eval_weighted(&[1.0, 100.0, 3.0], &[0.5, 0.0, 0.5]).unwrap();
        let b = spec.eval_weighted(&[1.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alignment_checked() {
        let spec = RiskSpec::Expectation;
        assert!(matches!(
            evaluate(&spec, &RandomCost::new(vec![1.0]).unwrap(), &uniform(2)),
            Err(Error::AlignmentError(_))
        ));
        assert!(RandomCost::new(vec![f64::NAN]).is_err());
    }
}
