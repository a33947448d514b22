//! Pointwise losses `ℓ(action, label) ≥ 0`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::expr::{parse_loss_expr, Env, LossExpr};

/// A loss from the built-in registry or a user expression over `z1..zk, y`.
///
/// Registry losses read the first action component only.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `1{(a ≥ t) ≠ (y ≥ t)}`.
    ZeroOne { threshold: f64 },
    AbsDev,
    Quad,
    /// `min((a - y)², cap)`.
    TruncatedQuad { cap: f64 },
    /// `max(0, 1 - a y)`.
    Hinge,
    /// `(a - y)² + amplitude · sin²(frequency · (a - y))`.
    SinPerturbedQuad { amplitude: f64, frequency: f64 },
    Expr(LossExpr),
}

/// A loss value and whether it had to be clamped up to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub clamped: bool,
}

impl LossSpec {
    pub fn eval(&self, action: &[f64], y: f64) -> Result<LossValue> {
        let a = *action
            .first()
            .ok_or_else(|| Error::LossEvalError("empty action vector".into()))?;
        let d = a - y;
        let value = match *self {
            LossSpec::ZeroOne { threshold } => {
                if (a >= threshold) != (y >= threshold) {
                    1.0
                } else {
                    0.0
                }
            }
            LossSpec::AbsDev => d.abs(),
            LossSpec::Quad => d * d,
            LossSpec::TruncatedQuad { cap } => (d * d).min(cap),
            LossSpec::Hinge => (1.0 - a * y).max(0.0),
            LossSpec::SinPerturbedQuad {
                amplitude,
                frequency,
            } => {
                let s = (frequency * d).sin();
                d * d + amplitude * s * s
            }
            LossSpec::Expr(ref e) => {
                let v = e
                    .eval(&Env {
                        action,
                        label: y,
                        ..Env::default()
                    })
                    .map_err(|err| Error::LossEvalError(err.to_string()))?;
                return Ok(if v < 0.0 {
                    LossValue {
                        value: 0.0,
                        clamped: true,
                    }
                } else {
                    LossValue {
                        value: v,
                        clamped: false,
                    }
                });
            }
        };
        if !value.is_finite() {
            return Err(Error::LossEvalError(format!(
                "{self} is not finite at a={a}, y={y}"
            )));
        }
        Ok(LossValue {
            value,
            clamped: false,
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LossSpec::ZeroOne { threshold } => threshold.is_finite(),
            LossSpec::TruncatedQuad { cap } => cap >= 0.0 && cap.is_finite(),
            LossSpec::SinPerturbedQuad {
                amplitude,
                frequency,
            } => amplitude >= 0.0 && amplitude.is_finite() && frequency.is_finite(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("loss `{self}` has invalid parameters")))
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::ZeroOne { threshold } => write!(f, "zero-one:{threshold}"),
            LossSpec::AbsDev => f.write_str("abs-dev"),
            LossSpec::Quad => f.write_str("quad"),
            LossSpec::TruncatedQuad { cap } => write!(f, "truncated-quad:{cap}"),
            LossSpec::Hinge => f.write_str("hinge"),
            LossSpec::SinPerturbedQuad {
                amplitude,
                frequency,
            } => write!(f, "sin-perturbed-quad:{amplitude}:{frequency}"),
            LossSpec::Expr(e) => write!(f, "expr:{e}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// Registry names with `:`-separated parameters, or `expr:<expression>`.
    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = || Error::InvalidSpec(format!("cannot parse loss `{text}`"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let (head, rest) = match text.split_once(':') {
            Some((h, r)) => (h.trim(), Some(r)),
            None => (text, None),
        };
        let spec = match (head, rest) {
            ("zero-one", Some(r)) => LossSpec::ZeroOne { threshold: num(r)? },
            ("zero-one", None) => LossSpec::ZeroOne { threshold: 0.5 },
            ("abs-dev", None) => LossSpec::AbsDev,
            ("quad", None) => LossSpec::Quad,
            ("truncated-quad", Some(r)) => LossSpec::TruncatedQuad { cap: num(r)? },
            ("hinge", None) => LossSpec::Hinge,
            ("sin-perturbed-quad", Some(r)) => {
                let (a, w) = r.split_once(':').ok_or_else(bad)?;
                LossSpec::SinPerturbedQuad {
                    amplitude: num(a)?,
                    frequency: num(w)?,
                }
            }
            ("expr", Some(r)) => LossSpec::Expr(
                parse_loss_expr(r).map_err(|e| Error::InvalidSpec(format!("loss expression: {e}")))?,
            ),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}
