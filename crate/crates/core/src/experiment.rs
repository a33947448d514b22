//! Solve, oracle and refinement-sweep runs over a parsed config, with CSV
//! rendering. Writing files is left to the caller.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::ConfigDocument;
use crate::csv::{cell, fmt_g17};
use crate::dual::{bisect_dual_m1, dual_ascent, AscentParams, DualReport};
use crate::error::{Error, Result};
use crate::oracle::{brute_primal, grid_dual, mixed_primal_m1, MixedSolution, PrimalResult};
use crate::problem::{check_slater, lower, RCL0Tables, SlaterReport};
use crate::risk::RiskSpec;

/// Command-line overrides of the config's solver settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub step0: Option<f64>,
    pub iters: Option<usize>,
    pub anchor_cap: Option<u64>,
    /// Refinement level for a density base.
    pub level: Option<usize>,
}

impl Overrides {
    pub fn ascent(&self, doc: &ConfigDocument) -> AscentParams {
        let mut p = doc.solver.ascent();
        p.seed = self.seed.unwrap_or(p.seed);
        p.step0 = self.step0.unwrap_or(p.step0);
        p.iters = self.iters.unwrap_or(p.iters);
        p.anchor_cap = self.anchor_cap.unwrap_or(p.anchor_cap);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub m: usize,
    pub report: DualReport,
    pub slater: SlaterReport,
    pub warnings: Vec<String>,
}

impl SolveOutcome {
    pub fn summary(&self) -> String {
        format!(
            "Dstar={} Phat={} gap={} slater={}",
            fmt_g17(self.report.dstar),
            opt(self.report.phat()),
            opt(self.report.gap()),
            self.slater.found
        )
    }

    /// Exit status: 2 when the ascent diverged on an infeasible instance.
    pub fn exit_code(&self) -> i32 {
        if self.report.diverged {
            2
        } else {
            0
        }
    }

    /// `iter, lambda_1..m, q, best_feasible, gap`.
    pub fn dual_csv(&self) -> String {
        let mut out = String::from("iter");
        for i in 1..=self.m {
            let _ = write!(out, ",lambda_{i}");
        }
        out.push_str(",q,best_feasible,gap\n");
        for s in &self.report.trajectory {
            let _ = write!(out, "{}", s.iter);
            for l in &s.lambda {
                let _ = write!(out, ",{}", fmt_g17(*l));
            }
            let _ = writeln!(out, ",{},{},{}", fmt_g17(s.q), cell(s.best_feasible), cell(s.gap));
        }
        out
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_g17).unwrap_or_else(|| "none".into())
}

pub fn run_solve(doc: &ConfigDocument, ov: &Overrides) -> Result<SolveOutcome> {
    let t = lower(&doc.instance_at(ov.level)?)?;
    let mut warnings = t.warnings().to_vec();
    let slater = check_slater(&t, doc.solver.slater_margin)?;
    if !slater.found {
        warnings.push(format!(
            "no policy satisfies every constraint with margin {}; best slack {:?}",
            doc.solver.slater_margin, slater.slack
        ));
    }
    let report = dual_ascent(&t, &ov.ascent(doc))?;
    if report.diverged {
        warnings.push("dual ascent diverged: no feasible policy and multipliers keep growing".into());
    }
    if !report.exact {
        warnings.push("anchor enumeration exceeded the cap; dual values are from coordinate descent".into());
    }
    Ok(SolveOutcome {
        m: t.m(),
        report,
        slater,
        warnings,
    })
}

/// Where a row's primal value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimalSource {
    BruteForce,
    /// Deterministic rounding of the randomized optimum (an upper bound).
    Rounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub pstar: Option<f64>,
    pub pstar_source: Option<PrimalSource>,
    pub dstar: Option<f64>,
    pub mixed: Option<f64>,
    pub rel_gap: Option<f64>,
    pub notes: Vec<String>,
}

/// `(P - D) / |P|`, or `P - D` when `P = 0`.
pub fn rel_gap(pstar: f64, dstar: f64) -> f64 {
    let gap = pstar - dstar;
    if pstar == 0.0 {
        gap
    } else {
        gap / pstar.abs()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepOptions {
    pub dual_only: bool,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    pub overrides: Overrides,
}

fn solver_outer(t: &RCL0Tables) -> bool {
    t.outer()
        .iter()
        .all(|s| matches!(s, RiskSpec::Expectation | RiskSpec::Cvar { .. }))
}

fn mixed_applicable(t: &RCL0Tables) -> bool {
    t.m() == 1 && t.outer().iter().all(|s| *s == RiskSpec::Expectation)
}

/// Dual optimum: exact line search for one constraint, the λ grid for two,
/// ascent otherwise.
fn dual_value(t: &RCL0Tables, doc: &ConfigDocument, ov: &Overrides, notes: &mut Vec<String>) -> Result<Option<f64>> {
    if !solver_outer(t) {
        notes.push("outer risk not supported by the dual solver".into());
        return Ok(None);
    }
    let d = match t.m() {
        1 => match bisect_dual_m1(t, 1e-10) {
            Ok((d, _)) => d,
            Err(Error::DualUnbounded) => f64::INFINITY,
            Err(e) => return Err(e),
        },
        2 => grid_dual(t, &doc.oracle)?,
        _ => dual_ascent(t, &ov.ascent(doc))?.dstar,
    };
    Ok(Some(d))
}

pub fn sweep_level(doc: &ConfigDocument, n: usize, opts: &SweepOptions) -> Result<SweepRow> {
    let t = lower(&doc.instance_at(Some(n))?)?;
    let mut notes = Vec::new();
    let dstar = dual_value(&t, doc, &opts.overrides, &mut notes)?;
    let mixed: Option<MixedSolution> = if mixed_applicable(&t) {
        match mixed_primal_m1(&t) {
            Ok(s) => Some(s),
            Err(Error::DualUnbounded) => {
                notes.push("randomized problem infeasible".into());
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let (mut pstar, mut source) = (None, None);
    if !opts.dual_only {
        match brute_primal(&t, &doc.oracle) {
            Ok(PrimalResult::Optimal { value, .. }) => {
                pstar = Some(value);
                source = Some(PrimalSource::BruteForce);
            }
            Ok(PrimalResult::Infeasible) => notes.push("infeasible".into()),
            Err(Error::BudgetExceeded { needed, budget }) => {
                if let Some(s) = &mixed {
                    pstar = Some(s.rounded_value);
                    source = Some(PrimalSource::Rounded);
                } else {
                    notes.push(format!("{needed} policies exceed the budget of {budget}"));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let rel = match (pstar, dstar) {
        (Some(p), Some(d)) if d.is_finite() => Some(rel_gap(p, d)),
        _ => None,
    };
    Ok(SweepRow {
        n,
        pstar,
        pstar_source: source,
        dstar,
        mixed: mixed.map(|s| s.value),
        rel_gap: rel,
        notes,
    })
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidInstance(format!("cannot start {j} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// One row per level, in the given order.
pub fn run_sweep(doc: &ConfigDocument, levels: &[usize], opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    if !doc.is_family() {
        return Err(Error::NotSupported("sweeps need a density base".into()));
    }
    with_jobs(opts.jobs, || {
        levels
            .par_iter()
            .map(|&n| sweep_level(doc, n, opts))
            .collect::<Result<Vec<_>>>()
    })?
}

/// `n, Pstar, Dstar, mixed, rel_gap`; missing values are empty cells.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n,Pstar,Dstar,mixed,rel_gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.n,
            cell(r.pstar),
            cell(r.dstar),
            cell(r.mixed),
            cell(r.rel_gap)
        );
    }
    out
}

/// Oracle references for the config's own instance.
pub fn run_oracle(doc: &ConfigDocument, opts: &SweepOptions) -> Result<SweepRow> {
    let n = doc.instance_at(opts.overrides.level)?.base.len();
    with_jobs(opts.jobs, || sweep_level(doc, n, opts))?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    #[test]
    fn t1_solve_summary() {
        let doc = ConfigDocument::parse(bundled::T1).unwrap();
        let out = run_solve(&doc, &Overrides::default()).unwrap();
        assert!((out.report.dstar - 0.25).abs() < 1e-3);
        assert_eq!(out.report.phat(), Some(0.5));
        assert!(out.slater.found);
        assert_eq!(out.exit_code(), 0);
        assert!(out.summary().starts_with("Dstar=0.2"), "{}", out.summary());
        let csv = out.dual_csv();
        assert!(csv.starts_with("iter,lambda_1,q,best_feasible,gap\n0,0,0,"));
        assert_eq!(csv.lines().count(), 501);
    }

    #[test]
    fn infeasible_solve_exits_2() {
        let text = bundled::T1.replace("c1 = 0.25", "c1 = -0.5");
        let doc = ConfigDocument::parse(&text).unwrap();
        let out = run_solve(&doc, &Overrides::default()).unwrap();
        assert_eq!(out.exit_code(), 2);
        assert!(!out.slater.found);
    }

    #[test]
    fn lyapunov_first_level() {
        let doc = ConfigDocument::parse(bundled::LYAPUNOV_FAMILY).unwrap();
        let row = sweep_level(&doc, 2, &SweepOptions::default()).unwrap();
        assert_eq!(row.pstar, Some(0.5));
        assert!((row.dstar.unwrap() - 0.25).abs() < 1e-12);
        assert!((row.mixed.unwrap() - 0.25).abs() < 1e-12);
        assert!((row.rel_gap.unwrap() - 0.5).abs() < 1e-12);
        let csv = sweep_csv(&[row]);
        assert!(csv.starts_with("n,Pstar,Dstar,mixed,rel_gap\n2,0.5,"));
    }

    #[test]
    fn rel_gap_denominator() {
        assert_eq!(rel_gap(0.5, 0.25), 0.5);
        assert_eq!(rel_gap(0.0, -0.1), 0.1);
        assert_eq!(rel_gap(-2.0, -3.0), 0.5);
    }
}
