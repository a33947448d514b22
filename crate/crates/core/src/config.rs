//! INI-like instance files: `[section]` headers and `key = value` lines.
//!
//! ```text
//! [base]            density = uniform | truncgauss, lo, hi, mu, sigma, n,
//!                   levels, label   (or points, probs, label | labels)
//! [joint.i]         same keys as [base] minus n/levels; defaults to the base
//! [loss.i]          name = <registry loss> | expr = <expression>
//! [inner.i]         spec = <risk spec>    (default expectation)
//! [outer.i]         spec = <risk spec>    (default expectation)
//! [thresholds]      c1 = .., c2 = ..
//! [grid]            actions = a, b, .. | linspace = lo, hi, count | vectors = 0 1; 1 0
//! [solver]          step0, iters, seed, anchor_cap, slater_margin
//! [oracle]          max_policies, lambda_lo, lambda_hi, lambda_step, max_grid_evals
//! ```
//!
//! Explicit label tables list `label:prob` pairs per scenario, scenarios
//! separated by `|`. Lines starting with `#` or `;` are comments, as is
//! anything after a whitespace-preceded `#`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::condrisk::ActionGrid;
use crate::dual::{AscentParams, ANCHOR_CAP};
use crate::error::Error as CoreError;
use crate::expr::ExprError;
use crate::loss::LossSpec;
use crate::oracle::OracleBudget;
use crate::problem::RCLInstance;
use crate::risk::RiskSpec;
use crate::scenario::{
    build_marginal, refine, ConditionalLabelDist, Density, DensityParams, DiscreteMarginal, JointModel,
    LabelRule, RefinementFamily,
};

/// A config problem with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}, column {col}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl ConfigError {
    fn at(pos: Pos, message: impl Into<String>) -> Self {
        Self {
            line: pos.line,
            col: pos.col,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Pos {
    line: usize,
    col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Rule(LabelRule),
    /// Per-scenario `(label, prob)` lists.
    Table(Vec<Vec<(f64, f64)>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseSpec {
    Family {
        density: Density,
        label: LabelRule,
        /// Level used by `solve` and `oracle`.
        n: usize,
        levels: Vec<usize>,
    },
    Explicit {
        points: Vec<f64>,
        probs: Vec<f64>,
        labels: Labels,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum JointSpec {
    /// Discretized on the same cell grid as the base; labels default to the
    /// base rule.
    Family { density: Density, label: Option<LabelRule> },
    Explicit {
        points: Vec<f64>,
        probs: Vec<f64>,
        labels: Option<Labels>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Actions(Vec<f64>),
    Linspace { lo: f64, hi: f64, count: usize },
    Vectors(Vec<Vec<f64>>),
}

impl GridSpec {
    pub fn build(&self) -> Result<ActionGrid, CoreError> {
        match self {
            GridSpec::Actions(a) => ActionGrid::scalar(a),
            GridSpec::Linspace { lo, hi, count } => ActionGrid::linspace(*lo, *hi, *count),
            GridSpec::Vectors(v) => ActionGrid::new(v.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub step0: f64,
    pub iters: usize,
    pub seed: u64,
    pub anchor_cap: u64,
    pub slater_margin: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let a = AscentParams::default();
        Self {
            step0: a.step0,
            iters: a.iters,
            seed: a.seed,
            anchor_cap: ANCHOR_CAP,
            slater_margin: 1e-6,
        }
    }
}

impl SolverSettings {
    pub fn ascent(&self) -> AscentParams {
        AscentParams {
            step0: self.step0,
            iters: self.iters,
            seed: self.seed,
            anchor_cap: self.anchor_cap,
        }
    }
}

/// A parsed instance file. Index `i` of `losses`, `inner` and `outer` is
/// term `i` (0 is the objective).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    pub base: BaseSpec,
    pub joints: BTreeMap<usize, JointSpec>,
    pub losses: Vec<LossSpec>,
    pub inner: Vec<RiskSpec>,
    pub outer: Vec<RiskSpec>,
    pub thresholds: Vec<f64>,
    pub grid: GridSpec,
    pub solver: SolverSettings,
    pub oracle: OracleBudget,
}

// ---------------------------------------------------------------------------
// Line layer

struct Entry {
    key: String,
    value: String,
    key_pos: Pos,
    value_pos: Pos,
    used: bool,
}

struct Section {
    name: String,
    pos: Pos,
    entries: Vec<Entry>,
}

fn split_lines(text: &str) -> Result<(Vec<Section>, Pos), ConfigError> {
    let mut sections: Vec<Section> = Vec::new();
    let mut seen: HashMap<String, Pos> = HashMap::new();
    let mut last = 0;
    for (idx, raw) in text.lines().enumerate() {
        let raw = strip_inline_comment(raw);
        let line = idx + 1;
        last = line;
        let indent = raw.len() - raw.trim_start().len();
        let col0 = raw[..indent].chars().count() + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') || body.starts_with(';') {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let pos = Pos { line, col: col0 };
            let Some(name) = rest.strip_suffix(']') else {
                let col = col0 + body.chars().count();
                return Err(ConfigError::at(Pos { line, col }, "expected `]` to close the section header"));
            };
            let name = name.trim().to_string();
            if !valid_section(&name) {
                return Err(ConfigError::at(pos, format!("unknown section [{name}]")));
            }
            if let Some(first) = seen.get(&name) {
                return Err(ConfigError::at(
                    pos,
                    format!("section [{name}] already defined on line {}", first.line),
                ));
            }
            seen.insert(name.clone(), pos);
            sections.push(Section {
                name,
                pos,
                entries: Vec::new(),
            });
            continue;
        }
        let key_pos = Pos { line, col: col0 };
        let Some((key, _)) = body.split_once('=') else {
            return Err(ConfigError::at(key_pos, "expected `key = value` or a `[section]` header"));
        };
        let Some(section) = sections.last_mut() else {
            return Err(ConfigError::at(key_pos, "key outside of any section"));
        };
        let key = key.trim().to_string();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(ConfigError::at(key_pos, format!("invalid key `{key}`")));
        }
        if section.entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::at(key_pos, format!("duplicate key `{key}` in [{}]", section.name)));
        }
        let eq = body.find('=').expect("split found `=`");
        let after = &body[eq + 1..];
        let lead = after.len() - after.trim_start().len();
        let value_col = col0 + body[..eq + 1 + lead].chars().count();
        section.entries.push(Entry {
            key,
            value: after.trim().to_string(),
            key_pos,
            value_pos: Pos { line, col: value_col },
            used: false,
        });
    }
    Ok((sections, Pos { line: last + 1, col: 1 }))
}

/// Drops a trailing `# ...` that follows whitespace; no value contains `#`.
fn strip_inline_comment(raw: &str) -> &str {
    let bytes = raw.as_bytes();
    match (1..bytes.len()).find(|&k| bytes[k] == b'#' && bytes[k - 1].is_ascii_whitespace()) {
        Some(k) => &raw[..k],
        None => raw,
    }
}

fn valid_section(name: &str) -> bool {
    if matches!(name, "base" | "thresholds" | "grid" | "solver" | "oracle") {
        return true;
    }
    match name.split_once('.') {
        Some((head, idx)) => {
            matches!(head, "joint" | "loss" | "inner" | "outer")
                && !idx.is_empty()
                && idx.chars().all(|c| c.is_ascii_digit())
                && (idx == "0" || !idx.starts_with('0'))
        }
        None => false,
    }
}

// ---------------------------------------------------------------------------
// Typed layer

struct Reader<'a> {
    section: &'a mut Section,
}

impl Reader<'_> {
    fn take(&mut self, key: &str) -> Option<(&str, Pos)> {
        let e = self.section.entries.iter_mut().find(|e| e.key == key)?;
        e.used = true;
        Some((e.value.as_str(), e.value_pos))
    }

    fn has(&self, key: &str) -> bool {
        self.section.entries.iter().any(|e| e.key == key)
    }

    fn require(&mut self, key: &str) -> Result<(&str, Pos), ConfigError> {
        let pos = self.section.pos;
        let name = self.section.name.clone();
        self.take(key)
            .ok_or_else(|| ConfigError::at(pos, format!("[{name}] is missing `{key}`")))
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((v, pos)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| ConfigError::at(pos, format!("`{key}`: cannot parse `{v}` as a number"))),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(e) = self.section.entries.iter().find(|e| !e.used) {
            return Err(ConfigError::at(
                e.key_pos,
                format!("unknown key `{}` in [{}]", e.key, self.section.name),
            ));
        }
        Ok(())
    }
}

fn float_list(value: &str, pos: Pos, what: &str) -> Result<Vec<f64>, ConfigError> {
    let mut out = Vec::new();
    let mut col = pos.col;
    for item in value.split(',') {
        let lead = item.len() - item.trim_start().len();
        let here = Pos {
            line: pos.line,
            col: col + item[..lead].chars().count(),
        };
        let v: f64 = item
            .trim()
            .parse()
            .map_err(|_| ConfigError::at(here, format!("{what}: expected a number, found `{}`", item.trim())))?;
        if !v.is_finite() {
            return Err(ConfigError::at(here, format!("{what}: value must be finite")));
        }
        out.push(v);
        col += item.chars().count() + 1;
    }
    Ok(out)
}

fn usize_list(value: &str, pos: Pos, what: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| ConfigError::at(pos, format!("{what}: expected positive integers, found `{}`", s.trim())))
        })
        .collect()
}

fn label_table(value: &str, pos: Pos) -> Result<Vec<Vec<(f64, f64)>>, ConfigError> {
    value
        .split('|')
        .map(|scenario| {
            scenario
                .split(',')
                .map(|pair| {
                    let bad = || ConfigError::at(pos, format!("labels: expected `label:prob`, found `{}`", pair.trim()));
                    let (y, p) = pair.split_once(':').ok_or_else(bad)?;
                    let y: f64 = y.trim().parse().map_err(|_| bad())?;
                    let p: f64 = p.trim().parse().map_err(|_| bad())?;
                    Ok((y, p))
                })
                .collect()
        })
        .collect()
}

/// Shifts a position reported inside a value by the value's own column.
fn inner_pos(base: Pos, prefix: usize, err: &ExprError) -> Option<Pos> {
    match *err {
        ExprError::Syntax { line, col, .. }
        | ExprError::UnknownIdentifier { line, col, .. }
        | ExprError::Arity { line, col, .. } => Some(if line == 1 {
            Pos {
                line: base.line,
                col: base.col + prefix + col - 1,
            }
        } else {
            Pos {
                line: base.line + line - 1,
                col,
            }
        }),
        ExprError::Eval(_) => None,
    }
}

fn core_at(pos: Pos, what: &str, e: CoreError) -> ConfigError {
    ConfigError::at(pos, format!("{what}: {e}"))
}

fn parse_density(r: &mut Reader<'_>, default_box: Option<(f64, f64)>) -> Result<Option<Density>, ConfigError> {
    let Some((name, pos)) = r.take("density") else {
        return Ok(None);
    };
    let name = name.to_string();
    let mut params = DensityParams::default();
    if let Some((lo, hi)) = default_box {
        params.lo = lo;
        params.hi = hi;
    }
    params.lo = r.num("lo")?.unwrap_or(params.lo);
    params.hi = r.num("hi")?.unwrap_or(params.hi);
    if name == "truncgauss" {
        params.mu = r.num("mu")?.unwrap_or((params.lo + params.hi) / 2.0);
        params.sigma = r
            .num("sigma")?
            .ok_or_else(|| ConfigError::at(pos, "truncgauss needs `sigma`"))?;
    }
    Density::from_name(&name, params).map(Some).map_err(|e| core_at(pos, "density", e))
}

fn parse_rule(value: &str, pos: Pos) -> Result<LabelRule, ConfigError> {
    let trimmed = value.trim();
    for prefix in ["expr:", "noisy:"] {
        if let Some(rest) = trimmed.strip_prefix(prefix) {
            let (skip, expr) = if prefix == "noisy:" {
                match rest.split_once(':') {
                    Some((s, e)) => (prefix.len() + s.len() + 1, e),
                    None => (0, rest),
                }
            } else {
                (prefix.len(), rest)
            };
            if skip > 0 {
                if let Err(e) = crate::expr::parse_expr(expr, crate::expr::Scope::FEATURE) {
                    let at = inner_pos(pos, skip, &e).unwrap_or(pos);
                    return Err(ConfigError::at(at, format!("label rule: {e}")));
                }
            }
        }
    }
    LabelRule::parse(trimmed).map_err(|e| ConfigError::at(pos, e.to_string()))
}

fn parse_labels(r: &mut Reader<'_>) -> Result<Option<Labels>, ConfigError> {
    let rule = r.take("label").map(|(v, p)| (v.to_string(), p));
    let table = r.take("labels").map(|(v, p)| (v.to_string(), p));
    match (rule, table) {
        (Some(_), Some((_, p))) => Err(ConfigError::at(p, "give either `label` or `labels`, not both")),
        (Some((v, p)), None) => Ok(Some(Labels::Rule(parse_rule(&v, p)?))),
        (None, Some((v, p))) => Ok(Some(Labels::Table(label_table(&v, p)?))),
        (None, None) => Ok(None),
    }
}

fn parse_base(section: &mut Section) -> Result<BaseSpec, ConfigError> {
    let header = section.pos;
    let mut r = Reader { section };
    let spec = if r.has("density") {
        let density = parse_density(&mut r, None)?.expect("density present");
        let n = match r.take("n") {
            Some((v, pos)) => v
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| ConfigError::at(pos, "`n` must be a positive integer"))?,
            None => 2,
        };
        let levels = match r.take("levels") {
            Some((v, pos)) => usize_list(v, pos, "levels")?,
            None => vec![n],
        };
        let label = match parse_labels(&mut r)? {
            Some(Labels::Rule(rule)) => rule,
            Some(Labels::Table(_)) => {
                return Err(ConfigError::at(header, "a density base takes a `label` rule, not a `labels` table"))
            }
            None => return Err(ConfigError::at(header, "[base] is missing `label`")),
        };
        BaseSpec::Family {
            density,
            label,
            n,
            levels,
        }
    } else {
        let (v, p) = r.require("points")?;
        let points = float_list(v, p, "points")?;
        let (v, p) = r.require("probs")?;
        let probs = float_list(v, p, "probs")?;
        let labels = parse_labels(&mut r)?
            .ok_or_else(|| ConfigError::at(header, "[base] is missing `label` or `labels`"))?;
        BaseSpec::Explicit { points, probs, labels }
    };
    r.finish()?;
    Ok(spec)
}

fn parse_joint(section: &mut Section, base_box: Option<(f64, f64)>) -> Result<JointSpec, ConfigError> {
    let mut r = Reader { section };
    let spec = if r.has("density") {
        let density = parse_density(&mut r, base_box)?.expect("density present");
        let label = match parse_labels(&mut r)? {
            Some(Labels::Rule(rule)) => Some(rule),
            Some(Labels::Table(_)) => {
                let pos = r.section.pos;
                return Err(ConfigError::at(pos, "a density joint takes a `label` rule, not a `labels` table"));
            }
            None => None,
        };
        JointSpec::Family { density, label }
    } else {
        let (v, p) = r.require("points")?;
        let points = float_list(v, p, "points")?;
        let (v, p) = r.require("probs")?;
        let probs = float_list(v, p, "probs")?;
        let labels = parse_labels(&mut r)?;
        JointSpec::Explicit { points, probs, labels }
    };
    r.finish()?;
    Ok(spec)
}

fn parse_loss(section: &mut Section) -> Result<LossSpec, ConfigError> {
    let header = section.pos;
    let mut r = Reader { section };
    let name = r.take("name").map(|(v, p)| (v.to_string(), p));
    let expr = r.take("expr").map(|(v, p)| (v.to_string(), p));
    let spec = match (name, expr) {
        (Some(_), Some((_, p))) => return Err(ConfigError::at(p, "give either `name` or `expr`, not both")),
        (Some((v, p)), None) => v.parse::<LossSpec>().map_err(|e| ConfigError::at(p, e.to_string()))?,
        (None, Some((v, p))) => match crate::expr::parse_loss_expr(&v) {
            Ok(e) => LossSpec::Expr(e),
            Err(e) => {
                let at = inner_pos(p, 0, &e).unwrap_or(p);
                return Err(ConfigError::at(at, format!("loss expression: {e}")));
            }
        },
        (None, None) => {
            let name = r.section.name.clone();
            return Err(ConfigError::at(header, format!("[{name}] needs `name` or `expr`")));
        }
    };
    r.finish()?;
    Ok(spec)
}

fn parse_risk(section: &mut Section) -> Result<RiskSpec, ConfigError> {
    let mut r = Reader { section };
    let (v, p) = r.require("spec")?;
    let spec = v.parse::<RiskSpec>().map_err(|e| ConfigError::at(p, e.to_string()))?;
    r.finish()?;
    Ok(spec)
}

fn parse_thresholds(section: &mut Section) -> Result<Vec<f64>, ConfigError> {
    let mut indexed = BTreeMap::new();
    for e in &mut section.entries {
        let idx = e
            .key
            .strip_prefix('c')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i >= 1 && e.key == format!("c{i}"))
            .ok_or_else(|| ConfigError::at(e.key_pos, format!("expected a key `c1`, `c2`, .., found `{}`", e.key)))?;
        let v: f64 = e
            .value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ConfigError::at(e.value_pos, format!("`{}` must be a finite number", e.key)))?;
        e.used = true;
        indexed.insert(idx, (v, e.key_pos));
    }
    if indexed.is_empty() {
        return Err(ConfigError::at(section.pos, "[thresholds] needs at least `c1`"));
    }
    let mut out = Vec::new();
    for (expected, (idx, (v, pos))) in (1..).zip(indexed) {
        if idx != expected {
            return Err(ConfigError::at(pos, format!("thresholds must be numbered from c1 without gaps; missing c{expected}")));
        }
        out.push(v);
    }
    Ok(out)
}

fn parse_grid(section: &mut Section) -> Result<GridSpec, ConfigError> {
    let header = section.pos;
    let mut r = Reader { section };
    let actions = r.take("actions").map(|(v, p)| (v.to_string(), p));
    let linspace = r.take("linspace").map(|(v, p)| (v.to_string(), p));
    let vectors = r.take("vectors").map(|(v, p)| (v.to_string(), p));
    let spec = match (actions, linspace, vectors) {
        (Some((v, p)), None, None) => GridSpec::Actions(float_list(&v, p, "actions")?),
        (None, Some((v, p)), None) => {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            let bad = || ConfigError::at(p, "linspace: expected `lo, hi, count`");
            if parts.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = parts[0].parse().map_err(|_| bad())?;
            let hi: f64 = parts[1].parse().map_err(|_| bad())?;
            let count: usize = parts[2].parse().map_err(|_| bad())?;
            GridSpec::Linspace { lo, hi, count }
        }
        (None, None, Some((v, p))) => GridSpec::Vectors(
            v.split(';')
                .map(|a| {
                    a.split_whitespace()
                        .map(|x| {
                            x.parse::<f64>()
                                .map_err(|_| ConfigError::at(p, format!("vectors: expected a number, found `{x}`")))
                        })
                        .collect()
                })
                .collect::<Result<_, _>>()?,
        ),
        (None, None, None) => return Err(ConfigError::at(header, "[grid] needs `actions`, `linspace` or `vectors`")),
        _ => return Err(ConfigError::at(header, "[grid] takes exactly one of `actions`, `linspace`, `vectors`")),
    };
    r.finish()?;
    spec.build().map_err(|e| core_at(header, "grid", e))?;
    Ok(spec)
}

fn parse_solver(section: &mut Section) -> Result<SolverSettings, ConfigError> {
    let mut s = SolverSettings::default();
    let mut r = Reader { section };
    s.step0 = r.num("step0")?.unwrap_or(s.step0);
    s.iters = r.num("iters")?.unwrap_or(s.iters);
    s.seed = r.num("seed")?.unwrap_or(s.seed);
    s.anchor_cap = r.num("anchor_cap")?.unwrap_or(s.anchor_cap);
    s.slater_margin = r.num("slater_margin")?.unwrap_or(s.slater_margin);
    let pos = r.section.pos;
    r.finish()?;
    if !(s.step0 > 0.0 && s.step0.is_finite()) || s.iters == 0 || s.anchor_cap == 0 || !(s.slater_margin > 0.0) {
        return Err(ConfigError::at(pos, "[solver] needs positive step0, iters, anchor_cap and slater_margin"));
    }
    Ok(s)
}

fn parse_oracle(section: &mut Section) -> Result<OracleBudget, ConfigError> {
    let mut b = OracleBudget::default();
    let mut r = Reader { section };
    b.max_policies = r.num("max_policies")?.unwrap_or(b.max_policies);
    b.lambda_lo = r.num("lambda_lo")?.unwrap_or(b.lambda_lo);
    b.lambda_hi = r.num("lambda_hi")?.unwrap_or(b.lambda_hi);
    b.lambda_step = r.num("lambda_step")?.unwrap_or(b.lambda_step);
    b.max_grid_evals = r.num("max_grid_evals")?.unwrap_or(b.max_grid_evals);
    let pos = r.section.pos;
    r.finish()?;
    let ok = b.max_policies > 0
        && b.lambda_lo >= 0.0
        && b.lambda_hi > b.lambda_lo
        && b.lambda_hi.is_finite()
        && b.lambda_step > 0.0
        && b.max_grid_evals > 0;
    if !ok {
        return Err(ConfigError::at(pos, "[oracle] has an invalid budget"));
    }
    Ok(b)
}

impl ConfigDocument {
    /// Parses and validates; the instance at the default level must build.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let (mut sections, eof) = split_lines(text)?;
        let find = |name: &str| sections.iter().position(|s| s.name == name);
        let missing = |name: &str| ConfigError::at(eof, format!("missing section [{name}]"));

        let base_idx = find("base").ok_or_else(|| missing("base"))?;
        let thr_idx = find("thresholds");
        let grid_idx = find("grid");
        let solver_idx = find("solver");
        let oracle_idx = find("oracle");

        let base = parse_base(&mut sections[base_idx])?;
        let thr_idx = thr_idx.ok_or_else(|| missing("thresholds"))?;
        let grid_idx = grid_idx.ok_or_else(|| missing("grid"))?;
        let thresholds = parse_thresholds(&mut sections[thr_idx])?;
        let grid = parse_grid(&mut sections[grid_idx])?;
        let solver = match solver_idx {
            Some(i) => parse_solver(&mut sections[i])?,
            None => SolverSettings::default(),
        };
        let oracle = match oracle_idx {
            Some(i) => parse_oracle(&mut sections[i])?,
            None => OracleBudget::default(),
        };
        let m = thresholds.len();
        let base_box = match &base {
            BaseSpec::Family { density, .. } => Some(density.bounds()),
            BaseSpec::Explicit { .. } => None,
        };

        let mut losses = vec![None; m + 1];
        let mut inner = vec![RiskSpec::Expectation; m + 1];
        let mut outer = vec![RiskSpec::Expectation; m + 1];
        let mut joints = BTreeMap::new();
        let mut spans: HashMap<String, Pos> = HashMap::new();
        for s in sections.iter_mut() {
            spans.insert(s.name.clone(), s.pos);
            let Some((head, idx)) = s.name.split_once('.') else {
                continue;
            };
            let i: usize = idx.parse().expect("validated index");
            if i > m {
                return Err(ConfigError::at(
                    s.pos,
                    format!("[{}] refers to term {i}, but only {m} threshold(s) are given", s.name),
                ));
            }
            match head {
                "joint" => {
                    joints.insert(i, parse_joint(s, base_box)?);
                }
                "loss" => losses[i] = Some(parse_loss(s)?),
                "inner" => inner[i] = parse_risk(s)?,
                "outer" => outer[i] = parse_risk(s)?,
                _ => unreachable!("validated section name"),
            }
        }
        let losses = losses
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| missing(&format!("loss.{i}"))))
            .collect::<Result<Vec<_>, _>>()?;

        let doc = Self {
            base,
            joints,
            losses,
            inner,
            outer,
            thresholds,
            grid,
            solver,
            oracle,
        };
        doc.build(None).map_err(|(section, e)| {
            let pos = section.and_then(|s| spans.get(&s).copied()).unwrap_or(Pos { line: 1, col: 1 });
            ConfigError::at(pos, e.to_string())
        })?;
        Ok(doc)
    }

    pub fn m(&self) -> usize {
        self.thresholds.len()
    }

    /// Refinement levels for a density base.
    pub fn levels(&self) -> Option<&[usize]> {
        match &self.base {
            BaseSpec::Family { levels, .. } => Some(levels),
            BaseSpec::Explicit { .. } => None,
        }
    }

    pub fn is_family(&self) -> bool {
        matches!(self.base, BaseSpec::Family { .. })
    }

    /// The instance at level `n` (ignored for explicit bases; `None` uses the
    /// configured default level).
    pub fn instance_at(&self, n: Option<usize>) -> Result<RCLInstance, CoreError> {
        self.build(n).map_err(|(_, e)| e)
    }

    fn build(&self, n: Option<usize>) -> Result<RCLInstance, (Option<String>, CoreError)> {
        let in_section = |name: &str| {
            let name = name.to_string();
            move |e: CoreError| (Some(name.clone()), e)
        };
        let (base_joint, rule, table) = match &self.base {
            BaseSpec::Family {
                density, label, n: default, ..
            } => {
                let family = RefinementFamily {
                    density: *density,
                    label_rule: label.clone(),
                    levels: vec![],
                };
                let joint = refine(&family, n.unwrap_or(*default)).map_err(in_section("base"))?;
                (joint, Some(label.clone()), None)
            }
            BaseSpec::Explicit { points, probs, labels } => {
                let marginal = DiscreteMarginal::from_scalars(points, probs).map_err(in_section("base"))?;
                let (rows, rule, table) = match labels {
                    Labels::Rule(r) => (
                        labels_from_rule(r, points).map_err(in_section("base"))?,
                        Some(r.clone()),
                        None,
                    ),
                    Labels::Table(t) => (t.clone(), None, Some(t.clone())),
                };
                let cond = ConditionalLabelDist::new(rows).map_err(in_section("base"))?;
                (JointModel::new(marginal, cond).map_err(in_section("base"))?, rule, table)
            }
        };
        let base = base_joint.marginal.clone();
        let inherit = |points: &[Vec<f64>]| -> Result<Vec<Vec<(f64, f64)>>, CoreError> {
            if let Some(r) = &rule {
                return points.iter().map(|x| r.labels_at(x)).collect();
            }
            let table = table.as_ref().expect("explicit labels");
            points
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    base.index_of(x)
                        .map(|j| table[j].clone())
                        .ok_or(CoreError::SupportViolation { index: k })
                })
                .collect()
        };
        let mut joints = Vec::with_capacity(self.m() + 1);
        for i in 0..=self.m() {
            let name = format!("joint.{i}");
            let joint = match self.joints.get(&i) {
                None => base_joint.clone(),
                Some(JointSpec::Family { density, label }) => {
                    let cells = base.len();
                    let (lo, hi) = density.bounds();
                    let points: Vec<Vec<f64>> = crate::scenario::cell_midpoints(lo, hi, cells)
                        .into_iter()
                        .map(|x| vec![x])
                        .collect();
                    let probs = density.cell_masses(cells);
                    let rows = match label {
                        Some(r) => points.iter().map(|x| r.labels_at(x)).collect::<Result<Vec<_>, _>>(),
                        None => inherit(&points),
                    }
                    .map_err(in_section(&name))?;
                    let marginal = build_marginal(points, probs).map_err(in_section(&name))?;
                    let cond = ConditionalLabelDist::new(rows).map_err(in_section(&name))?;
                    JointModel::new(marginal, cond).map_err(in_section(&name))?
                }
                Some(JointSpec::Explicit { points, probs, labels }) => {
                    let marginal = DiscreteMarginal::from_scalars(points, probs).map_err(in_section(&name))?;
                    let rows = match labels {
                        Some(Labels::Rule(r)) => labels_from_rule(r, points),
                        Some(Labels::Table(t)) => Ok(t.clone()),
                        None => inherit(marginal.points()),
                    }
                    .map_err(in_section(&name))?;
                    let cond = ConditionalLabelDist::new(rows).map_err(in_section(&name))?;
                    JointModel::new(marginal, cond).map_err(in_section(&name))?
                }
            };
            joint.marginal.embed_in(&base).map_err(in_section(&name))?;
            joints.push(joint);
        }
        let grid = self.grid.build().map_err(in_section("grid"))?;
        for (i, l) in self.losses.iter().enumerate() {
            if let LossSpec::Expr(e) = l {
                if e.action_arity() > grid.dim() {
                    return Err((
                        Some(format!("loss.{i}")),
                        CoreError::InvalidSpec(format!(
                            "loss uses z{} but actions have dimension {}",
                            e.action_arity(),
                            grid.dim()
                        )),
                    ));
                }
            }
        }
        let instance = RCLInstance {
            base,
            joints,
            losses: self.losses.clone(),
            inner: self.inner.clone(),
            outer: self.outer.clone(),
            thresholds: self.thresholds.clone(),
            grid,
        };
        instance.validate().map_err(|e| (None, e))?;
        Ok(instance)
    }

    /// Canonical text form; parsing it yields an equal document.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("[base]\n");
        match &self.base {
            BaseSpec::Family {
                density,
                label,
                n,
                levels,
            } => {
                write_density(&mut out, density);
                let _ = writeln!(out, "n = {n}");
                let _ = writeln!(out, "levels = {}", join(levels));
                let _ = writeln!(out, "label = {label}");
            }
            BaseSpec::Explicit { points, probs, labels } => {
                let _ = writeln!(out, "points = {}", join(points));
                let _ = writeln!(out, "probs = {}", join(probs));
                write_labels(&mut out, labels);
            }
        }
        for (i, j) in &self.joints {
            let _ = writeln!(out, "\n[joint.{i}]");
            match j {
                JointSpec::Family { density, label } => {
                    write_density(&mut out, density);
                    if let Some(l) = label {
                        let _ = writeln!(out, "label = {l}");
                    }
                }
                JointSpec::Explicit { points, probs, labels } => {
                    let _ = writeln!(out, "points = {}", join(points));
                    let _ = writeln!(out, "probs = {}", join(probs));
                    if let Some(l) = labels {
                        write_labels(&mut out, l);
                    }
                }
            }
        }
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "\n[loss.{i}]");
            match l {
                LossSpec::Expr(e) => {
                    let _ = writeln!(out, "expr = {}", e.source().trim());
                }
                other => {
                    let _ = writeln!(out, "name = {other}");
                }
            }
            let _ = writeln!(out, "\n[inner.{i}]\nspec = {}", self.inner[i]);
            let _ = writeln!(out, "\n[outer.{i}]\nspec = {}", self.outer[i]);
        }
        out.push_str("\n[thresholds]\n");
        for (i, c) in self.thresholds.iter().enumerate() {
            let _ = writeln!(out, "c{} = {c}", i + 1);
        }
        out.push_str("\n[grid]\n");
        match &self.grid {
            GridSpec::Actions(a) => {
                let _ = writeln!(out, "actions = {}", join(a));
            }
            GridSpec::Linspace { lo, hi, count } => {
                let _ = writeln!(out, "linspace = {lo}, {hi}, {count}");
            }
            GridSpec::Vectors(v) => {
                let rows: Vec<String> = v
                    .iter()
                    .map(|a| a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
                    .collect();
                let _ = writeln!(out, "vectors = {}", rows.join("; "));
            }
        }
        let s = &self.solver;
        let _ = writeln!(
            out,
            "\n[solver]\nstep0 = {}\niters = {}\nseed = {}\nanchor_cap = {}\nslater_margin = {}",
            s.step0, s.iters, s.seed, s.anchor_cap, s.slater_margin
        );
        let b = &self.oracle;
        let _ = writeln!(
            out,
            "\n[oracle]\nmax_policies = {}\nlambda_lo = {}\nlambda_hi = {}\nlambda_step = {}\nmax_grid_evals = {}",
            b.max_policies, b.lambda_lo, b.lambda_hi, b.lambda_step, b.max_grid_evals
        );
        out
    }
}

impl fmt::Display for ConfigDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

fn labels_from_rule(rule: &LabelRule, points: &[f64]) -> Result<Vec<Vec<(f64, f64)>>, CoreError> {
    points.iter().map(|&x| rule.labels_at(&[x])).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn write_density(out: &mut String, d: &Density) {
    match *d {
        Density::Uniform { lo, hi } => {
            let _ = writeln!(out, "density = uniform\nlo = {lo}\nhi = {hi}");
        }
        Density::TruncGauss { mu, sigma, lo, hi } => {
            let _ = writeln!(out, "density = truncgauss\nmu = {mu}\nsigma = {sigma}\nlo = {lo}\nhi = {hi}");
        }
    }
}

fn write_labels(out: &mut String, labels: &Labels) {
    match labels {
        Labels::Rule(r) => {
            let _ = writeln!(out, "label = {r}");
        }
        Labels::Table(t) => {
            let rows: Vec<String> = t
                .iter()
                .map(|row| row.iter().map(|(y, p)| format!("{y}:{p}")).collect::<Vec<_>>().join(", "))
                .collect();
            let _ = writeln!(out, "labels = {}", rows.join(" | "));
        }
    }
}
