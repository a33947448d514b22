//! Shared generators and independent reference computations for the
//! integration tests. Nothing here calls the library's risk evaluators.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rcl_core::condrisk::{ActionGrid, CostTable};
use rcl_core::problem::{Policy, RCL0Tables, RCLInstance};
use rcl_core::risk::RiskSpec;
use rcl_core::scenario::{ConditionalLabelDist, DiscreteMarginal, JointModel, WeightVector};
use rcl_core::LossSpec;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Strictly positive probabilities summing to one.
pub fn random_probs(rng: &mut StdRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Push the rounding residue onto the largest atom.
    let residue = 1.0 - p.iter().sum::<f64>();
    let k = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    p[k] += residue;
    p
}

/// Tail average of the worst `alpha` mass, computed by sorting.
pub fn cvar_tail(alpha: f64, z: &[f64], p: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..z.len()).filter(|&j| p[j] > 0.0).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    let mut left = alpha;
    let mut acc = 0.0;
    for j in idx {
        let take = p[j].min(left);
        acc += take * z[j];
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    // Residual mass from rounding goes to the smallest atom taken.
    acc / (alpha - left.max(0.0))
}

/// Reference value of any risk spec on `(z, p)` from its defining formula.
pub fn risk_ref(spec: &RiskSpec, z: &[f64], p: &[f64]) -> f64 {
    let mean: f64 = z.iter().zip(p).map(|(z, p)| z * p).sum();
    match spec {
        RiskSpec::Expectation => mean,
        RiskSpec::Cvar { alpha } => cvar_tail(*alpha, z, p),
        RiskSpec::Mad { c } => mean + c * z.iter().zip(p).map(|(z, p)| p * (z - mean).abs()).sum::<f64>(),
        RiskSpec::Musd { c, order } => {
            let s: f64 = z.iter().zip(p).map(|(z, p)| p * (z - mean).max(0.0).powf(*order)).sum();
            mean + c * s.powf(1.0 / order)
        }
        RiskSpec::Gmsd { .. } => panic!("no reference for gmsd"),
    }
}

/// A random lowered instance with tables in `[0, 3)`, thresholds chosen so
/// that a random policy is feasible, and up to `max_cvar` CVaR outer terms.
pub struct FuzzShape {
    pub n: usize,
    pub a: usize,
    pub m: usize,
    pub max_cvar: usize,
    pub expectation_only: bool,
}

pub fn random_tables(rng: &mut StdRng, shape: &FuzzShape) -> RCL0Tables {
    let FuzzShape { n, a, m, .. } = *shape;
    let base = DiscreteMarginal::from_scalars(
        &(0..n).map(|j| j as f64).collect::<Vec<_>>(),
        &random_probs(rng, n),
    )
    .unwrap();
    let mut weights = Vec::new();
    let mut tables = Vec::new();
    let mut outer = Vec::new();
    let mut cvar_left = shape.max_cvar;
    for i in 0..=m {
        // Term marginals live on a random nonempty subset of the base.
        let w = if i == 0 || rng.random_bool(0.4) {
            WeightVector::ones(n)
        } else {
            let keep: Vec<bool> = {
                let mut k: Vec<bool> = (0..n).map(|_| rng.random_bool(0.75)).collect();
                if !k.iter().any(|&b| b) {
                    k[rng.random_range(0..n)] = true;
                }
                k
            };
            let sub = random_probs(rng, keep.iter().filter(|&&b| b).count());
            let mut it = sub.into_iter();
            let w: Vec<f64> = (0..n)
                .map(|j| if keep[j] { it.next().unwrap() / base.probs()[j] } else { 0.0 })
                .collect();
            WeightVector::new(w, &base).unwrap()
        };
        weights.push(w);
        let entries: Vec<f64> = (0..n * a)
            .map(|_| {
                // Quarter grid values make ties common.
                if rng.random_bool(0.3) {
                    (rng.random_range(0..12) as f64) * 0.25
                } else {
                    rng.random_range(0.0..3.0)
                }
            })
            .collect();
        tables.push(CostTable::new(n, a, entries).unwrap());
        let spec = if !shape.expectation_only && cvar_left > 0 && rng.random_bool(0.5) {
            cvar_left -= 1;
            RiskSpec::cvar([0.1, 0.25, 0.5, 0.8, 1.0][rng.random_range(0..5)]).unwrap()
        } else {
            RiskSpec::Expectation
        };
        outer.push(spec);
    }
    let probe = RCL0Tables::new(base.clone(), weights.clone(), tables.clone(), outer.clone(), vec![0.0; m]).unwrap();
    let witness = Policy::new((0..n).map(|_| rng.random_range(0..a)).collect());
    let thresholds = (1..=m)
        .map(|i| probe.term_value(i, &witness).unwrap() + rng.random_range(0.0..0.3))
        .collect();
    RCL0Tables::new(base, weights, tables, outer, thresholds).unwrap()
}

/// Calls `visit` on every deterministic policy.
pub fn all_policies(n: usize, a: usize, mut visit: impl FnMut(&[usize])) {
    let total = (a as u64).pow(n as u32);
    let mut choice = vec![0usize; n];
    for mut idx in 0..total {
        for k in (0..n).rev() {
            choice[k] = (idx % a as u64) as usize;
            idx /= a as u64;
        }
        visit(&choice);
    }
}

/// Term `i` of a lowered instance from the reference risk formulas.
pub fn term_ref(t: &RCL0Tables, i: usize, choice: &[usize]) -> f64 {
    let z: Vec<f64> = choice.iter().enumerate().map(|(j, &a)| t.tables()[i].get(j, a)).collect();
    let p: Vec<f64> = (0..t.n_scenarios())
        .map(|j| t.base().probs()[j] * t.weights()[i].as_slice()[j])
        .collect();
    risk_ref(&t.outer()[i], &z, &p)
}

/// `min_f L(f, λ)` by enumeration.
pub fn brute_lagrangian(t: &RCL0Tables, lambda: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    all_policies(t.n_scenarios(), t.n_actions(), |c| {
        let mut v = term_ref(t, 0, c);
        for i in 1..=t.m() {
            v += lambda[i - 1] * (term_ref(t, i, c) - t.thresholds()[i - 1]);
        }
        best = best.min(v);
    });
    best
}

/// Feasible optimum by enumeration, `None` when infeasible.
pub fn brute_best(t: &RCL0Tables) -> Option<f64> {
    let mut best: Option<f64> = None;
    all_policies(t.n_scenarios(), t.n_actions(), |c| {
        let feasible = (1..=t.m()).all(|i| term_ref(t, i, c) <= t.thresholds()[i - 1] + 1e-9);
        if feasible {
            let v = term_ref(t, 0, c);
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        }
    });
    best
}

fn random_loss(rng: &mut StdRng) -> LossSpec {
    match rng.random_range(0..6) {
        0 => LossSpec::AbsDev,
        1 => LossSpec::Quad,
        2 => LossSpec::Hinge,
        3 => LossSpec::ZeroOne { threshold: 0.5 },
        4 => LossSpec::TruncatedQuad { cap: 1.0 },
        _ => "expr:abs(z1 - y) + 0.5 * relu(z1 - 1)".parse().unwrap(),
    }
}

fn random_inner(rng: &mut StdRng) -> RiskSpec {
    let text = ["expectation", "cvar:0.3", "cvar:1", "mad:0.5", "musd:1:2", "musd:0.5:1"][rng.random_range(0..6)];
    text.parse().unwrap()
}

/// A random full instance: base on `n ≤ max_n` points, each term's joint on
/// a random subset with 1-3 random labels per scenario.
pub fn random_instance(rng: &mut StdRng, max_n: usize, outer: &RiskSpec) -> RCLInstance {
    let n = rng.random_range(1..=max_n);
    let points: Vec<f64> = (0..n).map(|j| j as f64 * 0.5).collect();
    let base = DiscreteMarginal::from_scalars(&points, &random_probs(rng, n)).unwrap();
    let m = rng.random_range(1..=2);
    let mut joints = Vec::new();
    for _ in 0..=m {
        let support: Vec<f64> = {
            let s: Vec<f64> = points.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
            if s.is_empty() {
                vec![points[rng.random_range(0..n)]]
            } else {
                s
            }
        };
        let marginal = DiscreteMarginal::from_scalars(&support, &random_probs(rng, support.len())).unwrap();
        let rows = support
            .iter()
            .map(|_| {
                let k = rng.random_range(1..=3);
                let probs = random_probs(rng, k);
                (0..k).map(|q| (rng.random_range(-1.0..2.0), probs[q])).collect()
            })
            .collect();
        joints.push(JointModel::new(marginal, ConditionalLabelDist::new(rows).unwrap()).unwrap());
    }
    let a = rng.random_range(1..=4);
    let grid = ActionGrid::scalar(&(0..a).map(|k| k as f64 * 0.5).collect::<Vec<_>>()).unwrap();
    RCLInstance {
        base,
        joints,
        losses: (0..=m).map(|_| random_loss(rng)).collect(),
        inner: (0..=m).map(|_| random_inner(rng)).collect(),
        outer: vec![outer.clone(); m + 1],
        thresholds: vec![1.0; m],
        grid,
    }
}

/// Term `i` of a full instance evaluated straight from its joint model.
pub fn direct_ref(inst: &RCLInstance, i: usize, policy: &Policy) -> f64 {
    let joint = &inst.joints[i];
    let z: Vec<f64> = (0..joint.marginal.len())
        .map(|k| {
            let x = &joint.marginal.points()[k];
            let j = inst.base.points().iter().position(|p| p == x).unwrap();
            let action = inst.grid.action(policy.choice[j]);
            let row = joint.conditional.row(k);
            let losses: Vec<f64> = row.iter().map(|&(y, _)| inst.losses[i].eval(action, y).unwrap().value).collect();
            let probs: Vec<f64> = row.iter().map(|&(_, q)| q).collect();
            risk_ref(&inst.inner[i], &losses, &probs)
        })
        .collect();
    risk_ref(&inst.outer[i], &z, joint.marginal.probs())
}
