mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;

use rcl_core::dual::{bisect_dual_m1, dual_ascent, dual_function, AscentParams, Multipliers};
use rcl_core::oracle::{grid_dual, mixed_primal_m1, OracleBudget};
use rcl_core::problem::{lower, Policy};
use rcl_core::risk::RiskSpec;
use rcl_core::scenario::{refine, Density, DensityParams, LabelRule, RefinementFamily};
use rcl_core::{bundled, compose, reweighted_compose, CompositeFunctional, ConfigDocument};

fn shape(rng: &mut rand::rngs::StdRng, expectation_only: bool) -> FuzzShape {
    FuzzShape {
        n: rng.random_range(1..=5),
        a: rng.random_range(1..=4),
        m: if expectation_only { 1 } else { rng.random_range(1..=2) },
        max_cvar: 2,
        expectation_only,
    }
}

fn lambda(rng: &mut rand::rngs::StdRng, m: usize) -> Vec<f64> {
    (0..m)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..4.0) })
        .collect()
}

fn q(t: &rcl_core::RCL0Tables, l: &[f64]) -> rcl_core::dual::DualEval {
    dual_function(t, &Multipliers::new(l.to_vec()).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weak_duality(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = shape(&mut r, false);
        let t = random_tables(&mut r, &s);
        let p = brute_best(&t).expect("thresholds come from a feasible policy");
        for _ in 0..5 {
            let l = lambda(&mut r, t.m());
            prop_assert!(q(&t, &l).q <= p + 1e-9);
        }
    }

    #[test]
    fn dual_matches_enumeration(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = shape(&mut r, false);
        let t = random_tables(&mut r, &s);
        for _ in 0..4 {
            let l = lambda(&mut r, t.m());
            let got = q(&t, &l).q;
            let want = brute_lagrangian(&t, &l);
            prop_assert!((got - want).abs() <= 1e-9, "{got} vs {want} at {l:?}");
        }
    }

    #[test]
    fn concavity_and_supergradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = shape(&mut r, false);
        let t = random_tables(&mut r, &s);
        let l1 = lambda(&mut r, t.m());
        let l2 = lambda(&mut r, t.m());
        let theta: f64 = r.random();
        let mid: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| theta * a + (1.0 - theta) * b).collect();
        let (e1, e2, em) = (q(&t, &l1), q(&t, &l2), q(&t, &mid));
        prop_assert!(em.q >= theta * e1.q + (1.0 - theta) * e2.q - 1e-9);
        let g = e1.supergradient(&t);
        let linear: f64 = e1.q + g.iter().zip(l2.iter().zip(&l1)).map(|(g, (b, a))| g * (b - a)).sum::<f64>();
        prop_assert!(e2.q <= linear + 1e-9, "{} > {linear}", e2.q);
    }

    #[test]
    fn scaling_invariance(seed in any::<u64>(), k in 0.1f64..10.0) {
        let mut r = rng(seed);
        let s = shape(&mut r, false);
        let t = random_tables(&mut r, &s);
        let ts = t.scaled(k);
        let l = lambda(&mut r, t.m());
        prop_assert!((q(&ts, &l).q - k * q(&t, &l).q).abs() <= 1e-9 * k.max(1.0));
    }

    #[test]
    fn mixed_closes_the_gap(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = shape(&mut r, true);
        let t = random_tables(&mut r, &s);
        let sol = mixed_primal_m1(&t).unwrap();
        let (d, lam) = bisect_dual_m1(&t, 1e-12).unwrap();
        prop_assert!((sol.value - d).abs() <= 1e-6, "mixed {} vs dual {d}", sol.value);
        prop_assert!(t.term_value_mixed(1, &sol.mix).unwrap() <= t.thresholds()[0] + 1e-9);
        prop_assert!((t.term_value_mixed(0, &sol.mix).unwrap() - sol.value).abs() <= 1e-9);
        prop_assert!((brute_lagrangian(&t, &[lam]) - d).abs() <= 1e-8);
        prop_assert!(sol.value <= brute_best(&t).unwrap() + 1e-9);
    }

    #[test]
    fn reweighting_equivalence(seed in any::<u64>(), which in 0usize..3) {
        let outer = [RiskSpec::Expectation, RiskSpec::cvar(0.3).unwrap(), RiskSpec::cvar(0.75).unwrap()][which].clone();
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 6, &outer);
        let t = lower(&inst).unwrap();
        for _ in 0..4 {
            let p = Policy::new((0..inst.base.len()).map(|_| r.random_range(0..inst.grid.len())).collect());
            for i in 0..=inst.m() {
                let want = direct_ref(&inst, i, &p);
                let lowered = t.term_value(i, &p).unwrap();
                let cf = CompositeFunctional::new(outer.clone(), t.tables()[i].clone(), t.weights()[i].clone(), inst.base.clone()).unwrap();
                let rw = reweighted_compose(&cf, &p).unwrap();
                prop_assert!((lowered - want).abs() <= 1e-9, "term {i}: {lowered} vs {want}");
                prop_assert!((rw - want).abs() <= 1e-9);
                prop_assert!((inst.direct_value(i, &p).unwrap() - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn cvar_monotone_in_alpha(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..=20);
        let p = random_probs(&mut r, n);
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let mut prev = f64::INFINITY;
        for k in 1..=20 {
            let v = RiskSpec::cvar(k as f64 / 20.0).unwrap().eval_weighted(&z, &p).unwrap();
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
        let mean: f64 = z.iter().zip(&p).map(|(a, b)| a * b).sum();
        prop_assert!((prev - mean).abs() <= 1e-12);
    }

    #[test]
    fn refinement_mass_bound(mu in 0.0f64..1.0, sigma in 0.05f64..1.0, n in 1usize..300) {
        let d = Density::from_name("truncgauss", DensityParams { mu, sigma, lo: 0.0, hi: 1.0 }).unwrap();
        let fam = RefinementFamily { density: d, label_rule: LabelRule::Identity, levels: vec![n] };
        let j = refine(&fam, n).unwrap();
        let phi = |x: f64| 0.5 * (1.0 + libm::erf((x - mu) / (sigma * std::f64::consts::SQRT_2)));
        let z = phi(1.0) - phi(0.0);
        let peak = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt() * z);
        let bound = peak / n as f64;
        prop_assert!(j.marginal.probs().iter().all(|&m| m <= bound * (1.0 + 1e-9)));
        prop_assert!((j.marginal.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = ConfigDocument::parse(&text);
    }

    #[test]
    fn mutated_configs_never_panic(which in 0usize..4, pos in any::<prop::sample::Index>(), insert in "[\\[\\]=:,.a-z0-9 \n-]{0,12}") {
        let text = bundled::CONFIGS[which].1;
        let at = pos.index(text.len() + 1);
        let at = (0..=at).rev().find(|&k| text.is_char_boundary(k)).unwrap();
        let mutated = format!("{}{}{}", &text[..at], insert, &text[at..]);
        if let Ok(doc) = ConfigDocument::parse(&mutated) {
            let again = ConfigDocument::parse(&doc.serialize()).unwrap();
            prop_assert_eq!(again, doc);
        }
    }
}

#[test]
fn tower_property_on_fuzzed_instances() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let mut inst = random_instance(&mut r, 6, &RiskSpec::Expectation);
        inst.inner = vec![RiskSpec::Expectation; inst.m() + 1];
        let t = lower(&inst).unwrap();
        let p = Policy::new((0..inst.base.len()).map(|_| r.random_range(0..inst.grid.len())).collect());
        for i in 0..=inst.m() {
            let joint = &inst.joints[i];
            let want: f64 = joint
                .pairs()
                .iter()
                .map(|&(k, y, mass)| {
                    let j = inst.base.index_of(&joint.marginal.points()[k]).unwrap();
                    mass * inst.losses[i].eval(inst.grid.action(p.choice[j]), y).unwrap().value
                })
                .sum();
            let got = t.term_value(i, &p).unwrap();
            assert!((got - want).abs() <= 1e-10, "seed {seed} term {i}: {got} vs {want}");
        }
    }
}

#[test]
fn compose_matches_reference_on_own_marginal() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 6, &RiskSpec::cvar(0.4).unwrap());
        let joint = &inst.joints[0];
        let table = rcl_core::inner_cost_table(&inst.losses[0], joint, &inst.grid, &inst.inner[0]).unwrap();
        let choice: Vec<usize> = (0..joint.marginal.len()).map(|_| r.random_range(0..inst.grid.len())).collect();
        let got = compose(&inst.outer[0], &table, &joint.marginal, &Policy::new(choice.clone())).unwrap();
        let z: Vec<f64> = choice.iter().enumerate().map(|(j, &a)| table.get(j, a)).collect();
        let want = risk_ref(&inst.outer[0], &z, joint.marginal.probs());
        assert!((got - want).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn ascent_agrees_with_grid_dual() {
    let budget = OracleBudget::default();
    for seed in 0..20 {
        let mut r = rng(seed);
        let s = shape(&mut r, false);
        let t = random_tables(&mut r, &s);
        let grid = grid_dual(&t, &budget).unwrap();
        if !grid.is_finite() {
            continue;
        }
        let rep = dual_ascent(&t, &AscentParams { iters: 20_000, ..AscentParams::default() }).unwrap();
        // The grid optimum may sit beyond its box; only compare when the
        // ascent's maximizer lies inside.
        if rep.lambda_star.iter().all(|&l| l <= budget.lambda_hi) {
            let step = if t.m() == 1 { budget.lambda_step } else { 3.0 / 199.0 };
            assert!(
                (rep.dstar - grid).abs() <= 2.0 * (step + 1e-3),
                "seed {seed}: ascent {} grid {grid}",
                rep.dstar
            );
            assert!(rep.dstar <= grid + 1e-9 || t.m() == 2);
        }
    }
}
