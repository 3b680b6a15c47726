use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcl_core::constraints::{build_system, check_mechanism, Mechanism};
use rcl_core::market::{
    cara_indirect_utility, market_instance, relative_entropy, tilted_density, Direction, DriftSpec,
    MarketInstanceSpec, MarketModel, TiltedDensity,
};
use rcl_core::menu::{ir_filter, phi, u_star, v_star, Menu, DEFAULT_TIE_TOL};
use rcl_core::model::{expectation, validate_instance, BeliefSet, Instance, PrincipalModel, RawInstance, UtilitySpec};
use rcl_core::presets::{random_candidates, random_density, random_instance, random_mechanism, random_simplex, RandomSpec};
use rcl_core::solver::{contract_value, grid_oracle, principal_value};
use rcl_core::transform::{from_utility_units, payoff_to_levels, to_utility_units, UtilityUnitsInstance};

fn instance(seed: u64, m: usize, n: usize, k: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = RandomSpec {
        penalties: true,
        ..RandomSpec::new(m, n, k)
    };
    random_instance(&mut rng, &spec).unwrap()
}

fn shape() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=4, 1usize..=3, 1usize..=3)
}

fn permute(raw: &RawInstance, perm: &[usize]) -> RawInstance {
    let p = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let mut out = raw.clone();
    out.states.atoms = perm.iter().map(|&i| raw.states.atoms[i].clone()).collect();
    out.states.ref_prob = p(&raw.states.ref_prob);
    for (t, s) in out.types.iter_mut().zip(&raw.types) {
        t.density = p(&s.density);
    }
    if let (Some(o), Some(s)) = (out.principal_belief.as_mut(), raw.principal_belief.as_ref()) {
        o.density = p(&s.density);
    }
    out.e_a = p(&raw.e_a);
    out.e_p = p(&raw.e_p);
    out.bounds.lo = p(&raw.bounds.lo);
    out.bounds.hi = p(&raw.bounds.hi);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expectation_is_linear((seed, m, n, k) in shape(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let inst = instance(seed, m, n, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        for t in &inst.types {
            let lhs = expectation(&inst.states, t, &mix).unwrap();
            let rhs = a * expectation(&inst.states, t, &x).unwrap() + b * expectation(&inst.states, t, &y).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()) * 10.0);
        }
    }

    #[test]
    fn transform_roundtrip((seed, m, n, k) in shape(), lambda in 0.0f64..=1.0) {
        let inst = instance(seed, m, n, k);
        let uu = to_utility_units(&inst).unwrap();
        let x: Vec<f64> = inst.contract_lo.iter().zip(&inst.contract_hi).map(|(l, h)| l + lambda * (h - l)).collect();
        let c = payoff_to_levels(&inst, &x).unwrap();
        let back = from_utility_units(&uu, &c).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn feasible_set_is_convex((seed, m, n, k) in (any::<u64>(), 1usize..=2, 1usize..=3, 1usize..=2), lambda in 0.0f64..=1.0) {
        let inst = instance(seed, m, n, k);
        let uu = to_utility_units(&inst).unwrap();
        let sys = build_system(&uu);
        let top = Mechanism::pooling(n, &uu.c_hi);
        let grid = grid_oracle(&uu, 3, 10_000_000).unwrap().result.mechanism;
        prop_assert!(check_mechanism(&sys, &grid, 1e-8).unwrap().feasible);
        let mid = top.mix(&grid, lambda);
        prop_assert!(check_mechanism(&sys, &mid, 1e-8).unwrap().feasible);
    }

    #[test]
    fn atom_permutation_changes_nothing((seed, m, n, k) in shape(), shift in 0usize..4) {
        let inst = instance(seed, m, n, k);
        let uu = to_utility_units(&inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mech = Mechanism::new(random_mechanism(&mut rng, &uu)).unwrap();
        let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let pinst = validate_instance(permute(&inst.to_raw(), &perm)).unwrap();
        let puu = to_utility_units(&pinst).unwrap();
        let pmech = Mechanism::new(
            mech.assignment.iter().map(|c| perm.iter().map(|&i| c[i]).collect()).collect(),
        ).unwrap();
        let (a, b) = (principal_value(&uu, &mech).unwrap(), principal_value(&puu, &pmech).unwrap());
        prop_assert!((a.value - b.value).abs() <= 1e-12 * (1.0 + a.value.abs()));
        let fa = check_mechanism(&build_system(&uu), &mech, 1e-8).unwrap();
        let fb = check_mechanism(&build_system(&puu), &pmech, 1e-8).unwrap();
        prop_assert!((fa.max_violation() - fb.max_violation()).abs() <= 1e-12);
    }

    #[test]
    fn principal_value_is_concave((seed, m, n, k) in shape(), lambda in 0.0f64..=1.0) {
        let inst = instance(seed, m, n, k);
        let uu = to_utility_units(&inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let a = Mechanism::new(random_mechanism(&mut rng, &uu)).unwrap();
        let b = Mechanism::new(random_mechanism(&mut rng, &uu)).unwrap();
        let va = principal_value(&uu, &a).unwrap().value;
        let vb = principal_value(&uu, &b).unwrap().value;
        let vm = principal_value(&uu, &a.mix(&b, lambda)).unwrap().value;
        prop_assert!(vm >= lambda * va + (1.0 - lambda) * vb - 1e-9);
    }

    #[test]
    fn worst_prior_reproduces_value((seed, m, n, k) in shape()) {
        let inst = instance(seed, m, n, k);
        let uu = to_utility_units(&inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let mech = Mechanism::new(random_mechanism(&mut rng, &uu)).unwrap();
        let pv = principal_value(&uu, &mech).unwrap();
        let beliefs = &inst.beliefs;
        let at_worst: f64 = beliefs.priors[pv.worst_prior].iter().zip(&pv.per_type).map(|(w, v)| w * v).sum::<f64>()
            + beliefs.penalties[pv.worst_prior];
        prop_assert_eq!(at_worst, pv.value);
    }

    #[test]
    fn menus_behave((seed, m, n, k) in shape(), size in 1usize..6, extra in 1usize..4) {
        let inst = instance(seed, m, n, k);
        let uu = to_utility_units(&inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let cand = random_candidates(&mut rng, &uu, size + extra);
        let small = Menu::new(cand[..size].to_vec()).unwrap();
        let large = Menu::new(cand.clone()).unwrap();
        for (j, t) in inst.types.iter().enumerate() {
            let us = u_star(&inst.states, t, &small);
            prop_assert!(us <= u_star(&inst.states, t, &large));
            let set = phi(&inst.states, t, &small, DEFAULT_TIE_TOL);
            prop_assert!(!set.is_empty());
            for &c in &set {
                let util = expectation(&inst.states, t, &small.contracts()[c]).unwrap();
                prop_assert!(util >= us - DEFAULT_TIE_TOL);
            }
            let (vs, _) = v_star(&uu, j, &small, DEFAULT_TIE_TOL).unwrap();
            let best = small.contracts().iter().map(|c| contract_value(&uu, j, c).unwrap()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(vs <= best);
        }
        if !ir_filter(std::slice::from_ref(&small), &uu).is_empty() {
            prop_assert_eq!(ir_filter(std::slice::from_ref(&large), &uu).len(), 1);
        }
    }

    #[test]
    fn entropies_are_nonnegative(seed in any::<u64>(), m in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_simplex(&mut rng, m);
        let d = TiltedDensity::from_density(q.clone(), random_density(&mut rng, &q)).unwrap();
        prop_assert!(relative_entropy(&d, Direction::PQ) >= -1e-15);
        prop_assert!(relative_entropy(&d, Direction::QP) >= -1e-15);
    }

    #[test]
    fn market_incentives_match_linear_constraints(seed in any::<u64>(), m in 2usize..8, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drifts: Vec<DriftSpec> = (0..n)
            .map(|j| DriftSpec::ClampedLinear { label: format!("f{j}"), slope: rng.gen_range(-0.8..0.8), support: rng.gen_range(0.5..2.0) })
            .collect();
        let model = MarketModel::gauss_hermite(1.0, m, &drifts).unwrap();
        let e_a: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
        let inst = market_instance(MarketInstanceSpec {
            model: &model,
            e_a: e_a.clone(),
            e_p: vec![2.0; m],
            v: UtilitySpec::cara(1.0),
            lo: vec![-0.4; m],
            hi: vec![0.4; m],
            beliefs: BeliefSet::singleton(vec![1.0 / n as f64; n]),
            principal_model: PrincipalModel::Standard,
        }).unwrap();
        let uu: UtilityUnitsInstance = to_utility_units(&inst).unwrap();
        let sys = build_system(&uu);
        let alpha = 0.7;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(-0.4..0.4)).collect()).collect();
        let levels: Vec<Vec<f64>> = x.iter().map(|x| payoff_to_levels(&inst, x).unwrap()).collect();
        let mech = Mechanism::new(levels).unwrap();
        let report = check_mechanism(&sys, &mech, 0.0).unwrap();
        for r in &report.rows {
            if let rcl_core::constraints::RowKind::Ic { truthful, mimic } = r.kind {
                let d = tilted_density(&model, truthful).unwrap();
                let own = cara_indirect_utility(&d, &e_a, &x[truthful], alpha);
                let other = cara_indirect_utility(&d, &e_a, &x[mimic], alpha);
                if r.slack.abs() > 1e-12 {
                    prop_assert_eq!(own >= other, r.slack >= 0.0);
                }
            }
        }
    }
}
