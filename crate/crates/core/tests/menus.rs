use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcl_core::constraints::{build_system, check_mechanism};
use rcl_core::menu::{equivalence_check, extract_mechanism, ir_filter, solve_menu, Menu, DEFAULT_TIE_TOL};
use rcl_core::presets::{random_candidates, random_instance, RandomSpec};
use rcl_core::solver::{contract_value, principal_value};
use rcl_core::transform::to_utility_units;

#[test]
fn equivalence_on_random_two_type_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..25 {
        let inst = random_instance(&mut rng, &RandomSpec::new(2, 2, 2)).unwrap();
        let uu = to_utility_units(&inst).unwrap();
        let cand = random_candidates(&mut rng, &uu, 4);
        let r = equivalence_check(&cand, &uu).unwrap();
        assert!(r.passed, "gap {}", r.gap);
        assert!(r.relaxed_value >= r.menu_value - 1e-12);
    }
}

#[test]
fn single_type_reduces_to_best_ir_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let inst = random_instance(&mut rng, &RandomSpec::new(3, 1, 1)).unwrap();
        let uu = to_utility_units(&inst).unwrap();
        let cand = random_candidates(&mut rng, &uu, 5);
        let r = equivalence_check(&cand, &uu).unwrap();
        let best = cand
            .iter()
            .filter(|c| {
                let u: f64 = (0..3).map(|i| inst.states.ref_prob[i] * inst.types[0].density[i] * c[i]).sum();
                u >= inst.reservation[0] - 1e-9
            })
            .map(|c| contract_value(&uu, 0, c).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.menu_value, best);
        assert_eq!(r.mechanism_value, best);
        assert_eq!(r.witness_menu.len(), 1);
    }
}

#[test]
fn extracted_mechanisms_are_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.gen_range(1..=3);
        let inst = random_instance(&mut rng, &RandomSpec::new(2, n, 2)).unwrap();
        let uu = to_utility_units(&inst).unwrap();
        let size = rng.gen_range(1..=5);
        let menu = Menu::new(random_candidates(&mut rng, &uu, size)).unwrap();
        if ir_filter(std::slice::from_ref(&menu), &uu).is_empty() {
            continue;
        }
        let mech = extract_mechanism(&menu, &uu, DEFAULT_TIE_TOL).unwrap();
        assert!(check_mechanism(&build_system(&uu), &mech, 1e-8).unwrap().feasible);
        checked += 1;
    }
}

#[test]
fn extraction_preserves_the_menu_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, &RandomSpec::new(3, 3, 3)).unwrap();
        let uu = to_utility_units(&inst).unwrap();
        let cand = random_candidates(&mut rng, &uu, 6);
        let sol = solve_menu(&cand, &uu).unwrap();
        let mech = extract_mechanism(&sol.menu, &uu, DEFAULT_TIE_TOL).unwrap();
        assert_eq!(principal_value(&uu, &mech).unwrap().value, sol.value);
    }
}

#[test]
fn report_serializes() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let inst = random_instance(&mut rng, &RandomSpec::new(2, 2, 1)).unwrap();
    let uu = to_utility_units(&inst).unwrap();
    let cand = random_candidates(&mut rng, &uu, 4);
    let r = equivalence_check(&cand, &uu).unwrap();
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["menu_value", "mechanism_value", "witness_menu", "witness_mechanism", "phi_sets"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}
