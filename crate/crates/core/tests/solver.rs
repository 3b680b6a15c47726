use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcl_core::constraints::{build_system, check_mechanism, Mechanism};
use rcl_core::model::{validate_instance, AgentType, BeliefSet, Bounds, RawInstance, StateSpace, UtilitySpec};
use rcl_core::presets::{random_instance, RandomSpec};
use rcl_core::solver::{grid_oracle, principal_value, solve_mechanism, solve_mechanism_from, SolveOptions};
use rcl_core::transform::to_utility_units;

fn opts() -> SolveOptions {
    SolveOptions::default()
}

#[test]
fn solver_dominates_grid_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..8 {
        let inst = random_instance(&mut rng, &RandomSpec::new(2, 2, 2)).unwrap();
        let uu = to_utility_units(&inst).unwrap();
        let grid = grid_oracle(&uu, 4, 10_000_000).unwrap();
        let res = solve_mechanism(&uu, &opts()).unwrap();
        assert!(res.converged);
        assert!(res.value >= grid.result.value - 1e-6, "{} < {}", res.value, grid.result.value);
        assert!(check_mechanism(&build_system(&uu), &res.mechanism, 1e-8).unwrap().feasible);
    }
}

#[test]
fn seeds_are_never_lost() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inst = random_instance(&mut rng, &RandomSpec::new(3, 2, 1)).unwrap();
    let uu = to_utility_units(&inst).unwrap();
    let grid = grid_oracle(&uu, 5, 10_000_000).unwrap().result;
    let quick = SolveOptions { max_iters: 3, ..opts() };
    let res = solve_mechanism_from(&uu, &quick, std::slice::from_ref(&grid.mechanism)).unwrap();
    assert!(res.value >= grid.value);
}

#[test]
fn identical_types_pool_on_the_grid() {
    let inst = validate_instance(RawInstance {
        states: StateSpace::uniform(2).unwrap(),
        types: vec![AgentType::new("a", vec![1.4, 0.6]), AgentType::new("b", vec![1.4, 0.6])],
        principal_belief: None,
        beliefs: BeliefSet::singleton(vec![0.5, 0.5]),
        e_a: vec![2.0, 1.0],
        e_p: vec![2.0, 2.0],
        u: UtilitySpec::log(),
        v: UtilitySpec::cara(0.5),
        bounds: Bounds {
            lo: vec![-0.5, -0.5],
            hi: vec![1.0, 1.0],
        },
        reservation: None,
        principal_model: Default::default(),
    })
    .unwrap();
    let uu = to_utility_units(&inst).unwrap();
    let grid = grid_oracle(&uu, 5, 10_000_000).unwrap().result.mechanism;
    assert_eq!(grid.contract(0), grid.contract(1));
}

#[test]
fn more_priors_never_help() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let big = random_instance(&mut rng, &RandomSpec::new(2, 3, 3)).unwrap();
        let mut small_raw = big.to_raw();
        small_raw.beliefs = BeliefSet::maxmin(big.beliefs.priors[..1].to_vec());
        let small = validate_instance(small_raw).unwrap();
        let big_uu = to_utility_units(&big).unwrap();
        let small_uu = to_utility_units(&small).unwrap();
        let v_big = solve_mechanism(&big_uu, &opts()).unwrap();
        let v_small = solve_mechanism_from(&small_uu, &opts(), std::slice::from_ref(&v_big.mechanism)).unwrap();
        assert!(v_big.value <= v_small.value + 1e-8);
    }
}

#[test]
fn pooling_at_top_is_a_feasible_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inst = random_instance(&mut rng, &RandomSpec::new(3, 3, 2)).unwrap();
    let uu = to_utility_units(&inst).unwrap();
    let top = Mechanism::pooling(3, &uu.c_hi);
    assert!(check_mechanism(&build_system(&uu), &top, 1e-8).unwrap().feasible);
    let res = solve_mechanism(&uu, &opts()).unwrap();
    assert!(res.value >= principal_value(&uu, &top).unwrap().value);
}

#[test]
fn results_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inst = random_instance(&mut rng, &RandomSpec::new(2, 2, 2)).unwrap();
    let uu = to_utility_units(&inst).unwrap();
    let a = solve_mechanism(&uu, &opts()).unwrap();
    let b = solve_mechanism(&uu, &opts()).unwrap();
    assert_eq!(a, b);
}
