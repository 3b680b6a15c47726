//! Delegated contracting: the principal offers a finite menu and each type
//! picks a contract it likes best.
//!
//! `U*(θ, D)` is the agent's best attainable utility, `Φ(θ, D)` the set of
//! contracts attaining it (up to `tie_tol`), and `V*(θ, D)` the principal's
//! best value over `Φ`. Ties inside `Φ` go to the principal by definition.

use serde::Serialize;

use crate::constraints::Mechanism;
use crate::error::{check_len, Error, Result};
use crate::model::{weighted_sum, AgentType, StateSpace, IR_TOL};
use crate::solver::contract_value;
use crate::transform::{UtilityUnitsInstance, BOUND_TOL};

pub const DEFAULT_TIE_TOL: f64 = 1e-9;
/// Contracts closer than this in every coordinate are the same contract.
pub const DEDUP_TOL: f64 = 1e-12;
pub const MAX_CANDIDATES: usize = 16;
pub const MAX_MECHANISM_ASSIGNMENTS: u128 = 10_000_000;
/// Tolerance of the menu/mechanism value comparison.
pub const EQUIVALENCE_TOL: f64 = 1e-9;

/// A finite, non-empty set of utility-level contracts, stored in
/// lexicographic order without duplicates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Menu {
    contracts: Vec<Vec<f64>>,
}

fn same_contract(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= DEDUP_TOL)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

impl Menu {
    pub fn new(contracts: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = contracts.first() else {
            return Err(Error::Precondition("a menu must contain at least one contract".into()));
        };
        let m = first.len();
        let mut kept: Vec<Vec<f64>> = Vec::with_capacity(contracts.len());
        for c in contracts {
            check_len("menu contract atoms", m, c.len())?;
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("menu contract is not finite".into()));
            }
            if !kept.iter().any(|k| same_contract(k, &c)) {
                kept.push(c);
            }
        }
        kept.sort_by(|a, b| lex_cmp(a, b));
        Ok(Menu { contracts: kept })
    }

    pub fn singleton(c: Vec<f64>) -> Result<Self> {
        Self::new(vec![c])
    }

    pub fn contracts(&self) -> &[Vec<f64>] {
        &self.contracts
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    fn check_bounds(&self, uu: &UtilityUnitsInstance) -> Result<()> {
        check_bounds(&self.contracts, uu)
    }
}

fn check_bounds(contracts: &[Vec<f64>], uu: &UtilityUnitsInstance) -> Result<()> {
    for c in contracts {
        check_len("contract atoms", uu.n_atoms(), c.len())?;
        for (i, x) in c.iter().enumerate() {
            if *x < uu.c_lo[i] - BOUND_TOL || *x > uu.c_hi[i] + BOUND_TOL {
                return Err(Error::Range(format!(
                    "contract level {x} at atom {i} outside [{}, {}]",
                    uu.c_lo[i], uu.c_hi[i]
                )));
            }
        }
    }
    Ok(())
}

/// `U*(θ, D)`: the agent's best expected utility from the menu.
pub fn u_star(states: &StateSpace, ty: &AgentType, menu: &Menu) -> f64 {
    menu.contracts
        .iter()
        .map(|c| weighted_sum(&states.ref_prob, &ty.density, c))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `Φ(θ, D)` as indices into [`Menu::contracts`].
pub fn phi(states: &StateSpace, ty: &AgentType, menu: &Menu, tie_tol: f64) -> Vec<usize> {
    let utils: Vec<f64> = menu
        .contracts
        .iter()
        .map(|c| weighted_sum(&states.ref_prob, &ty.density, c))
        .collect();
    argmax_set(&utils, (0..utils.len()).collect::<Vec<_>>().as_slice(), tie_tol)
}

fn argmax_set(utils: &[f64], members: &[usize], tie_tol: f64) -> Vec<usize> {
    let best = members.iter().map(|&k| utils[k]).fold(f64::NEG_INFINITY, f64::max);
    members
        .iter()
        .copied()
        .filter(|&k| utils[k] >= best - tie_tol)
        .collect()
}

/// `V*(θ_j, D)` and the index of the contract attaining it.
pub fn v_star(uu: &UtilityUnitsInstance, ty: usize, menu: &Menu, tie_tol: f64) -> Result<(f64, usize)> {
    menu.check_bounds(uu)?;
    let t = uu.base.types.get(ty).ok_or_else(|| Error::Range(format!("type index {ty}")))?;
    let mut best: Option<(f64, usize)> = None;
    for k in phi(&uu.base.states, t, menu, tie_tol) {
        let v = contract_value(uu, ty, &menu.contracts[k])?;
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, k));
        }
    }
    Ok(best.expect("phi is non-empty"))
}

/// The menus in which every type can reach its reservation utility.
pub fn ir_filter(menus: &[Menu], uu: &UtilityUnitsInstance) -> Vec<Menu> {
    menus.iter().filter(|d| is_ir(d, uu)).cloned().collect()
}

fn is_ir(menu: &Menu, uu: &UtilityUnitsInstance) -> bool {
    let inst = &uu.base;
    inst.types
        .iter()
        .zip(&inst.reservation)
        .all(|(t, r)| u_star(&inst.states, t, menu) >= r - IR_TOL)
}

/// Agent utilities and principal values of every candidate for every type.
struct Tables {
    util: Vec<Vec<f64>>,
    value: Vec<Vec<f64>>,
}

impl Tables {
    fn new(uu: &UtilityUnitsInstance, candidates: &[Vec<f64>]) -> Result<Self> {
        let inst = &uu.base;
        let util = inst
            .types
            .iter()
            .map(|t| {
                candidates
                    .iter()
                    .map(|c| weighted_sum(&inst.states.ref_prob, &t.density, c))
                    .collect()
            })
            .collect();
        let value = (0..inst.n_types())
            .map(|j| candidates.iter().map(|c| contract_value(uu, j, c)).collect())
            .collect::<Result<_>>()?;
        Ok(Tables { util, value })
    }

    /// Per-type `(V*, chosen index)` for the menu `members`, or `None` when
    /// the menu is not individually rational.
    fn menu_choice(&self, members: &[usize], reservation: &[f64], tie_tol: f64) -> Option<Vec<(f64, usize)>> {
        let mut out = Vec::with_capacity(self.util.len());
        for (j, utils) in self.util.iter().enumerate() {
            let best = members.iter().map(|&k| utils[k]).fold(f64::NEG_INFINITY, f64::max);
            if best < reservation[j] - IR_TOL {
                return None;
            }
            let mut choice: Option<(f64, usize)> = None;
            for k in argmax_set(utils, members, tie_tol) {
                let v = self.value[j][k];
                if choice.is_none_or(|(b, _)| v > b) {
                    choice = Some((v, k));
                }
            }
            out.push(choice.expect("menu is non-empty"));
        }
        Some(out)
    }
}

/// Candidates deduplicated in their given order.
fn dedup_candidates(candidates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !kept.iter().any(|k| same_contract(k, c)) {
            kept.push(c.clone());
        }
    }
    kept
}

/// Subsets of `0..k` ordered by cardinality, then lexicographically.
fn ordered_subsets(k: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (1u32..(1u32 << k))
        .map(|mask| (0..k).filter(|&i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MenuSolution {
    pub menu: Menu,
    /// Indices of the chosen contracts in the deduplicated candidate list.
    pub members: Vec<usize>,
    pub value: f64,
    pub worst_prior: usize,
    pub per_type_values: Vec<f64>,
    /// Candidate index each type selects.
    pub selection: Vec<usize>,
}

/// Best menu among all non-empty subsets of the candidates. Duplicate
/// candidates are dropped first; ties prefer fewer contracts, then the
/// lexicographically smallest index set.
pub fn solve_menu(candidates: &[Vec<f64>], uu: &UtilityUnitsInstance) -> Result<MenuSolution> {
    solve_menu_with(candidates, uu, DEFAULT_TIE_TOL)
}

pub fn solve_menu_with(candidates: &[Vec<f64>], uu: &UtilityUnitsInstance, tie_tol: f64) -> Result<MenuSolution> {
    let cand = dedup_candidates(candidates);
    if cand.is_empty() {
        return Err(Error::Precondition("no candidate contracts".into()));
    }
    if cand.len() > MAX_CANDIDATES {
        return Err(Error::Size {
            count: cand.len() as u128,
            cap: MAX_CANDIDATES as u128,
        });
    }
    check_bounds(&cand, uu)?;
    let tables = Tables::new(uu, &cand)?;
    let beliefs = &uu.base.beliefs;
    let mut best: Option<(f64, usize, Vec<usize>, Vec<(f64, usize)>)> = None;
    for members in ordered_subsets(cand.len()) {
        let Some(choice) = tables.menu_choice(&members, &uu.base.reservation, tie_tol) else {
            continue;
        };
        let per_type: Vec<f64> = choice.iter().map(|c| c.0).collect();
        let (v, worst) = beliefs.robust_value(&per_type);
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, worst, members, choice));
        }
    }
    let Some((value, worst_prior, members, choice)) = best else {
        return Err(Error::Precondition(
            "no individually rational menu among the candidates".into(),
        ));
    };
    Ok(MenuSolution {
        menu: Menu::new(members.iter().map(|&k| cand[k].clone()).collect())?,
        members,
        value,
        worst_prior,
        per_type_values: choice.iter().map(|c| c.0).collect(),
        selection: choice.iter().map(|c| c.1).collect(),
    })
}

/// Mechanism giving each type its principal-best agent-optimal contract.
pub fn extract_mechanism(menu: &Menu, uu: &UtilityUnitsInstance, tie_tol: f64) -> Result<Mechanism> {
    menu.check_bounds(uu)?;
    if !is_ir(menu, uu) {
        return Err(Error::Precondition("menu is not individually rational".into()));
    }
    let assignment = (0..uu.n_types())
        .map(|j| v_star(uu, j, menu, tie_tol).map(|(_, k)| menu.contracts[k].clone()))
        .collect::<Result<_>>()?;
    Mechanism::new(assignment)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub menu_value: f64,
    pub mechanism_value: f64,
    /// Value with the incentive constraints dropped.
    pub relaxed_value: f64,
    pub gap: f64,
    pub tol: f64,
    pub passed: bool,
    pub candidates: Vec<Vec<f64>>,
    pub witness_menu: Menu,
    pub witness_menu_members: Vec<usize>,
    pub witness_mechanism: Mechanism,
    /// Candidate index assigned to each type by the witness mechanism.
    pub witness_assignment: Vec<usize>,
    /// `Φ(θ_j, D*)` per type, as candidate indices.
    pub phi_sets: Vec<Vec<usize>>,
    pub menus_evaluated: usize,
    pub assignments_evaluated: u128,
}

/// Optimal value over candidate menus against optimal value over IC/IR
/// assignments of candidates to types, both by exhaustive enumeration.
pub fn equivalence_check(candidates: &[Vec<f64>], uu: &UtilityUnitsInstance) -> Result<EquivalenceReport> {
    let tie_tol = DEFAULT_TIE_TOL;
    let menu = solve_menu_with(candidates, uu, tie_tol)?;
    let cand = dedup_candidates(candidates);
    let (n, k) = (uu.n_types(), cand.len());
    let count = (k as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if count > MAX_MECHANISM_ASSIGNMENTS {
        return Err(Error::Size {
            count,
            cap: MAX_MECHANISM_ASSIGNMENTS,
        });
    }
    let tables = Tables::new(uu, &cand)?;
    let reservation = &uu.base.reservation;
    let beliefs = &uu.base.beliefs;

    let mut search = AssignmentSearch {
        tables: &tables,
        reservation,
        tie_tol,
        current: vec![0; n],
        best: None,
        beliefs,
    };
    search.descend(0);
    let Some((mechanism_value, assignment)) = search.best else {
        return Err(Error::Precondition("no IC/IR assignment of candidates".into()));
    };

    let relaxed: Vec<f64> = (0..n)
        .map(|j| {
            (0..k)
                .filter(|&a| tables.util[j][a] >= reservation[j] - IR_TOL)
                .map(|a| tables.value[j][a])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (relaxed_value, _) = beliefs.robust_value(&relaxed);

    let phi_sets = (0..n)
        .map(|j| argmax_set(&tables.util[j], &menu.members, tie_tol))
        .collect();
    let gap = (menu.value - mechanism_value).abs();
    Ok(EquivalenceReport {
        menu_value: menu.value,
        mechanism_value,
        relaxed_value,
        gap,
        tol: EQUIVALENCE_TOL,
        passed: gap <= EQUIVALENCE_TOL,
        witness_mechanism: Mechanism::new(assignment.iter().map(|&a| cand[a].clone()).collect())?,
        witness_assignment: assignment,
        witness_menu: menu.menu,
        witness_menu_members: menu.members,
        phi_sets,
        menus_evaluated: (1usize << k) - 1,
        assignments_evaluated: count,
        candidates: cand,
    })
}

struct AssignmentSearch<'a> {
    tables: &'a Tables,
    reservation: &'a [f64],
    tie_tol: f64,
    current: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
    beliefs: &'a crate::model::BeliefSet,
}

impl AssignmentSearch<'_> {
    fn descend(&mut self, j: usize) {
        let n = self.current.len();
        if j == n {
            let per_type: Vec<f64> = (0..n).map(|t| self.tables.value[t][self.current[t]]).collect();
            let (v, _) = self.beliefs.robust_value(&per_type);
            if self.best.as_ref().is_none_or(|(b, _)| v > *b) {
                self.best = Some((v, self.current.clone()));
            }
            return;
        }
        let util = &self.tables.util;
        for a in 0..util[j].len() {
            if util[j][a] < self.reservation[j] - IR_TOL {
                continue;
            }
            let compatible = (0..j).all(|k| {
                let b = self.current[k];
                util[j][a] - util[j][b] >= -self.tie_tol && util[k][b] - util[k][a] >= -self.tie_tol
            });
            if compatible {
                self.current[j] = a;
                self.descend(j + 1);
            }
        }
    }
}
