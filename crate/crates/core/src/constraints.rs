//! Linear incentive-compatibility and participation constraints in utility
//! units.
//!
//! For types `j ≠ k` the IC row reads `Σ_i q_i d_{j,i}(c_{j,i} − c_{k,i}) ≥ 0`;
//! the IR row for type `j` reads `Σ_i q_i d_{j,i} c_{j,i} ≥ u̲_j`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{weighted_sum, Instance};
use crate::transform::UtilityUnitsInstance;

pub const DEFAULT_TOL: f64 = 1e-8;

/// A type-indexed assignment of utility levels, `n_types × n_atoms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub assignment: Vec<Vec<f64>>,
}

impl Mechanism {
    pub fn new(assignment: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = assignment.first() {
            for row in &assignment {
                check_len("mechanism row", first.len(), row.len())?;
            }
        }
        Ok(Mechanism { assignment })
    }

    /// Every type receives the same contract.
    pub fn pooling(n_types: usize, c: &[f64]) -> Self {
        Mechanism {
            assignment: vec![c.to_vec(); n_types],
        }
    }

    pub fn n_types(&self) -> usize {
        self.assignment.len()
    }

    pub fn contract(&self, j: usize) -> &[f64] {
        &self.assignment[j]
    }

    /// `λ·self + (1−λ)·other`.
    pub fn mix(&self, other: &Mechanism, lambda: f64) -> Mechanism {
        Mechanism {
            assignment: self
                .assignment
                .iter()
                .zip(&other.assignment)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                        .collect()
                })
                .collect(),
        }
    }

    pub(crate) fn flat(&self) -> Vec<f64> {
        self.assignment.concat()
    }

    pub(crate) fn from_flat(flat: &[f64], m: usize) -> Mechanism {
        Mechanism {
            assignment: flat.chunks(m).map(<[f64]>::to_vec).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowKind {
    /// Type `truthful` weakly prefers its own contract to that of `mimic`.
    Ic { truthful: usize, mimic: usize },
    Ir { ty: usize },
}

/// A half-space `Σ_t coeffs_t · c_t ≥ rhs` over the assignment, stored by the
/// (one or two) types it touches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintRow {
    pub kind: RowKind,
    pub terms: Vec<(usize, Vec<f64>)>,
    pub rhs: f64,
}

impl ConstraintRow {
    /// Signed slack `a·c − rhs`; non-negative when satisfied.
    pub fn slack(&self, mech: &Mechanism) -> f64 {
        self.dot(|t| mech.contract(t)) - self.rhs
    }

    pub(crate) fn dot<'a>(&self, contract: impl Fn(usize) -> &'a [f64]) -> f64 {
        match self.kind {
            // Evaluated as one sum over atoms so a pooling mechanism gives
            // exactly zero slack.
            RowKind::Ic { truthful, mimic } => {
                let a = &self.terms[0].1;
                let (cj, ck) = (contract(truthful), contract(mimic));
                a.iter()
                    .zip(cj.iter().zip(ck))
                    .map(|(a, (x, y))| a * (x - y))
                    .sum()
            }
            RowKind::Ir { ty } => {
                let a = &self.terms[0].1;
                a.iter().zip(contract(ty)).map(|(a, x)| a * x).sum()
            }
        }
    }

    pub(crate) fn norm_sq(&self) -> f64 {
        self.terms
            .iter()
            .map(|(_, a)| a.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearConstraintSystem {
    pub n_types: usize,
    pub n_atoms: usize,
    pub rows: Vec<ConstraintRow>,
    pub c_lo: Vec<f64>,
    pub c_hi: Vec<f64>,
}

impl LinearConstraintSystem {
    pub fn ic_rows(&self) -> impl Iterator<Item = &ConstraintRow> {
        self.rows.iter().filter(|r| matches!(r.kind, RowKind::Ic { .. }))
    }

    pub fn ir_rows(&self) -> impl Iterator<Item = &ConstraintRow> {
        self.rows.iter().filter(|r| matches!(r.kind, RowKind::Ir { .. }))
    }
}

/// Assemble the `n(n−1)` IC rows (both orderings of every pair) followed by
/// the `n` IR rows.
pub fn build_system(uu: &UtilityUnitsInstance) -> LinearConstraintSystem {
    let inst = &uu.base;
    let q = &inst.states.ref_prob;
    let weights: Vec<Vec<f64>> = inst
        .types
        .iter()
        .map(|t| q.iter().zip(&t.density).map(|(q, d)| q * d).collect())
        .collect();
    let n = inst.n_types();
    let mut rows = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            if j == k {
                continue;
            }
            let neg: Vec<f64> = weights[j].iter().map(|w| -w).collect();
            rows.push(ConstraintRow {
                kind: RowKind::Ic {
                    truthful: j,
                    mimic: k,
                },
                terms: vec![(j, weights[j].clone()), (k, neg)],
                rhs: 0.0,
            });
        }
    }
    for (j, w) in weights.into_iter().enumerate() {
        rows.push(ConstraintRow {
            kind: RowKind::Ir { ty: j },
            terms: vec![(j, w)],
            rhs: inst.reservation[j],
        });
    }
    LinearConstraintSystem {
        n_types: n,
        n_atoms: inst.n_atoms(),
        rows,
        c_lo: uu.c_lo.clone(),
        c_hi: uu.c_hi.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowSlack {
    #[serde(flatten)]
    pub kind: RowKind,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub rows: Vec<RowSlack>,
    pub max_ic_violation: f64,
    pub max_ir_violation: f64,
    /// Largest excursion of any utility level outside `[c_lo, c_hi]`.
    pub max_bound_violation: f64,
    pub tol: f64,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        self.max_ic_violation
            .max(self.max_ir_violation)
            .max(self.max_bound_violation)
    }

    pub fn ir_slack(&self, ty: usize) -> f64 {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Ir { ty })
            .map_or(f64::NAN, |r| r.slack)
    }

    /// Smallest IC slack over the rows where `ty` reports truthfully;
    /// `+∞` with a single type.
    pub fn min_ic_slack(&self, ty: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| matches!(r.kind, RowKind::Ic { truthful, .. } if truthful == ty))
            .fold(f64::INFINITY, |m, r| m.min(r.slack))
    }
}

pub fn check_mechanism(
    sys: &LinearConstraintSystem,
    mech: &Mechanism,
    tol: f64,
) -> Result<FeasibilityReport> {
    check_len("mechanism types", sys.n_types, mech.n_types())?;
    for row in &mech.assignment {
        check_len("mechanism atoms", sys.n_atoms, row.len())?;
    }
    let mut rows = Vec::with_capacity(sys.rows.len());
    let (mut ic, mut ir) = (0.0_f64, 0.0_f64);
    for r in &sys.rows {
        let slack = r.slack(mech);
        match r.kind {
            RowKind::Ic { .. } => ic = ic.max(-slack),
            RowKind::Ir { .. } => ir = ir.max(-slack),
        }
        rows.push(RowSlack {
            kind: r.kind,
            slack,
        });
    }
    let mut bound = 0.0_f64;
    for c in &mech.assignment {
        for (i, x) in c.iter().enumerate() {
            bound = bound.max(sys.c_lo[i] - x).max(x - sys.c_hi[i]);
        }
    }
    Ok(FeasibilityReport {
        rows,
        max_ic_violation: ic,
        max_ir_violation: ir,
        max_bound_violation: bound,
        tol,
        feasible: ic <= tol && ir <= tol && bound <= tol,
    })
}

/// Direct payoff-unit evaluation of the participation and truth-telling
/// constraints, `E_P[u(e_a + x_P)] ≥ u̲(P)` and
/// `E_P[u(e_a + x_P) − u(e_a + x_P̂)] ≥ 0`, for a mechanism given as transfers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PayoffFeasibility {
    pub max_ic_violation: f64,
    pub max_ir_violation: f64,
    pub feasible: bool,
}

pub fn check_payoff_mechanism(
    instance: &Instance,
    transfers: &[Vec<f64>],
    tol: f64,
) -> Result<PayoffFeasibility> {
    let n = instance.n_types();
    check_len("mechanism types", n, transfers.len())?;
    let q = &instance.states.ref_prob;
    let mut ic = 0.0_f64;
    let mut ir = 0.0_f64;
    for (j, ty) in instance.types.iter().enumerate() {
        for x in transfers {
            check_len("mechanism atoms", instance.n_atoms(), x.len())?;
        }
        let own: Vec<f64> = eval_wealth(instance, &transfers[j])?;
        let val = weighted_sum(q, &ty.density, &own);
        ir = ir.max(instance.reservation[j] - val);
        for (k, xk) in transfers.iter().enumerate() {
            if k == j {
                continue;
            }
            let other = eval_wealth(instance, xk)?;
            let diff: Vec<f64> = own.iter().zip(&other).map(|(a, b)| a - b).collect();
            ic = ic.max(-weighted_sum(q, &ty.density, &diff));
        }
    }
    Ok(PayoffFeasibility {
        max_ic_violation: ic,
        max_ir_violation: ir,
        feasible: ic <= tol && ir <= tol,
    })
}

fn eval_wealth(instance: &Instance, x: &[f64]) -> Result<Vec<f64>> {
    x.iter()
        .zip(&instance.e_a)
        .map(|(x, a)| instance.u.eval(a + x))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Domain(format!("payoff mechanism: {e}")))
}
