//! The principal's robust problem over incentive-compatible, individually
//! rational mechanisms.
//!
//! The objective `mech ↦ min_κ {Σ_j κ_j V_j(c_j) + α(κ)}` is concave in utility
//! units because `v` is concave and `u⁻¹` is convex. [`solve_mechanism`]
//! maximizes it by projected subgradient ascent, projecting each step onto
//! the box and the IC/IR half-spaces with Dykstra's algorithm.
//! [`grid_oracle`] is an independent exhaustive search over a level grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constraints::{build_system, check_mechanism, FeasibilityReport, LinearConstraintSystem, Mechanism, RowKind, DEFAULT_TOL};
use crate::error::{check_len, Error, Result};
use crate::market::delegation_wealth;
use crate::model::PrincipalModel;
use crate::transform::{from_utility_units, UtilityUnitsInstance};

/// Principal's expected utility `V(θ_j, c)` from handing contract `c` to
/// type `j`.
pub fn contract_value(uu: &UtilityUnitsInstance, ty: usize, c: &[f64]) -> Result<f64> {
    let inst = &uu.base;
    check_len("utility levels", inst.n_atoms(), c.len())?;
    let q = &inst.states.ref_prob;
    let dp = &inst.principal_belief.density;
    let wealth = principal_wealth(uu, ty, c)?;
    let mut total = 0.0;
    for i in 0..c.len() {
        total += q[i] * dp[i] * inst.v.eval(wealth[i])?;
    }
    Ok(total)
}

/// Principal's terminal wealth per atom when type `ty` holds `c`.
fn principal_wealth(uu: &UtilityUnitsInstance, ty: usize, c: &[f64]) -> Result<Vec<f64>> {
    let inst = &uu.base;
    let z: Vec<f64> = c
        .iter()
        .map(|&ci| inst.u.inverse(ci))
        .collect::<Result<_>>()?;
    match inst.principal_model {
        PrincipalModel::Standard => Ok(z
            .iter()
            .enumerate()
            .map(|(i, z)| inst.e_p[i] + inst.e_a[i] - z)
            .collect()),
        PrincipalModel::Delegation { beta } => {
            let x: Vec<f64> = z.iter().zip(&inst.e_a).map(|(z, a)| z - a).collect();
            delegation_wealth(
                &inst.states.ref_prob,
                &inst.types[ty].density,
                &inst.e_a,
                &inst.e_p,
                &x,
                beta,
            )
        }
    }
}

/// Gradient of [`contract_value`] with respect to the utility levels.
pub fn contract_value_grad(uu: &UtilityUnitsInstance, ty: usize, c: &[f64]) -> Result<Vec<f64>> {
    let inst = &uu.base;
    check_len("utility levels", inst.n_atoms(), c.len())?;
    let q = &inst.states.ref_prob;
    let dp = &inst.principal_belief.density;
    let wealth = principal_wealth(uu, ty, c)?;
    let mut dz = Vec::with_capacity(c.len());
    for &ci in c {
        let z = inst.u.inverse(ci)?;
        let slope = inst.u.deriv(z)?;
        dz.push(if slope.is_finite() { 1.0 / slope } else { 0.0 });
    }
    let vprime: Vec<f64> = wealth
        .iter()
        .map(|&w| inst.v.deriv(w))
        .collect::<Result<_>>()?;
    let grad = match inst.principal_model {
        PrincipalModel::Standard => (0..c.len())
            .map(|i| -q[i] * dp[i] * vprime[i] * dz[i])
            .collect(),
        PrincipalModel::Delegation { beta } => {
            let k = (1.0 - beta) / beta;
            let d = &inst.types[ty].density;
            let spill: f64 = (0..c.len()).map(|i| q[i] * dp[i] * vprime[i] / d[i]).sum();
            (0..c.len())
                .map(|l| {
                    let dx = -(1.0 + k) * q[l] * dp[l] * vprime[l] + k * q[l] * d[l] * spill;
                    dx * dz[l]
                })
                .collect()
        }
    };
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrincipalValue {
    pub value: f64,
    pub worst_prior: usize,
    pub per_type: Vec<f64>,
}

/// Robust value `min_κ {Σ_j κ_j V_j + α(κ)}` of a mechanism and the index of
/// the minimizing prior (lowest index on ties).
pub fn principal_value(uu: &UtilityUnitsInstance, mech: &Mechanism) -> Result<PrincipalValue> {
    check_len("mechanism types", uu.n_types(), mech.n_types())?;
    let per_type: Vec<f64> = (0..uu.n_types())
        .map(|j| contract_value(uu, j, mech.contract(j)))
        .collect::<Result<_>>()?;
    let (value, worst_prior) = uu.base.beliefs.robust_value(&per_type);
    Ok(PrincipalValue {
        value,
        worst_prior,
        per_type,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Step scale `a` in `a/√t`; `None` uses `0.1 ×` the widest utility box.
    pub step_scale: Option<f64>,
    pub tol: f64,
    pub max_sweeps: usize,
    pub seed: u64,
    /// Record a trace row every this many iterations.
    pub trace_every: usize,
    /// Stop once the best feasible value gains at most `tol·max(1, |value|)`
    /// over this many iterations; `0` disables the test.
    pub patience: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 50_000,
            step_scale: None,
            tol: DEFAULT_TOL,
            max_sweeps: 1000,
            seed: 42,
            trace_every: 100,
            patience: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub value: f64,
    pub max_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveResult {
    pub mechanism: Mechanism,
    /// Payoff-unit transfers `x_j = u⁻¹(c_j) − e_a`.
    pub transfers: Vec<Vec<f64>>,
    pub value: f64,
    pub worst_prior: usize,
    pub per_type_values: Vec<f64>,
    pub iterations: usize,
    pub projection_failures: usize,
    pub feasibility: FeasibilityReport,
    pub converged: bool,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

/// Cyclic Dykstra projection onto `{box} ∩ {IC/IR half-spaces}`.
struct Projector {
    m: usize,
    rows: Vec<HalfSpace>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

struct HalfSpace {
    a: Vec<f64>,
    pos: usize,
    neg: Option<usize>,
    rhs: f64,
    norm_sq: f64,
}

impl HalfSpace {
    fn dot(&self, x: &[f64], m: usize) -> f64 {
        let p = &x[self.pos * m..(self.pos + 1) * m];
        match self.neg {
            Some(k) => {
                let n = &x[k * m..(k + 1) * m];
                self.a.iter().zip(p.iter().zip(n)).map(|(a, (x, y))| a * (x - y)).sum()
            }
            None => self.a.iter().zip(p).map(|(a, x)| a * x).sum(),
        }
    }

    fn shift(&self, x: &mut [f64], m: usize, t: f64) {
        for (i, a) in self.a.iter().enumerate() {
            x[self.pos * m + i] += t * a;
            if let Some(k) = self.neg {
                x[k * m + i] -= t * a;
            }
        }
    }
}

impl Projector {
    fn new(sys: &LinearConstraintSystem) -> Self {
        let m = sys.n_atoms;
        let rows = sys
            .rows
            .iter()
            .map(|r| {
                let (pos, neg) = match r.kind {
                    RowKind::Ic { truthful, mimic } => (truthful, Some(mimic)),
                    RowKind::Ir { ty } => (ty, None),
                };
                HalfSpace {
                    a: r.terms[0].1.clone(),
                    pos,
                    neg,
                    rhs: r.rhs,
                    norm_sq: r.norm_sq(),
                }
            })
            .collect();
        let lo = (0..sys.n_types).flat_map(|_| sys.c_lo.iter().copied()).collect();
        let hi = (0..sys.n_types).flat_map(|_| sys.c_hi.iter().copied()).collect();
        Projector { m, rows, lo, hi }
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .fold(0.0_f64, |v, r| v.max(r.rhs - r.dot(x, self.m)))
    }

    fn clamp(&self, x: &mut [f64]) {
        for ((x, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *x = x.clamp(*lo, *hi);
        }
    }

    /// Returns the final residual and whether it reached `tol`.
    fn project(&self, x: &mut [f64], tol: f64, max_sweeps: usize) -> (f64, bool) {
        self.clamp(x);
        let mut residual = self.max_violation(x);
        if residual <= tol {
            return (residual, true);
        }
        let mut mu = vec![0.0; self.rows.len()];
        let mut box_inc = vec![0.0; x.len()];
        let mut z = vec![0.0; x.len()];
        for _ in 0..max_sweeps {
            for (r, mu_r) in self.rows.iter().zip(mu.iter_mut()) {
                // z = y + μ a; project z; y' = z − μ' a
                let s = r.dot(x, self.m) + *mu_r * r.norm_sq - r.rhs;
                let new_mu = if s >= 0.0 { 0.0 } else { s / r.norm_sq };
                r.shift(x, self.m, *mu_r - new_mu);
                *mu_r = new_mu;
            }
            for i in 0..x.len() {
                z[i] = x[i] + box_inc[i];
                x[i] = z[i].clamp(self.lo[i], self.hi[i]);
                box_inc[i] = z[i] - x[i];
            }
            residual = self.max_violation(x);
            if residual <= tol {
                return (residual, true);
            }
        }
        (residual, false)
    }
}

fn objective_and_grad(
    uu: &UtilityUnitsInstance,
    flat: &[f64],
) -> Result<(PrincipalValue, Vec<f64>)> {
    let m = uu.n_atoms();
    let mech = Mechanism::from_flat(flat, m);
    let pv = principal_value(uu, &mech)?;
    let prior = &uu.base.beliefs.priors[pv.worst_prior];
    let mut grad = Vec::with_capacity(flat.len());
    for (j, &w) in prior.iter().enumerate() {
        let g = contract_value_grad(uu, j, mech.contract(j))?;
        grad.extend(g.into_iter().map(|g| w * g));
    }
    Ok((pv, grad))
}

pub fn solve_mechanism(uu: &UtilityUnitsInstance, opts: &SolveOptions) -> Result<SolveResult> {
    solve_mechanism_from(uu, opts, &[])
}

/// [`solve_mechanism`] seeded with user mechanisms. The returned value is at
/// least that of every feasible seed.
pub fn solve_mechanism_from(
    uu: &UtilityUnitsInstance,
    opts: &SolveOptions,
    seeds: &[Mechanism],
) -> Result<SolveResult> {
    if opts.max_iters == 0 || opts.max_sweeps == 0 || !(opts.tol > 0.0) {
        return Err(Error::Precondition("solve options must be positive".into()));
    }
    let sys = build_system(uu);
    let proj = Projector::new(&sys);
    let (n, m) = (uu.n_types(), uu.n_atoms());

    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |flat: &[f64], value: f64, best: &mut Option<(f64, Vec<f64>)>| {
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            *best = Some((value, flat.to_vec()));
        }
    };

    // Pooling at the upper bound is individually rational by validation.
    let top = Mechanism::pooling(n, &uu.c_hi).flat();
    let mut candidates = vec![top];
    for s in seeds {
        check_len("seed mechanism types", n, s.n_types())?;
        candidates.push(s.flat());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut random: Vec<f64> = (0..n * m)
        .map(|k| {
            let i = k % m;
            rng.gen_range(uu.c_lo[i]..=uu.c_hi[i])
        })
        .collect();
    let mut failures = 0;
    if proj.project(&mut random, opts.tol, opts.max_sweeps).1 {
        candidates.push(random);
    } else {
        failures += 1;
    }
    let mut start = None;
    for c in &candidates {
        let mech = Mechanism::from_flat(c, m);
        if check_mechanism(&sys, &mech, opts.tol)?.feasible {
            let v = principal_value(uu, &mech)?.value;
            consider(c, v, &mut best);
            if start.as_ref().is_none_or(|(sv, _)| v > *sv) {
                start = Some((v, c.clone()));
            }
        }
    }
    let Some((_, mut x)) = start else {
        return Err(Error::Precondition("no feasible starting mechanism".into()));
    };

    let a = opts.step_scale.unwrap_or(0.1 * uu.bound_range());
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut residual = 0.0;
    let mut checkpoint = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
    for t in 1..=opts.max_iters {
        iterations = t;
        let (pv, grad) = objective_and_grad(uu, &x)?;
        if residual <= opts.tol {
            consider(&x, pv.value, &mut best);
        }
        if opts.patience > 0 && t % opts.patience == 0 {
            let current = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            if current - checkpoint <= opts.tol * current.abs().max(1.0) {
                break;
            }
            checkpoint = current;
        }
        if opts.trace_every > 0 && (t == 1 || t % opts.trace_every == 0) {
            trace.push(TraceRow {
                iter: t,
                value: pv.value,
                max_violation: residual,
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let step = a / (t as f64).sqrt() / norm;
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi += step * g;
        }
        let (r, ok) = proj.project(&mut x, opts.tol, opts.max_sweeps);
        residual = r;
        if !ok {
            failures += 1;
        }
    }
    if residual <= opts.tol {
        let v = principal_value(uu, &Mechanism::from_flat(&x, m))?.value;
        consider(&x, v, &mut best);
    }

    let (_, flat) = best.expect("start mechanism is feasible");
    let mechanism = Mechanism::from_flat(&flat, m);
    let feasibility = check_mechanism(&sys, &mechanism, opts.tol)?;
    let pv = principal_value(uu, &mechanism)?;
    let transfers = mechanism
        .assignment
        .iter()
        .map(|c| from_utility_units(uu, c))
        .collect::<Result<_>>()?;
    let converged = feasibility.feasible && residual <= opts.tol;
    Ok(SolveResult {
        mechanism,
        transfers,
        value: pv.value,
        worst_prior: pv.worst_prior,
        per_type_values: pv.per_type,
        iterations,
        projection_failures: failures,
        feasibility,
        converged,
        trace,
    })
}

/// Hard cap on the number of assignments [`grid_oracle`] will enumerate.
pub const ORACLE_HARD_CAP: u128 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    #[serde(flatten)]
    pub result: SolveResult,
    pub levels_per_atom: usize,
    pub assignments: u128,
    pub feasible_assignments: u64,
    /// `max − min` of the per-type contract values over the grid.
    pub objective_range: f64,
}

/// Number of assignments `levels^(m·n)` the oracle would enumerate.
pub fn oracle_count(uu: &UtilityUnitsInstance, levels: usize) -> u128 {
    let exp = (uu.n_atoms() * uu.n_types()) as u32;
    (levels as u128).checked_pow(exp).unwrap_or(u128::MAX)
}

/// Exhaustive search over assignments of grid contracts to types.
///
/// Each atom takes `levels` equally spaced utility levels in `[c_lo, c_hi]`.
/// Ties resolve to the lexicographically smallest assignment.
pub fn grid_oracle(
    uu: &UtilityUnitsInstance,
    levels: usize,
    max_assignments: u128,
) -> Result<OracleResult> {
    if !(2..=5).contains(&levels) {
        return Err(Error::Precondition(format!(
            "levels per atom must be in 2..=5, got {levels}"
        )));
    }
    let count = oracle_count(uu, levels);
    let cap = max_assignments.min(ORACLE_HARD_CAP);
    if count > cap {
        return Err(Error::Size { count, cap });
    }
    let n = uu.n_types();
    let grid = level_grid(uu, levels);
    let inst = &uu.base;
    let q = &inst.states.ref_prob;
    let util: Vec<Vec<f64>> = inst
        .types
        .iter()
        .map(|t| {
            grid.iter()
                .map(|c| crate::model::weighted_sum(q, &t.density, c))
                .collect()
        })
        .collect();
    let value: Vec<Vec<f64>> = (0..n)
        .map(|j| grid.iter().map(|c| contract_value(uu, j, c)).collect())
        .collect::<Result<_>>()?;
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in value.iter().flatten() {
        vmin = vmin.min(*v);
        vmax = vmax.max(*v);
    }

    let tol = DEFAULT_TOL;
    let mut search = OracleSearch {
        util: &util,
        value: &value,
        reservation: &inst.reservation,
        beliefs: &inst.beliefs,
        tol,
        current: vec![0; n],
        best: None,
        feasible: 0,
    };
    search.descend(0);
    let Some((_, choice)) = search.best else {
        return Err(Error::Precondition("no feasible assignment on the grid".into()));
    };
    let feasible_assignments = search.feasible;
    let mechanism = Mechanism::new(choice.iter().map(|&a| grid[a].clone()).collect())?;
    let sys = build_system(uu);
    let feasibility = check_mechanism(&sys, &mechanism, tol)?;
    let pv = principal_value(uu, &mechanism)?;
    let transfers = mechanism
        .assignment
        .iter()
        .map(|c| from_utility_units(uu, c))
        .collect::<Result<_>>()?;
    Ok(OracleResult {
        result: SolveResult {
            mechanism,
            transfers,
            value: pv.value,
            worst_prior: pv.worst_prior,
            per_type_values: pv.per_type,
            iterations: count as usize,
            projection_failures: 0,
            converged: feasibility.feasible,
            feasibility,
            trace: Vec::new(),
        },
        levels_per_atom: levels,
        assignments: count,
        feasible_assignments,
        objective_range: vmax - vmin,
    })
}

/// All grid contracts in lexicographic order of their level indices.
fn level_grid(uu: &UtilityUnitsInstance, levels: usize) -> Vec<Vec<f64>> {
    let m = uu.n_atoms();
    let total = levels.pow(m as u32);
    (0..total)
        .map(|mut idx| {
            let mut digits = vec![0; m];
            for i in (0..m).rev() {
                digits[i] = idx % levels;
                idx /= levels;
            }
            digits
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    if l + 1 == levels {
                        uu.c_hi[i]
                    } else {
                        uu.c_lo[i] + (uu.c_hi[i] - uu.c_lo[i]) * l as f64 / (levels - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

struct OracleSearch<'a> {
    util: &'a [Vec<f64>],
    value: &'a [Vec<f64>],
    reservation: &'a [f64],
    beliefs: &'a crate::model::BeliefSet,
    tol: f64,
    current: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
    feasible: u64,
}

impl OracleSearch<'_> {
    fn descend(&mut self, j: usize) {
        let n = self.current.len();
        if j == n {
            self.feasible += 1;
            let per_type: Vec<f64> = (0..n).map(|t| self.value[t][self.current[t]]).collect();
            let (v, _) = self.beliefs.robust_value(&per_type);
            if self.best.as_ref().is_none_or(|(b, _)| v > *b) {
                self.best = Some((v, self.current.clone()));
            }
            return;
        }
        for a in 0..self.util[j].len() {
            if self.util[j][a] < self.reservation[j] - self.tol {
                continue;
            }
            let compatible = (0..j).all(|k| {
                let b = self.current[k];
                self.util[j][a] - self.util[j][b] >= -self.tol
                    && self.util[k][b] - self.util[k][a] >= -self.tol
            });
            if compatible {
                self.current[j] = a;
                self.descend(j + 1);
            }
        }
    }
}
