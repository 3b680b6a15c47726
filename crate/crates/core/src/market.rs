//! Financial-market applications on a discretized terminal state.
//!
//! The terminal Brownian value `W_T ~ N(0, T)` is replaced by a Gauss–Hermite
//! rule. An agent type is a bounded drift function `f` with `f(0) = 0`,
//! entering only through its node values; its pricing measure has density
//! proportional to `e^{f(W_T)}`. Densities are always renormalized and the
//! raw normalizer `Z = E_Q[e^{f(W_T)}]` is reported so that departures from
//! `Z = 1` stay visible.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{
    validate_instance, AgentType, BeliefSet, Bounds, Domain, Instance, PrincipalModel, RawInstance,
    StateSpace, UtilityFamily, UtilitySpec, BETA_MIN,
};

pub const MAX_NODES: usize = 200;
/// Largest `|f|` accepted before `e^f` is considered an overflow risk.
pub const MAX_TILT: f64 = 700.0;
/// Tolerance for the budget and utility postconditions of the closed forms.
pub const CLOSED_FORM_TOL: f64 = 1e-9;

/// Gauss–Hermite nodes and weights for `N(0, horizon)`, sorted ascending,
/// exactly symmetric about zero, weights summing to one.
pub fn discretize_terminal(horizon: f64, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if m < 2 {
        return Err(Error::Precondition(format!("need at least 2 nodes, got {m}")));
    }
    if m > MAX_NODES {
        return Err(Error::Size {
            count: m as u128,
            cap: MAX_NODES as u128,
        });
    }
    // Golub–Welsch for starting values, then Newton on the orthonormal
    // probabilists' Hermite polynomial p_m.
    let jacobi = DMatrix::from_fn(m, m, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    let mut weights = Vec::with_capacity(m);
    for x in nodes.iter_mut() {
        for _ in 0..10 {
            let (pm, pm1, _) = hermite_orthonormal(*x, m);
            let dx = pm / ((m as f64).sqrt() * pm1);
            *x -= dx;
            if dx.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        weights.push(1.0 / hermite_orthonormal(*x, m).2);
    }
    // Mirror the positive half so the rule is symmetric bit for bit.
    for i in 0..m / 2 {
        let k = m - 1 - i;
        let x = 0.5 * (nodes[k] - nodes[i]);
        let w = 0.5 * (weights[k] + weights[i]);
        nodes[i] = -x;
        nodes[k] = x;
        weights[i] = w;
        weights[k] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    let total: f64 = pairwise_sum(&weights);
    let scale = horizon.sqrt();
    Ok((
        nodes.into_iter().map(|x| x * scale).collect(),
        weights.into_iter().map(|w| w / total).collect(),
    ))
}

/// `(p_m(x), p_{m−1}(x), Σ_{k<m} p_k(x)²)` for the orthonormal polynomials
/// of the standard normal law.
fn hermite_orthonormal(x: f64, m: usize) -> (f64, f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    let mut sum_sq = 0.0;
    for k in 0..m {
        sum_sq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum_sq)
}

/// Sum symmetric pairs first so that the odd moments of a symmetric rule
/// cancel exactly.
fn pairwise_sum(v: &[f64]) -> f64 {
    let m = v.len();
    let mut total = if m % 2 == 1 { v[m / 2] } else { 0.0 };
    for i in 0..m / 2 {
        total += v[i] + v[m - 1 - i];
    }
    total
}

/// A drift type described either by its node values or by a parametric
/// family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    /// `f` at every node of the grid.
    Values { label: String, values: Vec<f64> },
    /// `f(w) = slope · clamp(w, −support, support)`.
    ClampedLinear {
        label: String,
        slope: f64,
        support: f64,
    },
    /// `f ≡ 0`, the reference measure.
    Zero { label: String },
}

impl DriftSpec {
    pub fn label(&self) -> &str {
        match self {
            DriftSpec::Values { label, .. }
            | DriftSpec::ClampedLinear { label, .. }
            | DriftSpec::Zero { label } => label,
        }
    }

    pub fn evaluate(&self, nodes: &[f64]) -> Result<DriftType> {
        let values = match self {
            DriftSpec::Values { values, .. } => {
                check_len("drift values", nodes.len(), values.len())?;
                values.clone()
            }
            DriftSpec::ClampedLinear { slope, support, .. } => {
                if !(*support > 0.0) {
                    return Err(Error::Domain("clamped-linear support must be positive".into()));
                }
                nodes.iter().map(|w| slope * w.clamp(-support, *support)).collect()
            }
            DriftSpec::Zero { .. } => vec![0.0; nodes.len()],
        };
        Ok(DriftType {
            label: self.label().to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftType {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub horizon: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub drift_types: Vec<DriftType>,
}

/// Explicit quadrature grid for a drift file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// JSON drift-type document: either a node count for the Gauss–Hermite rule
/// or an explicit grid, plus drift specifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftFile {
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    pub drifts: Vec<DriftSpec>,
}

impl DriftFile {
    pub fn into_model(self) -> Result<MarketModel> {
        let (nodes, weights) = match (self.grid, self.nodes) {
            (Some(g), _) => (g.nodes, g.weights),
            (None, Some(m)) => discretize_terminal(self.horizon, m)?,
            (None, None) => return Err(Error::Precondition("drift file needs nodes or grid".into())),
        };
        MarketModel::new(self.horizon, nodes, weights, &self.drifts)
    }
}

impl MarketModel {
    pub fn new(horizon: f64, nodes: Vec<f64>, weights: Vec<f64>, drifts: &[DriftSpec]) -> Result<Self> {
        check_len("quadrature weights", nodes.len(), weights.len())?;
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Domain(format!("quadrature weights must be positive and sum to 1, got {total}")));
        }
        let m = nodes.len();
        for i in 0..m {
            if (nodes[i] + nodes[m - 1 - i]).abs() > 1e-12 * (1.0 + nodes[i].abs()) {
                return Err(Error::Domain("quadrature nodes must be symmetric about 0".into()));
            }
        }
        let drift_types = drifts
            .iter()
            .map(|d| d.evaluate(&nodes))
            .collect::<Result<Vec<_>>>()?;
        for f in &drift_types {
            if f.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("drift {} is not bounded", f.label)));
            }
            if let Some(z) = nodes.iter().position(|&w| w == 0.0) {
                if f.values[z].abs() > 1e-12 {
                    return Err(Error::Domain(format!("drift {} violates f(0) = 0", f.label)));
                }
            }
        }
        Ok(MarketModel {
            horizon,
            nodes,
            weights,
            drift_types,
        })
    }

    pub fn gauss_hermite(horizon: f64, m: usize, drifts: &[DriftSpec]) -> Result<Self> {
        let (nodes, weights) = discretize_terminal(horizon, m)?;
        Self::new(horizon, nodes, weights, drifts)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn drift(&self, f_index: usize) -> Result<&DriftType> {
        self.drift_types.get(f_index).ok_or_else(|| {
            Error::Range(format!(
                "drift index {f_index} out of range ({} types)",
                self.drift_types.len()
            ))
        })
    }

    pub fn states(&self) -> Result<StateSpace> {
        let atoms = self.nodes.iter().map(|w| format!("{w}")).collect();
        // The weights may miss 1 by a few ulps; the state space check is 1e-12.
        StateSpace::new(atoms, self.weights.clone())
    }
}

/// Normalized density `d_i = e^{f(w_i)} / Z` of the type's pricing measure.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TiltedDensity {
    pub density: Vec<f64>,
    pub weights: Vec<f64>,
    /// `Z = Σ q_i e^{f(w_i)}`; `Z = 1` when the raw tilt is already a density.
    pub normalizer: f64,
}

impl TiltedDensity {
    /// A density given directly, already normalized against `weights`.
    pub fn from_density(weights: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        check_len("density", weights.len(), density.len())?;
        let mass: f64 = weights.iter().zip(&density).map(|(q, d)| q * d).sum();
        if (mass - 1.0).abs() > 1e-10 || density.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Domain(format!("density must be positive with mass 1, got {mass}")));
        }
        Ok(TiltedDensity {
            density,
            weights,
            normalizer: 1.0,
        })
    }

    /// `E_f[x] = Σ q_i d_i x_i`.
    pub fn expect(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&self.density)
            .zip(x)
            .map(|((q, d), x)| q * d * x)
            .sum()
    }

    /// `E_Q[x] = Σ q_i x_i`.
    pub fn expect_ref(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(q, x)| q * x).sum()
    }
}

pub fn tilted_density(model: &MarketModel, f_index: usize) -> Result<TiltedDensity> {
    let f = model.drift(f_index)?;
    if let Some(v) = f.values.iter().find(|v| v.abs() > MAX_TILT) {
        return Err(Error::Range(format!("drift value {v} overflows e^f")));
    }
    let raw: Vec<f64> = f.values.iter().map(|v| v.exp()).collect();
    let z: f64 = model.weights.iter().zip(&raw).map(|(q, e)| q * e).sum();
    Ok(TiltedDensity {
        density: raw.iter().map(|e| e / z).collect(),
        weights: model.weights.clone(),
        normalizer: z,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `H(P|Q) = E_P[ln dP/dQ] = Σ q d ln d`.
    PQ,
    /// `H(Q|P) = E_Q[ln dQ/dP] = −Σ q ln d`.
    QP,
}

pub fn relative_entropy(d: &TiltedDensity, direction: Direction) -> f64 {
    let terms = d.weights.iter().zip(&d.density);
    match direction {
        Direction::PQ => terms.map(|(q, d)| q * d * d.ln()).sum(),
        Direction::QP => -terms.map(|(q, d)| q * d.ln()).sum::<f64>(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarketOptimum {
    pub x_star: Vec<f64>,
    pub utility: f64,
    /// `E_f[e_a]`.
    pub endowment_value: f64,
    pub entropy: f64,
    pub budget_residual: f64,
}

/// CARA agent `u(y) = 1 − e^{−αy}`: optimal claim
/// `x* = −ln(d)/α + E_f[e_a] + H(P_f|Q)/α` with utility
/// `1 − e^{−αE_f[e_a] − H(P_f|Q)}`.
pub fn cara_optimal(model: &MarketModel, f_index: usize, e_a: &[f64], alpha: f64) -> Result<MarketOptimum> {
    check_len("endowment", model.len(), e_a.len())?;
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("CARA requires alpha > 0, got {alpha}")));
    }
    let d = tilted_density(model, f_index)?;
    let ea = d.expect(e_a);
    let h = relative_entropy(&d, Direction::PQ);
    let x_star: Vec<f64> = d.density.iter().map(|di| -di.ln() / alpha + ea + h / alpha).collect();
    let utility = -(-alpha * ea - h).exp_m1();
    let diff: Vec<f64> = x_star.iter().zip(e_a).map(|(x, a)| x - a).collect();
    let budget_residual = d.expect(&diff);
    let realized: Vec<f64> = x_star.iter().map(|x| -(-alpha * x).exp_m1()).collect();
    let realized = d.expect_ref(&realized);
    if budget_residual.abs() > CLOSED_FORM_TOL || (realized - utility).abs() > CLOSED_FORM_TOL {
        return Err(Error::Postcondition(format!(
            "CARA closed form: budget residual {budget_residual}, utility gap {}",
            realized - utility
        )));
    }
    Ok(MarketOptimum {
        x_star,
        utility,
        endowment_value: ea,
        entropy: h,
        budget_residual,
    })
}

/// Log agent: `x* = E_f[e_a] / d` with utility `ln E_f[e_a] + H(Q|P_f)`.
pub fn log_optimal(model: &MarketModel, f_index: usize, e_a: &[f64]) -> Result<MarketOptimum> {
    check_len("endowment", model.len(), e_a.len())?;
    let d = tilted_density(model, f_index)?;
    let ea = d.expect(e_a);
    if !(ea > 0.0) {
        return Err(Error::Domain(format!("log wealth undefined: E_f[e_a] = {ea}")));
    }
    let h = relative_entropy(&d, Direction::QP);
    let x_star: Vec<f64> = d.density.iter().map(|di| ea / di).collect();
    let utility = ea.ln() + h;
    let diff: Vec<f64> = x_star.iter().zip(e_a).map(|(x, a)| x - a).collect();
    let budget_residual = d.expect(&diff);
    let logs: Vec<f64> = x_star.iter().map(|x| x.ln()).collect();
    let realized = d.expect_ref(&logs);
    if budget_residual.abs() > CLOSED_FORM_TOL || (realized - utility).abs() > CLOSED_FORM_TOL {
        return Err(Error::Postcondition(format!(
            "log closed form: budget residual {budget_residual}, utility gap {}",
            realized - utility
        )));
    }
    Ok(MarketOptimum {
        x_star,
        utility,
        endowment_value: ea,
        entropy: h,
        budget_residual,
    })
}

/// Principal's terminal wealth `e_p − x + w*` in the delegation model, with
/// `w* = ((1−β)/β)(E_f[e_a+x]·dQ/dP_f − (e_a+x))`.
pub fn delegation_wealth(
    q: &[f64],
    density: &[f64],
    e_a: &[f64],
    e_p: &[f64],
    x: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    let m = q.len();
    for (what, v) in [("density", density), ("e_a", e_a), ("e_p", e_p), ("x", x)] {
        check_len(what, m, v.len())?;
    }
    if !(beta >= BETA_MIN && beta <= 1.0) {
        return Err(Error::Range(format!("beta must lie in [{BETA_MIN}, 1], got {beta}")));
    }
    let mean: f64 = (0..m).map(|i| q[i] * density[i] * (e_a[i] + x[i])).sum();
    if !(mean > 0.0) {
        return Err(Error::Domain(format!("E_f[e_a + x] = {mean} must be positive")));
    }
    let k = (1.0 - beta) / beta;
    Ok((0..m)
        .map(|i| {
            let w = k * (mean / density[i] - e_a[i] - x[i]);
            e_p[i] - x[i] + w
        })
        .collect())
}

/// `E_Q[v(e_p − x + w*)]` for a delegation contract `(x, β)`.
#[allow(clippy::too_many_arguments)]
pub fn delegation_value(
    model: &MarketModel,
    f_index: usize,
    x: &[f64],
    beta: f64,
    e_a: &[f64],
    e_p: &[f64],
    v: &UtilitySpec,
) -> Result<f64> {
    let d = tilted_density(model, f_index)?;
    let wealth = delegation_wealth(&d.weights, &d.density, e_a, e_p, x, beta)?;
    let vals: Vec<f64> = wealth.iter().map(|&w| v.eval(w)).collect::<Result<_>>()?;
    Ok(d.expect_ref(&vals))
}

/// Indirect utility of a CARA agent holding `e_a + x` before trading.
pub fn cara_indirect_utility(d: &TiltedDensity, e_a: &[f64], x: &[f64], alpha: f64) -> f64 {
    let wealth: Vec<f64> = e_a.iter().zip(x).map(|(a, x)| a + x).collect();
    -(-alpha * d.expect(&wealth) - relative_entropy(d, Direction::PQ)).exp_m1()
}

/// Indirect utility of a log agent holding `e_a + x` before trading;
/// independent of the performance share.
pub fn log_indirect_utility(d: &TiltedDensity, e_a: &[f64], x: &[f64]) -> Result<f64> {
    let wealth: Vec<f64> = e_a.iter().zip(x).map(|(a, x)| a + x).collect();
    let mean = d.expect(&wealth);
    if !(mean > 0.0) {
        return Err(Error::Domain(format!("E_f[e_a + x] = {mean} must be positive")));
    }
    Ok(mean.ln() + relative_entropy(d, Direction::QP))
}

/// Independent check of the closed forms: maximize `E_Q[u(x)]` subject to
/// `E_f[x − e_a] ≤ 0` by bisection on the Lagrange multiplier `λ`, solving
/// the pointwise condition `u′(x_i) = λ d_i` numerically. `grid_size` is the
/// number of log-spaced multipliers scanned to bracket the root. Returns
/// `|oracle utility − closed-form utility|`.
pub fn verify_budget_optimality(
    model: &MarketModel,
    f_index: usize,
    e_a: &[f64],
    u: &UtilitySpec,
    grid_size: usize,
) -> Result<f64> {
    let closed = match u.family {
        UtilityFamily::Cara { alpha } => cara_optimal(model, f_index, e_a, alpha)?,
        UtilityFamily::Log => log_optimal(model, f_index, e_a)?,
        _ => {
            return Err(Error::Precondition(format!(
                "budget oracle supports CARA and LOG, got {}",
                u.name()
            )))
        }
    };
    if grid_size < 2 {
        return Err(Error::Precondition("grid_size must be at least 2".into()));
    }
    let d = tilted_density(model, f_index)?;
    let budget = d.expect(e_a);
    let claim = |lambda: f64| -> Result<Vec<f64>> {
        d.density.iter().map(|&di| invert_marginal(u, lambda * di)).collect()
    };
    let excess = |lambda: f64| -> Result<f64> { Ok(d.expect(&claim(lambda)?) - budget) };

    let (lo_exp, hi_exp) = (-12.0_f64, 12.0_f64);
    let grid: Vec<f64> = (0..grid_size)
        .map(|k| lo_exp + (hi_exp - lo_exp) * k as f64 / (grid_size - 1) as f64)
        .collect();
    let mut bracket = None;
    let mut prev = (grid[0], excess(10f64.powf(grid[0]))?);
    for &g in &grid[1..] {
        let cur = (g, excess(10f64.powf(g))?);
        if prev.1 >= 0.0 && cur.1 <= 0.0 {
            bracket = Some((prev.0, cur.0));
            break;
        }
        prev = cur;
    }
    let Some((mut a, mut b)) = bracket else {
        return Err(Error::NonConvergence(
            "no sign change of the budget excess on the multiplier grid".into(),
        ));
    };
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if excess(10f64.powf(mid))? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let x = claim(10f64.powf(0.5 * (a + b)))?;
    let utils: Vec<f64> = x.iter().map(|&z| u.eval(z)).collect::<Result<_>>()?;
    let oracle = d.expect_ref(&utils);
    Ok((oracle - closed.utility).abs())
}

/// Solve `u′(z) = target` by bisection, expanding the bracket as needed.
fn invert_marginal(u: &UtilitySpec, target: f64) -> Result<f64> {
    let half_line = u.domain() == Domain::HalfLine;
    let slope = |z: f64| u.deriv(z);
    let (mut lo, mut hi) = if half_line { (1e-300, 1.0) } else { (-1.0, 1.0) };
    for _ in 0..2000 {
        if slope(hi)? <= target {
            break;
        }
        hi *= 2.0;
    }
    if !half_line {
        for _ in 0..2000 {
            if slope(lo)? >= target {
                break;
            }
            lo *= 2.0;
        }
    }
    if !(slope(lo)? >= target && slope(hi)? <= target) {
        return Err(Error::NonConvergence(format!(
            "could not bracket u'(z) = {target}"
        )));
    }
    for _ in 0..2000 {
        let mid = if half_line && hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// An instance in indirect-utility units for the hedging and delegation
/// models: the agent's utility is monotone in `E_f[e_a + x]`, so `u` is
/// linear, `c = e_a + x`, and types are the tilted densities.
pub struct MarketInstanceSpec<'a> {
    pub model: &'a MarketModel,
    pub e_a: Vec<f64>,
    pub e_p: Vec<f64>,
    pub v: UtilitySpec,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub beliefs: BeliefSet,
    pub principal_model: PrincipalModel,
}

pub fn market_instance(spec: MarketInstanceSpec<'_>) -> Result<Instance> {
    let m = spec.model.len();
    let states = spec.model.states()?;
    let types = (0..spec.model.drift_types.len())
        .map(|k| {
            let d = tilted_density(spec.model, k)?;
            Ok(AgentType::new(spec.model.drift_types[k].label.clone(), d.density))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_instance(RawInstance {
        states,
        types,
        principal_belief: Some(AgentType::reference("Q", m)),
        beliefs: spec.beliefs,
        e_a: spec.e_a,
        e_p: spec.e_p,
        u: UtilitySpec::linear(),
        v: spec.v,
        bounds: Bounds {
            lo: spec.lo,
            hi: spec.hi,
        },
        reservation: None,
        principal_model: spec.principal_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node(values: Vec<f64>) -> MarketModel {
        MarketModel::new(
            1.0,
            vec![-1.0, 1.0],
            vec![0.5, 0.5],
            &[DriftSpec::Values {
                label: "f".into(),
                values,
            }],
        )
        .unwrap()
    }

    #[test]
    fn two_point_rule() {
        let (w, q) = discretize_terminal(1.0, 2).unwrap();
        assert!((w[0] + 1.0).abs() < 1e-14 && (w[1] - 1.0).abs() < 1e-14);
        assert_eq!(q, vec![0.5, 0.5]);
    }

    #[test]
    fn moments() {
        for m in [3, 4, 10, 25, 80, 200] {
            let (w, q) = discretize_terminal(4.0, m).unwrap();
            let xs: Vec<f64> = w.iter().zip(&q).map(|(w, q)| w * q).collect();
            assert_eq!(pairwise_sum(&xs), 0.0);
            let var: f64 = w.iter().zip(&q).map(|(w, q)| q * w * w).sum();
            assert!((var - 4.0).abs() < 1e-10, "m={m} var={var}");
            let kurt: f64 = w.iter().zip(&q).map(|(w, q)| q * w.powi(4)).sum();
            assert!((kurt - 48.0).abs() < 1e-8, "m={m} fourth moment {kurt}");
        }
        assert!(matches!(discretize_terminal(1.0, 201), Err(Error::Size { .. })));
        assert!(discretize_terminal(1.0, 1).is_err());
        assert!(discretize_terminal(0.0, 5).is_err());
    }

    #[test]
    fn tilt_examples() {
        let d = tilted_density(&two_node(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(d.density, vec![1.0, 1.0]);
        assert_eq!(d.normalizer, 1.0);
        let d = tilted_density(&two_node(vec![1.2f64.ln(), 0.8f64.ln()]), 0).unwrap();
        assert!((d.normalizer - 1.0).abs() < 1e-15);
        assert!((d.density[0] - 1.2).abs() < 1e-15 && (d.density[1] - 0.8).abs() < 1e-15);
        let d = tilted_density(&two_node(vec![1.0, 1.0]), 0).unwrap();
        assert!((d.normalizer - std::f64::consts::E).abs() < 1e-15);
        assert!(d.density.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        assert!(matches!(
            tilted_density(&two_node(vec![701.0, 0.0]), 0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        let one = TiltedDensity::from_density(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        assert_eq!(relative_entropy(&one, Direction::PQ), 0.0);
        assert_eq!(relative_entropy(&one, Direction::QP), 0.0);
        let d = TiltedDensity::from_density(vec![0.5, 0.5], vec![1.2, 0.8]).unwrap();
        let pq = 0.5 * (1.2 * 1.2f64.ln() + 0.8 * 0.8f64.ln());
        let qp = -0.5 * (1.2f64.ln() + 0.8f64.ln());
        assert!((relative_entropy(&d, Direction::PQ) - pq).abs() < 1e-16);
        assert!((relative_entropy(&d, Direction::QP) - qp).abs() < 1e-16);
        assert!((pq - 0.0201355).abs() < 1e-7);
        assert!((qp - 0.0204110).abs() < 1e-7);
    }

    #[test]
    fn cara_examples() {
        let flat = two_node(vec![0.0, 0.0]);
        let r = cara_optimal(&flat, 0, &[1.0, 1.0], 1.0).unwrap();
        assert!(r.x_star.iter().all(|x| (x - 1.0).abs() < 1e-15));
        assert!((r.utility - (1.0 - (-1f64).exp())).abs() < 1e-15);
        let r = cara_optimal(&flat, 0, &[0.0, 0.0], 2.0).unwrap();
        assert!(r.x_star.iter().all(|x| x.abs() < 1e-15));
        assert_eq!(r.utility, 0.0);
        let tilted = two_node(vec![1.2f64.ln(), 0.8f64.ln()]);
        let r = cara_optimal(&tilted, 0, &[1.0, 1.0], 1.0).unwrap();
        // 1 − e^{−1 − 0.0201355...}
        assert!((r.utility - 0.6394539220168058).abs() < 1e-12);
    }

    #[test]
    fn log_examples() {
        let flat = two_node(vec![0.0, 0.0]);
        let r = log_optimal(&flat, 0, &[2.0, 2.0]).unwrap();
        assert!(r.x_star.iter().all(|x| (x - 2.0).abs() < 1e-15));
        assert!((r.utility - 2f64.ln()).abs() < 1e-15);
        let tilted = two_node(vec![1.2f64.ln(), 0.8f64.ln()]);
        let r = log_optimal(&tilted, 0, &[1.0, 1.0]).unwrap();
        assert!((r.x_star[0] - 1.0 / 1.2).abs() < 1e-14);
        assert!((r.x_star[1] - 1.0 / 0.8).abs() < 1e-14);
        assert!((r.utility - 0.02041099726012756).abs() < 1e-12);
        assert!(r.budget_residual.abs() < 1e-15);
        assert!(matches!(log_optimal(&flat, 0, &[-1.0, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn delegation_examples() {
        let flat = two_node(vec![0.0, 0.0]);
        let v = UtilitySpec::linear();
        let x = [0.2, -0.1];
        let keep_all = delegation_value(&flat, 0, &x, 1.0, &[1.0, 1.0], &[3.0, 1.0], &v).unwrap();
        assert!((keep_all - (0.5 * 2.8 + 0.5 * 1.1)).abs() < 1e-15);
        for beta in [0.01, 0.5, 0.9] {
            let val = delegation_value(&flat, 0, &[0.0, 0.0], beta, &[1.0, 1.0], &[3.0, 1.0], &v).unwrap();
            assert!((val - 2.0).abs() < 1e-15);
        }
        let tilted = two_node(vec![1.2f64.ln(), 0.8f64.ln()]);
        let val = delegation_value(&tilted, 0, &[0.0, 0.0], 0.5, &[1.0, 1.0], &[0.0, 0.0], &v).unwrap();
        let oracle = 0.5 * (1.0 / 1.2 + 1.0 / 0.8) - 1.0;
        assert!((val - oracle).abs() < 1e-14);
        assert!((val - 0.0416667).abs() < 1e-7);
        assert!(matches!(
            delegation_value(&tilted, 0, &[0.0, 0.0], 1e-4, &[1.0, 1.0], &[0.0, 0.0], &v),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            delegation_value(&tilted, 0, &[-2.0, -2.0], 0.5, &[1.0, 1.0], &[0.0, 0.0], &v),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn oracle_agrees_without_tilt() {
        let flat = MarketModel::gauss_hermite(1.0, 20, &[DriftSpec::Zero { label: "q".into() }]).unwrap();
        let e_a: Vec<f64> = flat.nodes.iter().map(|w| 1.0 + 0.1 * w.tanh()).collect();
        let gap = verify_budget_optimality(&flat, 0, &e_a, &UtilitySpec::cara(1.0), 200).unwrap();
        assert!(gap <= 1e-10, "{gap}");
        let gap = verify_budget_optimality(&flat, 0, &e_a, &UtilitySpec::log(), 200).unwrap();
        assert!(gap <= 1e-10, "{gap}");
        assert!(verify_budget_optimality(&flat, 0, &e_a, &UtilitySpec::linear(), 200).is_err());
    }

    #[test]
    fn odd_grid_enforces_zero_normalization() {
        let (nodes, weights) = discretize_terminal(1.0, 5).unwrap();
        let bad = DriftSpec::Values {
            label: "bad".into(),
            values: vec![0.0, 0.0, 0.3, 0.0, 0.0],
        };
        assert!(MarketModel::new(1.0, nodes, weights, &[bad]).is_err());
    }

    #[test]
    fn drift_file_json() {
        let text = r#"{"horizon": 2.0, "nodes": 7, "drifts": [
            {"kind": "zero", "label": "q"},
            {"kind": "clamped_linear", "label": "up", "slope": 0.4, "support": 1.5}
        ]}"#;
        let file: DriftFile = serde_json::from_str(text).unwrap();
        let model = file.into_model().unwrap();
        assert_eq!(model.drift_types.len(), 2);
        assert_eq!(model.drift_types[1].values[3], 0.0);
        assert!(model.drift_types[1].values.iter().all(|v| v.abs() <= 0.6 + 1e-15));
    }
}
