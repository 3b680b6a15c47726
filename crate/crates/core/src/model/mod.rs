//! The finite probability model: atoms with reference probabilities, agent
//! types as densities against the reference measure, endowments, utilities
//! and the principal's ambiguity set.
//!
//! Instances enter through [`RawInstance`] (the JSON document) and leave
//! [`validate_instance`] as an [`Instance`] whose every invariant has been
//! checked. A validated instance is immutable.

mod utility;

pub use utility::{Domain, Table, UtilityFamily, UtilitySpec};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result, Violation};

/// Tolerance on `Σ q_i = 1`.
pub const STATE_PROB_TOL: f64 = 1e-12;
/// Tolerance on `Σ q_i d_i = 1` for user-entered densities.
pub const DENSITY_TOL: f64 = 1e-10;
/// Tolerance on `Σ κ_j = 1`.
pub const PRIOR_TOL: f64 = 1e-12;
/// Slack allowed when confirming that some contract is individually rational.
pub const IR_TOL: f64 = 1e-9;
/// Smallest admissible share `β` in the delegation model.
pub const BETA_MIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub atoms: Vec<String>,
    pub ref_prob: Vec<f64>,
}

impl StateSpace {
    pub fn new(atoms: Vec<String>, ref_prob: Vec<f64>) -> Result<Self> {
        let s = StateSpace { atoms, ref_prob };
        let v = s.violations();
        if v.is_empty() {
            Ok(s)
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// Atoms labelled `w0, w1, ...`.
    pub fn with_probs(ref_prob: Vec<f64>) -> Result<Self> {
        let atoms = (0..ref_prob.len()).map(|i| format!("w{i}")).collect();
        Self::new(atoms, ref_prob)
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::with_probs(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.ref_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_prob.is_empty()
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.ref_prob.is_empty() {
            out.push(Violation::new("states", "at least one atom is required"));
        }
        if self.atoms.len() != self.ref_prob.len() {
            out.push(Violation::new(
                "states.atoms",
                format!("{} labels for {} probabilities", self.atoms.len(), self.ref_prob.len()),
            ));
        }
        if let Some(i) = self.ref_prob.iter().position(|&q| !(q > 0.0 && q.is_finite())) {
            out.push(Violation::new(
                "states.ref_prob",
                format!("atom {i} has non-positive probability {}", self.ref_prob[i]),
            ));
        }
        let total: f64 = self.ref_prob.iter().sum();
        if (total - 1.0).abs() > STATE_PROB_TOL {
            out.push(Violation::new(
                "states.ref_prob",
                format!("probabilities sum to {total}"),
            ));
        }
        out
    }
}

/// An agent type: the density `dP/dQ` of the agent's belief against the
/// reference measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentType {
    pub label: String,
    pub density: Vec<f64>,
}

impl AgentType {
    pub fn new(label: impl Into<String>, density: Vec<f64>) -> Self {
        AgentType {
            label: label.into(),
            density,
        }
    }

    /// The reference measure itself (`d ≡ 1`).
    pub fn reference(label: impl Into<String>, m: usize) -> Self {
        Self::new(label, vec![1.0; m])
    }

    /// `max_i d_i`, the sup-norm of the density.
    pub fn bound(&self) -> f64 {
        self.density.iter().fold(0.0, |m, &d| m.max(d))
    }

    pub fn validate(&self, states: &StateSpace, field: &str) -> Vec<Violation> {
        if self.density.len() != states.len() {
            return vec![Violation::new(
                field,
                format!("density has {} entries for {} atoms", self.density.len(), states.len()),
            )];
        }
        let mut out = Vec::new();
        if let Some(i) = self
            .density
            .iter()
            .position(|&d| !(d >= 0.0 && d.is_finite()))
        {
            out.push(Violation::new(
                field,
                format!("density entry {i} is {} (must be finite and >= 0)", self.density[i]),
            ));
            return out;
        }
        let mass: f64 = states
            .ref_prob
            .iter()
            .zip(&self.density)
            .map(|(q, d)| q * d)
            .sum();
        if (mass - 1.0).abs() > DENSITY_TOL {
            out.push(Violation::new(
                field,
                format!("density not normalized: sum q*d = {mass}"),
            ));
        }
        out
    }
}

/// `E_P[x] = Σ_i q_i d_i x_i`.
pub fn expectation(states: &StateSpace, ty: &AgentType, payoff: &[f64]) -> Result<f64> {
    check_len("payoff", states.len(), payoff.len())?;
    check_len("density", states.len(), ty.density.len())?;
    Ok(weighted_sum(&states.ref_prob, &ty.density, payoff))
}

pub(crate) fn weighted_sum(q: &[f64], d: &[f64], x: &[f64]) -> f64 {
    q.iter().zip(d).zip(x).map(|((q, d), x)| q * d * x).sum()
}

/// Finite ambiguity set: priors over the type list with penalties `α(κ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefSet {
    pub priors: Vec<Vec<f64>>,
    pub penalties: Vec<f64>,
}

impl BeliefSet {
    /// Maxmin expected utility: all penalties zero.
    pub fn maxmin(priors: Vec<Vec<f64>>) -> Self {
        let penalties = vec![0.0; priors.len()];
        BeliefSet { priors, penalties }
    }

    pub fn singleton(prior: Vec<f64>) -> Self {
        Self::maxmin(vec![prior])
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// `min_κ Σ_j κ_j V_j + α(κ)` with the argmin (lowest index on ties).
    pub fn robust_value(&self, per_type: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (k, (prior, pen)) in self.priors.iter().zip(&self.penalties).enumerate() {
            let s: f64 = prior.iter().zip(per_type).map(|(w, v)| w * v).sum::<f64>() + pen;
            if s < best.0 {
                best = (s, k);
            }
        }
        best
    }

    pub fn validate(&self, n_types: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.priors.is_empty() {
            out.push(Violation::new("beliefs.priors", "at least one prior is required"));
        }
        if self.penalties.len() != self.priors.len() {
            out.push(Violation::new(
                "beliefs.penalties",
                format!("{} penalties for {} priors", self.penalties.len(), self.priors.len()),
            ));
        }
        for (k, p) in self.priors.iter().enumerate() {
            let field = format!("beliefs.priors[{k}]");
            if p.len() != n_types {
                out.push(Violation::new(field, format!("{} weights for {n_types} types", p.len())));
                continue;
            }
            if p.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                out.push(Violation::new(field.clone(), "weights must be finite and >= 0"));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > PRIOR_TOL {
                out.push(Violation::new(field, format!("weights sum to {total}")));
            }
        }
        if let Some(k) = self.penalties.iter().position(|a| !a.is_finite()) {
            out.push(Violation::new(format!("beliefs.penalties[{k}]"), "penalty must be finite"));
        }
        out
    }
}

/// Box bounds on the transfer `x` per atom, in currency units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// How the principal values a contract.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrincipalModel {
    /// `E_{P′}[v(e_p + e_a − u⁻¹(c))]`, the same for every type.
    #[default]
    Standard,
    /// Portfolio delegation: the agent keeps a share `beta` of trading gains
    /// and hands the rest to the principal, so her value depends on the type.
    Delegation { beta: f64 },
}

impl PrincipalModel {
    fn is_standard(&self) -> bool {
        *self == PrincipalModel::Standard
    }
}

/// The JSON instance document before validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub states: StateSpace,
    pub types: Vec<AgentType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_belief: Option<AgentType>,
    pub beliefs: BeliefSet,
    pub e_a: Vec<f64>,
    pub e_p: Vec<f64>,
    pub u: UtilitySpec,
    pub v: UtilitySpec,
    pub bounds: Bounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reservation: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "PrincipalModel::is_standard")]
    pub principal_model: PrincipalModel,
}

/// A validated problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub states: StateSpace,
    pub types: Vec<AgentType>,
    pub principal_belief: AgentType,
    pub beliefs: BeliefSet,
    pub e_a: Vec<f64>,
    pub e_p: Vec<f64>,
    pub u: UtilitySpec,
    pub v: UtilitySpec,
    pub contract_lo: Vec<f64>,
    pub contract_hi: Vec<f64>,
    pub reservation: Vec<f64>,
    pub principal_model: PrincipalModel,
}

impl Instance {
    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.states.len()
    }

    pub fn to_raw(&self) -> RawInstance {
        RawInstance {
            states: self.states.clone(),
            types: self.types.clone(),
            principal_belief: Some(self.principal_belief.clone()),
            beliefs: self.beliefs.clone(),
            e_a: self.e_a.clone(),
            e_p: self.e_p.clone(),
            u: self.u.clone(),
            v: self.v.clone(),
            bounds: Bounds {
                lo: self.contract_lo.clone(),
                hi: self.contract_hi.clone(),
            },
            reservation: Some(self.reservation.clone()),
            principal_model: self.principal_model.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        validate_instance(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_raw())?)
    }
}

/// Check every instance invariant; on failure return all violations found.
///
/// Also confirms that at least one contract is individually rational for all
/// types. Pooling at the upper transfer bound gives every type its highest
/// attainable expected utility, so it is the contract tested.
pub fn validate_instance(raw: RawInstance) -> Result<Instance> {
    let RawInstance {
        states,
        types,
        principal_belief,
        beliefs,
        e_a,
        e_p,
        u,
        v,
        bounds,
        reservation,
        principal_model,
    } = raw;
    let mut out = states.violations();
    if !out.is_empty() {
        return Err(Error::Invalid(out));
    }
    let m = states.len();
    if types.is_empty() {
        out.push(Violation::new("types", "type set is empty"));
    }
    for (j, t) in types.iter().enumerate() {
        out.extend(t.validate(&states, &format!("types[{j}] ({})", t.label)));
    }
    let principal_belief = principal_belief.unwrap_or_else(|| AgentType::reference("Q", m));
    out.extend(principal_belief.validate(&states, "principal_belief"));
    out.extend(beliefs.validate(types.len()));
    out.extend(u.validate("u"));
    out.extend(v.validate("v"));
    for (name, vec) in [
        ("e_a", &e_a),
        ("e_p", &e_p),
        ("bounds.lo", &bounds.lo),
        ("bounds.hi", &bounds.hi),
    ] {
        if vec.len() != m {
            out.push(Violation::new(name, format!("{} entries for {m} atoms", vec.len())));
        } else if vec.iter().any(|x| !x.is_finite()) {
            out.push(Violation::new(name, "entries must be finite"));
        }
    }
    if let Some(r) = &reservation {
        if r.len() != types.len() {
            out.push(Violation::new(
                "reservation",
                format!("{} entries for {} types", r.len(), types.len()),
            ));
        }
    }
    if !out.is_empty() {
        return Err(Error::Invalid(out));
    }

    for i in 0..m {
        if bounds.lo[i] > bounds.hi[i] {
            out.push(Violation::new(
                "bounds",
                format!("lo > hi at atom {i} ({} > {})", bounds.lo[i], bounds.hi[i]),
            ));
        }
    }
    if u.domain() == Domain::HalfLine {
        if let Some(i) = (0..m).find(|&i| e_a[i] + bounds.lo[i] < 0.0) {
            out.push(Violation::new(
                "bounds.lo",
                format!("agent wealth e_a + lo is negative at atom {i}"),
            ));
        }
    }
    if u.eval_checked_hi(&e_a, &bounds.hi).is_err() {
        out.push(Violation::new(
            "bounds.hi",
            "agent utility undefined at e_a + hi",
        ));
    }
    match &principal_model {
        PrincipalModel::Standard => {
            if v.domain() == Domain::HalfLine {
                if let Some(i) = (0..m).find(|&i| e_p[i] - bounds.hi[i] < 0.0) {
                    out.push(Violation::new(
                        "bounds.hi",
                        format!("principal wealth e_p - hi is negative at atom {i}"),
                    ));
                }
            }
        }
        PrincipalModel::Delegation { beta } => {
            if !(*beta >= BETA_MIN && *beta <= 1.0) {
                out.push(Violation::new(
                    "principal_model.beta",
                    format!("beta must lie in [{BETA_MIN}, 1], got {beta}"),
                ));
            }
            if u.family != UtilityFamily::Linear {
                out.push(Violation::new(
                    "u",
                    "delegation instances are stated in indirect-utility units (u linear)",
                ));
            }
            if types.iter().any(|t| t.density.iter().any(|&d| d <= 0.0)) {
                out.push(Violation::new(
                    "types",
                    "delegation requires strictly positive densities",
                ));
            }
            if (0..m).any(|i| e_a[i] + bounds.lo[i] <= 0.0) {
                out.push(Violation::new(
                    "bounds.lo",
                    "delegation requires e_a + lo > 0 so log wealth stays defined",
                ));
            }
        }
    }
    if !out.is_empty() {
        return Err(Error::Invalid(out));
    }

    let reservation = match reservation {
        Some(r) => r,
        None => {
            let ua: Result<Vec<f64>> = e_a.iter().map(|&z| u.eval(z)).collect();
            match ua {
                Ok(ua) => types
                    .iter()
                    .map(|t| weighted_sum(&states.ref_prob, &t.density, &ua))
                    .collect(),
                Err(e) => {
                    return Err(Error::Invalid(vec![Violation::new(
                        "reservation",
                        format!("default E_P[u(e_a)] is undefined ({e}); give it explicitly"),
                    )]))
                }
            }
        }
    };
    if let Some(j) = reservation.iter().position(|r| !r.is_finite()) {
        return Err(Error::Invalid(vec![Violation::new(
            "reservation",
            format!("entry {j} is not finite"),
        )]));
    }

    let top: Vec<f64> = e_a
        .iter()
        .zip(&bounds.hi)
        .map(|(a, h)| u.eval(a + h))
        .collect::<Result<_>>()?;
    for (j, t) in types.iter().enumerate() {
        let best = weighted_sum(&states.ref_prob, &t.density, &top);
        if best < reservation[j] - IR_TOL {
            out.push(Violation::new(
                format!("types[{j}] ({})", t.label),
                format!(
                    "no individually rational contract: best attainable {best} < reservation {}",
                    reservation[j]
                ),
            ));
        }
    }
    if !out.is_empty() {
        return Err(Error::Invalid(out));
    }

    Ok(Instance {
        states,
        types,
        principal_belief,
        beliefs,
        e_a,
        e_p,
        u,
        v,
        contract_lo: bounds.lo,
        contract_hi: bounds.hi,
        reservation,
        principal_model,
    })
}

impl UtilitySpec {
    fn eval_checked_hi(&self, e_a: &[f64], hi: &[f64]) -> Result<()> {
        for (a, h) in e_a.iter().zip(hi) {
            let c = self.eval(a + h)?;
            if !c.is_finite() {
                return Err(Error::Domain("non-finite utility".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_atom(d: Vec<f64>) -> RawInstance {
        RawInstance {
            states: StateSpace::uniform(2).unwrap(),
            types: vec![AgentType::new("t", d)],
            principal_belief: None,
            beliefs: BeliefSet::singleton(vec![1.0]),
            e_a: vec![1.0, 2.0],
            e_p: vec![2.0, 2.0],
            u: UtilitySpec::log(),
            v: UtilitySpec::cara(1.0),
            bounds: Bounds {
                lo: vec![-1.0, -2.0],
                hi: vec![2.0, 2.0],
            },
            reservation: None,
            principal_model: PrincipalModel::Standard,
        }
    }

    #[test]
    fn expectation_examples() {
        let s = StateSpace::uniform(2).unwrap();
        let t = AgentType::reference("q", 2);
        assert_eq!(expectation(&s, &t, &[2.0, 4.0]).unwrap(), 3.0);
        let t = AgentType::new("p", vec![1.2, 0.8]);
        assert!((expectation(&s, &t, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let s = StateSpace::with_probs(vec![0.25, 0.75]).unwrap();
        let t = AgentType::new("p", vec![2.0, 2.0 / 3.0]);
        assert_eq!(expectation(&s, &t, &[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(
            expectation(&s, &t, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_transfer_instance_is_valid() {
        let inst = validate_instance(two_atom(vec![1.2, 0.8])).unwrap();
        let expected = 0.5 * 1.2 * 1f64.ln() + 0.5 * 0.8 * 2f64.ln();
        assert!((inst.reservation[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_unnormalized_density() {
        let err = validate_instance(two_atom(vec![2.0, 0.5])).unwrap_err();
        match err {
            Error::Invalid(v) => assert!(v[0].message.contains("not normalized"), "{v:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn rejects_crra_above_one() {
        let mut raw = two_atom(vec![1.0, 1.0]);
        raw.u = UtilitySpec::crra(1.5);
        assert!(matches!(validate_instance(raw), Err(Error::Invalid(_))));
    }

    #[test]
    fn rejects_unreachable_reservation() {
        let mut raw = two_atom(vec![1.0, 1.0]);
        raw.reservation = Some(vec![10.0]);
        let err = validate_instance(raw).unwrap_err().to_string();
        assert!(err.contains("no individually rational contract"), "{err}");
    }

    #[test]
    fn collects_several_violations() {
        let mut raw = two_atom(vec![1.0, 1.0]);
        raw.types.clear();
        raw.beliefs = BeliefSet::maxmin(vec![vec![0.5, 0.6]]);
        raw.v = UtilitySpec::cara(0.0);
        match validate_instance(raw).unwrap_err() {
            Error::Invalid(v) => assert!(v.len() >= 3, "{v:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn validation_is_idempotent() {
        let inst = validate_instance(two_atom(vec![1.2, 0.8])).unwrap();
        let again = validate_instance(inst.to_raw()).unwrap();
        assert_eq!(inst, again);
        let json = inst.to_json().unwrap();
        assert_eq!(Instance::from_json(&json).unwrap(), inst);
    }

    #[test]
    fn robust_value_ties_to_lowest_index() {
        let b = BeliefSet::maxmin(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(b.robust_value(&[1.0, 3.0]), (1.0, 0));
        let b = BeliefSet {
            priors: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            penalties: vec![0.0, 5.0],
        };
        assert_eq!(b.robust_value(&[1.0, 3.0]), (1.0, 0));
    }
}
