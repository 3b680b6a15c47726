//! Named application instances and seeded random instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{market_instance, DriftSpec, MarketInstanceSpec, MarketModel};
use crate::model::{
    validate_instance, AgentType, BeliefSet, Bounds, Domain, Instance, PrincipalModel, RawInstance,
    StateSpace, UtilitySpec,
};
use crate::transform::{ae_check, UtilityUnitsInstance, AE_DEFAULT_MARGIN, AE_DEFAULT_Z_MAX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    ReinsuranceHalfline,
    ReinsuranceWholeline,
    CaraHedging,
    LogDelegation,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        PresetName::ReinsuranceHalfline,
        PresetName::ReinsuranceWholeline,
        PresetName::CaraHedging,
        PresetName::LogDelegation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::ReinsuranceHalfline => "reinsurance_halfline",
            PresetName::ReinsuranceWholeline => "reinsurance_wholeline",
            PresetName::CaraHedging => "cara_hedging",
            PresetName::LogDelegation => "log_delegation",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown preset {s:?}")))
    }
}

/// Optional overrides for [`build_preset`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PresetParams {
    /// Agent CARA coefficient of `reinsurance_wholeline`;
    /// must be positive.
    pub alpha: Option<f64>,
    /// Agent's retained share in `log_delegation`, in `[1e-3, 1]`.
    pub beta: Option<f64>,
    /// Replaces the agent utility of the reinsurance presets.
    pub agent_utility: Option<UtilitySpec>,
    /// Gauss–Hermite nodes of the market presets, 2 to 200 (default 6).
    pub nodes: Option<usize>,
    /// Keep only the first this many types.
    pub types: Option<usize>,
}

pub fn build_preset(name: PresetName, params: &PresetParams) -> Result<Instance> {
    let alpha = params.alpha.unwrap_or(0.5);
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let mut raw = match name {
        PresetName::ReinsuranceHalfline => reinsurance(params.agent_utility.clone().unwrap_or_else(UtilitySpec::log)),
        PresetName::ReinsuranceWholeline => {
            let u = params
                .agent_utility
                .clone()
                .unwrap_or_else(|| UtilitySpec::cara(alpha))
                .on(Domain::WholeLine);
            let report = ae_check(&u, AE_DEFAULT_Z_MAX, AE_DEFAULT_MARGIN)?;
            if !report.pass {
                return Err(Error::Precondition(format!(
                    "{} utility fails the asymptotic elasticity condition (estimate {})",
                    u.name(),
                    report.estimate
                )));
            }
            let raw = reinsurance(u);
            finiteness_screen(&raw)?;
            raw
        }
        PresetName::CaraHedging => {
            let model = market_model(params.nodes.unwrap_or(6))?;
            let e_a: Vec<f64> = model.nodes.iter().map(|w| 1.0 + 0.25 * w.tanh()).collect();
            let e_p: Vec<f64> = model.nodes.iter().map(|w| 2.0 - 0.25 * w.tanh()).collect();
            let m = model.len();
            market_instance(MarketInstanceSpec {
                model: &model,
                e_a,
                e_p,
                v: UtilitySpec::cara(1.0),
                lo: vec![-0.5; m],
                hi: vec![0.5; m],
                beliefs: BeliefSet::maxmin(vec![vec![0.5, 0.25, 0.25], vec![0.2, 0.4, 0.4]]),
                principal_model: PrincipalModel::Standard,
            })?
            .to_raw()
        }
        PresetName::LogDelegation => {
            let beta = params.beta.unwrap_or(0.5);
            let model = market_model(params.nodes.unwrap_or(6))?;
            let m = model.len();
            market_instance(MarketInstanceSpec {
                model: &model,
                e_a: vec![1.0; m],
                e_p: vec![1.0; m],
                v: UtilitySpec::cara(1.0),
                lo: vec![-0.5; m],
                hi: vec![0.5; m],
                beliefs: BeliefSet::maxmin(vec![vec![0.5, 0.25, 0.25], vec![0.2, 0.4, 0.4]]),
                principal_model: PrincipalModel::Delegation { beta },
            })?
            .to_raw()
        }
    };
    if let Some(k) = params.types {
        if k == 0 || k > raw.types.len() {
            return Err(Error::Range(format!("types must be in 1..={}", raw.types.len())));
        }
        truncate_types(&mut raw, k);
    }
    validate_instance(raw)
}

/// Two loss states, a careful and a careless policyholder, and a reinsurer
/// unsure about their mix.
fn reinsurance(u: UtilitySpec) -> RawInstance {
    let e_a = vec![10.0, 4.0];
    let e_p = vec![20.0, 20.0];
    RawInstance {
        states: StateSpace::new(vec!["calm".into(), "storm".into()], vec![0.7, 0.3]).expect("valid"),
        types: vec![
            AgentType::new("careful", vec![1.2, 0.16 / 0.3]),
            AgentType::new("careless", vec![0.8, 0.44 / 0.3]),
        ],
        principal_belief: None,
        beliefs: BeliefSet::maxmin(vec![vec![0.5, 0.5], vec![0.2, 0.8]]),
        bounds: Bounds {
            lo: e_a.iter().map(|a| -a).collect(),
            hi: e_p.clone(),
        },
        e_a,
        e_p,
        u,
        v: UtilitySpec::cara(0.1),
        reservation: None,
        principal_model: PrincipalModel::Standard,
    }
}

fn market_model(nodes: usize) -> Result<MarketModel> {
    MarketModel::gauss_hermite(
        1.0,
        nodes,
        &[
            DriftSpec::Zero { label: "neutral".into() },
            DriftSpec::ClampedLinear {
                label: "bull".into(),
                slope: 0.3,
                support: 1.5,
            },
            DriftSpec::ClampedLinear {
                label: "bear".into(),
                slope: -0.3,
                support: 1.5,
            },
        ],
    )
}

fn truncate_types(raw: &mut RawInstance, k: usize) {
    raw.types.truncate(k);
    if let Some(r) = raw.reservation.as_mut() {
        r.truncate(k);
    }
    let mut priors: Vec<Vec<f64>> = Vec::new();
    let mut penalties = Vec::new();
    for (p, a) in raw.beliefs.priors.iter().zip(&raw.beliefs.penalties) {
        let mass: f64 = p[..k].iter().sum();
        if mass > 0.0 {
            priors.push(p[..k].iter().map(|w| w / mass).collect());
            penalties.push(*a);
        }
    }
    if priors.is_empty() {
        priors.push(vec![1.0 / k as f64; k]);
        penalties.push(0.0);
    }
    raw.beliefs = BeliefSet { priors, penalties };
}

/// Bounded-grid estimate of `sup_x E_P[u(e_a + x)]` for each type, pushing
/// the transfer up to `AE_DEFAULT_Z_MAX`. Fails when the estimate keeps
/// growing over the last decade of the grid.
pub fn finiteness_screen(raw: &RawInstance) -> Result<f64> {
    let q = &raw.states.ref_prob;
    let mut sups = Vec::new();
    for k in 0..=6 {
        let t = 10f64.powi(k);
        let mut worst = f64::NEG_INFINITY;
        for ty in &raw.types {
            let mut s = 0.0;
            for i in 0..q.len() {
                s += q[i] * ty.density[i] * raw.u.eval(raw.e_a[i] + t)?;
            }
            worst = worst.max(s);
        }
        sups.push(worst);
    }
    let last = sups[6];
    let prev = sups[5];
    if !last.is_finite() || last - prev > 1e-3 * last.abs().max(1.0) {
        return Err(Error::Precondition(format!(
            "attainable utility looks unbounded: {prev} at 1e5, {last} at 1e6"
        )));
    }
    Ok(last)
}

/// Shape of an instance drawn by [`random_instance`].
#[derive(Clone, Debug, PartialEq)]
pub struct RandomSpec {
    pub atoms: usize,
    pub types: usize,
    pub priors: usize,
    /// Draw penalties in `[0, 0.1]`; otherwise all penalties are zero.
    pub penalties: bool,
    pub u: Option<UtilitySpec>,
    pub v: Option<UtilitySpec>,
}

impl RandomSpec {
    pub fn new(atoms: usize, types: usize, priors: usize) -> Self {
        RandomSpec {
            atoms,
            types,
            priors,
            penalties: false,
            u: None,
            v: None,
        }
    }
}

/// Random probability vector with entries bounded away from zero.
pub fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Random density against `q`, entries in a band around 1.
pub fn random_density<R: Rng>(rng: &mut R, q: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = q.iter().map(|_| rng.gen_range(0.3..1.7)).collect();
    let mass: f64 = q.iter().zip(&raw).map(|(q, d)| q * d).sum();
    raw.into_iter().map(|d| d / mass).collect()
}

/// A random valid instance: the agent has a random CRRA, LOG or CARA utility
/// unless one is given, the principal a CARA or LOG utility, and the zero
/// transfer sets the reservation utilities.
pub fn random_instance<R: Rng>(rng: &mut R, spec: &RandomSpec) -> Result<Instance> {
    let (m, n) = (spec.atoms, spec.types);
    let q = random_simplex(rng, m);
    let types = (0..n)
        .map(|j| AgentType::new(format!("t{j}"), random_density(rng, &q)))
        .collect();
    let e_a: Vec<f64> = (0..m).map(|_| rng.gen_range(1.0..3.0)).collect();
    let e_p: Vec<f64> = (0..m).map(|_| rng.gen_range(1.0..3.0)).collect();
    let lo: Vec<f64> = e_a.iter().map(|a| -rng.gen_range(0.3..0.7) * a).collect();
    let hi: Vec<f64> = e_p.iter().map(|p| rng.gen_range(0.3..0.7) * p).collect();
    let u = match &spec.u {
        Some(u) => u.clone(),
        None => match rng.gen_range(0..3) {
            0 => UtilitySpec::crra(rng.gen_range(0.2..0.8)),
            1 => UtilitySpec::log(),
            _ => UtilitySpec::cara(rng.gen_range(0.2..1.0)),
        },
    };
    let v = match &spec.v {
        Some(v) => v.clone(),
        None => {
            if rng.gen_bool(0.5) {
                UtilitySpec::cara(rng.gen_range(0.2..1.0))
            } else {
                UtilitySpec::log()
            }
        }
    };
    let priors = (0..spec.priors).map(|_| random_simplex(rng, n)).collect::<Vec<_>>();
    let penalties = if spec.penalties {
        (0..spec.priors).map(|_| rng.gen_range(0.0..0.1)).collect()
    } else {
        vec![0.0; spec.priors]
    };
    validate_instance(RawInstance {
        states: StateSpace::with_probs(q)?,
        types,
        principal_belief: None,
        beliefs: BeliefSet { priors, penalties },
        e_a,
        e_p,
        u,
        v,
        bounds: Bounds { lo, hi },
        reservation: None,
        principal_model: PrincipalModel::Standard,
    })
}

/// `k` candidate contracts for menu problems: pooling at the upper bound
/// (individually rational for every type), the zero transfer when it lies in
/// the box, then uniform draws from the utility box.
pub fn random_candidates<R: Rng>(rng: &mut R, uu: &UtilityUnitsInstance, k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![uu.c_hi.clone()];
    if let Some(zero) = uu.zero_transfer() {
        out.push(zero);
    }
    while out.len() < k {
        out.push(
            uu.c_lo
                .iter()
                .zip(&uu.c_hi)
                .map(|(l, h)| rng.gen_range(*l..=*h))
                .collect(),
        );
    }
    out.truncate(k.max(1));
    out
}

/// A uniformly random point of the utility box for every type.
pub fn random_mechanism<R: Rng>(rng: &mut R, uu: &UtilityUnitsInstance) -> Vec<Vec<f64>> {
    (0..uu.n_types())
        .map(|_| {
            uu.c_lo
                .iter()
                .zip(&uu.c_hi)
                .map(|(l, h)| rng.gen_range(*l..=*h))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_validate() {
        for p in PresetName::ALL {
            let inst = build_preset(p, &PresetParams::default()).unwrap();
            assert!(inst.n_types() >= 2, "{}", p.as_str());
            assert_eq!(p.as_str().parse::<PresetName>().unwrap(), p);
        }
    }

    #[test]
    fn wholeline_refuses_linear_agent() {
        let params = PresetParams {
            agent_utility: Some(UtilitySpec::linear()),
            ..Default::default()
        };
        assert!(matches!(
            build_preset(PresetName::ReinsuranceWholeline, &params),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn delegation_beta_is_checked() {
        let params = PresetParams {
            beta: Some(0.0),
            ..Default::default()
        };
        assert!(build_preset(PresetName::LogDelegation, &params).is_err());
    }

    #[test]
    fn random_instances_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let spec = RandomSpec {
                penalties: true,
                ..RandomSpec::new(3, 3, 2)
            };
            random_instance(&mut rng, &spec).unwrap();
        }
    }
}
