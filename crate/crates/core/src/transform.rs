//! Change of variables from payoff units to utility units.
//!
//! A transfer `x` becomes the utility level `c = u(e_a + x)`. In these units
//! the agent's expected utility is the bilinear form `Σ q_i d_i c_i`, so the
//! incentive and participation constraints become linear.

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::model::{weighted_sum, AgentType, Domain, Instance, StateSpace, UtilityFamily, UtilitySpec};

pub const DEFAULT_WEALTH_FLOOR: f64 = 1e-8;
/// Slack allowed when mapping a utility level back to a payoff.
pub const BOUND_TOL: f64 = 1e-9;

/// A lower bound that was lifted to the wealth floor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClampEvent {
    pub atom: usize,
    pub wealth: f64,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityUnitsInstance {
    pub base: Instance,
    pub c_lo: Vec<f64>,
    pub c_hi: Vec<f64>,
    pub wealth_floor: Option<f64>,
    pub clamps: Vec<ClampEvent>,
}

impl UtilityUnitsInstance {
    pub fn n_types(&self) -> usize {
        self.base.n_types()
    }

    pub fn n_atoms(&self) -> usize {
        self.base.n_atoms()
    }

    pub fn states(&self) -> &StateSpace {
        &self.base.states
    }

    /// Largest per-atom width of the utility box.
    pub fn bound_range(&self) -> f64 {
        self.c_lo
            .iter()
            .zip(&self.c_hi)
            .fold(0.0, |m, (l, h)| m.max(h - l))
    }

    /// Utility levels of the zero transfer, `u(e_a)`, when inside the box.
    pub fn zero_transfer(&self) -> Option<Vec<f64>> {
        let c: Vec<f64> = self
            .base
            .e_a
            .iter()
            .map(|&z| self.base.u.eval(z))
            .collect::<Result<_>>()
            .ok()?;
        let inside = c
            .iter()
            .zip(self.c_lo.iter().zip(&self.c_hi))
            .all(|(c, (l, h))| *c >= *l && *c <= *h);
        inside.then_some(c)
    }
}

pub fn to_utility_units(instance: &Instance) -> Result<UtilityUnitsInstance> {
    to_utility_units_with(instance, Some(DEFAULT_WEALTH_FLOOR))
}

/// Map the payoff box `[lo, hi]` to utility levels. On the half-line the
/// lower wealth is lifted to `wealth_floor` when it falls below it; without
/// a floor, a lower bound where `u` is undefined is a domain error.
pub fn to_utility_units_with(
    instance: &Instance,
    wealth_floor: Option<f64>,
) -> Result<UtilityUnitsInstance> {
    if let Some(f) = wealth_floor {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Domain(format!("wealth floor must be positive, got {f}")));
        }
    }
    let u = &instance.u;
    let half_line = u.domain() == Domain::HalfLine;
    let mut clamps = Vec::new();
    let mut c_lo = Vec::with_capacity(instance.n_atoms());
    let mut c_hi = Vec::with_capacity(instance.n_atoms());
    for i in 0..instance.n_atoms() {
        let mut wealth = instance.e_a[i] + instance.contract_lo[i];
        if let (true, Some(floor)) = (half_line, wealth_floor) {
            if wealth < floor {
                clamps.push(ClampEvent {
                    atom: i,
                    wealth,
                    floor,
                });
                wealth = floor;
            }
        }
        let lo = u.eval(wealth).map_err(|e| {
            Error::Domain(format!("lower utility bound at atom {i}: {e}"))
        })?;
        let hi = u.eval(instance.e_a[i] + instance.contract_hi[i])?;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Domain(format!(
                "utility bounds at atom {i} are not an interval: [{lo}, {hi}]"
            )));
        }
        c_lo.push(lo);
        c_hi.push(hi);
    }
    Ok(UtilityUnitsInstance {
        base: instance.clone(),
        c_lo,
        c_hi,
        wealth_floor,
        clamps,
    })
}

/// `x = u⁻¹(c) − e_a` atom by atom.
pub fn from_utility_units(uu: &UtilityUnitsInstance, c: &[f64]) -> Result<Vec<f64>> {
    check_len("utility levels", uu.n_atoms(), c.len())?;
    c.iter()
        .enumerate()
        .map(|(i, &ci)| {
            if ci < uu.c_lo[i] - BOUND_TOL || ci > uu.c_hi[i] + BOUND_TOL {
                return Err(Error::Range(format!(
                    "utility level {ci} at atom {i} outside [{}, {}]",
                    uu.c_lo[i], uu.c_hi[i]
                )));
            }
            let ci = ci.clamp(uu.c_lo[i], uu.c_hi[i]);
            Ok(uu.base.u.inverse(ci)? - uu.base.e_a[i])
        })
        .collect()
}

/// `u(e_a + x)` atom by atom, without bound checks.
pub fn payoff_to_levels(instance: &Instance, x: &[f64]) -> Result<Vec<f64>> {
    check_len("payoff", instance.n_atoms(), x.len())?;
    x.iter()
        .zip(&instance.e_a)
        .map(|(x, a)| instance.u.eval(a + x))
        .collect()
}

/// Agent's expected utility in utility units, `Σ_i q_i d_i c_i`.
pub fn agent_utility(states: &StateSpace, ty: &AgentType, c: &[f64]) -> Result<f64> {
    check_len("utility levels", states.len(), c.len())?;
    check_len("density", states.len(), ty.density.len())?;
    Ok(weighted_sum(&states.ref_prob, &ty.density, c))
}

/// Number of grid points used by [`ae_check`].
pub const AE_GRID_POINTS: usize = 200;
pub const AE_DEFAULT_Z_MAX: f64 = 1e6;
pub const AE_DEFAULT_MARGIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AeReport {
    pub pass: bool,
    /// `max z·u′(z)/u(z)` over the tail grid.
    pub estimate: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Grid points where `u > 0` and the ratio was evaluated.
    pub points_used: usize,
}

/// Numerical tail estimate of the asymptotic elasticity `limsup z·u′(z)/u(z)`
/// over a log-spaced grid on `[z_max/1e4, z_max]`. This is a heuristic
/// screen, not a proof.
pub fn ae_check(u: &UtilitySpec, z_max: f64, margin: f64) -> Result<AeReport> {
    ae_check_fn(|z| u.eval(z).ok(), |z| u.deriv(z).ok(), z_max, margin)
}

/// [`ae_check`] for an arbitrary utility given as value and slope closures.
pub fn ae_check_fn(
    u: impl Fn(f64) -> Option<f64>,
    du: impl Fn(f64) -> Option<f64>,
    z_max: f64,
    margin: f64,
) -> Result<AeReport> {
    if !(z_max > 0.0 && z_max.is_finite()) {
        return Err(Error::Domain(format!("z_max must be positive, got {z_max}")));
    }
    let z_min = z_max / 1e4;
    let (a, b) = (z_min.ln(), z_max.ln());
    let mut estimate = f64::NEG_INFINITY;
    let mut used = 0;
    for k in 0..AE_GRID_POINTS {
        let z = if k + 1 == AE_GRID_POINTS {
            z_max
        } else {
            (a + (b - a) * k as f64 / (AE_GRID_POINTS - 1) as f64).exp()
        };
        let (Some(val), Some(slope)) = (u(z), du(z)) else {
            continue;
        };
        if !(val > 0.0) || !val.is_finite() || !slope.is_finite() {
            continue;
        }
        used += 1;
        estimate = estimate.max(z * slope / val);
    }
    if used == 0 {
        return Err(Error::Inconclusive(
            "utility is not positive anywhere on the tail grid".into(),
        ));
    }
    Ok(AeReport {
        pass: estimate < 1.0 - margin,
        estimate,
        z_min,
        z_max,
        points_used: used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Conjugate {
    /// `sup_z {u(z) − z·y}`; `+∞` when unbounded.
    pub value: f64,
    pub argmax: Option<f64>,
    /// The supremum lies outside the tabulated range and was truncated to it.
    pub truncated: bool,
}

/// Convex conjugate `u*(y) = sup_z {u(z) − z·y}` over the domain of `u`.
pub fn conjugate(u: &UtilitySpec, y: f64) -> Result<Conjugate> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!(
            "conjugate requires y > 0 (infinite otherwise), got {y}"
        )));
    }
    let exact = |z: f64, value: f64| Conjugate {
        value,
        argmax: Some(z),
        truncated: false,
    };
    let unbounded = Conjugate {
        value: f64::INFINITY,
        argmax: None,
        truncated: false,
    };
    Ok(match &u.family {
        UtilityFamily::Log => exact(1.0 / y, -y.ln() - 1.0),
        UtilityFamily::Crra { gamma } => {
            let z = y.powf(1.0 / (gamma - 1.0));
            exact(z, z.powf(*gamma) / gamma - z * y)
        }
        UtilityFamily::Cara { alpha } => {
            let z = (alpha / y).ln() / alpha;
            if z < 0.0 && u.domain() == Domain::HalfLine {
                exact(0.0, 0.0)
            } else {
                exact(z, 1.0 - y / alpha - z * y)
            }
        }
        UtilityFamily::Linear => match u.domain() {
            Domain::HalfLine if y >= 1.0 => exact(0.0, 0.0),
            Domain::WholeLine if y == 1.0 => exact(0.0, 0.0),
            _ => unbounded,
        },
        UtilityFamily::Tabulated(t) => {
            let (lo, hi) = (t.z[0], *t.z.last().unwrap());
            let g = |z: f64| u.eval(z).map(|v| v - z * y).unwrap_or(f64::NEG_INFINITY);
            let z = golden_section_max(g, lo, hi);
            let truncated = u.deriv(hi)? > y || u.deriv(lo)? < y;
            Conjugate {
                value: g(z),
                argmax: Some(z),
                truncated,
            }
        }
    })
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if b - a <= 1e-13 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        }
    }
    // The endpoints are candidates too when the maximizer sits on the boundary.
    [a, 0.5 * (a + b), b]
        .into_iter()
        .fold((a, f(a)), |best, z| if f(z) > best.1 { (z, f(z)) } else { best })
        .0
}
