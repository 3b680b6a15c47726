//! Utility functions used by the agent (`u`) and the principal (`v`).
//!
//! Every family is strictly increasing and concave on its domain. Closed
//! forms are used wherever they exist; the tabulated family interpolates a
//! table of values and slopes with piecewise cubic Hermite segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// Where a utility function is defined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Wealth `z >= 0`.
    HalfLine,
    /// All of the real line.
    WholeLine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub z: Vec<f64>,
    pub values: Vec<f64>,
    pub slopes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum UtilityFamily {
    /// `z^γ / γ` with `γ ∈ (0, 1)`.
    Crra { gamma: f64 },
    /// `ln z`.
    Log,
    /// `1 − e^{−αz}` with `α > 0`.
    Cara { alpha: f64 },
    /// `z`.
    Linear,
    Tabulated(Table),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    #[serde(flatten)]
    pub family: UtilityFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

impl UtilitySpec {
    pub fn crra(gamma: f64) -> Self {
        UtilityFamily::Crra { gamma }.into()
    }

    pub fn log() -> Self {
        UtilityFamily::Log.into()
    }

    pub fn cara(alpha: f64) -> Self {
        UtilityFamily::Cara { alpha }.into()
    }

    pub fn linear() -> Self {
        UtilityFamily::Linear.into()
    }

    pub fn tabulated(z: Vec<f64>, values: Vec<f64>, slopes: Vec<f64>) -> Self {
        UtilityFamily::Tabulated(Table { z, values, slopes }).into()
    }

    pub fn on(mut self, domain: Domain) -> Self {
        self.domain = Some(domain);
        self
    }

    /// Effective domain: CRRA and LOG always live on the half-line, CARA and
    /// LINEAR default to the whole line.
    pub fn domain(&self) -> Domain {
        match (&self.family, self.domain) {
            (UtilityFamily::Crra { .. } | UtilityFamily::Log, _) => Domain::HalfLine,
            (_, Some(d)) => d,
            (UtilityFamily::Tabulated(t), None) => {
                if t.z.first().is_some_and(|&z| z >= 0.0) {
                    Domain::HalfLine
                } else {
                    Domain::WholeLine
                }
            }
            _ => Domain::WholeLine,
        }
    }

    /// Smallest admissible argument and whether it is attained.
    fn lower_limit(&self) -> Option<(f64, bool)> {
        match &self.family {
            UtilityFamily::Log => Some((0.0, false)),
            UtilityFamily::Tabulated(t) => Some((t.z[0], true)),
            _ => match self.domain() {
                Domain::HalfLine => Some((0.0, true)),
                Domain::WholeLine => None,
            },
        }
    }

    fn check_arg(&self, z: f64) -> Result<()> {
        if z.is_nan() {
            return Err(Error::Domain("utility evaluated at NaN".into()));
        }
        if let Some((lo, closed)) = self.lower_limit() {
            if z < lo || (!closed && z == lo) {
                return Err(Error::Domain(format!(
                    "{} utility undefined at wealth {z}",
                    self.name()
                )));
            }
        }
        if let UtilityFamily::Tabulated(t) = &self.family {
            let hi = *t.z.last().unwrap();
            if z > hi {
                return Err(Error::Domain(format!(
                    "wealth {z} beyond tabulated range [{}, {hi}]",
                    t.z[0]
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            UtilityFamily::Crra { .. } => "crra",
            UtilityFamily::Log => "log",
            UtilityFamily::Cara { .. } => "cara",
            UtilityFamily::Linear => "linear",
            UtilityFamily::Tabulated(_) => "tabulated",
        }
    }

    pub fn eval(&self, z: f64) -> Result<f64> {
        self.check_arg(z)?;
        Ok(match &self.family {
            UtilityFamily::Crra { gamma } => z.powf(*gamma) / gamma,
            UtilityFamily::Log => z.ln(),
            UtilityFamily::Cara { alpha } => -(-alpha * z).exp_m1(),
            UtilityFamily::Linear => z,
            UtilityFamily::Tabulated(t) => t.eval(z).0,
        })
    }

    /// Marginal utility `u′(z)`; `+∞` at the boundary for CRRA.
    pub fn deriv(&self, z: f64) -> Result<f64> {
        self.check_arg(z)?;
        Ok(match &self.family {
            UtilityFamily::Crra { gamma } => z.powf(gamma - 1.0),
            UtilityFamily::Log => 1.0 / z,
            UtilityFamily::Cara { alpha } => alpha * (-alpha * z).exp(),
            UtilityFamily::Linear => 1.0,
            UtilityFamily::Tabulated(t) => t.eval(z).1,
        })
    }

    /// `u⁻¹(c)`.
    pub fn inverse(&self, c: f64) -> Result<f64> {
        let bad = || Error::Domain(format!("utility level {c} outside the range of {}", self.name()));
        if c.is_nan() {
            return Err(bad());
        }
        let z = match &self.family {
            UtilityFamily::Crra { gamma } => {
                if c < 0.0 {
                    return Err(bad());
                }
                (gamma * c).powf(1.0 / gamma)
            }
            UtilityFamily::Log => c.exp(),
            UtilityFamily::Cara { alpha } => {
                if c >= 1.0 {
                    return Err(bad());
                }
                -(-c).ln_1p() / alpha
            }
            UtilityFamily::Linear => c,
            UtilityFamily::Tabulated(t) => t.inverse(c).ok_or_else(bad)?,
        };
        self.check_arg(z).map_err(|_| bad())?;
        Ok(z)
    }

    /// Check parameter ranges, then spot-check monotonicity and concavity on
    /// a grid.
    pub fn validate(&self, field: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |m: String| out.push(Violation::new(field, m));
        match &self.family {
            UtilityFamily::Crra { gamma } => {
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    bad(format!("CRRA requires gamma in (0,1), got {gamma}"));
                }
            }
            UtilityFamily::Cara { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    bad(format!("CARA requires alpha > 0, got {alpha}"));
                }
            }
            UtilityFamily::Tabulated(t) => {
                for m in t.check() {
                    bad(m);
                }
            }
            UtilityFamily::Log | UtilityFamily::Linear => {}
        }
        if matches!(self.family, UtilityFamily::Crra { .. } | UtilityFamily::Log)
            && self.domain == Some(Domain::WholeLine)
        {
            bad(format!("{} is only defined on the half-line", self.name()));
        }
        if !out.is_empty() {
            return out;
        }
        if let Err(m) = self.spot_check() {
            out.push(Violation::new(field, m));
        }
        out
    }

    fn spot_check(&self) -> std::result::Result<(), String> {
        let (lo, hi) = match &self.family {
            UtilityFamily::Tabulated(t) => (t.z[0], *t.z.last().unwrap()),
            UtilityFamily::Cara { alpha } => match self.domain() {
                Domain::HalfLine => (0.0, 20.0 / alpha),
                Domain::WholeLine => (-5.0 / alpha, 20.0 / alpha),
            },
            UtilityFamily::Crra { .. } | UtilityFamily::Log => (1e-2, 1e2),
            UtilityFamily::Linear => match self.domain() {
                Domain::HalfLine => (0.0, 10.0),
                Domain::WholeLine => (-10.0, 10.0),
            },
        };
        const N: usize = 257;
        let zs: Vec<f64> = (0..N)
            .map(|k| lo + (hi - lo) * k as f64 / (N - 1) as f64)
            .collect();
        let us: Vec<f64> = zs
            .iter()
            .map(|&z| self.eval(z).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        let scale = us.iter().fold(1.0_f64, |m, u| m.max(u.abs()));
        for w in us.windows(2) {
            if !(w[1] > w[0]) && !matches!(self.family, UtilityFamily::Cara { .. }) {
                return Err("utility is not strictly increasing on the check grid".into());
            }
            if w[1] < w[0] {
                return Err("utility is decreasing on the check grid".into());
            }
        }
        for w in us.windows(3) {
            if w[2] - 2.0 * w[1] + w[0] > 1e-10 * scale {
                return Err("utility is not concave on the check grid".into());
            }
        }
        Ok(())
    }
}

impl From<UtilityFamily> for UtilitySpec {
    fn from(family: UtilityFamily) -> Self {
        UtilitySpec {
            family,
            domain: None,
        }
    }
}

impl Table {
    fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let k = self.z.len();
        if k < 2 {
            out.push("table needs at least two knots".into());
            return out;
        }
        if self.values.len() != k || self.slopes.len() != k {
            out.push("table columns differ in length".into());
            return out;
        }
        if self.z.iter().chain(&self.values).chain(&self.slopes).any(|v| !v.is_finite()) {
            out.push("table contains non-finite entries".into());
            return out;
        }
        for i in 0..k - 1 {
            let h = self.z[i + 1] - self.z[i];
            if h <= 0.0 {
                out.push(format!("knots not strictly increasing at {i}"));
                continue;
            }
            let secant = (self.values[i + 1] - self.values[i]) / h;
            if secant <= 0.0 {
                out.push(format!("values not strictly increasing at {i}"));
            }
            if self.slopes[i] < secant || self.slopes[i + 1] > secant {
                out.push(format!("slopes inconsistent with concavity on [{i}, {}]", i + 1));
            }
        }
        if self.slopes.iter().any(|&s| s <= 0.0) {
            out.push("slopes must be positive".into());
        }
        out
    }

    fn segment(&self, z: f64) -> usize {
        match self.z.partition_point(|&k| k <= z) {
            0 => 0,
            p => (p - 1).min(self.z.len() - 2),
        }
    }

    /// Value and slope of the Hermite interpolant at `z`.
    fn eval(&self, z: f64) -> (f64, f64) {
        let i = self.segment(z);
        let h = self.z[i + 1] - self.z[i];
        let t = (z - self.z[i]) / h;
        let (y0, y1, d0, d1) = (
            self.values[i],
            self.values[i + 1],
            self.slopes[i],
            self.slopes[i + 1],
        );
        let t2 = t * t;
        let t3 = t2 * t;
        let value = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * d1;
        let slope = (6.0 * t2 - 6.0 * t) * (y0 - y1) / h
            + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (3.0 * t2 - 2.0 * t) * d1;
        (value, slope)
    }

    fn inverse(&self, c: f64) -> Option<f64> {
        let (first, last) = (self.values[0], *self.values.last().unwrap());
        if c < first || c > last {
            return None;
        }
        let (mut lo, mut hi) = (self.z[0], *self.z.last().unwrap());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid).0 < c {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}
