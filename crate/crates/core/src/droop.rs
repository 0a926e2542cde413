//! Piecewise-linear Q(V) characteristic of legacy inverters.

use thiserror::Error;

/// Q(V) droop curve in per-unit (generator convention: positive Q is
/// injected). Zero output inside `[v_db_lo, v_db_hi]`, linear ramps to
/// `±q_max` reached at `v_lo` / `v_hi`, clamped beyond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroopCurve {
    pub v_lo: f64,
    pub v_db_lo: f64,
    pub v_db_hi: f64,
    pub v_hi: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid droop curve: {0}")]
pub struct DroopCurveError(pub &'static str);

impl DroopCurve {
    pub const DEFAULT_DEADBAND: f64 = 0.01;
    pub const DEFAULT_FULL_OUTPUT_DEVIATION: f64 = 0.05;
    pub const DEFAULT_Q_FRACTION: f64 = 0.6;

    pub fn new(
        v_lo: f64,
        v_db_lo: f64,
        v_db_hi: f64,
        v_hi: f64,
        q_max: f64,
    ) -> Result<Self, DroopCurveError> {
        let curve = Self {
            v_lo,
            v_db_lo,
            v_db_hi,
            v_hi,
            q_max,
        };
        curve.validate()?;
        Ok(curve)
    }

    /// Grid-code style default: deadband 1.00 ± 0.01 p.u., full output at
    /// ±0.05 p.u. deviation, `q_max` = 60 % of the rating.
    pub fn for_rating(rating_pu: f64) -> Self {
        Self {
            v_lo: 1.0 - Self::DEFAULT_FULL_OUTPUT_DEVIATION,
            v_db_lo: 1.0 - Self::DEFAULT_DEADBAND,
            v_db_hi: 1.0 + Self::DEFAULT_DEADBAND,
            v_hi: 1.0 + Self::DEFAULT_FULL_OUTPUT_DEVIATION,
            q_max: Self::DEFAULT_Q_FRACTION * rating_pu,
        }
    }

    pub fn validate(&self) -> Result<(), DroopCurveError> {
        let all = [self.v_lo, self.v_db_lo, self.v_db_hi, self.v_hi, self.q_max];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(DroopCurveError("non-finite parameter"));
        }
        if !(self.v_lo < self.v_db_lo && self.v_db_lo <= self.v_db_hi && self.v_db_hi < self.v_hi) {
            return Err(DroopCurveError("breakpoints must satisfy v_lo < v_db_lo <= v_db_hi < v_hi"));
        }
        if self.q_max < 0.0 {
            return Err(DroopCurveError("q_max must be non-negative"));
        }
        Ok(())
    }

    /// Steepest slope |dQ/dV| of the curve.
    pub fn max_slope(&self) -> f64 {
        let lo = self.q_max / (self.v_db_lo - self.v_lo);
        let hi = self.q_max / (self.v_hi - self.v_db_hi);
        lo.max(hi)
    }
}

/// Reactive output of `curve` at terminal voltage `v` (p.u.).
pub fn qv_droop(curve: &DroopCurve, v: f64) -> f64 {
    if v >= curve.v_hi {
        -curve.q_max
    } else if v > curve.v_db_hi {
        -curve.q_max * (v - curve.v_db_hi) / (curve.v_hi - curve.v_db_hi)
    } else if v >= curve.v_db_lo {
        0.0
    } else if v > curve.v_lo {
        curve.q_max * (curve.v_db_lo - v) / (curve.v_db_lo - curve.v_lo)
    } else {
        curve.q_max
    }
}
