//! Time-varying OD demand.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::routes::Od;

/// Piecewise-linear function of time, constant outside its breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    /// `(time s, value)` pairs with strictly increasing times.
    pub points: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn constant(value: f64) -> Self {
        PiecewiseLinear {
            points: vec![(0.0, value)],
        }
    }

    /// Zero until `start`, linear up to `peak` at `ramp_end`, held until
    /// `hold_end`, linear down to zero at `end`.
    pub fn trapezoid(peak: f64, start: f64, ramp_end: f64, hold_end: f64, end: f64) -> Self {
        PiecewiseLinear {
            points: vec![(start, 0.0), (ramp_end, peak), (hold_end, peak), (end, 0.0)],
        }
    }

    pub fn validate(&self, field: &str) -> Result<(), ModelError> {
        if self.points.is_empty() {
            return Err(ModelError::param(field, "needs at least one breakpoint"));
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ModelError::param(field, "breakpoint times must be strictly increasing"));
            }
        }
        for &(t, v) in &self.points {
            if !t.is_finite() || !v.is_finite() || v < 0.0 {
                return Err(ModelError::param(field, "breakpoints must be finite with values >= 0"));
            }
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        let p = &self.points;
        if t <= p[0].0 {
            return p[0].1;
        }
        let last = p[p.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let i = p.partition_point(|&(x, _)| x <= t);
        let (t0, v0) = p[i - 1];
        let (t1, v1) = p[i];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PiecewiseLinear {
            points: self.points.iter().map(|&(t, v)| (t, v * factor)).collect(),
        }
    }
}

/// Demand of every OD class in [`Od::canonical`] order, veh/s.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    series: Vec<PiecewiseLinear>,
}

impl DemandProfile {
    pub fn zero() -> Self {
        DemandProfile {
            series: vec![PiecewiseLinear::constant(0.0); Od::canonical().len()],
        }
    }

    pub fn new(series: Vec<PiecewiseLinear>) -> Result<Self, ModelError> {
        let ods = Od::canonical();
        if series.len() != ods.len() {
            return Err(ModelError::Dimension {
                what: "demand series",
                expected: ods.len(),
                got: series.len(),
            });
        }
        for (s, od) in series.iter().zip(&ods) {
            s.validate(&format!("demand.{od}"))?;
        }
        Ok(DemandProfile { series })
    }

    pub fn set(&mut self, od: Od, series: PiecewiseLinear) {
        let i = Od::canonical().iter().position(|&o| o == od).expect("canonical OD");
        self.series[i] = series;
    }

    pub fn series(&self) -> &[PiecewiseLinear] {
        &self.series
    }

    pub fn at_into(&self, t: f64, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.series) {
            *o = s.at(t);
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.series.len()];
        self.at_into(t, &mut out);
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        DemandProfile {
            series: self.series.iter().map(|s| s.scaled(factor)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_shape() {
        let p = PiecewiseLinear::trapezoid(2.0, 0.0, 1800.0, 5400.0, 9000.0);
        assert_eq!(p.at(-5.0), 0.0);
        assert_eq!(p.at(0.0), 0.0);
        assert_eq!(p.at(900.0), 1.0);
        assert_eq!(p.at(1800.0), 2.0);
        assert_eq!(p.at(3000.0), 2.0);
        assert_eq!(p.at(7200.0), 1.0);
        assert_eq!(p.at(9000.0), 0.0);
        assert_eq!(p.at(10800.0), 0.0);
    }

    #[test]
    fn rejects_bad_breakpoints() {
        let p = PiecewiseLinear {
            points: vec![(10.0, 1.0), (10.0, 2.0)],
        };
        assert!(p.validate("x").is_err());
        let n = PiecewiseLinear {
            points: vec![(0.0, -1.0)],
        };
        assert!(n.validate("x").is_err());
        assert!(DemandProfile::new(vec![]).is_err());
    }
}
