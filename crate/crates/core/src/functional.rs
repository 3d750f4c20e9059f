//! Scalar trajectory summaries, their directional derivatives and closed-form
//! Riesz representers under the quadrature measure.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Scalar};
use crate::error::{DopeError, Result};
use crate::grid::QuadratureWeights;

/// Target functional together with its hyperparameters.
///
/// Serializes as `{"kind": "tat", "kappa": 8.0, "c_star": 0.5}` and similar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    /// Normalized area under the curve.
    Auc,
    /// Smoothed time above `c_star`.
    Tat { kappa: f64, c_star: f64 },
    /// Temperature-`lambda` log-mean-exp, a smooth stand-in for the maximum.
    SoftCmax { lambda: f64 },
    /// Softplus-smoothed mass above threshold `c`.
    SmoothExcess { kappa_star: f64, c: f64 },
}

impl FunctionalSpec {
    pub fn auc() -> Self {
        FunctionalSpec::Auc
    }

    pub fn tat() -> Self {
        FunctionalSpec::Tat {
            kappa: 8.0,
            c_star: 0.5,
        }
    }

    pub fn soft_cmax() -> Self {
        FunctionalSpec::SoftCmax { lambda: 6.0 }
    }

    /// Smooth excess for the Darcy sharpness sweep value `kappa`.
    pub fn smooth_excess_sweep(kappa: f64) -> Self {
        FunctionalSpec::SmoothExcess {
            kappa_star: 7.5 + 2.5 * kappa,
            c: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FunctionalSpec::Auc => "auc",
            FunctionalSpec::Tat { .. } => "tat",
            FunctionalSpec::SoftCmax { .. } => "soft_cmax",
            FunctionalSpec::SmoothExcess { .. } => "smooth_excess",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(DopeError::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(DopeError::InvalidParameter(format!("{name} must be finite, got {v}")))
            }
        };
        match *self {
            FunctionalSpec::Auc => Ok(()),
            FunctionalSpec::Tat { kappa, c_star } => {
                positive("kappa", kappa)?;
                finite("c_star", c_star)
            }
            FunctionalSpec::SoftCmax { lambda } => positive("lambda", lambda),
            FunctionalSpec::SmoothExcess { kappa_star, c } => {
                positive("kappa_star", kappa_star)?;
                finite("c", c)
            }
        }
    }

    /// Discretized functional over any scalar type.
    pub fn evaluate<S: Scalar>(&self, u: &[S], w: &QuadratureWeights) -> S {
        let wv = w.values();
        let mean = |f: &dyn Fn(S) -> S| {
            u.iter()
                .zip(wv)
                .fold(S::constant(0.0), |acc, (&x, &wt)| acc + f(x).scale(wt))
        };
        match *self {
            FunctionalSpec::Auc => mean(&|x| x),
            FunctionalSpec::Tat { kappa, c_star } => {
                mean(&|x| (x - S::constant(c_star)).scale(kappa).sigmoid())
            }
            FunctionalSpec::SoftCmax { lambda } => {
                let shift = u.iter().map(|x| x.value()).fold(f64::NEG_INFINITY, f64::max);
                let shift = if shift.is_finite() { shift } else { 0.0 };
                let m = mean(&|x| (x - S::constant(shift)).scale(lambda).exp());
                m.ln().scale(1.0 / lambda) + S::constant(shift)
            }
            FunctionalSpec::SmoothExcess { kappa_star, c } => {
                mean(&|x| (x - S::constant(c)).scale(kappa_star).softplus().scale(1.0 / kappa_star))
            }
        }
    }
}

fn check(u: &[f64], w: &QuadratureWeights) -> Result<()> {
    if u.len() != w.len() {
        return Err(DopeError::Shape(format!(
            "grid function of length {} with {} quadrature weights",
            u.len(),
            w.len()
        )));
    }
    if let Some(i) = u.iter().position(|x| !x.is_finite()) {
        return Err(DopeError::NumericInput(format!("value {} at grid index {i}", u[i])));
    }
    Ok(())
}

/// `g(u)` on the grid.
pub fn functional_value(spec: &FunctionalSpec, u: &[f64], w: &QuadratureWeights) -> Result<f64> {
    spec.validate()?;
    check(u, w)?;
    Ok(spec.evaluate(u, w))
}

/// `d/dt g(u + t b)` at `t = 0`, by dual-number evaluation of `g`.
pub fn functional_jvp(
    spec: &FunctionalSpec,
    u: &[f64],
    b: &[f64],
    w: &QuadratureWeights,
) -> Result<f64> {
    spec.validate()?;
    check(u, w)?;
    check(b, w)?;
    let d: Vec<Dual> = u.iter().zip(b).map(|(&x, &t)| Dual::new(x, t)).collect();
    Ok(spec.evaluate(&d, w).tangent)
}

/// Coordinate gradient `∂g/∂u_δ`, one forward-mode pass per grid point.
///
/// Since `g` is differentiated along basis directions this equals
/// `w_δ · w_g(u)_δ`; it is the coefficient vector that turns a JVP into a
/// dot product once `u` is held fixed.
pub fn functional_gradient(spec: &FunctionalSpec, u: &[f64], w: &QuadratureWeights) -> Result<Vec<f64>> {
    spec.validate()?;
    check(u, w)?;
    let mut d: Vec<Dual> = u.iter().map(|&x| Dual::constant(x)).collect();
    let mut out = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        d[i].tangent = 1.0;
        out.push(spec.evaluate(&d, w).tangent);
        d[i].tangent = 0.0;
    }
    Ok(out)
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Closed-form Riesz representer `w_g(u)` with `Dg_u[b] = ⟨w_g(u), b⟩_w`.
pub fn riesz_representer(spec: &FunctionalSpec, u: &[f64], w: &QuadratureWeights) -> Result<Vec<f64>> {
    spec.validate()?;
    check(u, w)?;
    Ok(match *spec {
        FunctionalSpec::Auc => vec![1.0; u.len()],
        FunctionalSpec::Tat { kappa, c_star } => u
            .iter()
            .map(|&x| {
                let s = logistic(kappa * (x - c_star));
                kappa * s * (1.0 - s)
            })
            .collect(),
        FunctionalSpec::SoftCmax { lambda } => {
            let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = u.iter().map(|&x| (lambda * (x - m)).exp()).collect();
            let z: f64 = e.iter().zip(w.values()).map(|(a, b)| a * b).sum();
            e.into_iter().map(|v| v / z).collect()
        }
        FunctionalSpec::SmoothExcess { kappa_star, c } => {
            u.iter().map(|&x| logistic(kappa_star * (x - c))).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::trapezoid_weights_1d;

    #[test]
    fn constant_trajectories() {
        let w = trapezoid_weights_1d(128).unwrap();
        let ones = vec![1.0; 128];
        assert!((functional_value(&FunctionalSpec::auc(), &ones, &w).unwrap() - 1.0).abs() < 1e-12);
        let half = vec![0.5; 128];
        assert!((functional_value(&FunctionalSpec::tat(), &half, &w).unwrap() - 0.5).abs() < 1e-12);
        let c = vec![0.37; 128];
        assert!((functional_value(&FunctionalSpec::soft_cmax(), &c, &w).unwrap() - 0.37).abs() < 1e-12);
        let spec = FunctionalSpec::smooth_excess_sweep(0.4);
        let v = functional_value(&spec, &half, &w).unwrap();
        assert!((v - 2f64.ln() / 8.5).abs() < 1e-12);
    }

    #[test]
    fn representers_at_constants() {
        let w = trapezoid_weights_1d(64).unwrap();
        let half = vec![0.5; 64];
        assert_eq!(riesz_representer(&FunctionalSpec::auc(), &half, &w).unwrap(), vec![1.0; 64]);
        let r = riesz_representer(&FunctionalSpec::tat(), &half, &w).unwrap();
        assert!(r.iter().all(|v| (v - 2.0).abs() < 1e-15));
        let r = riesz_representer(&FunctionalSpec::soft_cmax(), &[0.9; 64], &w).unwrap();
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn auc_jvp_is_weighted_sum() {
        let w = trapezoid_weights_1d(10).unwrap();
        let u: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
        let jvp = functional_jvp(&FunctionalSpec::auc(), &u, &b, &w).unwrap();
        let direct: f64 = b.iter().zip(w.values()).map(|(x, y)| x * y).sum();
        assert_eq!(jvp, direct);
    }

    #[test]
    fn rejects_bad_input() {
        let w = trapezoid_weights_1d(4).unwrap();
        let err = functional_value(&FunctionalSpec::auc(), &[0.0, f64::NAN, 0.0, 0.0], &w);
        assert!(matches!(err, Err(DopeError::NumericInput(_))));
        let err = functional_value(&FunctionalSpec::SoftCmax { lambda: 0.0 }, &[0.0; 4], &w);
        assert!(matches!(err, Err(DopeError::InvalidParameter(_))));
        assert!(functional_jvp(&FunctionalSpec::auc(), &[0.0; 4], &[0.0; 3], &w).is_err());
    }

    #[test]
    fn soft_cmax_survives_large_values() {
        let w = trapezoid_weights_1d(8).unwrap();
        let u = vec![500.0, 510.0, 490.0, 505.0, 500.0, 500.0, 500.0, 499.0];
        let v = functional_value(&FunctionalSpec::soft_cmax(), &u, &w).unwrap();
        assert!(v.is_finite() && v < 510.0 && v > 490.0);
    }

    #[test]
    fn json_round_trip() {
        for spec in [
            FunctionalSpec::auc(),
            FunctionalSpec::tat(),
            FunctionalSpec::soft_cmax(),
            FunctionalSpec::smooth_excess_sweep(1.0),
        ] {
            let s = serde_json::to_string(&spec).unwrap();
            assert!(s.contains(&format!("\"kind\":\"{}\"", spec.name())));
            let back: FunctionalSpec = serde_json::from_str(&s).unwrap();
            assert_eq!(back, spec);
        }
        let parsed: FunctionalSpec =
            serde_json::from_str(r#"{"kind":"smooth_excess","kappa_star":10.0,"c":0.5}"#).unwrap();
        assert_eq!(parsed, FunctionalSpec::smooth_excess_sweep(1.0));
    }
}
