//! Forward-mode dual numbers and the scalar abstraction the functionals are
//! written against.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Minimal scalar interface shared by `f64` and [`Dual`].
///
/// Only the field operations plus `exp`/`ln` are primitive; everything else
/// (sigmoid, softplus, log-mean-exp) is composed from these so that the
/// derivative comes from the chain rule rather than a hand-written formula.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::constant(c)
    }

    /// Logistic function, branch-stable for large |z|.
    fn sigmoid(self) -> Self {
        let one = Self::constant(1.0);
        if self.value() >= 0.0 {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }

    /// `log(1 + exp(z))` without overflow.
    fn softplus(self) -> Self {
        let one = Self::constant(1.0);
        if self.value() >= 0.0 {
            self + (one + (-self).exp()).ln()
        } else {
            (one + self.exp()).ln()
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// A value together with its directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub primal: f64,
    pub tangent: f64,
}

impl Dual {
    pub fn new(primal: f64, tangent: f64) -> Self {
        Self { primal, tangent }
    }

    pub fn variable(primal: f64) -> Self {
        Self::new(primal, 1.0)
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.primal + o.primal, self.tangent + o.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.primal - o.primal, self.tangent - o.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(
            self.primal * o.primal,
            self.tangent * o.primal + self.primal * o.tangent,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.primal / o.primal;
        Dual::new(q, (self.tangent - q * o.tangent) / o.primal)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.primal, -self.tangent)
    }
}

impl Scalar for Dual {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn value(self) -> f64 {
        self.primal
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.primal.exp();
        Dual::new(e, e * self.tangent)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.primal.ln(), self.tangent / self.primal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_on_composite() {
        // f(x) = exp(x) * x / (1 + x), f'(x) = exp(x) (x^2 + x + 1) / (1 + x)^2
        let x = 0.7;
        let d = Dual::variable(x);
        let f = d.exp() * d / (Dual::constant(1.0) + d);
        let expected = x.exp() * (x * x + x + 1.0) / (1.0 + x).powi(2);
        assert!((f.tangent - expected).abs() < 1e-14);
    }

    #[test]
    fn sigmoid_and_softplus_tangents() {
        for &z in &[-40.0, -3.0, -0.1, 0.0, 0.2, 5.0, 40.0] {
            let s = Dual::variable(z).sigmoid();
            let sv = 1.0 / (1.0 + (-z).exp());
            assert!((s.primal - sv).abs() < 1e-15);
            assert!((s.tangent - sv * (1.0 - sv)).abs() < 1e-15);
            let sp = Dual::variable(z).softplus();
            assert!((sp.tangent - sv).abs() < 1e-15);
            assert!(sp.primal.is_finite());
        }
        assert!((0.0f64.softplus() - 2f64.ln()).abs() < 1e-15);
    }
}
