//! Scalar abstraction so the network and kernel math can run either on plain
//! `f64` or on dual numbers (value + tangent). Running a reverse pass in dual
//! arithmetic, with a tangent seeded on one input, yields the directional
//! derivative of every gradient it produces — this is how the nested
//! gradient-penalty term is differentiated exactly.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + PartialEq
{
    fn from_f64(v: f64) -> Self;
    /// Primal value (drops any tangent).
    fn value(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powf_const(self, p: f64) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
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
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn powf_const(self, p: f64) -> Self {
        self.powf(p)
    }
}

/// First-order dual number: `v + dv * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub dv: f64,
}

impl Dual {
    #[inline]
    pub fn new(v: f64, dv: f64) -> Self {
        Dual { v, dv }
    }
    #[inline]
    pub fn constant(v: f64) -> Self {
        Dual { v, dv: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.dv + o.dv)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.dv - o.dv)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.dv + self.dv * o.v)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual::new(self.v * inv, (self.dv - self.v * o.dv * inv) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.dv)
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, e * self.dv)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Dual::new(r, 0.5 * self.dv / r)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, (1.0 - t * t) * self.dv)
    }
    #[inline]
    fn powf_const(self, p: f64) -> Self {
        let y = self.v.powf(p);
        Dual::new(y, p * self.v.powf(p - 1.0) * self.dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_tracks_product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x * x; // d(x^2)/dx = 2x
        assert_eq!(y.v, 9.0);
        assert_eq!(y.dv, 6.0);
    }

    #[test]
    fn dual_chain_rule_through_exp() {
        let x = Dual::new(0.5, 2.0);
        let y = (x * x).exp(); // d/dx exp(x^2) = 2x exp(x^2); seeded tangent 2
        let expect = 2.0 * 2.0 * 0.5 * (0.25f64).exp();
        assert!((y.dv - expect).abs() < 1e-14);
    }

    #[test]
    fn dual_div_matches_quotient_rule() {
        let x = Dual::new(2.0, 1.0);
        let y = Dual::constant(4.0);
        let q = x / y;
        assert!((q.v - 0.5).abs() < 1e-15);
        assert!((q.dv - 0.25).abs() < 1e-15);
    }
}
