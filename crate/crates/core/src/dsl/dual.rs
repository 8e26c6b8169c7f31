//! Forward-mode dual numbers.
//!
//! `Dual<f64>` carries one directional derivative; `Dual<Dual<f64>>` carries
//! the mixed second derivative along two seed directions, which is how the
//! curvature code obtains exact second derivatives of metric entries.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic the expression evaluator needs from its number type.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + std::fmt::Debug
{
    fn cst(v: f64) -> Self;
    /// The real part all the way down.
    fn re(&self) -> f64;
    /// True when every infinitesimal part is zero.
    fn is_const(&self) -> bool;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;

    fn abs(self) -> Self {
        if self.re() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn is_const(&self) -> bool {
        true
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Dual { re, eps }
    }

    pub fn variable(re: T) -> Self {
        Dual { re, eps: T::cst(1.0) }
    }

    fn chain(self, value: T, deriv: T) -> Self {
        // Skip the product when the seed is zero so that infinite derivatives
        // at e.g. sqrt(0) do not poison constant branches with NaN.
        let eps = if self.eps.is_const() && self.eps.re() == 0.0 {
            T::cst(0.0)
        } else {
            self.eps * deriv
        };
        Dual { re: value, eps }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.eps * o.re + self.re * o.eps)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn cst(v: f64) -> Self {
        Dual::new(T::cst(v), T::cst(0.0))
    }
    fn re(&self) -> f64 {
        self.re.re()
    }
    fn is_const(&self) -> bool {
        self.re.is_const() && self.eps.is_const() && self.eps.re() == 0.0
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), T::cst(1.0) / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::cst(0.5) / s)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::cst(1.0);
        }
        self.chain(self.re.powi(n), self.re.powi(n - 1).scale(n as f64))
    }
    fn powf(self, p: f64) -> Self {
        self.chain(self.re.powf(p), self.re.powf(p - 1.0).scale(p))
    }
}

pub type Dual2 = Dual<Dual<f64>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let x = Dual::variable(3.0);
        let y = x * x;
        assert_eq!(y.re, 9.0);
        assert_eq!(y.eps, 6.0);
    }

    #[test]
    fn nested_dual_gives_mixed_second_derivative() {
        // f(x, y) = x² y, ∂x∂y f = 2x
        let x: Dual2 = Dual::new(Dual::variable(2.0), Dual::cst(0.0));
        let y: Dual2 = Dual::new(Dual::cst(5.0), Dual::cst(1.0));
        let f = x * x * y;
        assert!((f.eps.eps - 4.0).abs() < 1e-14);
    }

    #[test]
    fn sqrt_at_zero_with_zero_seed_is_finite() {
        let x = Dual::new(0.0, 0.0);
        let y = x.sqrt();
        assert_eq!(y.eps, 0.0);
    }
}
