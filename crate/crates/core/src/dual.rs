//! Forward-mode dual numbers.
//!
//! Score maps are written once, generic over [`Scalar`], and evaluated either
//! on plain `f64` (the score) or on [`Dual`] (score plus a directional
//! derivative). The real part of every `Dual` operation is computed with the
//! same expression as the `f64` path, so the primal output of a JVP is
//! bit-identical to a plain evaluation.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + std::fmt::Debug
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// `x · sigmoid(x)`
    fn silu(self) -> Self;
    /// `ln(1 + eˣ)`
    fn softplus(self) -> Self;
    fn relu(self) -> Self;

    #[inline]
    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
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
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn silu(self) -> Self {
        self * sigmoid(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn relu(self) -> Self {
        self.max(0.0)
    }
}

/// `re + du·δ` with `δ² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }

    /// Lifts a point and a direction into dual coordinates.
    pub fn seed(x: &[f64], v: &[f64]) -> Vec<Dual> {
        x.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect()
    }

    pub fn split(xs: &[Dual]) -> (Vec<f64>, Vec<f64>) {
        xs.iter().map(|d| (d.re, d.du)).unzip()
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.du * o.re + self.re * o.du)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.re / o.re,
            (self.du * o.re - self.re * o.du) / (o.re * o.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    #[inline]
    fn silu(self) -> Self {
        let s = sigmoid(self.re);
        Dual::new(self.re * s, self.du * (s + self.re * s * (1.0 - s)))
    }
    #[inline]
    fn softplus(self) -> Self {
        Dual::new(softplus_f64(self.re), self.du * sigmoid(self.re))
    }
    #[inline]
    fn relu(self) -> Self {
        if self.re > 0.0 {
            self
        } else {
            Dual::new(self.re.max(0.0), 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementary_derivatives_match_finite_differences() {
        for &x in &[-2.3, -0.4, 0.1, 0.9, 3.7] {
            let d = Dual::new(x, 1.0);
            let cases: [(Dual, fn(f64) -> f64); 5] = [
                (d.exp(), f64::exp),
                (d.tanh(), f64::tanh),
                (d.silu(), <f64 as Scalar>::silu),
                (d.softplus(), <f64 as Scalar>::softplus),
                ((d * d) / (d.exp() + Dual::cst(1.0)), |y| y * y / (y.exp() + 1.0)),
            ];
            for (out, f) in cases {
                assert_eq!(out.re, f(x));
                assert!((out.du - central(f, x)).abs() < 1e-7, "x={x} {out:?}");
            }
        }
        let d = Dual::new(2.0, 1.0);
        assert!((d.ln().du - 0.5).abs() < 1e-15);
    }

    #[test]
    fn primal_parts_are_bit_identical() {
        let x = 0.3718;
        let d = Dual::new(x, -4.0);
        assert_eq!(d.silu().re.to_bits(), Scalar::silu(x).to_bits());
        assert_eq!(d.softplus().re.to_bits(), Scalar::softplus(x).to_bits());
        assert_eq!((d / Dual::cst(3.0)).re.to_bits(), (x / 3.0).to_bits());
    }
}
