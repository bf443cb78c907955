//! Scalar abstraction for forward-mode derivatives.
//!
//! All network evaluation code is generic over [`Real`]. Instantiating with
//! `f64` gives plain evaluation; [`Dual`] propagates one tangent, and nesting
//! (`Dual<Dual<f64>>`) gives second derivatives. Parameters themselves can be
//! lifted to duals, which is how directional parameter derivatives
//! (JVPs along a fixed direction) are obtained without a tape.

use std::ops::{Add, Div, Mul, Neg, Sub};

const LN2_HI: f64 = 0.693_147_180_559_945_3;
const LN2_LO: f64 = 2.371_992_416_875_515_8e-17;
const INV_LN2: f64 = 1.442_695_040_888_963_4;

/// exp with a fixed, platform-independent polynomial core.
///
/// |rel err| < 4e-14 on the finite range; monotone enough for the 1e-5
/// central-difference checks used throughout the test suite.
#[inline]
pub fn exp_fast(x: f64) -> f64 {
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        return 0.0;
    }
    let k = (x * INV_LN2).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Degree-11 Taylor of exp on |r| <= ln2/2.
    let mut p = 1.0 / 39_916_800.0; // 1/11!
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // Scale by 2^k through the exponent bits, in two steps near the limits.
    let ki = k as i64;
    if (-1000..=1000).contains(&ki) {
        p * f64::from_bits(((ki + 1023) as u64) << 52)
    } else {
        let half = ki / 2;
        let rest = ki - half;
        p * f64::from_bits(((half + 1023) as u64) << 52)
            * f64::from_bits(((rest + 1023) as u64) << 52)
    }
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + exp_fast(-x))
}

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Primal (value) part, discarding tangents.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
    #[inline]
    fn silu(self) -> Self {
        self * self.sigmoid()
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> f64 {
        exp_fast(self)
    }
    #[inline]
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> f64 {
        // Via exp_fast so value and dual paths agree bit-for-bit.
        let e = exp_fast(-2.0 * self.abs());
        let t = (1.0 - e) / (1.0 + e);
        if self < 0.0 {
            -t
        } else {
            t
        }
    }
}

/// First-order dual number carrying one tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<T: Real> {
    pub v: T,
    pub d: T,
}

impl<T: Real> Dual<T> {
    #[inline]
    pub fn new(v: T, d: T) -> Self {
        Dual { v, d }
    }
    #[inline]
    pub fn constant(v: T) -> Self {
        Dual { v, d: T::zero() }
    }
    #[inline]
    pub fn seeded(v: T) -> Self {
        Dual { v, d: T::one() }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}
impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}
impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
}
impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.v;
        let q = self.v * inv;
        Dual::new(q, (self.d - q * o.d) * inv)
    }
}
impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.d)
    }
}

impl<T: Real> Real for Dual<T> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(T::from_f64(v))
    }
    #[inline]
    fn value(self) -> f64 {
        self.v.value()
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    #[inline]
    fn sin(self) -> Self {
        Dual::new(self.v.sin(), self.d * self.v.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        Dual::new(self.v.cos(), -(self.d * self.v.sin()))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (T::one() - t * t))
    }
}

/// Second-order scalar: value, first and second derivative w.r.t. one input.
pub type Dual2 = Dual<Dual<f64>>;

/// Seed a Dual2 for d/dx and d^2/dx^2 extraction.
#[inline]
pub fn dual2_seed(x: f64) -> Dual2 {
    Dual::new(Dual::new(x, 1.0), Dual::new(1.0, 0.0))
}

/// (value, f', f'') from a Dual2 result.
#[inline]
pub fn dual2_unpack(y: Dual2) -> (f64, f64, f64) {
    (y.v.v, y.v.d, y.d.d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_fast_matches_std() {
        for i in -300..300 {
            let x = i as f64 * 0.37;
            let got = exp_fast(x);
            let want = x.exp();
            let rel = (got - want).abs() / want.max(1e-300);
            assert!(rel < 1e-12, "x={x} rel={rel:.2e}");
        }
        assert_eq!(exp_fast(1000.0), f64::INFINITY);
        assert_eq!(exp_fast(-1000.0), 0.0);
    }

    #[test]
    fn dual_first_derivatives() {
        let f = |x: Dual<f64>| x.sin() * x.exp() + x.tanh() / (x + Dual::from_f64(2.0));
        let x0 = 0.7;
        let y = f(Dual::seeded(x0));
        let h = 1e-6;
        let num = (f(Dual::constant(x0 + h)).v - f(Dual::constant(x0 - h)).v) / (2.0 * h);
        assert!((y.d - num).abs() < 1e-8, "{} vs {}", y.d, num);
    }

    #[test]
    fn dual2_second_derivative_of_tanh() {
        let x0 = 0.3;
        let (v, d1, d2) = dual2_unpack(dual2_seed(x0).tanh());
        let t = x0.tanh();
        assert!((v - t).abs() < 1e-12);
        assert!((d1 - (1.0 - t * t)).abs() < 1e-12);
        let want = -2.0 * t * (1.0 - t * t);
        assert!((d2 - want).abs() < 1e-10, "{d2} vs {want}");
    }

    #[test]
    fn sigmoid_silu_values() {
        assert!((sigmoid_f64(0.0) - 0.5).abs() < 1e-15);
        let x = 1.3f64;
        assert!((x.silu() - x * sigmoid_f64(x)).abs() < 1e-15);
    }
}
