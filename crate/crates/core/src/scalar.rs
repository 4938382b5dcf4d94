//! Scalar abstraction shared by the material model and the residual kernels.
//!
//! Everything pointwise in this crate is written once against [`Scalar`] and
//! instantiated three ways: `f64` for production solves, `f32` where a caller
//! wants it, and [`Jet`] to differentiate residual stencils exactly. The
//! assembled Jacobians used by Newton and by the adjoint are obtained by
//! evaluating the same kernels on jets, so the forward residual and its
//! derivative cannot drift apart.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

/// Floating point type usable by the model: `f32`, `f64` or a [`Jet`].
pub trait Scalar: Float + FromPrimitive + fmt::Debug + Send + Sync + 'static {
    /// Lift an `f64` constant.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    /// Value part as `f64`.
    #[inline]
    fn re(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
impl<const N: usize> Scalar for Jet<N> {}

/// First-order forward-mode dual number with `N` directional derivatives.
#[derive(Clone, Copy, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> fmt::Debug for Jet<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Jet({} ; {:?})", self.v, &self.d[..])
    }
}

impl<const N: usize> Jet<N> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Independent variable number `i`.
    #[inline]
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    /// Apply the chain rule for a unary function with value `f` and slope `df`.
    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= df;
        }
        Self { v: f, d }
    }
}

impl<const N: usize> PartialOrd for Jet<N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.v.partial_cmp(&other.v)
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Self {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Rem for Jet<N> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        let q = (self.v / rhs.v).trunc();
        self - rhs * Self::constant(q)
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const N: usize> AddAssign for Jet<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Jet<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign for Jet<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Zero for Jet<N> {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0 && self.d.iter().all(|x| *x == 0.0)
    }
}

impl<const N: usize> One for Jet<N> {
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl<const N: usize> Num for Jet<N> {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<const N: usize> ToPrimitive for Jet<N> {
    fn to_i64(&self) -> Option<i64> {
        self.v.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.v.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.v)
    }
}

impl<const N: usize> NumCast for Jet<N> {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::constant)
    }
}

impl<const N: usize> FromPrimitive for Jet<N> {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Self::constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Self::constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Self::constant(n))
    }
}

impl<const N: usize> Float for Jet<N> {
    fn nan() -> Self {
        Self::constant(f64::NAN)
    }
    fn infinity() -> Self {
        Self::constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::constant(-0.0)
    }
    fn min_value() -> Self {
        Self::constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::constant(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Self::constant(f64::EPSILON)
    }
    fn max_value() -> Self {
        Self::constant(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.v.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.v.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.v.is_finite()
    }
    fn is_normal(self) -> bool {
        self.v.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.v.classify()
    }
    fn floor(self) -> Self {
        self.chain(self.v.floor(), 0.0)
    }
    fn ceil(self) -> Self {
        self.chain(self.v.ceil(), 0.0)
    }
    fn round(self) -> Self {
        self.chain(self.v.round(), 0.0)
    }
    fn trunc(self) -> Self {
        self.chain(self.v.trunc(), 0.0)
    }
    fn fract(self) -> Self {
        self.chain(self.v.fract(), 1.0)
    }
    fn abs(self) -> Self {
        let s = if self.v < 0.0 { -1.0 } else { 1.0 };
        self.chain(self.v.abs(), s)
    }
    fn signum(self) -> Self {
        self.chain(self.v.signum(), 0.0)
    }
    fn is_sign_positive(self) -> bool {
        self.v.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.v.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        self.chain(self.v.powi(n), n as f64 * self.v.powi(n - 1))
    }
    fn powf(self, n: Self) -> Self {
        let v = self.v.powf(n.v);
        let mut out = Self::constant(v);
        // d(x^y) = y x^(y-1) dx + x^y ln(x) dy
        let dx = if n.v == 0.0 {
            0.0
        } else {
            n.v * self.v.powf(n.v - 1.0)
        };
        let dy = if self.v > 0.0 { v * self.v.ln() } else { 0.0 };
        for i in 0..N {
            out.d[i] = dx * self.d[i] + dy * n.d[i];
        }
        out
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.v.exp2();
        self.chain(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.v.log2(), 1.0 / (self.v * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.chain(self.v.log10(), 1.0 / (self.v * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if other.v > self.v {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.v < self.v {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.v > other.v {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        let c = self.v.cbrt();
        self.chain(c, 1.0 / (3.0 * c * c))
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        self.chain(t, 1.0 + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.v.asin(), 1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn acos(self) -> Self {
        self.chain(self.v.acos(), -1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn atan2(self, other: Self) -> Self {
        let r2 = self.v * self.v + other.v * other.v;
        let mut out = Self::constant(self.v.atan2(other.v));
        for i in 0..N {
            out.d[i] = (other.v * self.d[i] - self.v * other.d[i]) / r2;
        }
        out
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.v.exp_m1(), self.v.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    fn sinh(self) -> Self {
        self.chain(self.v.sinh(), self.v.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.v.cosh(), self.v.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.v.asinh(), 1.0 / (self.v * self.v + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.chain(self.v.acosh(), 1.0 / (self.v * self.v - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.chain(self.v.atanh(), 1.0 / (1.0 - self.v * self.v))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.v.integer_decode()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn unary_derivatives_match_central_differences() {
        let x = 0.37;
        let cases: Vec<(fn(Jet<1>) -> Jet<1>, fn(f64) -> f64)> = vec![
            (|a| a.sqrt(), |a| a.sqrt()),
            (|a| a.exp(), |a| a.exp()),
            (|a| a.ln(), |a| a.ln()),
            (|a| a.tanh(), |a| a.tanh()),
            (|a| a.powi(7), |a| a.powi(7)),
            (|a| a.powf(Jet::constant(2.5)), |a| a.powf(2.5)),
            (|a| a.recip(), |a| a.recip()),
            (|a| a.atan(), |a| a.atan()),
            (|a| a.cbrt(), |a| a.cbrt()),
            (|a| a.sinh(), |a| a.sinh()),
        ];
        for (jet_f, f) in cases {
            let j = jet_f(Jet::var(x, 0));
            assert!((j.v - f(x)).abs() < 1e-15);
            let slope = fd(f, x);
            assert!(
                (j.d[0] - slope).abs() < 1e-8 * slope.abs().max(1.0),
                "{} vs {}",
                j.d[0],
                slope
            );
        }
    }

    #[test]
    fn binary_ops_follow_product_and_quotient_rules() {
        let a = Jet::<2>::var(1.5, 0);
        let b = Jet::<2>::var(-0.25, 1);
        let p = a * b;
        assert_eq!(p.d, [-0.25, 1.5]);
        let q = a / b;
        assert!((q.d[0] - 1.0 / -0.25).abs() < 1e-14);
        assert!((q.d[1] + 1.5 / (0.25 * 0.25)).abs() < 1e-12);
        let e = a.powf(b);
        let h = 1e-7;
        let fa = ((1.5f64 + h).powf(-0.25) - (1.5f64 - h).powf(-0.25)) / (2.0 * h);
        let fb = (1.5f64.powf(-0.25 + h) - 1.5f64.powf(-0.25 - h)) / (2.0 * h);
        assert!((e.d[0] - fa).abs() < 1e-7);
        assert!((e.d[1] - fb).abs() < 1e-7);
    }

    #[test]
    fn generic_code_runs_on_all_scalars() {
        fn poly<T: Scalar>(x: T) -> T {
            x * x * T::c(3.0) - x + T::one()
        }
        assert_eq!(poly(2.0f64), 11.0);
        assert_eq!(poly(2.0f32), 11.0);
        let j = poly(Jet::<1>::var(2.0, 0));
        assert_eq!(j.v, 11.0);
        assert_eq!(j.d[0], 11.0);
    }
}
