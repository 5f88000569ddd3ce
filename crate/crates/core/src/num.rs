//! Scalar arithmetic shared by every engine.
//!
//! Two modes are supported: exact rationals ([`Rational`]) for verification
//! and log-domain doubles ([`LogWeight`]) for larger runs. Engines are generic
//! over [`Scalar`] so both modes run the same code path.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::ModelError;

pub type Rational = BigRational;

/// Arithmetic needed by the partition-function and ratio recursions.
///
/// Only non-negative values ever flow through the engines, so the trait has no
/// subtraction.
pub trait Scalar: Clone + fmt::Debug + PartialEq + Send + Sync + 'static {
    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    fn plus(&self, other: &Self) -> Self;
    fn times(&self, other: &Self) -> Self;
    /// Caller guarantees `other` is non-zero.
    fn over(&self, other: &Self) -> Self;
    fn from_rational(r: &Rational) -> Self;
    fn to_f64(&self) -> f64;
    /// Human and JSON rendering of a value.
    fn to_json(&self) -> serde_json::Value;
}

impl Scalar for Rational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        One::one()
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn plus(&self, other: &Self) -> Self {
        self + other
    }
    fn times(&self, other: &Self) -> Self {
        self * other
    }
    fn over(&self, other: &Self) -> Self {
        self / other
    }
    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn to_json(&self) -> serde_json::Value {
        serde_json::Value::String(format_rational(self))
    }
}

/// A non-negative double stored as its natural logarithm.
///
/// Products and quotients are additions in log space, so deep recursions
/// neither underflow nor overflow. Zero is represented by `-inf`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogWeight(f64);

impl LogWeight {
    pub fn from_f64(x: f64) -> Self {
        debug_assert!(x >= 0.0, "LogWeight holds non-negative values only");
        LogWeight(x.ln())
    }

    pub fn ln(self) -> f64 {
        self.0
    }
}

impl Scalar for LogWeight {
    fn zero() -> Self {
        LogWeight(f64::NEG_INFINITY)
    }
    fn one() -> Self {
        LogWeight(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
    fn plus(&self, other: &Self) -> Self {
        let (hi, lo) = if self.0 >= other.0 { (self.0, other.0) } else { (other.0, self.0) };
        if hi == f64::NEG_INFINITY {
            return *self;
        }
        LogWeight(hi + (lo - hi).exp().ln_1p())
    }
    fn times(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        LogWeight(self.0 + other.0)
    }
    fn over(&self, other: &Self) -> Self {
        if self.is_zero() {
            return Self::zero();
        }
        LogWeight(self.0 - other.0)
    }
    fn from_rational(r: &Rational) -> Self {
        // ln(p/q) = ln p - ln q keeps huge numerators and denominators finite.
        if Zero::is_zero(r) {
            return Self::zero();
        }
        LogWeight(big_ln(r.numer()) - big_ln(r.denom()))
    }
    fn to_f64(&self) -> f64 {
        self.0.exp()
    }
    fn to_json(&self) -> serde_json::Value {
        serde_json::json!(self.to_f64())
    }
}

fn big_ln(x: &BigInt) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().unwrap_or(f64::NAN).abs().ln();
    }
    let shift = bits - 64;
    let top: BigInt = x.abs() >> shift;
    top.to_f64().unwrap_or(f64::NAN).ln() + shift as f64 * std::f64::consts::LN_2
}

/// Render a rational as `"p/q"`, always with an explicit denominator.
pub fn format_rational(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Parse `"p/q"`, `"p"`, or a decimal literal. Decimals are taken at the exact
/// value of the nearest double.
pub fn parse_rational(text: &str) -> Result<Rational, ModelError> {
    let t = text.trim();
    let bad = || ModelError::Number(text.to_string());
    if let Some((p, q)) = t.split_once('/') {
        let p = BigInt::from_str(p.trim()).map_err(|_| bad())?;
        let q = BigInt::from_str(q.trim()).map_err(|_| bad())?;
        if q.is_zero() {
            return Err(bad());
        }
        return Ok(Rational::new(p, q));
    }
    if let Ok(p) = BigInt::from_str(t) {
        return Ok(Rational::from_integer(p));
    }
    let x: f64 = t.parse().map_err(|_| bad())?;
    rational_from_f64(x).ok_or_else(bad)
}

pub fn rational_from_f64(x: f64) -> Option<Rational> {
    if !x.is_finite() {
        return None;
    }
    Rational::from_float(x)
}

pub fn ratio(p: i64, q: i64) -> Rational {
    Rational::new(BigInt::from(p), BigInt::from(q))
}

pub fn int(p: i64) -> Rational {
    Rational::from_integer(BigInt::from(p))
}

pub fn is_negative(r: &Rational) -> bool {
    r.is_negative()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fraction_forms() {
        assert_eq!(parse_rational("3/6").unwrap(), ratio(1, 2));
        assert_eq!(parse_rational(" 7 ").unwrap(), int(7));
        assert_eq!(parse_rational("0.25").unwrap(), ratio(1, 4));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("abc").is_err());
    }

    #[test]
    fn format_keeps_denominator() {
        assert_eq!(format_rational(&int(6)), "6/1");
        assert_eq!(format_rational(&ratio(2, 4)), "1/2");
    }

    #[test]
    fn log_weight_arithmetic() {
        let a = LogWeight::from_f64(2.0);
        let b = LogWeight::from_f64(3.0);
        assert!((a.plus(&b).to_f64() - 5.0).abs() < 1e-12);
        assert!((a.times(&b).to_f64() - 6.0).abs() < 1e-12);
        assert!((b.over(&a).to_f64() - 1.5).abs() < 1e-12);
        let z = LogWeight::zero();
        assert!(z.plus(&z).is_zero());
        assert_eq!(z.plus(&a), a);
        assert!(a.times(&z).is_zero());
    }

    #[test]
    fn log_weight_from_huge_rational() {
        let big = Rational::new(BigInt::from(1) << 3000u32, BigInt::from(1) << 2999u32);
        let w = LogWeight::from_rational(&big);
        assert!((w.to_f64() - 2.0).abs() < 1e-9);
    }
}
