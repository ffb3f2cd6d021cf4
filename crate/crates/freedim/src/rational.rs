//! Exact rational arithmetic helpers: parsing and printing the `"p/q"`
//! wire format, directed decimal rounding for interval endpoints, and a
//! serde adapter so rationals never travel as floats.

use num_bigint::{BigInt, Sign};
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serializer};
use std::fmt::Write as _;
use thiserror::Error;

pub type Rational = num_rational::BigRational;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RationalParseError {
    #[error("empty rational literal")]
    Empty,
    #[error("invalid rational literal `{0}`")]
    Invalid(String),
    #[error("zero denominator in `{0}`")]
    ZeroDenominator(String),
}

/// Shorthand for small constant rationals.
pub fn rat(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub fn rat_int(num: i64) -> Rational {
    Rational::from_integer(BigInt::from(num))
}

/// Parses `"p/q"` or a bare integer `"p"`.
pub fn parse_rational(s: &str) -> Result<Rational, RationalParseError> {
    let s = s.trim();
    if s.is_empty() {
        return Err(RationalParseError::Empty);
    }
    let bad = || RationalParseError::Invalid(s.to_string());
    match s.split_once('/') {
        None => {
            let n: BigInt = s.parse().map_err(|_| bad())?;
            Ok(Rational::from_integer(n))
        }
        Some((p, q)) => {
            let p: BigInt = p.trim().parse().map_err(|_| bad())?;
            let q: BigInt = q.trim().parse().map_err(|_| bad())?;
            if q.is_zero() {
                return Err(RationalParseError::ZeroDenominator(s.to_string()));
            }
            Ok(Rational::new(p, q))
        }
    }
}

/// Prints a rational as `"p/q"`, or `"p"` when the denominator is one.
pub fn format_rational(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Round {
    Floor,
    Ceil,
}

/// Renders `r` as a decimal string with `digits` places after the point,
/// rounded in the requested direction. Used for interval endpoints, where
/// outward rounding keeps the printed interval a superset of the exact one.
pub fn decimal_string(r: &Rational, digits: u32, dir: Round) -> String {
    let scale = BigInt::from(10u32).pow(digits);
    let scaled = r * Rational::from_integer(scale.clone());
    let (mut q, rem) = (
        scaled.numer() / scaled.denom(),
        scaled.numer() % scaled.denom(),
    );
    if !rem.is_zero() {
        match dir {
            Round::Ceil if scaled.numer().sign() != Sign::Minus => q += 1,
            Round::Floor if scaled.numer().sign() == Sign::Minus => q -= 1,
            _ => {}
        }
    }
    let neg = q.sign() == Sign::Minus;
    let digits_str = q.magnitude().to_string();
    let digits_usize = digits as usize;
    let padded = if digits_str.len() <= digits_usize {
        format!("{}{}", "0".repeat(digits_usize + 1 - digits_str.len()), digits_str)
    } else {
        digits_str
    };
    let split = padded.len() - digits_usize;
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if digits == 0 {
        let _ = write!(out, "{}", &padded[..split]);
    } else {
        let _ = write!(out, "{}.{}", &padded[..split], &padded[split..]);
    }
    out
}

/// Parses a plain decimal string (as produced by [`decimal_string`]) back
/// into the exact rational it denotes.
pub fn parse_decimal(s: &str) -> Result<Rational, RationalParseError> {
    let s = s.trim();
    let bad = || RationalParseError::Invalid(s.to_string());
    if s.is_empty() {
        return Err(RationalParseError::Empty);
    }
    match s.split_once('.') {
        None => {
            let n: BigInt = s.parse().map_err(|_| bad())?;
            Ok(Rational::from_integer(n))
        }
        Some((int, frac)) => {
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let neg = int.trim_start().starts_with('-');
            let int_part: BigInt = if int.is_empty() || int == "-" {
                BigInt::zero()
            } else {
                int.parse().map_err(|_| bad())?
            };
            let frac_num: BigInt = frac.parse().map_err(|_| bad())?;
            let den = BigInt::from(10u32).pow(frac.len() as u32);
            let frac_rat = Rational::new(frac_num, den);
            let int_rat = Rational::from_integer(int_part);
            Ok(if neg { int_rat - frac_rat } else { int_rat + frac_rat })
        }
    }
}

/// Approximate value for statistics and report text; exact paths never use it.
pub fn to_f64(r: &Rational) -> f64 {
    r.numer().to_f64().unwrap_or(f64::NAN) / r.denom().to_f64().unwrap_or(f64::NAN)
}

/// Serde adapter serializing rationals as `"p/q"` strings.
pub mod serde_ratio {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map_err(serde::de::Error::custom)
    }
}

/// Like `serde_ratio` but for optional fields; `None` maps to JSON null.
pub mod serde_ratio_opt {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Some(r) => s.serialize_some(&format_rational(r)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| parse_rational(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
