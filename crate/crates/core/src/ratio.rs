//! Exact non-negative rationals for ratios, tolerances and expansion factors.
//!
//! Budget comparisons are made by cross-multiplication in `u128`, so no
//! floating-point rounding ever decides whether a candidate is admissible.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_integer::Integer;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RatioError {
    #[error("invalid ratio literal `{0}`")]
    Parse(String),
    #[error("ratio has zero denominator")]
    ZeroDenominator,
    #[error("ratio must be non-negative, got `{0}`")]
    Negative(String),
}

/// A reduced fraction `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, RatioError> {
        if den == 0 {
            return Err(RatioError::ZeroDenominator);
        }
        let g = num.gcd(&den);
        Ok(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn integer(n: u64) -> Self {
        Ratio { num: n, den: 1 }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(self * n)`.
    pub fn floor_mul(&self, n: u64) -> u64 {
        ((self.num as u128 * n as u128) / self.den as u128) as u64
    }

    /// Compares `value` against `self * scale` without rounding.
    pub fn cmp_scaled(&self, value: u64, scale: u64) -> Ordering {
        let lhs = value as u128 * self.den as u128;
        let rhs = self.num as u128 * scale as u128;
        lhs.cmp(&rhs)
    }

    /// True when `value <= self * scale`.
    pub fn bounds(&self, value: u64, scale: u64) -> bool {
        self.cmp_scaled(value, scale) != Ordering::Greater
    }

    fn parse_decimal(s: &str) -> Result<Self, RatioError> {
        let err = || RatioError::Parse(s.to_string());
        if s.starts_with('-') {
            return Err(RatioError::Negative(s.to_string()));
        }
        let s = s.strip_prefix('+').unwrap_or(s);
        let (mantissa, exponent) = match s.find(['e', 'E']) {
            Some(pos) => (&s[..pos], s[pos + 1..].parse::<i32>().map_err(|_| err())?),
            None => (s, 0),
        };
        let (int_part, frac_part) = match mantissa.split_once('.') {
            Some((i, f)) => (i, f),
            None => (mantissa, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part
            .chars()
            .chain(frac_part.chars())
            .all(|c| c.is_ascii_digit())
        {
            return Err(err());
        }
        let digits = format!("{int_part}{frac_part}");
        let digits = digits.trim_start_matches('0');
        let mut num: u64 = if digits.is_empty() {
            0
        } else {
            digits.parse().map_err(|_| err())?
        };
        let scale = exponent - frac_part.len() as i32;
        let mut den: u64 = 1;
        if scale >= 0 {
            for _ in 0..scale {
                num = num.checked_mul(10).ok_or_else(err)?;
            }
        } else {
            for _ in 0..(-scale) {
                den = den.checked_mul(10).ok_or_else(err)?;
            }
        }
        Ratio::new(num, den)
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio::ZERO
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = RatioError;

    /// Accepts `a/b`, integers and decimal literals (`0.25`, `1e-2`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => {
                if n.trim().starts_with('-') || d.trim().starts_with('-') {
                    return Err(RatioError::Negative(s.to_string()));
                }
                let n = n
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| RatioError::Parse(s.to_string()))?;
                let d = d
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| RatioError::Parse(s.to_string()))?;
                Ratio::new(n, d)
            }
            None => Ratio::parse_decimal(s),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.den == 1 {
            serializer.serialize_u64(self.num)
        } else {
            serializer.collect_str(self)
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RatioVisitor;

        impl Visitor<'_> for RatioVisitor {
            type Value = Ratio;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative number or a string such as \"1/4\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Ratio, E> {
                Ok(Ratio::integer(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Ratio, E> {
                u64::try_from(v)
                    .map(Ratio::integer)
                    .map_err(|_| E::custom(RatioError::Negative(v.to_string())))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Ratio, E> {
                if !v.is_finite() {
                    return Err(E::custom(RatioError::Parse(v.to_string())));
                }
                // Shortest round-trip decimal, so 0.1 becomes exactly 1/10.
                format!("{v:e}").parse().map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Ratio, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(RatioVisitor)
    }
}
