//! Exact simulated time.
//!
//! All durations and timestamps are rational milliseconds so that event
//! ordering never depends on floating-point rounding.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// A non-normalized rational number of milliseconds.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Millis(BigRational);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal number `{0}`")]
pub struct ParseMillisError(pub String);

impl Millis {
    pub fn zero() -> Self {
        Millis(BigRational::zero())
    }

    pub fn one() -> Self {
        Millis(BigRational::one())
    }

    pub fn from_int(v: i64) -> Self {
        Millis(BigRational::from_integer(BigInt::from(v)))
    }

    /// `num / den`. Panics if `den == 0`.
    pub fn ratio(num: i64, den: i64) -> Self {
        Millis(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn from_rational(r: BigRational) -> Self {
        Millis(r)
    }

    pub fn as_rational(&self) -> &BigRational {
        &self.0
    }

    /// Converts a finite `f64` through its shortest decimal representation,
    /// so `0.1` becomes exactly `1/10`.
    pub fn from_f64(v: f64) -> Result<Self, ParseMillisError> {
        if !v.is_finite() {
            return Err(ParseMillisError(v.to_string()));
        }
        format!("{v}").parse()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn abs(&self) -> Self {
        Millis(self.0.abs())
    }

    pub fn recip(&self) -> Self {
        Millis(self.0.recip())
    }

    pub fn floor_int(&self) -> BigInt {
        self.0.floor().to_integer()
    }

    pub fn ceil_int(&self) -> BigInt {
        self.0.ceil().to_integer()
    }

    pub fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl FromStr for Millis {
    type Err = ParseMillisError;

    /// Parses plain or scientific decimal notation (`12`, `-0.25`, `1e-3`)
    /// and `p/q` fractions.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseMillisError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: BigInt = n.trim().parse().map_err(|_| err())?;
            let d: BigInt = d.trim().parse().map_err(|_| err())?;
            if d.is_zero() {
                return Err(err());
            }
            return Ok(Millis(BigRational::new(n, d)));
        }
        let (mantissa, exp) = match t.find(['e', 'E']) {
            Some(i) => (&t[..i], t[i + 1..].parse::<i32>().map_err(|_| err())?),
            None => (t, 0),
        };
        let (neg, digits) = match mantissa.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
        };
        let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
        let all: String = format!("{int_part}{frac_part}");
        let mut num: BigInt = if all.is_empty() { BigInt::zero() } else { all.parse().map_err(|_| err())? };
        if neg {
            num = -num;
        }
        let scale = exp - frac_part.len() as i32;
        let ten = BigInt::from(10);
        let r = if scale >= 0 {
            BigRational::from_integer(num * num_traits::pow(ten, scale as usize))
        } else {
            BigRational::new(num, num_traits::pow(ten, (-scale) as usize))
        };
        Ok(Millis(r))
    }
}

impl fmt::Display for Millis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}", self.to_f64())
        }
    }
}

impl fmt::Debug for Millis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident) => {
        impl $tr<&Millis> for &Millis {
            type Output = Millis;
            fn $m(self, rhs: &Millis) -> Millis {
                Millis($tr::$m(&self.0, &rhs.0))
            }
        }
        impl $tr<Millis> for Millis {
            type Output = Millis;
            fn $m(self, rhs: Millis) -> Millis {
                Millis($tr::$m(self.0, rhs.0))
            }
        }
        impl $tr<&Millis> for Millis {
            type Output = Millis;
            fn $m(self, rhs: &Millis) -> Millis {
                Millis($tr::$m(self.0, &rhs.0))
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl AddAssign<&Millis> for Millis {
    fn add_assign(&mut self, rhs: &Millis) {
        self.0 += &rhs.0;
    }
}

impl<'a> Sum<&'a Millis> for Millis {
    fn sum<I: Iterator<Item = &'a Millis>>(iter: I) -> Self {
        iter.fold(Millis::zero(), |acc, x| acc + x)
    }
}

impl Sum<Millis> for Millis {
    fn sum<I: Iterator<Item = Millis>>(iter: I) -> Self {
        iter.fold(Millis::zero(), |acc, x| acc + x)
    }
}
