//! Numeric abstractions.
//!
//! Two traits cover everything the crate computes:
//!
//! - [`Scalar`] needs only field operations and ordering. Score formulas,
//!   quantiles, throughput/FPS arithmetic and the energy/cost models are
//!   written against it, so they run on `f32`, `f64` or an exact
//!   [`Rational`].
//! - [`Real`] adds transcendental functions. Geometry (back-projection,
//!   ray traversal, log-odds) needs it.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Exact rational number used where results must reproduce hand arithmetic.
pub type Rational = Ratio<i64>;

/// Field-like number with a total-enough order for sorting finite values.
pub trait Scalar: Num + Copy + PartialOrd + Debug + FromPrimitive + ToPrimitive + 'static {
    /// `num / den`, exact for rationals.
    fn ratio(num: i64, den: i64) -> Self;

    fn from_count(n: u64) -> Self {
        Self::ratio(n as i64, 1)
    }

    /// Lossy conversion for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Smallest integer not less than `self`.
    fn ceil_to_u64(self) -> u64;
}

/// Floating point scalar with the usual transcendental functions.
pub trait Real: Scalar + Float + Default + Send + Sync {
    fn from_f64_lossy(v: f64) -> Self;
}

macro_rules! impl_float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn ratio(num: i64, den: i64) -> Self {
                num as $t / den as $t
            }

            fn ceil_to_u64(self) -> u64 {
                self.ceil() as u64
            }
        }

        impl Real for $t {
            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_float_scalar!(f32);
impl_float_scalar!(f64);

impl Scalar for Rational {
    fn ratio(num: i64, den: i64) -> Self {
        Ratio::new(num, den)
    }

    fn ceil_to_u64(self) -> u64 {
        self.ceil().to_integer().max(0) as u64
    }
}

/// Parses a decimal literal such as `"59.7"` exactly.
pub fn parse_decimal<T: Scalar>(s: &str) -> Option<T> {
    let s = s.trim();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let all: String = format!("{int_part}{frac_part}");
    if !all.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let num: i64 = all.parse().ok()?;
    let den = 10i64.checked_pow(frac_part.len() as u32)?;
    let v = T::ratio(num, den);
    Some(if neg { T::zero() - v } else { v })
}
