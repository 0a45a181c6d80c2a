//! Scalar abstractions shared by the numeric code.
//!
//! [`Scalar`] covers the floating point types the learned objects are built
//! on. [`OrderedField`] is the weaker bound the quantile and oracle code needs,
//! which also admits exact rationals.

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Float, FromPrimitive, NumAssign, Signed, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;
    /// Short type tag written into checkpoint headers.
    const TAG: &'static str;

    fn erf(self) -> Self;
    fn erfc(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Converts an `f64` literal. Never fails for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const TAG: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(bytes);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const TAG: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(bytes);
        f32::from_le_bytes(buf)
    }
}

/// Totally ordered (on the values actually used) field with exact or
/// floating arithmetic. Implemented for floats and rationals.
pub trait OrderedField:
    Clone + PartialOrd + Signed + FromPrimitive + Debug + Send + Sync
{
    /// `floor(self)` for a non-negative finite value, `None` otherwise.
    fn floor_to_usize(&self) -> Option<usize>;
    /// Whether the value is a usable finite number (always true for rationals).
    fn is_finite_value(&self) -> bool;
    fn to_f64_lossy(&self) -> f64;
}

macro_rules! float_field {
    ($t:ty) => {
        impl OrderedField for $t {
            fn floor_to_usize(&self) -> Option<usize> {
                if self.is_finite() && *self >= 0.0 {
                    self.floor().to_usize()
                } else {
                    None
                }
            }
            fn is_finite_value(&self) -> bool {
                self.is_finite()
            }
            fn to_f64_lossy(&self) -> f64 {
                *self as f64
            }
        }
    };
}

float_field!(f32);
float_field!(f64);

impl OrderedField for BigRational {
    fn floor_to_usize(&self) -> Option<usize> {
        if self.is_negative() {
            return None;
        }
        self.floor().to_integer().to_usize()
    }
    fn is_finite_value(&self) -> bool {
        true
    }
    fn to_f64_lossy(&self) -> f64 {
        let n = self.numer().to_f64().unwrap_or(f64::NAN);
        let d = self.denom().to_f64().unwrap_or(f64::NAN);
        n / d
    }
}

impl OrderedField for Ratio<i64> {
    fn floor_to_usize(&self) -> Option<usize> {
        if self.is_negative() {
            return None;
        }
        self.floor().to_integer().to_usize()
    }
    fn is_finite_value(&self) -> bool {
        true
    }
    fn to_f64_lossy(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// Builds an exact rational `n / d`.
pub fn rational(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}
