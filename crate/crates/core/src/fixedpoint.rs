//! Binary fixed-point values with a configurable number of fractional bits.
//!
//! A [`FixedPoint`] is `raw / 2^frac_bits` with `raw` held in an `i64`.
//! Products and quotients are formed in `i128` and narrowed back with a range
//! check, so every signal gets the integer bits it needs and the fractional
//! part is the only place precision is lost. All rounding is
//! round-half-away-from-zero.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum FixedError {
    #[error("fixed-point overflow")]
    Overflow,
    #[error("fixed-point division by zero")]
    DivisionByZero,
    #[error("square root of a negative fixed-point value")]
    NegativeSqrt,
    #[error("fractional bit counts differ ({0} vs {1})")]
    FracBitsMismatch(u32, u32),
    #[error("{0} is not representable")]
    NotRepresentable(f64),
    #[error("unsupported fractional bit count {0} (expected 1..=48)")]
    BadFracBits(u32),
}

/// Largest fractional width accepted. Leaves 15 integer bits in an `i64`.
pub const MAX_FRAC_BITS: u32 = 48;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FixedPoint {
    raw: i64,
    frac_bits: u32,
}

impl fmt::Debug for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}q{}", self.to_f64(), self.frac_bits)
    }
}

impl fmt::Display for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

fn check_frac_bits(frac_bits: u32) -> Result<(), FixedError> {
    if frac_bits == 0 || frac_bits > MAX_FRAC_BITS {
        return Err(FixedError::BadFracBits(frac_bits));
    }
    Ok(())
}

fn narrow(v: i128) -> Result<i64, FixedError> {
    i64::try_from(v).map_err(|_| FixedError::Overflow)
}

/// `v / 2^shift`, rounded half away from zero.
pub fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// `num / den`, rounded half away from zero. `den` must be nonzero.
pub fn div_round(num: i128, den: i128) -> i128 {
    let q = num / den;
    let r = num % den;
    if r == 0 {
        return q;
    }
    // |r| >= |den| / 2 without overflowing 2 * r
    if r.unsigned_abs() >= den.unsigned_abs() - r.unsigned_abs() {
        if (num < 0) == (den < 0) {
            q + 1
        } else {
            q - 1
        }
    } else {
        q
    }
}

impl FixedPoint {
    pub fn from_raw(raw: i64, frac_bits: u32) -> Result<Self, FixedError> {
        check_frac_bits(frac_bits)?;
        Ok(Self { raw, frac_bits })
    }

    /// `round(v * 2^frac_bits)`.
    pub fn from_f64(v: f64, frac_bits: u32) -> Result<Self, FixedError> {
        check_frac_bits(frac_bits)?;
        if !v.is_finite() {
            return Err(FixedError::NotRepresentable(v));
        }
        // f64::round rounds half away from zero
        let scaled = (v * (1u64 << frac_bits) as f64).round();
        if scaled >= i64::MAX as f64 || scaled < i64::MIN as f64 {
            return Err(FixedError::Overflow);
        }
        Ok(Self {
            raw: scaled as i64,
            frac_bits,
        })
    }

    pub fn from_int(v: i64, frac_bits: u32) -> Result<Self, FixedError> {
        check_frac_bits(frac_bits)?;
        let raw = narrow((v as i128) << frac_bits)?;
        Ok(Self { raw, frac_bits })
    }

    /// `round(num / den)` at `frac_bits`, computed exactly. Used for the
    /// constant reciprocals `1/L`, `1/W²` and `1/(n_L + 1)`.
    pub fn from_ratio(num: i64, den: i64, frac_bits: u32) -> Result<Self, FixedError> {
        check_frac_bits(frac_bits)?;
        if den == 0 {
            return Err(FixedError::DivisionByZero);
        }
        let raw = narrow(div_round((num as i128) << frac_bits, den as i128))?;
        Ok(Self { raw, frac_bits })
    }

    pub fn zero(frac_bits: u32) -> Self {
        Self { raw: 0, frac_bits }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn ulp(self) -> f64 {
        1.0 / (1u64 << self.frac_bits) as f64
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 / (1u64 << self.frac_bits) as f64
    }

    pub fn is_zero(self) -> bool {
        self.raw == 0
    }

    fn same_format(self, other: Self) -> Result<(), FixedError> {
        if self.frac_bits != other.frac_bits {
            return Err(FixedError::FracBitsMismatch(self.frac_bits, other.frac_bits));
        }
        Ok(())
    }

    /// Exact.
    pub fn checked_add(self, rhs: Self) -> Result<Self, FixedError> {
        self.same_format(rhs)?;
        let raw = self.raw.checked_add(rhs.raw).ok_or(FixedError::Overflow)?;
        Ok(Self { raw, ..self })
    }

    /// Exact.
    pub fn checked_sub(self, rhs: Self) -> Result<Self, FixedError> {
        self.same_format(rhs)?;
        let raw = self.raw.checked_sub(rhs.raw).ok_or(FixedError::Overflow)?;
        Ok(Self { raw, ..self })
    }

    /// Full-width product, rounded back to `frac_bits`. Error ≤ ½ ulp.
    pub fn checked_mul(self, rhs: Self) -> Result<Self, FixedError> {
        self.same_format(rhs)?;
        let wide = self.raw as i128 * rhs.raw as i128;
        let raw = narrow(round_shift(wide, self.frac_bits))?;
        Ok(Self { raw, ..self })
    }

    /// Rounded quotient. Error ≤ ½ ulp.
    pub fn checked_div(self, rhs: Self) -> Result<Self, FixedError> {
        self.same_format(rhs)?;
        if rhs.raw == 0 {
            return Err(FixedError::DivisionByZero);
        }
        let num = (self.raw as i128) << self.frac_bits;
        let raw = narrow(div_round(num, rhs.raw as i128))?;
        Ok(Self { raw, ..self })
    }

    /// Square root rounded to the nearest ulp. Error ≤ ½ ulp.
    pub fn checked_sqrt(self) -> Result<Self, FixedError> {
        if self.raw < 0 {
            return Err(FixedError::NegativeSqrt);
        }
        // sqrt(raw / 2^f) * 2^f == sqrt(raw * 2^f)
        let n = (self.raw as u128) << self.frac_bits;
        let s = n.isqrt();
        // round to nearest: bump when (s + ½)² ≤ n, i.e. 4n ≥ (2s + 1)²
        let twice = 2 * s + 1;
        let s = if 4 * n >= twice * twice { s + 1 } else { s };
        let raw = i64::try_from(s).map_err(|_| FixedError::Overflow)?;
        Ok(Self { raw, ..self })
    }

    pub fn checked_neg(self) -> Result<Self, FixedError> {
        let raw = self.raw.checked_neg().ok_or(FixedError::Overflow)?;
        Ok(Self { raw, ..self })
    }
}
