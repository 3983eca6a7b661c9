//! Exact scaled-integer vectors.
//!
//! Every gradient, mask and model that crosses the protocol boundary is an
//! [`FpVector`]: signed 64-bit raws interpreted as `raw * 2^-scale`. All
//! arithmetic here is integer-only and checked, so the audit identities are
//! equalities rather than tolerances.

use std::fmt;

use thiserror::Error;

/// Default fixed-point resolution exponent (`2^-20`).
pub const DEFAULT_SCALE: u8 = 20;

/// Largest scale accepted; keeps `2^scale` exactly representable in an `f64`
/// mantissa-plus-exponent and leaves at least one integer bit.
pub const MAX_SCALE: u8 = 52;

/// Accumulator for inner products. 128 bits is enough for
/// `dim * max|raw|^2 < 2^127`, which [`dot_fits`] checks.
pub type WideInt = i128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixedPointError {
    #[error("value {value} does not fit in 63 bits at scale 2^-{scale}")]
    QuantizeOverflow { value: String, scale: u8 },
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("scale mismatch: 2^-{left} vs 2^-{right}")]
    ScaleMismatch { left: u8, right: u8 },
    #[error("overflow in {op} at index {index}")]
    Overflow { op: &'static str, index: usize },
    #[error("division by zero count")]
    ZeroDivisor,
    #[error("vectors must have at least one entry")]
    Empty,
    #[error("scale {0} exceeds the supported maximum")]
    InvalidScale(u8),
    #[error("audit exactness requires dyadic learning rate, got {0}")]
    NonDyadic(String),
    #[error("malformed vector encoding: {0}")]
    Decode(&'static str),
}

pub type Result<T> = std::result::Result<T, FixedPointError>;

/// A single fixed-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FpScalar {
    pub raw: i64,
    pub scale: u8,
}

impl FpScalar {
    pub fn to_f64(self) -> f64 {
        self.raw as f64 / pow2(self.scale)
    }
}

fn pow2(scale: u8) -> f64 {
    (2.0f64).powi(i32::from(scale))
}

fn check_scale(scale: u8) -> Result<()> {
    if scale > MAX_SCALE {
        return Err(FixedPointError::InvalidScale(scale));
    }
    Ok(())
}

/// Rounds `x * 2^scale` half away from zero.
pub fn quantize(x: f64, scale: u8) -> Result<FpScalar> {
    check_scale(scale)?;
    if !x.is_finite() {
        return Err(FixedPointError::NonFinite(x.to_string()));
    }
    // Multiplying by a power of two is exact in binary floating point.
    let scaled = (x * pow2(scale)).round();
    // 2^63 itself is not representable as i64.
    if scaled.abs() >= 9_223_372_036_854_775_808.0 {
        return Err(FixedPointError::QuantizeOverflow {
            value: x.to_string(),
            scale,
        });
    }
    Ok(FpScalar {
        raw: scaled as i64,
        scale,
    })
}

/// `true` when `dim * max_abs^2 < 2^127`, i.e. an inner product of two
/// vectors bounded by `max_abs` cannot leave [`WideInt`].
pub fn dot_fits(dim: usize, max_abs: u64) -> bool {
    let sq = u128::from(max_abs) * u128::from(max_abs);
    match sq.checked_mul(dim as u128) {
        Some(total) => total < (1u128 << 127),
        None => false,
    }
}

/// Returns 0 if `x <= 0`, else 1.
pub fn sign_indicator(x: WideInt) -> u8 {
    u8::from(x > 0)
}

/// A vector of fixed-point values sharing one scale.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FpVector {
    raw: Vec<i64>,
    scale: u8,
}

impl fmt::Debug for FpVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "FpVector(t={}, dim={}, [", self.scale, self.raw.len())?;
        for (i, r) in self.raw.iter().take(SHOWN).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{r}")?;
        }
        if self.raw.len() > SHOWN {
            f.write_str(", ...")?;
        }
        f.write_str("])")
    }
}

/// Byte length of the encoding header: 64-bit dim plus 8-bit scale.
pub const HEADER_LEN: usize = 9;

impl FpVector {
    pub fn from_raw(raw: Vec<i64>, scale: u8) -> Result<Self> {
        check_scale(scale)?;
        if raw.is_empty() {
            return Err(FixedPointError::Empty);
        }
        Ok(Self { raw, scale })
    }

    pub fn zeros(dim: usize, scale: u8) -> Result<Self> {
        Self::from_raw(vec![0; dim], scale)
    }

    pub fn quantize(values: &[f64], scale: u8) -> Result<Self> {
        let raw = values
            .iter()
            .map(|&x| quantize(x, scale).map(|s| s.raw))
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(raw, scale)
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn raw(&self) -> &[i64] {
        &self.raw
    }

    pub fn into_raw(self) -> Vec<i64> {
        self.raw
    }

    pub fn get(&self, index: usize) -> Option<FpScalar> {
        self.raw.get(index).map(|&raw| FpScalar {
            raw,
            scale: self.scale,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let unit = pow2(self.scale);
        self.raw.iter().map(|&r| r as f64 / unit).collect()
    }

    /// Largest absolute raw value.
    pub fn max_abs(&self) -> u64 {
        self.raw.iter().map(|r| r.unsigned_abs()).max().unwrap_or(0)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(FixedPointError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        if self.scale != other.scale {
            return Err(FixedPointError::ScaleMismatch {
                left: self.scale,
                right: other.scale,
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(i64, i64) -> Option<i64>,
    ) -> Result<Self> {
        self.check_compatible(other)?;
        let raw = self
            .raw
            .iter()
            .zip(&other.raw)
            .enumerate()
            .map(|(index, (&a, &b))| f(a, b).ok_or(FixedPointError::Overflow { op, index }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            raw,
            scale: self.scale,
        })
    }

    fn map_checked(&self, op: &'static str, f: impl Fn(i64) -> Option<i64>) -> Result<Self> {
        let raw = self
            .raw
            .iter()
            .enumerate()
            .map(|(index, &a)| f(a).ok_or(FixedPointError::Overflow { op, index }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            raw,
            scale: self.scale,
        })
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", i64::checked_add)
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", i64::checked_sub)
    }

    pub fn checked_neg(&self) -> Result<Self> {
        self.map_checked("neg", i64::checked_neg)
    }

    /// Multiplies every raw by an integer; the scale is unchanged.
    pub fn checked_mul_int(&self, factor: i64) -> Result<Self> {
        self.map_checked("mul_int", |a| a.checked_mul(factor))
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (index, (a, &b)) in self.raw.iter_mut().zip(&other.raw).enumerate() {
            *a = a
                .checked_add(b)
                .ok_or(FixedPointError::Overflow { op: "add", index })?;
        }
        Ok(())
    }

    /// Canonical encoding: dim as u64 LE, scale as u8, then each raw as
    /// i64 LE. This is the signing preimage of a vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.raw.len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.raw.len() as u64).to_le_bytes());
        out.push(self.scale);
        for r in &self.raw {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }

    /// Decodes one vector from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(FixedPointError::Decode("truncated header"));
        }
        let dim = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let scale = bytes[8];
        let body = usize::try_from(dim)
            .ok()
            .and_then(|d| d.checked_mul(8))
            .ok_or(FixedPointError::Decode("dimension too large"))?;
        let end = HEADER_LEN
            .checked_add(body)
            .ok_or(FixedPointError::Decode("dimension too large"))?;
        if bytes.len() < end {
            return Err(FixedPointError::Decode("truncated body"));
        }
        let raw = bytes[HEADER_LEN..end]
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Self::from_raw(raw, scale)?, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (v, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FixedPointError::Decode("trailing bytes"));
        }
        Ok(v)
    }
}

/// Exact inner product of the raws. No rounding: the result is in units of
/// `2^-(2*scale)`.
pub fn dot(a: &FpVector, b: &FpVector) -> Result<WideInt> {
    a.check_compatible(b)?;
    a.raw
        .iter()
        .zip(&b.raw)
        .enumerate()
        .try_fold(0i128, |acc, (index, (&x, &y))| {
            acc.checked_add(i128::from(x) * i128::from(y))
                .ok_or(FixedPointError::Overflow { op: "dot", index })
        })
}

/// Entry-wise product with a plain integer vector (a PRVG mask).
pub fn hadamard(a: &FpVector, mask: &[i64]) -> Result<FpVector> {
    if a.dim() != mask.len() {
        return Err(FixedPointError::DimensionMismatch {
            left: a.dim(),
            right: mask.len(),
        });
    }
    let raw = a
        .raw
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(index, (&x, &m))| {
            x.checked_mul(m).ok_or(FixedPointError::Overflow {
                op: "hadamard",
                index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FpVector {
        raw,
        scale: a.scale,
    })
}

/// Entry-wise division of the raws by `count`, rounding toward negative
/// infinity. Satisfies `floor((c*A + B) / c) == A + floor(B / c)`.
pub fn floor_div(v: &FpVector, count: u64) -> Result<FpVector> {
    if count == 0 {
        return Err(FixedPointError::ZeroDivisor);
    }
    let Ok(c) = i64::try_from(count) else {
        // |raw| < 2^63 <= count, so the quotient is 0 or -1.
        return v.map_checked("floor_div", |a| Some(if a < 0 { -1 } else { 0 }));
    };
    // div_euclid with a positive divisor is floor division.
    v.map_checked("floor_div", |a| Some(a.div_euclid(c)))
}

/// A positive dyadic rational `odd * 2^-exp`, used for the learning rate so
/// that `eta * v` can be computed with a single, reproducible floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dyadic {
    numerator: i64,
    exp: u8,
}

impl Dyadic {
    /// Builds `numerator * 2^-exp`, reducing to lowest terms.
    pub fn new(numerator: i64, exp: u8) -> Result<Self> {
        if numerator <= 0 {
            return Err(FixedPointError::NonDyadic(format!("{numerator}/2^{exp}")));
        }
        check_scale(exp)?;
        let (mut numerator, mut exp) = (numerator, exp);
        while exp > 0 && numerator % 2 == 0 {
            numerator /= 2;
            exp -= 1;
        }
        Ok(Self { numerator, exp })
    }

    /// Accepts `x` only if `x * 2^scale` is a positive integer, i.e. `x` is
    /// exactly representable at the run's resolution.
    pub fn from_f64(x: f64, scale: u8) -> Result<Self> {
        check_scale(scale)?;
        let scaled = x * pow2(scale);
        if !x.is_finite() || x <= 0.0 || scaled.fract() != 0.0 || scaled >= 2f64.powi(62) {
            return Err(FixedPointError::NonDyadic(x.to_string()));
        }
        Self::new(scaled as i64, scale)
    }

    pub fn numerator(self) -> i64 {
        self.numerator
    }

    /// Power-of-two exponent of the denominator.
    pub fn exp(self) -> u8 {
        self.exp
    }

    /// Raw multiple that makes `self * raw` an exact integer.
    pub fn lattice(self) -> i64 {
        1i64 << self.exp
    }

    pub fn to_f64(self) -> f64 {
        self.numerator as f64 / pow2(self.exp)
    }

    /// `floor(self * raw)` entry-wise.
    pub fn mul_floor(self, v: &FpVector) -> Result<FpVector> {
        let num = i128::from(self.numerator);
        let exp = u32::from(self.exp);
        v.map_checked("scale_floor", |a| {
            // Arithmetic right shift of a signed value is floor division.
            i64::try_from((i128::from(a) * num) >> exp).ok()
        })
    }

    /// `self * raw` entry-wise, failing unless every product is an integer.
    pub fn mul_exact(self, v: &FpVector) -> Result<FpVector> {
        let mask = self.lattice() - 1;
        if let Some(index) = v.raw.iter().position(|&a| a & mask != 0) {
            return Err(FixedPointError::Overflow {
                op: "scale_exact (off lattice)",
                index,
            });
        }
        self.mul_floor(v)
    }
}

/// Serialized as the string `"num/2^exp"`.
impl serde::Serialize for Dyadic {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Dyadic {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        let parse = || -> Option<Dyadic> {
            let (num, exp) = s.split_once("/2^")?;
            Dyadic::new(num.parse().ok()?, exp.parse().ok()?).ok()
        };
        parse().ok_or_else(|| serde::de::Error::custom(format!("bad dyadic {s:?}")))
    }
}

impl fmt::Display for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/2^{}", self.numerator, self.exp)
    }
}
