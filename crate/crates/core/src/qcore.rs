//! Exact integer tensors, data-type descriptors and the uniform affine
//! quantize / dequantize operators.
//!
//! Scales are carried as real log2 exponents `d` with `s = 2^d`. All real
//! arithmetic is `f64`; integers up to 2^53 round-trip exactly, which is what
//! makes the fake-quantized training view and the integer pipeline comparable
//! bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer data type: bit width and signedness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DType {
    pub bits: u32,
    pub signed: bool,
}

impl DType {
    /// Signed widths go up to 64 bits; unsigned widths stop at 63 so that
    /// the maximum still fits the `i64` element type.
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        let max_bits = if signed { 64 } else { 63 };
        if bits == 0 || bits > max_bits {
            return Err(Error::InvalidDType { bits, signed });
        }
        Ok(Self { bits, signed })
    }

    pub fn signed(bits: u32) -> Result<Self> {
        Self::new(bits, true)
    }

    pub fn unsigned(bits: u32) -> Result<Self> {
        Self::new(bits, false)
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.bits, self.signed).map(|_| ())
    }

    /// Lowest representable value `n`.
    pub fn min(&self) -> i64 {
        if self.signed {
            (-(1i128 << (self.bits - 1))) as i64
        } else {
            0
        }
    }

    /// Highest representable value `p`.
    pub fn max(&self) -> i64 {
        if self.signed {
            ((1i128 << (self.bits - 1)) - 1) as i64
        } else {
            ((1i128 << self.bits) - 1) as i64
        }
    }

    /// 1 for signed types, 0 otherwise.
    pub fn signed_indicator(&self) -> i32 {
        self.signed as i32
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.min() && v <= self.max()
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", if self.signed { "int" } else { "uint" }, self.bits)
    }
}

/// Rounding applied after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    /// Nearest integer, ties to even.
    HalfEven,
    /// Truncation toward zero.
    TowardZero,
}

impl RoundingMode {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            RoundingMode::HalfEven => x.round_ties_even(),
            RoundingMode::TowardZero => x.trunc(),
        }
    }
}

pub fn clip<T: PartialOrd>(x: T, n: T, p: T) -> T {
    debug_assert!(n <= p);
    if x < n {
        n
    } else if x > p {
        p
    } else {
        x
    }
}

/// Nearest integer with ties resolved to even.
pub fn round_half(x: f64) -> i64 {
    x.round_ties_even() as i64
}

pub fn round_to_zero(x: f64) -> i64 {
    x.trunc() as i64
}

/// Row-major tensor of exact integers tagged with its data type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
    dtype: DType,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>, dtype: DType) -> Result<Self> {
        dtype.validate()?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                expected: format!("{shape:?} ({numel} elements)"),
                got: format!("{} elements", data.len()),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !dtype.contains(**v)) {
            return Err(Error::OutOfRange { index, value, min: dtype.min(), max: dtype.max() });
        }
        Ok(Self { shape, data, dtype })
    }

    pub fn from_vec(data: Vec<i64>, dtype: DType) -> Result<Self> {
        Self::new(vec![data.len()], data, dtype)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0; n], dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sum of absolute values, computed exactly.
    pub fn l1_norm(&self) -> i128 {
        self.data.iter().map(|&v| (v as i128).abs()).sum()
    }

    pub fn into_data(self) -> Vec<i64> {
        self.data
    }
}

/// Parameters of the affine quantizer: log2 scale `d`, zero point `z`
/// and the target data type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    #[serde(with = "crate::reals")]
    pub d: f64,
    pub z: i64,
    pub dtype: DType,
}

impl QuantSpec {
    pub fn symmetric(d: f64, dtype: DType) -> Self {
        Self { d, z: 0, dtype }
    }

    pub fn scale(&self) -> f64 {
        self.d.exp2()
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype.validate()?;
        let s = self.scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Config(format!("quantizer scale 2^{} is not a positive finite number", self.d)));
        }
        Ok(())
    }

    /// Quantizes one finite value.
    #[inline]
    pub fn quantize_scalar(&self, x: f64, mode: RoundingMode) -> i64 {
        quantize_value(x, self.scale(), self.z, self.dtype, mode)
    }
}

/// `clip(round(x / s) + z; n, p)` for a single finite value.
#[inline]
pub fn quantize_value(x: f64, scale: f64, z: i64, dtype: DType, mode: RoundingMode) -> i64 {
    let r = mode.apply(x / scale) + z as f64;
    clip(r, dtype.min() as f64, dtype.max() as f64) as i64
}

pub fn quantize(x: &[f64], shape: Vec<usize>, q: &QuantSpec, mode: RoundingMode) -> Result<IntTensor> {
    q.validate()?;
    let s = q.scale();
    let data = x
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value.is_finite() {
                Ok(quantize_value(value, s, q.z, q.dtype, mode))
            } else {
                Err(Error::NonFinite { index, value })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    IntTensor::new(shape, data, q.dtype)
}

pub fn dequantize(x: &IntTensor, q: &QuantSpec) -> Result<Vec<f64>> {
    if x.dtype() != q.dtype {
        return Err(Error::DTypeMismatch { expected: q.dtype, got: x.dtype() });
    }
    let s = q.scale();
    Ok(x.data().iter().map(|&v| s * (v - q.z) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn i4() -> DType {
        DType::signed(4).unwrap()
    }

    #[test]
    fn dtype_ranges() {
        assert_eq!((i4().min(), i4().max()), (-8, 7));
        let u4 = DType::unsigned(4).unwrap();
        assert_eq!((u4.min(), u4.max()), (0, 15));
        let i64t = DType::signed(64).unwrap();
        assert_eq!((i64t.min(), i64t.max()), (i64::MIN, i64::MAX));
        assert!(DType::unsigned(64).is_err());
        assert!(DType::signed(0).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(100, -8, 7), 7);
        assert_eq!(clip(-9, -8, 7), -8);
        assert_eq!(clip(3, -8, 7), 3);
    }

    #[test]
    fn tie_break_table() {
        // ties go to the even neighbour in both directions
        let table = [
            (2.7, 3),
            (2.5, 2),
            (-2.5, -2),
            (0.5, 0),
            (1.5, 2),
            (-1.5, -2),
            (3.5, 4),
            (-0.5, 0),
            (2.4999999, 2),
        ];
        for (x, want) in table {
            assert_eq!(round_half(x), want, "round_half({x})");
        }
    }

    #[test]
    fn truncation() {
        assert_eq!(round_to_zero(2.9), 2);
        assert_eq!(round_to_zero(-2.9), -2);
        assert_eq!(round_to_zero(0.0), 0);
    }

    #[test]
    fn quantize_examples() {
        let unit = QuantSpec::symmetric(0.0, i4());
        let q = quantize(&[2.7, 100.0], vec![2], &unit, RoundingMode::HalfEven).unwrap();
        assert_eq!(q.data(), &[3, 7]);
        let half = QuantSpec::symmetric(-1.0, i4());
        let q = quantize(&[-1.2], vec![1], &half, RoundingMode::HalfEven).unwrap();
        assert_eq!(q.data(), &[-2]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let unit = QuantSpec::symmetric(0.0, i4());
        let err = quantize(&[1.0, f64::NAN], vec![2], &unit, RoundingMode::HalfEven).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn dequantize_examples() {
        let t = IntTensor::from_vec(vec![3, 0], i4()).unwrap();
        assert_eq!(dequantize(&t, &QuantSpec::symmetric(-1.0, i4())).unwrap(), vec![1.5, 0.0]);
        let t = IntTensor::from_vec(vec![-8], i4()).unwrap();
        assert_eq!(dequantize(&t, &QuantSpec::symmetric(1.0, i4())).unwrap(), vec![-16.0]);
        let u = DType::unsigned(4).unwrap();
        assert!(dequantize(&t, &QuantSpec::symmetric(0.0, u)).is_err());
    }

    #[test]
    fn tensor_validates_range() {
        assert!(IntTensor::from_vec(vec![8], i4()).is_err());
        assert!(IntTensor::new(vec![2, 2], vec![1, 2, 3], i4()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_error(x in -50.0f64..50.0, d in -4.0f64..3.0, bits in 2u32..10) {
            let dt = DType::signed(bits).unwrap();
            let q = QuantSpec::symmetric(d, dt);
            let s = q.scale();
            let target = clip(x, s * dt.min() as f64, s * dt.max() as f64);
            for (mode, tol) in [(RoundingMode::HalfEven, 0.5), (RoundingMode::TowardZero, 1.0)] {
                let back = s * q.quantize_scalar(x, mode) as f64;
                prop_assert!((back - target).abs() <= tol * s * (1.0 + 1e-12));
            }
        }

        #[test]
        fn zero_and_grid_points_are_fixed(k in -128i64..128, d in -6.0f64..6.0) {
            let q = QuantSpec::symmetric(d, DType::signed(8).unwrap());
            prop_assert_eq!(q.scale() * q.quantize_scalar(0.0, RoundingMode::HalfEven) as f64, 0.0);
            let on_grid = q.scale() * k as f64;
            prop_assert_eq!(q.quantize_scalar(on_grid, RoundingMode::HalfEven), k);
            // truncation is only idempotent when s*k/s is exact, i.e. power-of-two scales
            let pow2 = QuantSpec::symmetric(d.round(), q.dtype);
            prop_assert_eq!(pow2.quantize_scalar(pow2.scale() * k as f64, RoundingMode::TowardZero), k);
        }

        #[test]
        fn truncation_never_grows(x in -1e6f64..1e6) {
            prop_assert!((round_to_zero(x) as f64).abs() <= x.abs());
        }
    }
}
