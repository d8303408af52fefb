//! Uniform per-tensor quantization.
//!
//! Real values map to `b`-bit signed codes through a scale and a zero-point:
//!
//! ```text
//! q = clamp(round(x / scale) + offset, -2^(b-1), 2^(b-1) - 1)
//! x* = scale * (q - offset)
//! ```
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Default EMA decay for activation range calibration.
pub const DEFAULT_CALIBRATION_DECAY: f32 = 0.99;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bitwidth {0} outside supported range [{MIN_BITS}, {MAX_BITS}]")]
    InvalidBits(u32),
    #[error("invalid range: min {min} > max {max}")]
    InvalidRange { min: f64, max: f64 },
    #[error("non-finite range bound")]
    NonFinite,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("offset {offset} not representable in {bits} bits")]
    InvalidOffset { offset: i32, bits: u32 },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("code {value} outside the {bits}-bit range")]
    CodeOutOfRange { value: i32, bits: u32 },
}

/// Smallest code representable in `bits` signed bits.
pub fn code_min(bits: u32) -> i32 {
    -(1i32 << (bits - 1))
}

/// Largest code representable in `bits` signed bits.
pub fn code_max(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u32) -> Result<(), QuantError> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

/// Scale, zero-point and bitwidth of one quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    bits: u32,
    scale: f64,
    offset: i32,
}

impl QuantParams {
    pub fn new(bits: u32, scale: f64, offset: i32) -> Result<Self, QuantError> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale));
        }
        if offset < code_min(bits) || offset > code_max(bits) {
            return Err(QuantError::InvalidOffset { offset, bits });
        }
        Ok(Self { bits, scale, offset })
    }

    /// Derives parameters covering `[min, max]`.
    ///
    /// The asymmetric range is widened to include 0 so the zero-point is always a valid code.
    /// Symmetric parameters cover `[-a, a]` with `a = max(|min|, |max|)` and a zero-point of 0.
    pub fn from_range(min: f64, max: f64, bits: u32, symmetric: bool) -> Result<Self, QuantError> {
        check_bits(bits)?;
        if !(min.is_finite() && max.is_finite()) {
            return Err(QuantError::NonFinite);
        }
        if min > max {
            return Err(QuantError::InvalidRange { min, max });
        }
        if min == max {
            return Ok(Self { bits, scale: 1.0, offset: 0 });
        }
        let levels = f64::from((1u32 << bits) - 1);
        if symmetric {
            let a = min.abs().max(max.abs());
            let scale = 2.0 * a / (levels - 1.0);
            return Ok(Self { bits, scale, offset: 0 });
        }
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = (hi - lo) / levels;
        let offset = code_min(bits) as f64 - (lo / scale).round();
        let offset = offset.clamp(code_min(bits) as f64, code_max(bits) as f64) as i32;
        Ok(Self { bits, scale, offset })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn code_min(&self) -> i32 {
        code_min(self.bits)
    }

    pub fn code_max(&self) -> i32 {
        code_max(self.bits)
    }

    #[inline]
    pub fn quantize_value(&self, v: f32) -> i32 {
        self.quantize_f64(f64::from(v))
    }

    #[inline]
    pub fn quantize_f64(&self, v: f64) -> i32 {
        let q = (v / self.scale).round() + f64::from(self.offset);
        q.clamp(f64::from(self.code_min()), f64::from(self.code_max())) as i32
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f32 {
        (self.scale * f64::from(q - self.offset)) as f32
    }

    /// Quantize-then-dequantize, as used by fake-quantized training.
    #[inline]
    pub fn fake_quantize(&self, v: f32) -> f32 {
        self.dequantize_value(self.quantize_value(v))
    }

    /// Real interval that maps without clamping.
    pub fn real_range(&self) -> (f32, f32) {
        (
            self.dequantize_value(self.code_min()),
            self.dequantize_value(self.code_max()),
        )
    }
}

/// Free-function form of [`QuantParams::from_range`].
pub fn compute_params(min: f64, max: f64, bits: u32, symmetric: bool) -> Result<QuantParams, QuantError> {
    QuantParams::from_range(min, max, bits, symmetric)
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), QuantError> {
    if shape.iter().product::<usize>() == len {
        Ok(())
    } else {
        Err(QuantError::ShapeMismatch { shape: shape.to_vec(), len })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, QuantError> {
        check_shape(&shape, values.len())?;
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(min, max)` over all values, or `None` for an empty tensor.
    pub fn min_max(&self) -> Option<(f32, f32)> {
        min_max(&self.values)
    }
}

pub(crate) fn min_max(values: &[f32]) -> Option<(f32, f32)> {
    let mut it = values.iter().copied();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

/// Integer codes plus the parameters that give them meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    params: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, params: QuantParams) -> Result<Self, QuantError> {
        check_shape(&shape, values.len())?;
        if let Some(&bad) = values
            .iter()
            .find(|&&v| v < params.code_min() || v > params.code_max())
        {
            return Err(QuantError::CodeOutOfRange { value: bad, bits: params.bits() });
        }
        Ok(Self { shape, values, params })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn quantize(t: &RealTensor, p: &QuantParams) -> QuantTensor {
    QuantTensor {
        shape: t.shape.clone(),
        values: t.values.iter().map(|&v| p.quantize_value(v)).collect(),
        params: *p,
    }
}

pub fn dequantize(t: &QuantTensor) -> RealTensor {
    RealTensor {
        shape: t.shape.clone(),
        values: t.values.iter().map(|&q| t.params.dequantize_value(q)).collect(),
    }
}

/// Running activation range, tracked as an exponential moving average of batch extrema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub min: f32,
    pub max: f32,
    pub decay: f32,
    pub count: u64,
}

impl Default for CalibrationStats {
    fn default() -> Self {
        Self::new(DEFAULT_CALIBRATION_DECAY)
    }
}

impl CalibrationStats {
    pub fn new(decay: f32) -> Self {
        assert!(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
        Self { min: 0.0, max: 0.0, decay, count: 0 }
    }

    pub fn is_calibrated(&self) -> bool {
        self.count > 0
    }

    /// Folds one batch into the running range; `new = decay * old + (1 - decay) * batch`.
    pub fn observe(&self, t: &RealTensor) -> Self {
        self.observe_slice(t.values())
    }

    pub fn observe_slice(&self, values: &[f32]) -> Self {
        let Some((lo, hi)) = min_max(values) else {
            return *self;
        };
        if self.count == 0 {
            return Self { min: lo, max: hi, decay: self.decay, count: 1 };
        }
        let d = self.decay;
        Self {
            min: d * self.min + (1.0 - d) * lo,
            max: d * self.max + (1.0 - d) * hi,
            decay: d,
            count: self.count + 1,
        }
    }

    /// Asymmetric activation parameters for the calibrated range.
    pub fn params(&self, bits: u32) -> Result<QuantParams, QuantError> {
        QuantParams::from_range(f64::from(self.min), f64::from(self.max), bits, false)
    }
}

pub fn observe(stats: &CalibrationStats, t: &RealTensor) -> CalibrationStats {
    stats.observe(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn asymmetric_params_from_hand_computation() {
        let p = compute_params(0.0, 25.5, 8, false).unwrap();
        assert!((p.scale() - 0.1).abs() < 1e-12);
        assert_eq!(p.offset(), -128);
    }

    #[test]
    fn symmetric_params_have_zero_offset() {
        let p = compute_params(-3.0, 3.0, 8, true).unwrap();
        assert_eq!(p.offset(), 0);
        assert!((p.scale() - 6.0 / 254.0).abs() < 1e-15);
        assert_eq!(p.quantize_value(3.0), 127);
        assert_eq!(p.quantize_value(-3.0), -127);
        // asymmetric input range still gets a zero offset
        let q = compute_params(-1.0, 5.0, 4, true).unwrap();
        assert_eq!(q.offset(), 0);
    }

    #[test]
    fn degenerate_range() {
        let p = compute_params(0.0, 0.0, 8, false).unwrap();
        assert_eq!((p.scale(), p.offset()), (1.0, 0));
        let p = compute_params(2.5, 2.5, 8, true).unwrap();
        assert_eq!((p.scale(), p.offset()), (1.0, 0));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert_eq!(compute_params(0.0, 1.0, 1, false), Err(QuantError::InvalidBits(1)));
        assert_eq!(compute_params(0.0, 1.0, 17, false), Err(QuantError::InvalidBits(17)));
        assert!(matches!(
            compute_params(2.0, 1.0, 8, false),
            Err(QuantError::InvalidRange { .. })
        ));
        assert_eq!(compute_params(f64::NAN, 1.0, 8, false), Err(QuantError::NonFinite));
        assert!(QuantParams::new(8, 0.0, 0).is_err());
        assert!(QuantParams::new(4, 1.0, 8).is_err());
    }

    #[test]
    fn quantize_examples() {
        let p = compute_params(0.0, 25.5, 8, false).unwrap();
        assert_eq!(p.quantize_value(1.0), -118);
        assert_eq!(p.quantize_value(0.0), p.offset());
        assert_eq!(p.quantize_value(1e9), 127);
        assert_eq!(p.quantize_value(-1e9), -128);
    }

    #[test]
    fn dequantize_examples() {
        let p = compute_params(0.0, 25.5, 8, false).unwrap();
        assert!((p.dequantize_value(-118) - 1.0).abs() < 1e-6);
        assert_eq!(p.dequantize_value(p.offset()), 0.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let p = QuantParams::new(8, 1.0, 0).unwrap();
        assert_eq!(p.quantize_value(2.5), 3);
        assert_eq!(p.quantize_value(-2.5), -3);
        assert_eq!(p.quantize_value(0.5), 1);
        assert_eq!(p.quantize_value(-0.5), -1);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(RealTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let p = QuantParams::new(4, 1.0, 0).unwrap();
        assert!(QuantTensor::new(vec![1], vec![8], p).is_err());
        assert!(QuantTensor::new(vec![2], vec![7, -8], p).is_ok());
    }

    #[test]
    fn tensor_round_trip() {
        let p = compute_params(-1.0, 1.0, 8, false).unwrap();
        let t = RealTensor::new(vec![2, 2], vec![-1.0, -0.25, 0.0, 0.9]).unwrap();
        let q = quantize(&t, &p);
        assert_eq!(q.shape(), &[2, 2]);
        let back = dequantize(&q);
        for (a, b) in t.values().iter().zip(back.values()) {
            assert!((a - b).abs() as f64 <= p.scale() / 2.0 + 1e-6);
        }
    }

    #[test]
    fn calibration_first_observation_initializes() {
        let s = CalibrationStats::new(0.99);
        let t = RealTensor::from_vec(vec![-1.0, 0.5, 4.0]);
        let s = s.observe(&t);
        assert_eq!((s.min, s.max, s.count), (-1.0, 4.0, 1));
    }

    #[test]
    fn calibration_ema_arithmetic() {
        let s = CalibrationStats { min: 0.0, max: 1.0, decay: 0.9, count: 1 };
        let s = s.observe(&RealTensor::from_vec(vec![0.0, 2.0]));
        assert!((s.max - 1.1).abs() < 1e-6);
        assert_eq!(s.min, 0.0);
    }

    #[test]
    fn calibration_decay_one_keeps_first_range() {
        let s = CalibrationStats::new(1.0)
            .observe(&RealTensor::from_vec(vec![0.0, 1.0]))
            .observe(&RealTensor::from_vec(vec![-5.0, 9.0]));
        assert_eq!((s.min, s.max), (0.0, 1.0));
    }

    #[test]
    fn calibration_ignores_empty_batches() {
        let s = CalibrationStats::new(0.5);
        assert_eq!(s.observe_slice(&[]), s);
    }

    proptest! {
        #[test]
        fn round_trip_error_within_half_step(
            lo in -100.0f64..0.0,
            width in 0.01f64..200.0,
            frac in 0.0f64..=1.0,
            bits in 2u32..=16,
        ) {
            let hi = lo + width;
            let p = compute_params(lo, hi, bits, false).unwrap();
            let v = (lo + frac * width) as f32;
            let back = p.dequantize_value(p.quantize_value(v));
            // f32 storage adds a little slack on top of scale/2
            let tol = p.scale() / 2.0 + 1e-5 * (1.0 + f64::from(v.abs()));
            prop_assert!(f64::from((back - v).abs()) <= tol, "v={v} back={back} scale={}", p.scale());
        }

        #[test]
        fn codes_always_in_range(v in proptest::num::f32::NORMAL | proptest::num::f32::ZERO,
                                 lo in -10.0f64..10.0, width in 0.0f64..10.0, bits in 2u32..=16,
                                 sym in any::<bool>()) {
            let p = compute_params(lo, lo + width, bits, sym).unwrap();
            let q = p.quantize_value(v);
            prop_assert!(q >= code_min(bits) && q <= code_max(bits));
        }

        #[test]
        fn zero_is_exact(lo in -10.0f64..10.0, width in 0.0f64..10.0, bits in 2u32..=16, sym in any::<bool>()) {
            let p = compute_params(lo, lo + width, bits, sym).unwrap();
            prop_assert_eq!(p.dequantize_value(p.quantize_value(0.0)), 0.0);
        }

        #[test]
        fn calibration_endpoints_hit_code_extremes(lo in -50.0f64..-0.01, width in 0.1f64..100.0, bits in 2u32..=16) {
            let hi = lo + width;
            let hi = hi.max(0.01);
            let p = compute_params(lo, hi, bits, false).unwrap();
            let qlo = p.quantize_value(lo as f32);
            let qhi = p.quantize_value(hi as f32);
            prop_assert!((qlo - code_min(bits)).abs() <= 1);
            prop_assert!((qhi - code_max(bits)).abs() <= 1);
        }
    }
}
