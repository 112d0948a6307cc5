//! Signed 16-bit fixed-point tensors (default Q8.8).

use serde::{Deserialize, Serialize};

/// Signed fixed-point format: 16 total bits, `frac_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormat {
    pub frac_bits: u8,
}

impl QFormat {
    pub const fn new(frac_bits: u8) -> Self {
        Self { frac_bits }
    }

    pub const TOTAL_BITS: u32 = 16;

    /// Dequantized value of one raw step.
    pub fn lsb(&self) -> f64 {
        (2.0f64).powi(-(self.frac_bits as i32))
    }

    pub fn max_value(&self) -> f64 {
        i16::MAX as f64 * self.lsb()
    }

    pub fn min_value(&self) -> f64 {
        i16::MIN as f64 * self.lsb()
    }

    /// Round-to-nearest-even quantization of a real value to a raw step
    /// count, saturating at the format bounds. Returns (raw, saturated).
    pub fn quantize_value(&self, x: f64) -> (i16, bool) {
        let scaled = x * (1u64 << self.frac_bits) as f64;
        let rounded = round_half_even(scaled);
        if rounded > i16::MAX as f64 {
            (i16::MAX, true)
        } else if rounded < i16::MIN as f64 {
            (i16::MIN, true)
        } else {
            (rounded as i16, false)
        }
    }

    /// Exact dequantization: raw * 2^-frac_bits.
    pub fn dequantize_value(&self, raw: i16) -> f64 {
        raw as f64 * self.lsb()
    }
}

impl Default for QFormat {
    fn default() -> Self {
        Self { frac_bits: 8 }
    }
}

/// Round half-way cases to the even integer (banker's rounding).
pub fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    let frac = x - floor;
    let up = match frac.partial_cmp(&0.5) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        // exact tie: go to the even neighbor
        _ => (floor as i64) % 2 != 0,
    };
    if up {
        floor + 1.0
    } else {
        floor
    }
}

/// Round-to-nearest-even for an integer numerator divided by 2^shift.
pub fn rne_shift_i64(value: i64, shift: u32) -> i64 {
    if shift == 0 {
        return value;
    }
    let half = 1i64 << (shift - 1);
    let rem = value & ((1i64 << shift) - 1);
    let down = value >> shift;
    if rem > half || (rem == half && down & 1 == 1) {
        down + 1
    } else {
        down
    }
}

/// Round-to-nearest-even integer division (used by pooling).
pub fn rne_div_i64(value: i64, divisor: i64) -> i64 {
    debug_assert!(divisor > 0);
    let down = value.div_euclid(divisor);
    let rem = value.rem_euclid(divisor);
    let twice = 2 * rem;
    if twice > divisor || (twice == divisor && down & 1 == 1) {
        down + 1
    } else {
        down
    }
}

/// A quantized tensor: raw i16 steps plus its format and logical shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedTensor {
    pub data: Vec<i16>,
    pub shape: Vec<usize>,
    pub format: QFormat,
}

impl FixedTensor {
    pub fn zeros(shape: Vec<usize>, format: QFormat) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0; n],
            shape,
            format,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Counters accumulated while quantizing (saturation is defined behavior,
/// not an error).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantStats {
    pub saturated: u64,
    pub total: u64,
}

/// Quantize a float tensor, recording saturation counts.
pub fn quantize_fixed_with_stats(
    data: &[f64],
    shape: &[usize],
    format: QFormat,
    stats: &mut QuantStats,
) -> FixedTensor {
    let mut raw = Vec::with_capacity(data.len());
    for &x in data {
        let (r, sat) = format.quantize_value(x);
        if sat {
            stats.saturated += 1;
        }
        raw.push(r);
    }
    stats.total += data.len() as u64;
    FixedTensor {
        data: raw,
        shape: shape.to_vec(),
        format,
    }
}

pub fn quantize_fixed(data: &[f64], shape: &[usize], format: QFormat) -> FixedTensor {
    let mut stats = QuantStats::default();
    quantize_fixed_with_stats(data, shape, format, &mut stats)
}

/// Exact inverse of quantization on the representable grid.
pub fn dequantize_fixed(t: &FixedTensor) -> Vec<f64> {
    t.data.iter().map(|&r| t.format.dequantize_value(r)).collect()
}
