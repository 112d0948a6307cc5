//! Integer and bitwise compute kernels. Everything here is exact: popcount
//! sums, 32-bit-accumulator MACs with one final rounding, and integer
//! threshold compares. Order-independent by construction, so data-parallel
//! execution is bit-identical to sequential.

use rayon::prelude::*;

use crate::fixed::rne_shift_i64;
use crate::ir::Conv2dAttrs;
use crate::packing::PackedBitTensor;

/// {-1,+1} dot product over packed lanes:
/// 2 * popcount(XNOR(a,b) & mask) - n_valid.
#[inline]
pub fn bmac_dot(a: &[u64], b: &[u64], masks: &[u64], n_valid: i32) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), masks.len());
    let mut pc = 0u32;
    for i in 0..a.len() {
        pc += (!(a[i] ^ b[i]) & masks[i]).count_ones();
    }
    2 * pc as i32 - n_valid
}

/// Per-tap weight sums for border handling: a padded tap contributes
/// pad_sign * sum(weights of that tap).
pub fn weight_tap_sums(weight: &PackedBitTensor) -> Vec<i32> {
    let lanes = weight.lanes() as i32;
    let masks = PackedBitTensor::group_masks(weight.lanes(), weight.lane_width());
    (0..weight.n_groups())
        .map(|g| {
            let mut pc = 0u32;
            for (w, m) in weight.group(g).iter().zip(masks.iter()) {
                pc += (w & m).count_ones();
            }
            2 * pc as i32 - lanes
        })
        .collect()
}

/// XNOR-popcount convolution: packed activations [C,H,W] (packed along C)
/// against packed weights [c_out,C,k,k] (packed along C). Output is the
/// exact integer sum per (oc, oy, ox), in [-n, n] for n = C*k*k.
pub fn binary_conv2d(
    x: &PackedBitTensor,
    weight: &PackedBitTensor,
    attrs: &Conv2dAttrs,
    pad_bit: u8,
    workers: usize,
) -> Vec<i32> {
    let shape = x.shape();
    let (c_in, h, w) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(weight.shape()[1], c_in);
    debug_assert_eq!(weight.lane_width(), x.lane_width());
    let c_out = weight.shape()[0];
    let k = attrs.kernel;
    let (oh, ow) = (attrs.out_dim(h), attrs.out_dim(w));
    let masks = PackedBitTensor::group_masks(c_in, x.lane_width());
    let tap_sums = weight_tap_sums(weight);
    let pad_sign: i32 = if pad_bit == 1 { 1 } else { -1 };
    let n_valid = c_in as i32;

    let mut out = vec![0i32; c_out * oh * ow];
    let run_channel = |oc: usize, plane: &mut [i32]| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i32;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * attrs.stride + ky) as isize - attrs.padding as isize;
                        let ix = (ox * attrs.stride + kx) as isize - attrs.padding as isize;
                        let tap = (oc * k + ky) * k + kx;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let g = iy as usize * w + ix as usize;
                            acc += bmac_dot(x.group(g), weight.group(tap), &masks, n_valid);
                        } else {
                            acc += pad_sign * tap_sums[tap];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    };

    if workers > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(oc, plane)| run_channel(oc, plane));
    } else {
        for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
            run_channel(oc, plane);
        }
    }
    out
}

/// {-1,+1} linear layer over packed rows: out[r,o] = row_r . weight_o.
pub fn binary_linear(x: &PackedBitTensor, weight: &PackedBitTensor, workers: usize) -> Vec<i32> {
    let in_features = x.lanes();
    debug_assert_eq!(weight.shape()[1], in_features);
    let rows = x.n_groups();
    let out_features = weight.shape()[0];
    let masks = PackedBitTensor::group_masks(in_features, x.lane_width());
    let n_valid = in_features as i32;

    let mut out = vec![0i32; rows * out_features];
    let run_row = |r: usize, row_out: &mut [i32]| {
        for o in 0..out_features {
            row_out[o] = bmac_dot(x.group(r), weight.group(o), &masks, n_valid);
        }
    };
    if workers > 1 {
        out.par_chunks_mut(out_features)
            .enumerate()
            .for_each(|(r, chunk)| run_row(r, chunk));
    } else {
        for (r, chunk) in out.chunks_mut(out_features).enumerate() {
            run_row(r, chunk);
        }
    }
    out
}

/// Execution-side saturation and overflow counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// Values clipped while rounding into the activation Q format.
    pub saturated: u64,
    /// Accumulator sums that exceeded the 32-bit window.
    pub acc_overflow: u64,
}

impl ExecStats {
    pub fn merge(&mut self, other: ExecStats) {
        self.saturated += other.saturated;
        self.acc_overflow += other.acc_overflow;
    }
}

#[inline]
fn saturate_i16(v: i64, stats: &mut ExecStats) -> i16 {
    if v > i16::MAX as i64 {
        stats.saturated += 1;
        i16::MAX
    } else if v < i16::MIN as i64 {
        stats.saturated += 1;
        i16::MIN
    } else {
        v as i16
    }
}

/// Clamp an accumulator into the 32-bit hardware window, flagging overflow.
#[inline]
fn clamp_acc(v: i64, stats: &mut ExecStats) -> i64 {
    if v > i32::MAX as i64 {
        stats.acc_overflow += 1;
        i32::MAX as i64
    } else if v < i32::MIN as i64 {
        stats.acc_overflow += 1;
        i32::MIN as i64
    } else {
        v
    }
}

/// Quantized conv parameters resolved for execution.
#[derive(Debug, Clone)]
pub struct FixedConvKernel {
    pub attrs: Conv2dAttrs,
    pub c_out: usize,
    pub c_in: usize,
    /// Raw weights at 2^-w_frac.
    pub weight: Vec<i16>,
    pub w_frac: u8,
    /// Raw bias at 2^-b_frac.
    pub bias: Vec<i16>,
    pub b_frac: u8,
    /// Raw border values at the activation format (one per input channel).
    pub padding: Option<Vec<i16>>,
}

/// Fixed-point convolution: integer MACs in a 32-bit accumulator window,
/// one round-to-nearest-even rescale into the activation format.
pub fn fp_conv2d(
    x: &[i16],
    x_shape: &[usize],
    kern: &FixedConvKernel,
    x_frac: u8,
    workers: usize,
) -> (Vec<i16>, ExecStats) {
    let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    debug_assert_eq!(c_in, kern.c_in);
    let k = kern.attrs.kernel;
    let (oh, ow) = (kern.attrs.out_dim(h), kern.attrs.out_dim(w));
    // products at 2^-(w_frac + x_frac); bias aligned up to that scale
    let prod_frac = kern.w_frac as u32 + x_frac as u32;
    let bias_shift = prod_frac.saturating_sub(kern.b_frac as u32);

    let mut out = vec![0i16; kern.c_out * oh * ow];
    let run_channel = |oc: usize, plane: &mut [i16]| -> ExecStats {
        let mut stats = ExecStats::default();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc: i64 = (kern.bias[oc] as i64) << bias_shift;
                for ic in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * kern.attrs.stride + ky) as isize
                                - kern.attrs.padding as isize;
                            let ix = (ox * kern.attrs.stride + kx) as isize
                                - kern.attrs.padding as isize;
                            let xv: i64 =
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    x[(ic * h + iy as usize) * w + ix as usize] as i64
                                } else {
                                    kern.padding.as_ref().map(|p| p[ic] as i64).unwrap_or(0)
                                };
                            let wv = kern.weight[((oc * c_in + ic) * k + ky) * k + kx] as i64;
                            acc += wv * xv;
                        }
                    }
                }
                let acc = clamp_acc(acc, &mut stats);
                let raw = rne_shift_i64(acc, kern.w_frac as u32);
                plane[oy * ow + ox] = saturate_i16(raw, &mut stats);
            }
        }
        stats
    };

    let stats = if workers > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .map(|(oc, plane)| run_channel(oc, plane))
            .reduce(ExecStats::default, |mut a, b| {
                a.merge(b);
                a
            })
    } else {
        let mut stats = ExecStats::default();
        for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
            stats.merge(run_channel(oc, plane));
        }
        stats
    };
    (out, stats)
}

/// Quantized linear parameters resolved for execution.
#[derive(Debug, Clone)]
pub struct FixedLinearKernel {
    pub out_features: usize,
    pub in_features: usize,
    pub weight: Vec<i16>,
    pub w_frac: u8,
    pub bias: Vec<i16>,
    pub b_frac: u8,
}

pub fn fp_linear(
    x: &[i16],
    rows: usize,
    kern: &FixedLinearKernel,
    x_frac: u8,
) -> (Vec<i16>, ExecStats) {
    let mut stats = ExecStats::default();
    let prod_frac = kern.w_frac as u32 + x_frac as u32;
    let bias_shift = prod_frac.saturating_sub(kern.b_frac as u32);
    let mut out = vec![0i16; rows * kern.out_features];
    for r in 0..rows {
        for o in 0..kern.out_features {
            let mut acc: i64 = (kern.bias[o] as i64) << bias_shift;
            for i in 0..kern.in_features {
                acc += kern.weight[o * kern.in_features + i] as i64
                    * x[r * kern.in_features + i] as i64;
            }
            let acc = clamp_acc(acc, &mut stats);
            let raw = rne_shift_i64(acc, kern.w_frac as u32);
            out[r * kern.out_features + o] = saturate_i16(raw, &mut stats);
        }
    }
    (out, stats)
}

/// Integer compare bounds equivalent to `y >= tau` / `y <= tau` on the
/// input grid with step 2^-frac: multiplying tau by a power of two is
/// exact, so `raw >= ceil(tau * 2^frac)` reproduces the f64 compare.
#[derive(Debug, Clone)]
pub struct ThresholdKernel {
    /// Per channel: compare bound in raw input steps.
    pub bounds: Vec<i64>,
    pub dirs: Vec<crate::ir::ThresholdDir>,
}

impl ThresholdKernel {
    pub fn from_params(params: &crate::ir::ThresholdParams, input_frac: u8) -> Self {
        use crate::ir::ThresholdDir;
        let scale = (1u64 << input_frac) as f64;
        let bounds = params
            .tau
            .iter()
            .zip(params.direction.iter())
            .map(|(&tau, dir)| {
                let t = tau * scale;
                match dir {
                    ThresholdDir::Ge => t.ceil() as i64,
                    ThresholdDir::Le => t.floor() as i64,
                    _ => 0,
                }
            })
            .collect();
        Self {
            bounds,
            dirs: params.direction.clone(),
        }
    }

    #[inline]
    pub fn bit(&self, c: usize, raw: i64) -> bool {
        use crate::ir::ThresholdDir;
        match self.dirs[c] {
            ThresholdDir::Ge => raw >= self.bounds[c],
            ThresholdDir::Le => raw <= self.bounds[c],
            ThresholdDir::ConstPos => true,
            ThresholdDir::ConstNeg => false,
        }
    }
}

/// Raw channel-indexed access paths for bit-producing ops.
pub enum RawPlane<'a> {
    Fixed(&'a [i16]),
    Int(&'a [i32]),
}

impl RawPlane<'_> {
    #[inline]
    fn get(&self, idx: usize) -> i64 {
        match self {
            RawPlane::Fixed(d) => d[idx] as i64,
            RawPlane::Int(d) => d[idx] as i64,
        }
    }
}

/// Threshold (or sign, with a zero bound) into a packed bit tensor.
pub fn threshold_to_bits(
    x: RawPlane<'_>,
    shape: &[usize],
    kern: &ThresholdKernel,
    lane_width: u8,
) -> PackedBitTensor {
    let (groups, lanes, index) = plane_layout(shape);
    let wpg = PackedBitTensor::words_per_group(lanes, lane_width);
    let w = lane_width as usize;
    let mut words = vec![0u64; groups * wpg];
    for g in 0..groups {
        let base = g * wpg;
        for c in 0..lanes {
            if kern.bit(c, x.get(index(g, c))) {
                words[base + c / w] |= 1u64 << (c % w);
            }
        }
    }
    PackedBitTensor::from_raw(words, shape.to_vec(), crate::ir::channel_axis(shape.len()), lane_width)
        .expect("layout is consistent")
}

type GroupChannelIndex = Box<dyn Fn(usize, usize) -> usize>;

/// (group count, lane count, flat index of (group, channel)) for the
/// channel-axis convention.
fn plane_layout(shape: &[usize]) -> (usize, usize, GroupChannelIndex) {
    match shape.len() {
        3 => {
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            (hw, c, Box::new(move |g, ch| ch * hw + g))
        }
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            (rows, cols, Box::new(move |g, ch| g * cols + ch))
        }
        _ => {
            let n = shape.iter().product();
            (1, n, Box::new(move |_, ch| ch))
        }
    }
}

/// Boolean-OR max pooling over packed binary planes.
pub fn maxpool_or(x: &PackedBitTensor, window: usize, stride: usize) -> PackedBitTensor {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let wpg = PackedBitTensor::words_per_group(c, x.lane_width());
    let mut words = vec![0u64; oh * ow * wpg];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * wpg;
            for ky in 0..window {
                for kx in 0..window {
                    let iy = oy * stride + ky;
                    let ix = ox * stride + kx;
                    if iy < h && ix < w {
                        let src = x.group(iy * w + ix);
                        for j in 0..wpg {
                            words[dst + j] |= src[j];
                        }
                    }
                }
            }
        }
    }
    PackedBitTensor::from_raw(words, vec![c, oh, ow], 0, x.lane_width()).expect("consistent layout")
}

/// Per-channel norm in f64 with one rounding into the activation format.
/// This shares its evaluation order with the reference interpreter, so
/// the runtime value is always the correctly rounded reference value.
pub fn batchnorm_fixed(
    x: RawPlane<'_>,
    shape: &[usize],
    bn: &crate::ir::BnParams,
    x_frac: u8,
    out_frac: u8,
) -> (Vec<i16>, ExecStats) {
    let mut stats = ExecStats::default();
    let q = crate::fixed::QFormat::new(out_frac);
    let in_lsb = (2.0f64).powi(-(x_frac as i32));
    let n: usize = shape.iter().product();
    let (_, _, _idx) = plane_layout(shape);
    let mut out = vec![0i16; n];
    let channel_of = channel_indexer(shape);
    for i in 0..n {
        let y = x.get(i) as f64 * in_lsb;
        let v = bn.apply(channel_of(i), y);
        let (raw, sat) = q.quantize_value(v);
        if sat {
            stats.saturated += 1;
        }
        out[i] = raw;
    }
    (out, stats)
}

/// Norm and activation as one joint step with a single rounding, the way
/// the streaming accelerator's joint domain computes BN-PReLU.
pub fn batchnorm_prelu_fixed(
    x: RawPlane<'_>,
    shape: &[usize],
    bn: &crate::ir::BnParams,
    alpha: &[f32],
    x_frac: u8,
    out_frac: u8,
) -> (Vec<i16>, ExecStats) {
    let mut stats = ExecStats::default();
    let q = crate::fixed::QFormat::new(out_frac);
    let in_lsb = (2.0f64).powi(-(x_frac as i32));
    let n: usize = shape.iter().product();
    let mut out = vec![0i16; n];
    let channel_of = channel_indexer(shape);
    for i in 0..n {
        let c = channel_of(i);
        let y = x.get(i) as f64 * in_lsb;
        let mut v = bn.apply(c, y);
        if v < 0.0 {
            v *= alpha[c] as f64;
        }
        let (raw, sat) = q.quantize_value(v);
        if sat {
            stats.saturated += 1;
        }
        out[i] = raw;
    }
    (out, stats)
}

/// Channel index of a flat element under the channel-axis convention.
pub fn channel_indexer(shape: &[usize]) -> Box<dyn Fn(usize) -> usize> {
    match shape.len() {
        3 => {
            let hw = shape[1] * shape[2];
            Box::new(move |i| i / hw)
        }
        2 => {
            let cols = shape[1];
            Box::new(move |i| i % cols)
        }
        _ => Box::new(|i| i),
    }
}

pub fn prelu_fixed(x: &[i16], shape: &[usize], alpha: &[f32]) -> (Vec<i16>, ExecStats) {
    let mut stats = ExecStats::default();
    let channel_of = channel_indexer(shape);
    let out = x
        .iter()
        .enumerate()
        .map(|(i, &raw)| {
            if raw >= 0 {
                raw
            } else {
                // alpha * raw is exact in f64; round once
                let v = alpha[channel_of(i)] as f64 * raw as f64;
                saturate_i16(crate::fixed::round_half_even(v) as i64, &mut stats)
            }
        })
        .collect();
    (out, stats)
}

pub fn add_fixed(a: &[i16], b: &[i16]) -> (Vec<i16>, ExecStats) {
    let mut stats = ExecStats::default();
    let out = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| saturate_i16(x as i64 + y as i64, &mut stats))
        .collect();
    (out, stats)
}

/// Mean per window: sum then a single rounding divide.
pub fn avgpool_fixed(
    x: &[i16],
    shape: &[usize],
    window: usize,
    stride: usize,
) -> (Vec<i16>, Vec<usize>) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0i16; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i64;
                let mut n = 0i64;
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        if iy < h && ix < w {
                            acc += x[(ch * h + iy) * w + ix] as i64;
                            n += 1;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = crate::fixed::rne_div_i64(acc, n) as i16;
            }
        }
    }
    (out, vec![c, oh, ow])
}

/// Mean over all non-channel dims.
pub fn global_avgpool_fixed(x: &[i16], shape: &[usize]) -> Vec<i16> {
    match shape.len() {
        3 => {
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            (0..c)
                .map(|ch| {
                    let acc: i64 = x[ch * hw..(ch + 1) * hw].iter().map(|&v| v as i64).sum();
                    crate::fixed::rne_div_i64(acc, hw as i64) as i16
                })
                .collect()
        }
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            (0..cols)
                .map(|c| {
                    let acc: i64 = (0..rows).map(|r| x[r * cols + c] as i64).sum();
                    crate::fixed::rne_div_i64(acc, rows as i64) as i16
                })
                .collect()
        }
        _ => x.to_vec(),
    }
}

pub fn transpose_fixed(x: &[i16], shape: &[usize]) -> Vec<i16> {
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![0i16; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{ThresholdDir, ThresholdParams};
    use crate::packing::pack_axis;

    #[test]
    fn four_lane_hand_case() {
        // a=0b1010, b=0b1100 over 4 lanes: XNOR&mask = 0b1001, pc=2, dot=0
        assert_eq!(bmac_dot(&[0b1010], &[0b1100], &[0b1111], 4), 0);
    }

    #[test]
    fn self_dot_is_lane_count() {
        let a = [0xDEADBEEFu64 & 0xFFFF_FFFF_FFFF];
        let masks = [PackedBitTensor::word_mask(48, 48, 0)];
        assert_eq!(bmac_dot(&a, &a, &masks, 48), 48);
    }

    #[test]
    fn all_agree_conv_hits_n() {
        // 1 channel 3x3 input of +1, 3x3 weight of +1, no padding: 9
        let x = pack_axis(&[1.0; 9], &[1, 3, 3], 0, 48).unwrap();
        let w = pack_axis(&[1.0; 9], &[1, 1, 3, 3], 1, 48).unwrap();
        let attrs = Conv2dAttrs { kernel: 3, stride: 1, padding: 0 };
        assert_eq!(binary_conv2d(&x, &w, &attrs, 0, 1), vec![9]);
        let w_neg = pack_axis(&[-1.0; 9], &[1, 1, 3, 3], 1, 48).unwrap();
        assert_eq!(binary_conv2d(&x, &w_neg, &attrs, 0, 1), vec![-9]);
    }

    #[test]
    fn threshold_boundary_uses_sign_zero_rule() {
        // tau = 2 Ge at Q8.8: x = 2.0 (raw 512) -> set; 1.99609375 -> clear
        let params = ThresholdParams {
            tau: vec![2.0],
            direction: vec![ThresholdDir::Ge],
        };
        let kern = ThresholdKernel::from_params(&params, 8);
        assert!(kern.bit(0, 512));
        assert!(!kern.bit(0, 511));
    }

    #[test]
    fn integer_bounds_match_f64_compare() {
        let mut rng = crate::init::SplitMix64::new(9);
        for _ in 0..2000 {
            let tau = rng.uniform(-130.0, 130.0);
            let dir = if rng.next_f64() < 0.5 {
                ThresholdDir::Ge
            } else {
                ThresholdDir::Le
            };
            let params = ThresholdParams {
                tau: vec![tau],
                direction: vec![dir],
            };
            let kern = ThresholdKernel::from_params(&params, 8);
            let raw = (rng.next_u64() % 65536) as i64 - 32768;
            let y = raw as f64 / 256.0;
            let expect = match dir {
                ThresholdDir::Ge => y >= tau,
                ThresholdDir::Le => y <= tau,
                _ => unreachable!(),
            };
            assert_eq!(kern.bit(0, raw), expect, "tau={tau} raw={raw}");
        }
    }

    #[test]
    fn or_pooling_matches_max() {
        // window {-1,+1,-1,-1} -> +1; all -1 -> -1
        let x = pack_axis(&[-1.0, 1.0, -1.0, -1.0], &[1, 2, 2], 0, 48).unwrap();
        let pooled = maxpool_or(&x, 2, 2);
        assert_eq!(crate::packing::unpack_axis(&pooled), vec![1.0]);
        let x = pack_axis(&[-1.0; 4], &[1, 2, 2], 0, 48).unwrap();
        let pooled = maxpool_or(&x, 2, 2);
        assert_eq!(crate::packing::unpack_axis(&pooled), vec![-1.0]);
    }

    #[test]
    fn avgpool_means_windows() {
        // 2x2 of {1,1,3,3} -> 2 (at Q0 scale for readability)
        let (out, shape) = avgpool_fixed(&[1, 1, 3, 3], &[1, 2, 2], 2, 2);
        assert_eq!(out, vec![2]);
        assert_eq!(shape, vec![1, 1, 1]);
    }

    #[test]
    fn prelu_quarters_negatives() {
        // alpha 0.25, x = -2.0 at Q8.8 (raw -512) -> -0.5 (raw -128)
        let (out, _) = prelu_fixed(&[-512, 512], &[2], &[0.25, 0.25]);
        assert_eq!(out, vec![-128, 512]);
    }

    #[test]
    fn bmac_matches_naive_sum_on_random_lanes() {
        let mut rng = crate::init::SplitMix64::new(3);
        for _ in 0..200 {
            let c = 1 + (rng.next_u64() % 130) as usize;
            let w = if rng.next_u64() & 1 == 0 { 48 } else { 64 };
            let a: Vec<f32> = (0..c).map(|_| rng.sign()).collect();
            let b: Vec<f32> = (0..c).map(|_| rng.sign()).collect();
            let naive: i32 = a.iter().zip(b.iter()).map(|(x, y)| (x * y) as i32).sum();
            let ap = pack_axis(&a, &[c], 0, w).unwrap();
            let bp = pack_axis(&b, &[c], 0, w).unwrap();
            let masks = PackedBitTensor::group_masks(c, w);
            assert_eq!(bmac_dot(ap.group(0), bp.group(0), &masks, c as i32), naive);
        }
    }

    #[test]
    fn conv_ignores_padded_lane_bits() {
        // flipping bits above the valid-lane mask of the activations must
        // leave every conv output unchanged
        let (c, h, w) = (50usize, 5usize, 5usize);
        let mut rng = crate::init::SplitMix64::new(8);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.sign()).collect();
        let wt: Vec<f32> = (0..2 * c * 9).map(|_| rng.sign()).collect();
        let xp = pack_axis(&x, &[c, h, w], 0, 48).unwrap();
        let wp = pack_axis(&wt, &[2, c, 3, 3], 1, 48).unwrap();
        let attrs = Conv2dAttrs { kernel: 3, stride: 1, padding: 1 };
        let clean = binary_conv2d(&xp, &wp, &attrs, 0, 1);
        let mut dirty = xp.clone();
        let junk = !PackedBitTensor::word_mask(c, 48, 1) & ((1u64 << 48) - 1);
        let wpg = PackedBitTensor::words_per_group(c, 48);
        for g in 0..dirty.n_groups() {
            dirty.words_mut()[g * wpg + 1] |= junk;
        }
        assert_eq!(binary_conv2d(&dirty, &wp, &attrs, 0, 1), clean);
    }

    #[test]
    fn fp_conv_identity_weight_is_identity() {
        // 1x1 identity weight, zero bias: output equals input exactly
        let c = 3usize;
        let mut weight = vec![0i16; c * c];
        for i in 0..c {
            weight[i * c + i] = 1 << 14; // 1.0 at Q1.14
        }
        let kern = FixedConvKernel {
            attrs: Conv2dAttrs { kernel: 1, stride: 1, padding: 0 },
            c_out: c,
            c_in: c,
            weight,
            w_frac: 14,
            bias: vec![0; c],
            b_frac: 8,
            padding: None,
        };
        let x: Vec<i16> = (0..c as i16 * 4).map(|i| i * 37 - 60).collect();
        let (out, stats) = fp_conv2d(&x, &[c, 2, 2], &kern, 8, 1);
        assert_eq!(out, x);
        assert_eq!(stats, ExecStats::default());
    }

    #[test]
    fn fp_conv_affine_example() {
        // w = 2.0, b = -1.0, x = 1.5 at Q8.8: exact result 2.0
        let kern = FixedConvKernel {
            attrs: Conv2dAttrs { kernel: 1, stride: 1, padding: 0 },
            c_out: 1,
            c_in: 1,
            weight: vec![2 << 13], // 2.0 at Q2.13
            w_frac: 13,
            bias: vec![-(1 << 8)], // -1.0 at Q8.8
            b_frac: 8,
            padding: None,
        };
        let (out, _) = fp_conv2d(&[384], &[1, 1, 1], &kern, 8, 1); // 1.5
        assert_eq!(out, vec![512]); // 2.0
    }

    #[test]
    fn or_pooling_matches_dense_max_on_random_planes() {
        let mut rng = crate::init::SplitMix64::new(77);
        for _ in 0..20 {
            let (c, h, w) = (1 + (rng.next_u64() % 70) as usize, 6usize, 6usize);
            let x: Vec<f32> = (0..c * h * w).map(|_| rng.sign()).collect();
            let xp = pack_axis(&x, &[c, h, w], 0, 48).unwrap();
            let pooled = maxpool_or(&xp, 2, 2);
            let got = crate::packing::unpack_axis(&pooled);
            // dense +-1 max-pool oracle
            let (oh, ow) = (3usize, 3usize);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = -1.0f32;
                        for ky in 0..2 {
                            for kx in 0..2 {
                                m = m.max(x[(ch * h + oy * 2 + ky) * w + ox * 2 + kx]);
                            }
                        }
                        assert_eq!(got[(ch * oh + oy) * ow + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_padding_lanes_do_not_leak() {
        // flip bits above the valid mask; dot products must not move
        let c = 50usize;
        let data: Vec<f32> = (0..c).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let x = pack_axis(&data, &[c], 0, 48).unwrap();
        let wdat: Vec<f32> = (0..c).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let w = pack_axis(&wdat, &[1, c], 1, 48).unwrap();
        let masks = PackedBitTensor::group_masks(c, 48);
        let before = bmac_dot(x.group(0), w.group(0), &masks, c as i32);
        let mut x2 = x.clone();
        // 50 lanes over 48-bit words: word 1 has 2 valid lanes
        x2.words_mut()[1] |= !PackedBitTensor::word_mask(c, 48, 1) & ((1u64 << 48) - 1);
        let after = bmac_dot(x2.group(0), w.group(0), &masks, c as i32);
        assert_eq!(before, after);
    }
}
