//! Bit-packing of {-1,+1} tensors along the channel dimension.
//!
//! Channels are packed into fixed-width lanes of unsigned 64-bit storage
//! words (lane width `w <= 64`, default 48 to mirror a 48-bit wide bitwise
//! ALU). Bit 1 encodes +1, bit 0 encodes -1. Lane 0 is bit 0 of word 0.
//! Bits above the valid-lane mask are always zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lane width, matching a 48-bit wide hardware bitwise unit.
pub const DEFAULT_WORD_SIZE: u8 = 48;

/// A {-1,+1} tensor packed along one axis into `u64` storage words.
///
/// Storage is `n_groups * words_per_group` words; group `g` holds the
/// channel vector for one position (pixel, output row, kernel tap, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBitTensor {
    words: Vec<u64>,
    /// Logical shape of the unpacked tensor.
    shape: Vec<usize>,
    /// Axis of `shape` that is packed into lanes.
    packed_axis: usize,
    /// Logical channel count (`shape[packed_axis]`).
    lanes: usize,
    /// Lane width per storage word, 1..=64.
    lane_width: u8,
}

impl PackedBitTensor {
    pub fn words_per_group(lanes: usize, lane_width: u8) -> usize {
        lanes.div_ceil(lane_width as usize)
    }

    /// Valid-lane mask for word `word_idx` of a group.
    pub fn word_mask(lanes: usize, lane_width: u8, word_idx: usize) -> u64 {
        let w = lane_width as usize;
        let start = word_idx * w;
        let in_word = (lanes - start).min(w);
        if in_word == 64 {
            u64::MAX
        } else {
            (1u64 << in_word) - 1
        }
    }

    /// All per-word masks for one group; the last entry is the
    /// residual-lane mask when `lanes % lane_width != 0`.
    pub fn group_masks(lanes: usize, lane_width: u8) -> Vec<u64> {
        (0..Self::words_per_group(lanes, lane_width))
            .map(|j| Self::word_mask(lanes, lane_width, j))
            .collect()
    }

    pub fn from_raw(
        words: Vec<u64>,
        shape: Vec<usize>,
        packed_axis: usize,
        lane_width: u8,
    ) -> Result<Self> {
        if lane_width == 0 || lane_width > 64 {
            return Err(Error::BadWordSize(lane_width));
        }
        let lanes = shape[packed_axis];
        let n_groups: usize = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != packed_axis)
            .map(|(_, d)| d)
            .product();
        let expect = n_groups * Self::words_per_group(lanes, lane_width);
        if words.len() != expect {
            return Err(Error::ShapeMismatch {
                context: format!("packed words {} != expected {expect}", words.len()),
            });
        }
        Ok(Self {
            words,
            shape,
            packed_axis,
            lanes,
            lane_width,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn packed_axis(&self) -> usize {
        self.packed_axis
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn lane_width(&self) -> u8 {
        self.lane_width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn n_groups(&self) -> usize {
        if self.lanes == 0 {
            return 0;
        }
        self.words.len() / Self::words_per_group(self.lanes, self.lane_width)
    }

    /// Words of one group.
    pub fn group(&self, g: usize) -> &[u64] {
        let wpg = Self::words_per_group(self.lanes, self.lane_width);
        &self.words[g * wpg..(g + 1) * wpg]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [u64] {
        let wpg = Self::words_per_group(self.lanes, self.lane_width);
        &mut self.words[g * wpg..(g + 1) * wpg]
    }

    /// Re-pack to a different lane width.
    pub fn repack(&self, lane_width: u8) -> Result<Self> {
        if lane_width == self.lane_width {
            return Ok(self.clone());
        }
        let data = unpack_axis(self);
        pack_axis(&data, &self.shape, self.packed_axis, lane_width)
    }
}

/// Pack a {-1,+1} float tensor along `axis` with the given lane width.
///
/// Group order is row-major over the remaining axes. Within a group,
/// channel `j*w + i` sits in bit `i` of word `j`.
pub fn pack_axis(
    data: &[f32],
    shape: &[usize],
    axis: usize,
    lane_width: u8,
) -> Result<PackedBitTensor> {
    if lane_width == 0 || lane_width > 64 {
        return Err(Error::BadWordSize(lane_width));
    }
    let total: usize = shape.iter().product();
    if data.len() != total {
        return Err(Error::ShapeMismatch {
            context: format!("data len {} != shape product {total}", data.len()),
        });
    }
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let wpg = PackedBitTensor::words_per_group(lanes, lane_width);
    let w = lane_width as usize;

    let mut words = vec![0u64; outer * inner * wpg];
    let mut g = 0;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lanes * inner + i;
            let group = &mut words[g * wpg..(g + 1) * wpg];
            for c in 0..lanes {
                let v = data[base + c * inner];
                let bit = if v == 1.0 {
                    1u64
                } else if v == -1.0 {
                    0u64
                } else {
                    return Err(Error::NotBinary(v));
                };
                group[c / w] |= bit << (c % w);
            }
            g += 1;
        }
    }
    PackedBitTensor::from_raw(words, shape.to_vec(), axis, lane_width)
}

/// Inverse of [`pack_axis`]: expand back to a {-1,+1} float tensor.
pub fn unpack_axis(packed: &PackedBitTensor) -> Vec<f32> {
    let shape = packed.shape();
    let axis = packed.packed_axis();
    let lanes = packed.lanes();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let w = packed.lane_width() as usize;

    let mut out = vec![0f32; shape.iter().product()];
    let mut g = 0;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lanes * inner + i;
            let group = packed.group(g);
            for c in 0..lanes {
                let bit = (group[c / w] >> (c % w)) & 1;
                out[base + c * inner] = if bit == 1 { 1.0 } else { -1.0 };
            }
            g += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_channels_one_word() {
        // channels ch0..ch3 = [+1,-1,+1,-1] -> bits 0b0101
        let p = pack_axis(&[1.0, -1.0, 1.0, -1.0], &[4], 0, 4).unwrap();
        assert_eq!(p.words(), &[0b0101]);
        assert_eq!(PackedBitTensor::word_mask(4, 4, 0), 0b1111);
    }

    #[test]
    fn residual_lanes_get_partial_mask() {
        let data = vec![1.0; 5];
        let p = pack_axis(&data, &[5], 0, 4).unwrap();
        assert_eq!(p.words().len(), 2);
        assert_eq!(p.words(), &[0b1111, 0b0001]);
        let masks = PackedBitTensor::group_masks(5, 4);
        assert_eq!(masks, vec![0b1111, 0b0001]);
    }

    #[test]
    fn rejects_non_binary_values() {
        let err = pack_axis(&[1.0, 0.5], &[2], 0, 48).unwrap_err();
        assert!(matches!(err, Error::NotBinary(_)));
    }

    #[test]
    fn bits_above_mask_stay_zero() {
        let data: Vec<f32> = (0..100).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let p = pack_axis(&data, &[100], 0, 48).unwrap();
        for (j, &word) in p.group(0).iter().enumerate() {
            let mask = PackedBitTensor::word_mask(100, 48, j);
            assert_eq!(word & !mask, 0);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_any_lane_width(
            c in 1usize..130,
            hw in 1usize..6,
            w in 1u8..=64,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                state
            };
            let shape = [c, hw, hw];
            let data: Vec<f32> = (0..c * hw * hw)
                .map(|_| if next() & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let packed = pack_axis(&data, &shape, 0, w).unwrap();
            prop_assert_eq!(unpack_axis(&packed), data);
        }

        #[test]
        fn roundtrip_axis_one(rows in 1usize..8, f in 1usize..70, seed in any::<u64>()) {
            let mut state = seed | 1;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            let data: Vec<f32> = (0..rows * f)
                .map(|_| if next() & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let packed = pack_axis(&data, &[rows, f], 1, 48).unwrap();
            prop_assert_eq!(unpack_axis(&packed), data);
        }
    }
}
