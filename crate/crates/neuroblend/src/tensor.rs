//! Parameter tensor containers and container dtype tags.

use serde::{Deserialize, Serialize};

use crate::fixed::FixedTensor;
use crate::packing::PackedBitTensor;

/// Container dtype tags used by the on-disk formats.
pub const TAG_F32: u8 = 0;
pub const TAG_I16: u8 = 1;
pub const TAG_PACKED_U64: u8 = 2;
pub const TAG_U8: u8 = 3;
/// Extension tag for tensors whose payload must survive round-trips at
/// full double precision (thresholds, border padding values).
pub const TAG_F64: u8 = 4;

/// A parameter tensor attached to a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Tensor {
    F32 { data: Vec<f32>, shape: Vec<usize> },
    F64 { data: Vec<f64>, shape: Vec<usize> },
    I16(FixedTensor),
    Packed(PackedBitTensor),
    U8 { data: Vec<u8>, shape: Vec<usize> },
}

impl Tensor {
    pub fn dtype_tag(&self) -> u8 {
        match self {
            Tensor::F32 { .. } => TAG_F32,
            Tensor::F64 { .. } => TAG_F64,
            Tensor::I16(_) => TAG_I16,
            Tensor::Packed(_) => TAG_PACKED_U64,
            Tensor::U8 { .. } => TAG_U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32 { shape, .. } => shape,
            Tensor::F64 { shape, .. } => shape,
            Tensor::I16(t) => &t.shape,
            Tensor::Packed(p) => p.shape(),
            Tensor::U8 { shape, .. } => shape,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            Tensor::F32 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            Tensor::F64 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_fixed(&self) -> Option<&FixedTensor> {
        match self {
            Tensor::I16(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_packed(&self) -> Option<&PackedBitTensor> {
        match self {
            Tensor::Packed(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match self {
            Tensor::U8 { data, .. } => Some(data),
            _ => None,
        }
    }

    /// Read the tensor as f64 values regardless of storage type, exact for
    /// every storage format (fixed-point dequantization is exact).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Tensor::F32 { data, .. } => data.iter().map(|&x| x as f64).collect(),
            Tensor::F64 { data, .. } => data.clone(),
            Tensor::I16(t) => crate::fixed::dequantize_fixed(t),
            Tensor::Packed(p) => crate::packing::unpack_axis(p)
                .into_iter()
                .map(|x| x as f64)
                .collect(),
            Tensor::U8 { data, .. } => data.iter().map(|&x| x as f64).collect(),
        }
    }
}
