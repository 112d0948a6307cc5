//! Parameter quantization for compiled graphs.
//!
//! Activations run at the plan's Q format (default Q8.8). Weight and bias
//! tensors each pick the largest fractional width that still represents
//! their max magnitude in 16 bits, so small weights keep precision; the
//! runtime rescales products once per accumulator.

use crate::error::{Error, Result};
use crate::fixed::{quantize_fixed, QFormat};
use crate::ir::{Graph, OpKind};
use crate::packing::PackedBitTensor;
use crate::tensor::Tensor;

/// Largest frac_bits <= 15 that keeps `data` within i16 after rounding.
pub fn choose_frac_bits(data: &[f64]) -> u8 {
    let max_abs = data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let mut frac = 15u8;
    while frac > 0 {
        let q = QFormat::new(frac);
        if (max_abs * (1u64 << frac) as f64).round() <= i16::MAX as f64 {
            return frac;
        }
        let _ = q;
        frac -= 1;
    }
    frac
}

fn quantize_tensor(t: &Tensor, what: &str) -> Result<Tensor> {
    match t {
        Tensor::F32 { data, shape } => {
            let f64s: Vec<f64> = data.iter().map(|&x| x as f64).collect();
            let frac = choose_frac_bits(&f64s);
            Ok(Tensor::I16(quantize_fixed(&f64s, shape, QFormat::new(frac))))
        }
        Tensor::I16(_) => Err(Error::AlreadyQuantized(what.to_string())),
        other => Ok(other.clone()),
    }
}

/// Quantize every fixed-path parameter tensor in place.
pub fn quantize_graph(graph: &mut Graph, _frac_bits: u8) -> Result<()> {
    let ids: Vec<usize> = graph.node_ids().collect();
    for id in ids {
        let name = graph.node(id).name.clone();
        match &mut graph.node_mut(id).op {
            OpKind::FixedConv2d { weight, bias, .. } => {
                *weight = quantize_tensor(weight, &format!("{name}.w"))?;
                *bias = quantize_tensor(bias, &format!("{name}.b"))?;
            }
            OpKind::FixedLinear { weight, bias } => {
                *weight = quantize_tensor(weight, &format!("{name}.w"))?;
                *bias = quantize_tensor(bias, &format!("{name}.b"))?;
            }
            OpKind::PatchEmbed { weight, bias, .. } => {
                *weight = quantize_tensor(weight, &format!("{name}.w"))?;
                *bias = quantize_tensor(bias, &format!("{name}.b"))?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Re-pack all binary weights to the target lane width.
pub fn repack_binary_weights(graph: &mut Graph, word_size: u8) -> Result<()> {
    let ids: Vec<usize> = graph.node_ids().collect();
    for id in ids {
        let repacked: Option<PackedBitTensor> = match &graph.node(id).op {
            OpKind::BinaryConv2d { weight, .. } if weight.lane_width() != word_size => {
                Some(weight.repack(word_size)?)
            }
            OpKind::BinaryLinear { weight } if weight.lane_width() != word_size => {
                Some(weight.repack(word_size)?)
            }
            _ => None,
        };
        if let Some(w) = repacked {
            match &mut graph.node_mut(id).op {
                OpKind::BinaryConv2d { weight, .. } => *weight = w,
                OpKind::BinaryLinear { weight } => *weight = w,
                _ => unreachable!(),
            }
        }
    }
    Ok(())
}
