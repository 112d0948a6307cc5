//! Operation, parameter and size accounting, plus a first-order
//! accelerator latency estimate.
//!
//! MACs per conv/linear: c_out * c_in * k_h * k_w * H_out * W_out (binary
//! ops count as BMAC, fixed-point as FPMAC). Sizes: 1 bit per binary
//! weight, 16 bits per fixed weight or bias, and one 16-bit parameter per
//! channel for each norm/threshold/prelu op (their channel-wise
//! parameters are negligible next to the weights, and a folded norm
//! reduces to one threshold per channel). Container metadata is excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Graph, OpKind};

/// Per-node cost entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub bmac: u64,
    pub fpmac: u64,
    pub binary_param_bits: u64,
    pub fixed_param_bits: u64,
}

/// Whole-graph cost report. Totals equal the sum of per-layer entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub bmac: u64,
    pub fpmac: u64,
    /// 1-bit parameters (binary weights).
    pub binary_params: u64,
    /// 16-bit parameters (fixed weights/biases plus channel params).
    pub fixed_params: u64,
    pub model_size_bytes: u64,
    /// Size in MiB, the unit model-size figures are usually quoted in.
    pub model_size_mb: f64,
    pub layers: Vec<LayerCost>,
}

fn out_pixels(graph: &Graph, value: usize) -> u64 {
    let shape = &graph.value(value).shape;
    match shape.len() {
        3 => (shape[1] * shape[2]) as u64,
        _ => 1,
    }
}

/// Count multiply-accumulates and parameter footprints per layer.
pub fn count_ops(graph: &Graph) -> CostReport {
    let mut layers = Vec::new();
    for (_, node) in graph.iter_nodes() {
        let mut entry = LayerCost {
            name: node.name.clone(),
            kind: node.op.kind_name().to_string(),
            bmac: 0,
            fpmac: 0,
            binary_param_bits: 0,
            fixed_param_bits: 0,
        };
        match &node.op {
            OpKind::BinaryConv2d { weight, .. } => {
                let ws = weight.shape();
                let weights = (ws[0] * ws[1] * ws[2] * ws[3]) as u64;
                entry.bmac = weights * out_pixels(graph, node.output);
                entry.binary_param_bits = weights;
            }
            OpKind::FixedConv2d { weight, bias, .. } => {
                let ws = weight.shape();
                let weights = (ws[0] * ws[1] * ws[2] * ws[3]) as u64;
                entry.fpmac = weights * out_pixels(graph, node.output);
                entry.fixed_param_bits = 16 * (weights + bias.element_count() as u64);
            }
            OpKind::PatchEmbed { weight, bias, .. } => {
                let ws = weight.shape();
                let weights = (ws[0] * ws[1] * ws[2] * ws[3]) as u64;
                let patches = graph.value(node.output).shape[0] as u64;
                entry.fpmac = weights * patches;
                entry.fixed_param_bits = 16 * (weights + bias.element_count() as u64);
            }
            OpKind::BinaryLinear { weight } => {
                let ws = weight.shape();
                let weights = (ws[0] * ws[1]) as u64;
                let rows = match graph.value(node.output).shape.len() {
                    2 => graph.value(node.output).shape[0] as u64,
                    _ => 1,
                };
                entry.bmac = weights * rows;
                entry.binary_param_bits = weights;
            }
            OpKind::FixedLinear { weight, bias } => {
                let ws = weight.shape();
                let weights = (ws[0] * ws[1]) as u64;
                let rows = match graph.value(node.output).shape.len() {
                    2 => graph.value(node.output).shape[0] as u64,
                    _ => 1,
                };
                entry.fpmac = weights * rows;
                entry.fixed_param_bits = 16 * (weights + bias.element_count() as u64);
            }
            OpKind::BatchNorm(bn) => {
                entry.fixed_param_bits = 16 * bn.channels() as u64;
            }
            OpKind::Threshold(t) => {
                entry.fixed_param_bits = 16 * t.channels() as u64;
            }
            OpKind::Prelu { alpha } => {
                entry.fixed_param_bits = 16 * alpha.element_count() as u64;
            }
            _ => {}
        }
        layers.push(entry);
    }

    let bmac = layers.iter().map(|l| l.bmac).sum();
    let fpmac = layers.iter().map(|l| l.fpmac).sum();
    let binary_params: u64 = layers.iter().map(|l| l.binary_param_bits).sum();
    let fixed_bits: u64 = layers.iter().map(|l| l.fixed_param_bits).sum();
    let total_bits = binary_params + fixed_bits;
    let bytes = total_bits.div_ceil(8);
    CostReport {
        bmac,
        fpmac,
        binary_params,
        fixed_params: fixed_bits / 16,
        model_size_bytes: bytes,
        model_size_mb: bytes as f64 / (1024.0 * 1024.0),
        layers,
    }
}

/// Accelerator shape: lane width of the bitwise unit, fixed-point array
/// dims, and the joint-domain parallelism factor gcd(rows, lanes).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub bnn_lanes: u64,
    pub fp_rows: u64,
    pub fp_cols: u64,
    /// For reporting only.
    pub clock_mhz: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            bnn_lanes: 48,
            fp_rows: 32,
            fp_cols: 32,
            clock_mhz: 342.0,
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl HardwareProfile {
    pub fn joint_parallelism(&self) -> u64 {
        gcd(self.fp_rows, self.bnn_lanes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerLatency {
    pub name: String,
    pub kind: String,
    pub cycles: u64,
}

/// First-order cycle estimate: no memory stalls, perfect utilization
/// within each domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_layer: Vec<LayerLatency>,
    /// Streaming pipeline bound: the slowest layer.
    pub pipeline_cycles: u64,
    /// Sequential bound: sum over layers.
    pub sequential_cycles: u64,
    pub joint_parallelism: u64,
    pub clock_mhz: f64,
}

/// Estimate per-layer cycles for a compiled graph on the given profile.
pub fn estimate_latency(graph: &Graph, profile: &HardwareProfile) -> Result<LatencyReport> {
    if !graph.compiled {
        return Err(Error::NotCompiled);
    }
    let joint = profile.joint_parallelism();
    let mut per_layer = Vec::new();
    for (_, node) in graph.iter_nodes() {
        let out_shape = &graph.value(node.output).shape;
        let elements: u64 = out_shape.iter().product::<usize>() as u64;
        let cycles = match &node.op {
            OpKind::BinaryConv2d { weight, .. } => {
                let ws = weight.shape();
                let words_per_tap = (ws[1] as u64).div_ceil(profile.bnn_lanes);
                let taps = (ws[2] * ws[3]) as u64;
                let pixels = out_pixels(graph, node.output);
                let word_ops = pixels * ws[0] as u64 * taps * words_per_tap;
                word_ops.div_ceil(profile.bnn_lanes)
            }
            OpKind::BinaryLinear { weight } => {
                let ws = weight.shape();
                let words = (ws[1] as u64).div_ceil(profile.bnn_lanes);
                let rows = match out_shape.len() {
                    2 => out_shape[0] as u64,
                    _ => 1,
                };
                (rows * ws[0] as u64 * words).div_ceil(profile.bnn_lanes)
            }
            OpKind::FixedConv2d { weight, .. } => {
                let ws = weight.shape();
                let macs = (ws[0] * ws[1] * ws[2] * ws[3]) as u64 * out_pixels(graph, node.output);
                macs.div_ceil(profile.fp_rows * profile.fp_cols)
            }
            OpKind::PatchEmbed { weight, .. } => {
                let ws = weight.shape();
                let macs = (ws[0] * ws[1] * ws[2] * ws[3]) as u64 * out_shape[0] as u64;
                macs.div_ceil(profile.fp_rows * profile.fp_cols)
            }
            OpKind::FixedLinear { weight, .. } => {
                let ws = weight.shape();
                let rows = match out_shape.len() {
                    2 => out_shape[0] as u64,
                    _ => 1,
                };
                (rows * (ws[0] * ws[1]) as u64).div_ceil(profile.fp_rows * profile.fp_cols)
            }
            // joint-domain elementwise ops
            _ => elements.div_ceil(joint),
        };
        per_layer.push(LayerLatency {
            name: node.name.clone(),
            kind: node.op.kind_name().to_string(),
            cycles,
        });
    }
    let pipeline_cycles = per_layer.iter().map(|l| l.cycles).max().unwrap_or(0);
    let sequential_cycles = per_layer.iter().map(|l| l.cycles).sum();
    Ok(LatencyReport {
        per_layer,
        pipeline_cycles,
        sequential_cycles,
        joint_parallelism: joint,
        clock_mhz: profile.clock_mhz,
    })
}
