//! Deterministic parameter initialization.
//!
//! Every tensor draws from its own substream of a splitmix64 generator,
//! keyed by the FNV-1a hash of "<node name>.<role>" mixed with the master
//! seed, so identical seeds produce bit-identical models regardless of
//! visit order.

use crate::error::Result;
use crate::ir::{DType, Graph, OpKind, Producer};
use crate::packing::pack_axis;
use crate::tensor::Tensor;

/// splitmix64: one 64-bit state, additive constant stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn sign(&mut self) -> f32 {
        if self.next_u64() >> 63 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Substream for the tensor named `<node>.<role>` under `master_seed`.
pub fn substream(master_seed: u64, name: &str) -> SplitMix64 {
    let mut mixer = SplitMix64::new(master_seed ^ fnv1a64(name.as_bytes()));
    let state = mixer.next_u64();
    SplitMix64::new(state)
}

/// Scale constants for batch-norm statistics by role. Statistics are
/// drawn to match the signal each norm actually sees: a norm consuming
/// integer popcount sums carries statistics at the scale of those sums
/// (mean ~ sqrt(fan_in), variance ~ fan_in), a block-output norm at the
/// residual-sum scale, and a norm after a fixed conv at that conv's
/// output scale. Mismatched statistics would swing activations far out
/// of the 16-bit fixed-point window.
mod ranges {
    /// gamma magnitude for trainable norms.
    pub const GAMMA: (f64, f64) = (0.5, 2.0);
    /// gamma magnitude for norms over popcount sums.
    pub const GAMMA_INT: (f64, f64) = (0.5, 1.2);
    /// Fraction of channels with negative gamma.
    pub const GAMMA_NEG_P: f64 = 0.1;
    pub const BETA: (f64, f64) = (-1.0, 1.0);
    /// mu multiplier (times sqrt(fan_in)) for popcount-sum inputs.
    pub const MU_INT: (f64, f64) = (-0.5, 0.5);
    /// sigma^2 multiplier (times fan_in) for popcount-sum inputs.
    pub const SIGMA2_INT: (f64, f64) = (0.5, 2.0);
    /// Residual sums run a bit above unit variance.
    pub const MU_BLOCK_OUT_ABS: (f64, f64) = (1.5, 2.5);
    pub const SIGMA2_BLOCK_OUT: (f64, f64) = (1.0, 4.0);
    /// Fixed conv outputs with 1/sqrt(fan_in) weights on ~unit inputs.
    pub const MU_CONV_OUT: (f64, f64) = (-0.3, 0.3);
    pub const SIGMA2_CONV_OUT: (f64, f64) = (0.06, 0.5);
}

fn fill_uniform(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()
}

fn random_weight(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let mut rng = substream(seed, name);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::F32 {
        data: fill_uniform(&mut rng, shape.iter().product(), -bound, bound),
        shape: shape.to_vec(),
    }
}

fn random_signs(seed: u64, name: &str, n: usize) -> Vec<f32> {
    let mut rng = substream(seed, name);
    (0..n).map(|_| rng.sign()).collect()
}

/// Fan-in of the op producing an integer popcount-sum value.
fn producer_fan_in(graph: &Graph, value: usize) -> Option<usize> {
    match graph.value(value).producer {
        Producer::Node(n) => match &graph.node(n).op {
            OpKind::BinaryConv2d { attrs, weight, .. } => {
                Some(weight.shape()[1] * attrs.kernel * attrs.kernel)
            }
            OpKind::BinaryLinear { weight } => Some(weight.shape()[1]),
            _ => None,
        },
        Producer::GraphInput(_) => None,
    }
}

/// Fill every parameter tensor of `graph` from seeded substreams.
/// Same seed, same graph structure: bit-identical parameters.
pub fn random_init(mut graph: Graph, seed: u64) -> Result<Graph> {
    graph.seed = seed;
    let word_size = graph.word_size;
    let ids: Vec<usize> = graph.node_ids().collect();
    for id in ids {
        let node = graph.node(id);
        let name = node.name.clone();
        let input0 = node.inputs.first().copied();
        match &node.op {
            OpKind::BinaryConv2d { weight, .. } => {
                let shape = weight.shape().to_vec();
                let signs = random_signs(seed, &format!("{name}.w"), shape.iter().product());
                let packed = pack_axis(&signs, &shape, 1, word_size)?;
                if let OpKind::BinaryConv2d { weight, .. } = &mut graph.node_mut(id).op {
                    *weight = packed;
                }
            }
            OpKind::BinaryLinear { weight } => {
                let shape = weight.shape().to_vec();
                let signs = random_signs(seed, &format!("{name}.w"), shape.iter().product());
                let packed = pack_axis(&signs, &shape, 1, word_size)?;
                if let OpKind::BinaryLinear { weight } = &mut graph.node_mut(id).op {
                    *weight = packed;
                }
            }
            OpKind::FixedConv2d { weight, .. } => {
                let ws = weight.shape().to_vec();
                let fan_in = ws[1] * ws[2] * ws[3];
                let w = random_weight(seed, &format!("{name}.w"), &ws, fan_in);
                let b = random_weight(seed, &format!("{name}.b"), &[ws[0]], fan_in);
                if let OpKind::FixedConv2d { weight, bias, .. } = &mut graph.node_mut(id).op {
                    *weight = w;
                    *bias = b;
                }
            }
            OpKind::FixedLinear { weight, .. } => {
                let ws = weight.shape().to_vec();
                let fan_in = ws[1];
                let w = random_weight(seed, &format!("{name}.w"), &ws, fan_in);
                let b = random_weight(seed, &format!("{name}.b"), &[ws[0]], fan_in);
                if let OpKind::FixedLinear { weight, bias } = &mut graph.node_mut(id).op {
                    *weight = w;
                    *bias = b;
                }
            }
            OpKind::PatchEmbed { weight, .. } => {
                let ws = weight.shape().to_vec();
                let fan_in = ws[1] * ws[2] * ws[3];
                let w = random_weight(seed, &format!("{name}.w"), &ws, fan_in);
                let b = random_weight(seed, &format!("{name}.b"), &[ws[0]], fan_in);
                if let OpKind::PatchEmbed { weight, bias, .. } = &mut graph.node_mut(id).op {
                    *weight = w;
                    *bias = b;
                }
            }
            OpKind::BatchNorm(bn) => {
                let c = bn.channels();
                let affine_free = bn.affine_free;
                // statistics scale follows the producing op
                let int_fan = input0
                    .filter(|&v| graph.value(v).dtype == DType::Int)
                    .and_then(|v| producer_fan_in(&graph, v));
                let (mu_scale, s2_scale) = match int_fan {
                    Some(n) => ((n as f64).sqrt(), n as f64),
                    None => (1.0, 1.0),
                };
                let mut rng = substream(seed, &format!("{name}.stats"));
                let ((mu_lo, mu_hi), (s2_lo, s2_hi)) = if int_fan.is_some() {
                    (ranges::MU_INT, ranges::SIGMA2_INT)
                } else if affine_free {
                    (ranges::MU_BLOCK_OUT_ABS, ranges::SIGMA2_BLOCK_OUT)
                } else {
                    (ranges::MU_CONV_OUT, ranges::SIGMA2_CONV_OUT)
                };
                let block_out_sign = affine_free && int_fan.is_none();
                let mu: Vec<f32> = (0..c)
                    .map(|_| {
                        let mag = rng.uniform(mu_lo, mu_hi) * mu_scale;
                        let v = if block_out_sign {
                            if rng.next_f64() < 0.5 { -mag } else { mag }
                        } else {
                            mag
                        };
                        v as f32
                    })
                    .collect();
                let sigma2: Vec<f32> = (0..c)
                    .map(|_| (rng.uniform(s2_lo, s2_hi) * s2_scale) as f32)
                    .collect();
                let (gamma, beta) = if affine_free {
                    (vec![1.0f32; c], vec![0.0f32; c])
                } else {
                    let mut grng = substream(seed, &format!("{name}.affine"));
                    let (g_lo, g_hi) = if int_fan.is_some() { ranges::GAMMA_INT } else { ranges::GAMMA };
                    let gamma = (0..c)
                        .map(|_| {
                            let mag = grng.uniform(g_lo, g_hi);
                            let sign = if grng.next_f64() < ranges::GAMMA_NEG_P { -1.0 } else { 1.0 };
                            (mag * sign) as f32
                        })
                        .collect();
                    let beta = fill_uniform(&mut grng, c, ranges::BETA.0, ranges::BETA.1);
                    (gamma, beta)
                };
                if let OpKind::BatchNorm(bn) = &mut graph.node_mut(id).op {
                    bn.gamma = gamma;
                    bn.beta = beta;
                    bn.mu = mu;
                    bn.sigma2 = sigma2;
                }
            }
            // prelu slopes stay at their configured constant
            _ => {}
        }
    }
    Ok(graph)
}

/// Deterministic runtime input on the representable Q-grid, so the float
/// reference and the fixed-point runtime read identical values.
pub fn random_input(shape: &[usize], seed: u64, frac_bits: u8) -> Vec<f32> {
    let mut rng = substream(seed, "input");
    let scale = (1u64 << frac_bits) as f32;
    let steps = 1u64 << frac_bits; // raw range [-steps, steps] ~ [-1, 1]
    (0..shape.iter().product())
        .map(|_| {
            let raw = (rng.next_u64() % (2 * steps + 1)) as i64 - steps as i64;
            raw as f32 / scale
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::build_neuroblend20;
    use crate::modelio::model_to_bytes;

    #[test]
    fn same_seed_gives_byte_identical_models() {
        let a = random_init(build_neuroblend20(10).unwrap(), 0).unwrap();
        let b = random_init(build_neuroblend20(10).unwrap(), 0).unwrap();
        assert_eq!(model_to_bytes(&a).unwrap(), model_to_bytes(&b).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = random_init(build_neuroblend20(10).unwrap(), 0).unwrap();
        let b = random_init(build_neuroblend20(10).unwrap(), 1).unwrap();
        assert_ne!(model_to_bytes(&a).unwrap(), model_to_bytes(&b).unwrap());
    }

    #[test]
    fn splitmix_reference_values() {
        // reference stream for seed 0 (first three outputs of splitmix64)
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220A8397B1DCDAF);
        assert_eq!(rng.next_u64(), 0x6E789E6AA1B965F4);
        assert_eq!(rng.next_u64(), 0x06C45D188009454F);
    }

    #[test]
    fn inputs_sit_on_the_q_grid() {
        let xs = random_input(&[3, 8, 8], 7, 8);
        for x in xs {
            let scaled = x * 256.0;
            assert_eq!(scaled, scaled.round());
            assert!((-1.0..=1.0).contains(&x));
        }
    }
}
