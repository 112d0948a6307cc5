//! Shared test support: independent reference implementations that the
//! packed kernels are checked against.
//!
//! Each integration-test target compiles this module separately and uses
//! a subset of it.
#![allow(dead_code)]

/// Naive dense {-1,+1} convolution over i8 planes. Independent of the
/// packed XNOR-popcount path: plain byte loops, no bit tricks.
#[allow(clippy::too_many_arguments)]
pub fn dense_sign_conv2d(
    x: &[i8],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[i8],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    pad_value: i8,
) -> Vec<i32> {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0i32; c_out * oh * ow];
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i32;
                for ic in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            let xv = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                            {
                                x[(ic * h + iy as usize) * w + ix as usize]
                            } else {
                                pad_value
                            };
                            acc += (weight[((oc * c_in + ic) * k + ky) * k + kx] * xv) as i32;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Count nodes of one kind by walking the node list (no graph helpers).
pub fn census(graph: &neuroblend::Graph, kind: &str) -> usize {
    graph
        .iter_nodes()
        .filter(|(_, n)| n.op.kind_name() == kind)
        .count()
}

/// Deterministic +-1 data from a simple xorshift stream.
pub struct SignStream(pub u64);

impl SignStream {
    pub fn next_sign(&mut self) -> i8 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        if self.0 & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn signs(&mut self, n: usize) -> Vec<i8> {
        (0..n).map(|_| self.next_sign()).collect()
    }
}

pub fn to_f32_signs(signs: &[i8]) -> Vec<f32> {
    signs.iter().map(|&s| s as f32).collect()
}
