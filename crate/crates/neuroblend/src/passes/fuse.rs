//! Fold batch norms into an adjacent fixed-point convolution.
//!
//! For a norm in front of the conv (per input channel i, scale
//! a_i = gamma_i / sqrt(sigma2_i + eps)):
//!
//!   w'[o,i,ky,kx] = w[o,i,ky,kx] * a_i
//!   b'[o]         = b[o] + sum_{i,ky,kx} w[o,i,ky,kx] * (beta_i - a_i*mu_i)
//!
//! Zero padding in front of the removed norm must keep entering the conv
//! as norm(p) = 0, so the folded conv pads input channel i with the norm
//! preimage of zero, p_i = mu_i - beta_i*sqrt(sigma2_i+eps)/gamma_i.
//! A gamma_i = 0 channel has no preimage: that site is skipped (reported)
//! when the conv spatially pads.
//!
//! A trailing norm folds per output channel o (a2_o = gamma_o / s_o):
//!
//!   w''[o,..] = w'[o,..] * a2_o
//!   b''[o]    = beta_o + a2_o * (b'[o] - mu_o)
//!
//! All folding arithmetic runs in f64 and is written back once.

use crate::error::Result;
use crate::ir::{BnParams, Graph, NodeId, OpKind, Producer};
use crate::tensor::Tensor;

use super::{PassName, PassStats};

struct Site {
    bn_in: NodeId,
    conv: NodeId,
    bn_out: Option<NodeId>,
}

fn sole_consumer(graph: &Graph, value: usize) -> Option<NodeId> {
    if graph.is_graph_output(value) {
        return None;
    }
    let consumers = graph.consumers(value);
    if consumers.len() == 1 {
        Some(consumers[0])
    } else {
        None
    }
}

fn find_sites(graph: &Graph, with_trailing: bool) -> Vec<Site> {
    let mut sites = Vec::new();
    for (cid, node) in graph.iter_nodes() {
        if !matches!(node.op, OpKind::FixedConv2d { .. }) {
            continue;
        }
        let Producer::Node(bnid) = graph.value(node.inputs[0]).producer else {
            continue;
        };
        if !matches!(graph.node(bnid).op, OpKind::BatchNorm(_)) {
            continue;
        }
        // the norm must feed only this conv
        if sole_consumer(graph, graph.node(bnid).output) != Some(cid) {
            continue;
        }
        let bn_out = if with_trailing {
            sole_consumer(graph, node.output)
                .filter(|&t| matches!(graph.node(t).op, OpKind::BatchNorm(_)))
        } else {
            None
        };
        sites.push(Site {
            bn_in: bnid,
            conv: cid,
            bn_out,
        });
    }
    sites
}

fn scales(bn: &BnParams) -> Vec<f64> {
    (0..bn.channels())
        .map(|c| bn.gamma[c] as f64 / (bn.sigma2[c] as f64 + bn.eps as f64).sqrt())
        .collect()
}

fn apply_fold(graph: &mut Graph, site: &Site, stats: &mut PassStats) -> Result<bool> {
    let (attrs, weight, bias) = match &graph.node(site.conv).op {
        OpKind::FixedConv2d { attrs, weight, bias, .. } => (*attrs, weight.clone(), bias.clone()),
        _ => unreachable!(),
    };
    let Some(wdata) = weight.as_f32() else {
        // conv already quantized: folding must run on float parameters
        stats.skipped += 1;
        return Ok(false);
    };
    let bdata = bias.as_f32().unwrap_or(&[]);
    let bn_in = match &graph.node(site.bn_in).op {
        OpKind::BatchNorm(p) => p.clone(),
        _ => unreachable!(),
    };

    // preimage of zero per input channel, needed only under spatial padding
    let a_in = scales(&bn_in);
    let needs_pad = attrs.padding > 0;
    if needs_pad && bn_in.gamma.contains(&0.0) {
        stats.skipped += 1;
        return Ok(false);
    }
    let pad: Option<Vec<f64>> = needs_pad.then(|| {
        (0..bn_in.channels())
            .map(|i| {
                let s = (bn_in.sigma2[i] as f64 + bn_in.eps as f64).sqrt();
                bn_in.mu[i] as f64 - bn_in.beta[i] as f64 * s / bn_in.gamma[i] as f64
            })
            .collect()
    });

    let wshape = weight.shape().to_vec();
    let (c_out, c_in, k) = (wshape[0], wshape[1], wshape[2]);
    let taps = k * k;
    let mut w64: Vec<f64> = wdata.iter().map(|&x| x as f64).collect();
    let mut b64: Vec<f64> = (0..c_out).map(|o| bdata.get(o).copied().unwrap_or(0.0) as f64).collect();

    for o in 0..c_out {
        let mut shift = 0.0;
        for i in 0..c_in {
            let add = bn_in.beta[i] as f64 - a_in[i] * bn_in.mu[i] as f64;
            for t in 0..taps {
                let idx = (o * c_in + i) * taps + t;
                shift += w64[idx] * add;
                w64[idx] *= a_in[i];
            }
        }
        b64[o] += shift;
    }

    if let Some(tid) = site.bn_out {
        let bn_out = match &graph.node(tid).op {
            OpKind::BatchNorm(p) => p.clone(),
            _ => unreachable!(),
        };
        let a_out = scales(&bn_out);
        for o in 0..c_out {
            for t in 0..c_in * taps {
                w64[o * c_in * taps + t] *= a_out[o];
            }
            b64[o] = bn_out.beta[o] as f64 + a_out[o] * (b64[o] - bn_out.mu[o] as f64);
        }
    }

    // write back: one rounding to f32 for the float graph
    let new_weight = Tensor::F32 {
        data: w64.iter().map(|&x| x as f32).collect(),
        shape: wshape,
    };
    let new_bias = Tensor::F32 {
        data: b64.iter().map(|&x| x as f32).collect(),
        shape: vec![c_out],
    };
    let new_pad = pad.map(|p| Tensor::F64 {
        shape: vec![p.len()],
        data: p,
    });

    let v_pre = graph.node(site.bn_in).inputs[0];
    {
        let conv = graph.node_mut(site.conv);
        conv.inputs[0] = v_pre;
        if let OpKind::FixedConv2d { weight, bias, padding_value, .. } = &mut conv.op {
            *weight = new_weight;
            *bias = new_bias;
            *padding_value = new_pad;
        }
    }
    graph.remove_node(site.bn_in);
    stats.removed_nodes += 1;

    if let Some(tid) = site.bn_out {
        let v_out = graph.node(tid).output;
        graph.node_mut(site.conv).output = v_out;
        graph.value_mut(v_out).producer = Producer::Node(site.conv);
        graph.remove_node(tid);
        stats.removed_nodes += 1;
    }
    stats.rewritten += 1;
    Ok(true)
}

fn run(graph: &mut Graph, with_trailing: bool, name: PassName) -> Result<PassStats> {
    let mut stats = PassStats {
        name: name.as_str().to_string(),
        nodes_before: graph.node_count(),
        ..Default::default()
    };
    for site in find_sites(graph, with_trailing) {
        stats.matched += 1;
        apply_fold(graph, &site, &mut stats)?;
    }
    graph.compact()?;
    stats.nodes_after = graph.node_count();
    Ok(stats)
}

/// Fold `BatchNorm -> FixedConv2d`.
pub fn fuse_bn_conv(graph: &mut Graph) -> Result<PassStats> {
    run(graph, false, PassName::FuseBnConv)
}

/// Fold `BatchNorm -> FixedConv2d (-> BatchNorm)`.
pub fn fuse_bn_conv_bn(graph: &mut Graph) -> Result<PassStats> {
    run(graph, true, PassName::FuseBnConvBn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{validate, Conv2dAttrs, DType, DEFAULT_BN_EPS};
    use crate::oracle::reference_forward;

    fn bn(gamma: Vec<f32>, beta: Vec<f32>, mu: Vec<f32>, sigma2_plus_eps: Vec<f32>) -> BnParams {
        BnParams {
            gamma,
            beta,
            mu,
            sigma2: sigma2_plus_eps.iter().map(|s| s - DEFAULT_BN_EPS).collect(),
            eps: DEFAULT_BN_EPS,
            affine_free: false,
        }
    }

    /// input -> bn -> conv1x1 (-> bn2) -> out on a 1-channel 1x1 image.
    fn scalar_chain(with_trailing: bool) -> Graph {
        let mut g = Graph::new("chain", 0);
        let input = g.add_input("input", DType::Real, vec![1, 1, 1]);
        let b1 = g
            .add_node(
                "bn_in",
                OpKind::BatchNorm(bn(vec![3.0], vec![0.5], vec![1.0], vec![9.0])),
                vec![input],
            )
            .unwrap();
        let conv = g
            .add_node(
                "conv",
                OpKind::FixedConv2d {
                    attrs: Conv2dAttrs { kernel: 1, stride: 1, padding: 0 },
                    weight: Tensor::F32 { data: vec![2.0], shape: vec![1, 1, 1, 1] },
                    bias: Tensor::F32 { data: vec![0.0], shape: vec![1] },
                    padding_value: None,
                },
                vec![b1],
            )
            .unwrap();
        let last = if with_trailing {
            g.add_node(
                "bn_out",
                OpKind::BatchNorm(bn(vec![1.0], vec![0.0], vec![0.0], vec![1.0])),
                vec![conv],
            )
            .unwrap()
        } else {
            conv
        };
        g.set_output("out", last);
        g
    }

    #[test]
    fn scalar_fold_matches_hand_algebra() {
        // w=2, b=0, gamma=3, s=3, mu=1, beta=0.5: w'=2, b'=-2+1=-1
        let mut g = scalar_chain(false);
        let stats = fuse_bn_conv(&mut g).unwrap();
        assert_eq!(stats.rewritten, 1);
        assert!(validate(&g).is_empty());
        let (_, conv) = g.iter_nodes().find(|(_, n)| n.name == "conv").unwrap();
        let OpKind::FixedConv2d { weight, bias, .. } = &conv.op else {
            panic!()
        };
        assert!((weight.as_f32().unwrap()[0] - 2.0).abs() < 1e-6);
        assert!((bias.as_f32().unwrap()[0] - (-1.0)).abs() < 1e-6);
        // check the folded conv is 2x - 1
        let out = reference_forward(&g, &[4.0]).unwrap();
        assert!((out.output[0] - 7.0).abs() < 1e-5);
    }

    #[test]
    fn trailing_identity_norm_changes_nothing() {
        let mut g = scalar_chain(true);
        let stats = fuse_bn_conv_bn(&mut g).unwrap();
        assert_eq!(stats.rewritten, 1);
        assert_eq!(g.node_count(), 1, "both norms folded away");
        let (_, conv) = g.iter_nodes().next().unwrap();
        let OpKind::FixedConv2d { weight, bias, .. } = &conv.op else {
            panic!()
        };
        // identity trailing norm: w'' = w', b'' = b' (up to eps in s)
        assert!((weight.as_f32().unwrap()[0] - 2.0).abs() < 1e-4);
        assert!((bias.as_f32().unwrap()[0] - (-1.0)).abs() < 1e-4);
    }

    #[test]
    fn padding_preimage_restores_zero() {
        // gamma=3, s=3, mu=1, beta=0.5: p = 1 - 0.5*3/3 = 0.5, norm(p)=0
        let mut g = Graph::new("pad", 0);
        let input = g.add_input("input", DType::Real, vec![1, 4, 4]);
        let params = bn(vec![3.0], vec![0.5], vec![1.0], vec![9.0]);
        let check = params.clone();
        let b1 = g.add_node("bn_in", OpKind::BatchNorm(params), vec![input]).unwrap();
        let conv = g
            .add_node(
                "conv",
                OpKind::FixedConv2d {
                    attrs: Conv2dAttrs { kernel: 3, stride: 1, padding: 1 },
                    weight: Tensor::F32 { data: vec![0.5; 9], shape: vec![1, 1, 3, 3] },
                    bias: Tensor::F32 { data: vec![0.25], shape: vec![1] },
                    padding_value: None,
                },
                vec![b1],
            )
            .unwrap();
        g.set_output("out", conv);
        let stats = fuse_bn_conv(&mut g).unwrap();
        assert_eq!(stats.rewritten, 1);
        let (_, conv) = g.iter_nodes().next().unwrap();
        let OpKind::FixedConv2d { padding_value, .. } = &conv.op else {
            panic!()
        };
        let p = padding_value.as_ref().unwrap().as_f64().unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!(check.apply(0, p[0]).abs() < 1e-6, "norm(p) must be 0");
    }

    #[test]
    fn zero_gamma_with_padding_aborts_site() {
        let mut g = Graph::new("pad0", 0);
        let input = g.add_input("input", DType::Real, vec![1, 4, 4]);
        let b1 = g
            .add_node(
                "bn_in",
                OpKind::BatchNorm(bn(vec![0.0], vec![0.5], vec![1.0], vec![9.0])),
                vec![input],
            )
            .unwrap();
        let conv = g
            .add_node(
                "conv",
                OpKind::FixedConv2d {
                    attrs: Conv2dAttrs { kernel: 3, stride: 1, padding: 1 },
                    weight: Tensor::F32 { data: vec![0.5; 9], shape: vec![1, 1, 3, 3] },
                    bias: Tensor::F32 { data: vec![0.0], shape: vec![1] },
                    padding_value: None,
                },
                vec![b1],
            )
            .unwrap();
        g.set_output("out", conv);
        let stats = fuse_bn_conv(&mut g).unwrap();
        assert_eq!(stats.rewritten, 0);
        assert_eq!(stats.skipped, 1);
        assert_eq!(g.node_count(), 2, "nothing removed");
    }

    #[test]
    fn random_chain_fold_is_equivalent() {
        let mut rng = crate::init::SplitMix64::new(7);
        for trial in 0..20 {
            let c = 8;
            let mut g = Graph::new("rand", 0);
            let input = g.add_input("input", DType::Real, vec![c, 5, 5]);
            let draw = |rng: &mut crate::init::SplitMix64, lo: f64, hi: f64, n: usize| -> Vec<f32> {
                (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()
            };
            let bn_in = BnParams {
                gamma: draw(&mut rng, 0.2, 2.0, c),
                beta: draw(&mut rng, -1.0, 1.0, c),
                mu: draw(&mut rng, -1.0, 1.0, c),
                sigma2: draw(&mut rng, 0.1, 4.0, c),
                eps: DEFAULT_BN_EPS,
                affine_free: false,
            };
            let bn_out = BnParams {
                gamma: draw(&mut rng, 0.2, 2.0, c),
                beta: draw(&mut rng, -1.0, 1.0, c),
                mu: draw(&mut rng, -1.0, 1.0, c),
                sigma2: draw(&mut rng, 0.1, 4.0, c),
                eps: DEFAULT_BN_EPS,
                affine_free: false,
            };
            let b1 = g.add_node("bn_in", OpKind::BatchNorm(bn_in), vec![input]).unwrap();
            let conv = g
                .add_node(
                    "conv",
                    OpKind::FixedConv2d {
                        attrs: Conv2dAttrs { kernel: 1, stride: 1, padding: 0 },
                        weight: Tensor::F32 {
                            data: draw(&mut rng, -0.5, 0.5, c * c),
                            shape: vec![c, c, 1, 1],
                        },
                        bias: Tensor::F32 { data: draw(&mut rng, -0.5, 0.5, c), shape: vec![c] },
                        padding_value: None,
                    },
                    vec![b1],
                )
                .unwrap();
            let b2 = g.add_node("bn_out", OpKind::BatchNorm(bn_out), vec![conv]).unwrap();
            g.set_output("out", b2);

            let xs: Vec<f64> = (0..c * 25).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let before = reference_forward(&g, &xs).unwrap();
            let mut fused = g.clone();
            let stats = fuse_bn_conv_bn(&mut fused).unwrap();
            assert_eq!(stats.rewritten, 1);
            assert_eq!(fused.node_count(), 1);
            let after = reference_forward(&fused, &xs).unwrap();
            let rep = crate::oracle::compare(&before.output, &after.output).unwrap();
            assert!(rep.max_abs_diff <= 1e-5, "trial {trial}: {}", rep.max_abs_diff);
        }
    }
}
