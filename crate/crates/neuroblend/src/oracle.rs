//! Float64 reference interpreter: the ground truth every kernel and pass
//! is checked against. Single-threaded, fixed row-major summation order,
//! true {-1,+1} arithmetic for binary ops.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{channel_axis, Graph, NodeId, OpKind, ValueId};
use crate::schedule::topo_schedule;

/// sign with sign(0) = +1, the boundary convention used everywhere.
#[inline]
pub fn sign_pm(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Result of a reference run: the graph output plus requested per-value
/// activation dumps.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub output: Vec<f64>,
    pub shape: Vec<usize>,
    pub dumps: BTreeMap<ValueId, Vec<f64>>,
}

pub fn reference_forward(graph: &Graph, input: &[f64]) -> Result<EvalOutput> {
    reference_forward_with_dumps(graph, input, &[])
}

/// Evaluate the graph in f64, additionally capturing the values named in
/// `dump_values`.
pub fn reference_forward_with_dumps(
    graph: &Graph,
    input: &[f64],
    dump_values: &[ValueId],
) -> Result<EvalOutput> {
    if graph.inputs().len() != 1 {
        return Err(Error::ShapeMismatch {
            context: format!("expected exactly 1 graph input, got {}", graph.inputs().len()),
        });
    }
    let input_vid = graph.inputs()[0].1;
    let expect: usize = graph.value(input_vid).shape.iter().product();
    if input.len() != expect {
        return Err(Error::ShapeMismatch {
            context: format!("input has {} elements, graph expects {expect}", input.len()),
        });
    }

    let schedule = topo_schedule(graph)?;
    let mut env: Vec<Option<Vec<f64>>> = vec![None; graph.value_count()];
    env[input_vid] = Some(input.to_vec());

    for &nid in &schedule.order {
        let node = graph.node(nid);
        let args: Vec<&Vec<f64>> = node
            .inputs
            .iter()
            .map(|&v| {
                env[v].as_ref().ok_or(Error::ShapeMismatch {
                    context: format!("value {v} unavailable at node {nid}"),
                })
            })
            .collect::<Result<_>>()?;
        let out = eval_node(graph, nid, &args)?;
        env[node.output] = Some(out);
    }

    let out_vid = graph
        .outputs()
        .first()
        .ok_or(Error::ShapeMismatch {
            context: "graph has no outputs".into(),
        })?
        .1;
    let output = env[out_vid]
        .clone()
        .ok_or(Error::ShapeMismatch {
            context: "output value never produced".into(),
        })?;

    let mut dumps = BTreeMap::new();
    for &v in dump_values {
        if let Some(data) = &env[v] {
            dumps.insert(v, data.clone());
        }
    }
    Ok(EvalOutput {
        output,
        shape: graph.value(out_vid).shape.clone(),
        dumps,
    })
}

fn eval_node(graph: &Graph, nid: NodeId, args: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let node = graph.node(nid);
    let in_shape = |slot: usize| graph.value(node.inputs[slot]).shape.clone();
    let out_shape = graph.value(node.output).shape.clone();

    Ok(match &node.op {
        OpKind::SignFn => args[0].iter().map(|&x| sign_pm(x)).collect(),
        OpKind::Threshold(t) => {
            let shape = in_shape(0);
            per_channel_map(args[0], &shape, |c, y| t.apply(c, y))
        }
        OpKind::BatchNorm(bn) => {
            let shape = in_shape(0);
            per_channel_map(args[0], &shape, |c, y| bn.apply(c, y))
        }
        OpKind::Prelu { alpha } => {
            let shape = in_shape(0);
            let a = alpha.to_f64();
            per_channel_map(args[0], &shape, |c, y| if y >= 0.0 { y } else { a[c] * y })
        }
        OpKind::BinaryConv2d { attrs, weight, pad_bit } => {
            let w: Vec<f64> = crate::packing::unpack_axis(weight)
                .into_iter()
                .map(|x| x as f64)
                .collect();
            let pad = if *pad_bit == 1 { 1.0 } else { -1.0 };
            conv2d_f64(
                args[0],
                &in_shape(0),
                &w,
                weight.shape(),
                None,
                attrs.stride,
                attrs.padding,
                PadKind::Constant(pad),
                &out_shape,
            )
        }
        OpKind::FixedConv2d { attrs, weight, bias, padding_value } => {
            let w = weight.to_f64();
            let b = bias.to_f64();
            let pad = match padding_value {
                Some(p) => PadKind::PerChannel(p.to_f64()),
                None => PadKind::Constant(0.0),
            };
            conv2d_f64(
                args[0],
                &in_shape(0),
                &w,
                weight.shape(),
                Some(&b),
                attrs.stride,
                attrs.padding,
                pad,
                &out_shape,
            )
        }
        OpKind::AvgPool { window, stride } => {
            pool2d(args[0], &in_shape(0), *window, *stride, &out_shape, |acc, n| acc / n as f64)
        }
        OpKind::MaxPoolOr { window, stride } => pool2d_max(args[0], &in_shape(0), *window, *stride, &out_shape),
        OpKind::Add => args[0].iter().zip(args[1].iter()).map(|(a, b)| a + b).collect(),
        OpKind::BinaryLinear { weight } => {
            let w: Vec<f64> = crate::packing::unpack_axis(weight)
                .into_iter()
                .map(|x| x as f64)
                .collect();
            linear_f64(args[0], &in_shape(0), &w, weight.shape(), None)
        }
        OpKind::FixedLinear { weight, bias } => {
            let w = weight.to_f64();
            let b = bias.to_f64();
            linear_f64(args[0], &in_shape(0), &w, weight.shape(), Some(&b))
        }
        OpKind::PatchEmbed { patch, weight, bias } => {
            let shape = in_shape(0);
            let w = weight.to_f64();
            let b = bias.to_f64();
            let hidden = weight.shape()[0];
            let c_in = weight.shape()[1];
            let (h, wd) = (shape[1], shape[2]);
            let (gh, gw) = (h / patch, wd / patch);
            let mut out = vec![0.0; gh * gw * hidden];
            for sy in 0..gh {
                for sx in 0..gw {
                    for oc in 0..hidden {
                        let mut acc = b[oc];
                        for ic in 0..c_in {
                            for ky in 0..*patch {
                                for kx in 0..*patch {
                                    let iy = sy * patch + ky;
                                    let ix = sx * patch + kx;
                                    acc += w[((oc * c_in + ic) * patch + ky) * patch + kx]
                                        * args[0][(ic * h + iy) * wd + ix];
                                }
                            }
                        }
                        out[(sy * gw + sx) * hidden + oc] = acc;
                    }
                }
            }
            out
        }
        OpKind::GlobalAvgPool => {
            let shape = in_shape(0);
            match shape.len() {
                3 => {
                    let (c, hw) = (shape[0], shape[1] * shape[2]);
                    (0..c)
                        .map(|ch| args[0][ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                        .collect()
                }
                2 => {
                    let (rows, cols) = (shape[0], shape[1]);
                    (0..cols)
                        .map(|c| (0..rows).map(|r| args[0][r * cols + c]).sum::<f64>() / rows as f64)
                        .collect()
                }
                _ => args[0].clone(),
            }
        }
        OpKind::Transpose => {
            let shape = in_shape(0);
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = args[0][r * cols + c];
                }
            }
            out
        }
    })
}

/// Apply `f(channel, x)` elementwise under the channel-axis convention.
fn per_channel_map(data: &[f64], shape: &[usize], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    match shape.len() {
        3 => {
            let hw = shape[1] * shape[2];
            data.iter()
                .enumerate()
                .map(|(i, &x)| f(i / hw, x))
                .collect()
        }
        2 => {
            let cols = shape[channel_axis(2)];
            data.iter()
                .enumerate()
                .map(|(i, &x)| f(i % cols, x))
                .collect()
        }
        _ => data.iter().enumerate().map(|(i, &x)| f(i, x)).collect(),
    }
}

enum PadKind {
    Constant(f64),
    PerChannel(Vec<f64>),
}

impl PadKind {
    #[inline]
    fn value(&self, channel: usize) -> f64 {
        match self {
            PadKind::Constant(v) => *v,
            PadKind::PerChannel(p) => p[channel],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_f64(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    pad: PadKind,
    out_shape: &[usize],
) -> Vec<f64> {
    let (c_in, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, k) = (w_shape[0], w_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = vec![0.0; c_out * oh * ow];
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0);
                for ic in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            let xv = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                            {
                                x[(ic * h + iy as usize) * wd + ix as usize]
                            } else {
                                pad.value(ic)
                            };
                            acc += w[((oc * c_in + ic) * k + ky) * k + kx] * xv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn pool2d(
    x: &[f64],
    x_shape: &[usize],
    window: usize,
    stride: usize,
    out_shape: &[usize],
    finish: impl Fn(f64, usize) -> f64,
) -> Vec<f64> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                let mut n = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        if iy < h && ix < w {
                            acc += x[(ch * h + iy) * w + ix];
                            n += 1;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = finish(acc, n);
            }
        }
    }
    out
}

fn pool2d_max(x: &[f64], x_shape: &[usize], window: usize, stride: usize, out_shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        if iy < h && ix < w {
                            m = m.max(x[(ch * h + iy) * w + ix]);
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = m;
            }
        }
    }
    out
}

fn linear_f64(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (out_f, in_f) = (w_shape[0], w_shape[1]);
    let rows = if x_shape.len() == 2 { x_shape[0] } else { 1 };
    let mut out = vec![0.0; rows * out_f];
    for r in 0..rows {
        for o in 0..out_f {
            let mut acc = bias.map(|b| b[o]).unwrap_or(0.0);
            for i in 0..in_f {
                acc += w[o * in_f + i] * x[r * in_f + i];
            }
            out[r * out_f + o] = acc;
        }
    }
    out
}

/// Difference report between two same-shaped tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub argmax_agreement: bool,
    /// Name of the first node whose activations diverged past tolerance
    /// when comparing traces; None for plain tensor comparisons.
    pub first_divergence: Option<String>,
}

pub fn compare(a: &[f64], b: &[f64]) -> Result<ComparisonReport> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: format!("compare: {} vs {} elements", a.len(), b.len()),
        });
    }
    let mut max_abs = 0.0f64;
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = (x - y).abs();
        max_abs = max_abs.max(d);
        sum += d;
    }
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
    };
    Ok(ComparisonReport {
        max_abs_diff: max_abs,
        mean_abs_diff: if a.is_empty() { 0.0 } else { sum / a.len() as f64 },
        argmax_agreement: argmax(a) == argmax(b),
        first_divergence: None,
    })
}

/// Compare per-node activation traces of two structurally equal graphs,
/// naming the first node whose outputs drift past `tol`.
pub fn compare_traces(
    graph: &Graph,
    traces_a: &BTreeMap<ValueId, Vec<f64>>,
    traces_b: &BTreeMap<ValueId, Vec<f64>>,
    tol: f64,
) -> Option<String> {
    for (nid, node) in graph.iter_nodes() {
        let (Some(a), Some(b)) = (traces_a.get(&node.output), traces_b.get(&node.output)) else {
            continue;
        };
        if let Ok(rep) = compare(a, b) {
            if rep.max_abs_diff > tol {
                return Some(format!("{} (node {})", node.name, nid));
            }
        }
    }
    None
}

/// Values feeding each binary conv/linear, in topological order. The
/// fused and unfused versions of a graph pair up on these planes.
pub fn binary_op_input_values(graph: &Graph) -> Vec<ValueId> {
    let order = graph.topo_order().unwrap_or_default();
    order
        .into_iter()
        .filter_map(|nid| {
            let node = graph.node(nid);
            match node.op {
                OpKind::BinaryConv2d { .. } | OpKind::BinaryLinear { .. } => {
                    Some(node.inputs[0])
                }
                _ => None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BnParams, DType, Graph, OpKind};

    #[test]
    fn sign_maps_zero_to_plus_one() {
        let mut g = Graph::new("sign", 0);
        let input = g.add_input("input", DType::Real, vec![3]);
        let s = g.add_node("sg", OpKind::SignFn, vec![input]).unwrap();
        g.set_output("out", s);
        let out = reference_forward(&g, &[0.3, -0.2, 0.0]).unwrap();
        assert_eq!(out.output, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn identity_batch_norm_is_identity() {
        let mut g = Graph::new("bn", 0);
        let input = g.add_input("input", DType::Real, vec![4]);
        let bn = g
            .add_node("bn", OpKind::BatchNorm(BnParams::identity(4)), vec![input])
            .unwrap();
        g.set_output("out", bn);
        let xs = [1.5, -0.25, 0.0, 3.0];
        let out = reference_forward(&g, &xs).unwrap();
        for (x, y) in xs.iter().zip(out.output.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_normalizes() {
        // gamma=1, beta=0, mu=0.5, sigma2+eps=1: x=1.5 -> 1.0
        let mut g = Graph::new("bn", 0);
        let input = g.add_input("input", DType::Real, vec![1]);
        let bn = BnParams {
            gamma: vec![1.0],
            beta: vec![0.0],
            mu: vec![0.5],
            sigma2: vec![1.0 - crate::ir::DEFAULT_BN_EPS],
            eps: crate::ir::DEFAULT_BN_EPS,
            affine_free: false,
        };
        let b = g.add_node("bn", OpKind::BatchNorm(bn), vec![input]).unwrap();
        g.set_output("out", b);
        let out = reference_forward(&g, &[1.5]).unwrap();
        assert!((out.output[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prelu_scales_negatives() {
        let mut g = Graph::new("prelu", 0);
        let input = g.add_input("input", DType::Real, vec![1]);
        let p = g
            .add_node(
                "prelu",
                OpKind::Prelu {
                    alpha: crate::tensor::Tensor::F32 {
                        data: vec![0.25],
                        shape: vec![1],
                    },
                },
                vec![input],
            )
            .unwrap();
        g.set_output("out", p);
        let out = reference_forward(&g, &[-2.0]).unwrap();
        assert_eq!(out.output, vec![-0.5]);
    }

    #[test]
    fn compare_reports_diffs() {
        let r = compare(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        let r = compare(&[1.0, 2.0], &[1.0, 2.000001]).unwrap();
        assert!((r.max_abs_diff - 1e-6).abs() < 1e-12);
        assert!(r.argmax_agreement);
        assert!(compare(&[1.0], &[1.0, 2.0]).is_err());
    }
}
