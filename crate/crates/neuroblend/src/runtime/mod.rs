//! Compiled-plan execution: a statically scheduled op list over typed
//! buffers. Plans are immutable and shareable; execution is a pure
//! function of (plan, input) for any worker count.

pub mod kernels;

use crate::error::{Error, Result};
use crate::fixed::{FixedTensor, QFormat};
use crate::ir::{BnParams, Conv2dAttrs, DType, Graph, OpKind, ThresholdParams};
use crate::packing::PackedBitTensor;
use crate::schedule::{topo_schedule, Liveness};
use crate::tensor::Tensor;

pub use kernels::ExecStats;

use kernels::{FixedConvKernel, FixedLinearKernel, RawPlane, ThresholdKernel};

type BufId = usize;

#[derive(Debug, Clone)]
pub struct BufferSpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
enum StepOp {
    SignToBits,
    Threshold(ThresholdKernel),
    BinaryConv2d {
        attrs: Conv2dAttrs,
        weight: PackedBitTensor,
        pad_bit: u8,
    },
    BinaryLinear {
        weight: PackedBitTensor,
    },
    FixedConv2d(FixedConvKernel),
    FixedLinear(FixedLinearKernel),
    PatchEmbed {
        kern: FixedConvKernel,
        grid: usize,
    },
    BatchNorm(BnParams),
    /// Joint norm + activation with a single rounding.
    BnPrelu {
        bn: BnParams,
        alpha: Vec<f32>,
    },
    Prelu {
        alpha: Vec<f32>,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    MaxPoolOr {
        window: usize,
        stride: usize,
    },
    Add,
    GlobalAvgPool,
    Transpose,
}

#[derive(Debug, Clone)]
struct Step {
    #[allow(dead_code)]
    name: String,
    op: StepOp,
    inputs: Vec<BufId>,
    output: BufId,
}

/// Statically scheduled, parameter-resolved execution plan.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    steps: Vec<Step>,
    buffers: Vec<BufferSpec>,
    /// Value liveness over the graph schedule.
    liveness: Vec<Liveness>,
    /// Buffers to release after each step (step-accurate, accounts for
    /// steps merged during plan construction).
    frees: Vec<Vec<BufId>>,
    input: BufId,
    output: BufId,
    pub word_size: u8,
    pub q_format: QFormat,
}

#[derive(Debug, Clone)]
enum BufferData {
    Fixed(Vec<i16>),
    Int(Vec<i32>),
    Bits(PackedBitTensor),
}

/// Result of one execution: dequantized scores, the raw fixed-point
/// output, and saturation counters.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scores: Vec<f32>,
    pub raw: FixedTensor,
    pub stats: ExecStats,
}

impl ExecutionPlan {
    /// Resolve a compiled graph into an executable plan.
    pub fn from_graph(graph: &Graph) -> Result<Self> {
        if !graph.compiled {
            return Err(Error::NotCompiled);
        }
        let schedule = topo_schedule(graph)?;
        let x_frac = graph.frac_bits;

        // fold BatchNorm -> Prelu chains into one joint step
        use std::collections::BTreeMap;
        let mut bn_prelu: BTreeMap<usize, usize> = BTreeMap::new();
        let mut fused_prelu: std::collections::BTreeSet<usize> = Default::default();
        for (nid, node) in graph.iter_nodes() {
            if !matches!(node.op, OpKind::BatchNorm(_)) || graph.is_graph_output(node.output) {
                continue;
            }
            let consumers = graph.consumers(node.output);
            if let [p] = consumers.as_slice() {
                if matches!(graph.node(*p).op, OpKind::Prelu { .. }) {
                    bn_prelu.insert(nid, *p);
                    fused_prelu.insert(*p);
                }
            }
        }

        let buffers: Vec<BufferSpec> = (0..graph.value_count())
            .map(|v| {
                let info = graph.value(v);
                BufferSpec {
                    dtype: info.dtype,
                    shape: info.shape.clone(),
                }
            })
            .collect();

        let mut steps = Vec::with_capacity(schedule.order.len());
        for &nid in &schedule.order {
            if fused_prelu.contains(&nid) {
                continue;
            }
            let node = graph.node(nid);
            let in_dtype = graph.value(node.inputs[0]).dtype;
            if let Some(&pid) = bn_prelu.get(&nid) {
                let OpKind::BatchNorm(bn) = &node.op else { unreachable!() };
                let prelu = graph.node(pid);
                let OpKind::Prelu { alpha } = &prelu.op else { unreachable!() };
                steps.push(Step {
                    name: format!("{}+{}", node.name, prelu.name),
                    op: StepOp::BnPrelu {
                        bn: bn.clone(),
                        alpha: alpha.as_f32().ok_or(Error::NotCompiled)?.to_vec(),
                    },
                    inputs: node.inputs.clone(),
                    output: prelu.output,
                });
                continue;
            }
            let op = match &node.op {
                OpKind::SignFn => StepOp::SignToBits,
                OpKind::Threshold(params) => {
                    StepOp::Threshold(threshold_kernel(params, in_dtype, x_frac))
                }
                OpKind::BinaryConv2d { attrs, weight, pad_bit } => {
                    let weight = if weight.lane_width() == graph.word_size {
                        weight.clone()
                    } else {
                        weight.repack(graph.word_size)?
                    };
                    StepOp::BinaryConv2d {
                        attrs: *attrs,
                        weight,
                        pad_bit: *pad_bit,
                    }
                }
                OpKind::BinaryLinear { weight } => {
                    let weight = if weight.lane_width() == graph.word_size {
                        weight.clone()
                    } else {
                        weight.repack(graph.word_size)?
                    };
                    StepOp::BinaryLinear { weight }
                }
                OpKind::FixedConv2d { attrs, weight, bias, padding_value } => {
                    StepOp::FixedConv2d(fixed_conv_kernel(
                        &node.name,
                        *attrs,
                        weight,
                        bias,
                        padding_value.as_ref(),
                        x_frac,
                    )?)
                }
                OpKind::FixedLinear { weight, bias } => {
                    let (w, wf) = fixed_param(&node.name, weight)?;
                    let (b, bf) = fixed_param(&node.name, bias)?;
                    StepOp::FixedLinear(FixedLinearKernel {
                        out_features: weight.shape()[0],
                        in_features: weight.shape()[1],
                        weight: w,
                        w_frac: wf,
                        bias: b,
                        b_frac: bf,
                    })
                }
                OpKind::PatchEmbed { patch, weight, bias } => {
                    let kern = fixed_conv_kernel(
                        &node.name,
                        Conv2dAttrs { kernel: *patch, stride: *patch, padding: 0 },
                        weight,
                        bias,
                        None,
                        x_frac,
                    )?;
                    let grid = graph.value(node.inputs[0]).shape[1] / patch;
                    StepOp::PatchEmbed { kern, grid }
                }
                OpKind::BatchNorm(bn) => StepOp::BatchNorm(bn.clone()),
                OpKind::Prelu { alpha } => StepOp::Prelu {
                    alpha: alpha
                        .as_f32()
                        .ok_or(Error::NotCompiled)?
                        .to_vec(),
                },
                OpKind::AvgPool { window, stride } => StepOp::AvgPool {
                    window: *window,
                    stride: *stride,
                },
                OpKind::MaxPoolOr { window, stride } => StepOp::MaxPoolOr {
                    window: *window,
                    stride: *stride,
                },
                OpKind::Add => StepOp::Add,
                OpKind::GlobalAvgPool => StepOp::GlobalAvgPool,
                OpKind::Transpose => StepOp::Transpose,
            };
            steps.push(Step {
                name: node.name.clone(),
                op,
                inputs: node.inputs.clone(),
                output: node.output,
            });
        }

        // last step reading each buffer, so memory is released as soon
        // as a value dies
        let output = graph.outputs()[0].1;
        let mut last_read = vec![usize::MAX; buffers.len()];
        for (pos, step) in steps.iter().enumerate() {
            for &input in &step.inputs {
                last_read[input] = pos;
            }
        }
        let mut frees = vec![Vec::new(); steps.len()];
        for (buf, &pos) in last_read.iter().enumerate() {
            if pos != usize::MAX && buf != output {
                frees[pos].push(buf);
            }
        }

        Ok(Self {
            steps,
            buffers,
            liveness: schedule.liveness,
            frees,
            input: graph.inputs()[0].1,
            output,
            word_size: graph.word_size,
            q_format: QFormat::new(x_frac),
        })
    }

    /// Liveness ranges of every value over the graph schedule.
    pub fn liveness(&self) -> &[Liveness] {
        &self.liveness
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.buffers[self.input].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.buffers[self.output].shape
    }

    /// Execute with a single worker.
    pub fn execute(&self, input: &[f32]) -> Result<RunOutput> {
        self.execute_with_workers(input, 1)
    }

    /// Execute with a fixed worker count; the output is bit-identical for
    /// every worker count.
    pub fn execute_with_workers(&self, input: &[f32], workers: usize) -> Result<RunOutput> {
        let expect: usize = self.input_shape().iter().product();
        if input.len() != expect {
            return Err(Error::ShapeMismatch {
                context: format!("input has {} elements, plan expects {expect}", input.len()),
            });
        }
        let workers = workers.max(1);
        if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::ShapeMismatch {
                    context: format!("thread pool: {e}"),
                })?;
            pool.install(|| self.run(input, workers))
        } else {
            self.run(input, 1)
        }
    }

    /// Run single-threaded, capturing every step's output dequantized to
    /// f64, keyed by the produced value id. Diagnostic path.
    pub fn execute_dump(&self, input: &[f32]) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut stats = ExecStats::default();
        let mut env: Vec<Option<BufferData>> = vec![None; self.buffers.len()];
        let q = self.q_format;
        let mut raw_in = Vec::with_capacity(input.len());
        for &x in input {
            let (raw, _) = q.quantize_value(x as f64);
            raw_in.push(raw);
        }
        env[self.input] = Some(BufferData::Fixed(raw_in));
        let mut dumps = Vec::new();
        for step in &self.steps {
            let out = self.run_step(step, &env, 1, &mut stats)?;
            let as_f64 = match &out {
                BufferData::Fixed(d) => d.iter().map(|&r| q.dequantize_value(r)).collect(),
                BufferData::Int(d) => d.iter().map(|&v| v as f64).collect(),
                BufferData::Bits(b) => crate::packing::unpack_axis(b)
                    .into_iter()
                    .map(|x| x as f64)
                    .collect(),
            };
            dumps.push((step.output, as_f64));
            env[step.output] = Some(out);
        }
        Ok(dumps)
    }

    fn run(&self, input: &[f32], workers: usize) -> Result<RunOutput> {
        let mut stats = ExecStats::default();
        let mut env: Vec<Option<BufferData>> = vec![None; self.buffers.len()];

        // entry quantization (inputs on the grid quantize exactly)
        let q = self.q_format;
        let mut raw_in = Vec::with_capacity(input.len());
        for &x in input {
            let (raw, sat) = q.quantize_value(x as f64);
            if sat {
                stats.saturated += 1;
            }
            raw_in.push(raw);
        }
        env[self.input] = Some(BufferData::Fixed(raw_in));

        for (pos, step) in self.steps.iter().enumerate() {
            let out = self.run_step(step, &env, workers, &mut stats)?;
            env[step.output] = Some(out);
            for &dead in &self.frees[pos] {
                if dead != step.output {
                    env[dead] = None;
                }
            }
        }

        let BufferData::Fixed(raw) = env[self.output].take().ok_or(Error::ShapeMismatch {
            context: "output buffer never produced".into(),
        })?
        else {
            return Err(Error::DtypeMismatch {
                context: "graph output must be a fixed-point value".into(),
            });
        };
        let out_t = FixedTensor {
            data: raw,
            shape: self.output_shape().to_vec(),
            format: q,
        };
        let scores = out_t
            .data
            .iter()
            .map(|&r| q.dequantize_value(r) as f32)
            .collect();
        Ok(RunOutput {
            scores,
            raw: out_t,
            stats,
        })
    }

    fn run_step(
        &self,
        step: &Step,
        env: &[Option<BufferData>],
        workers: usize,
        stats: &mut ExecStats,
    ) -> Result<BufferData> {
        let buf = |id: BufId| -> Result<&BufferData> {
            env[id].as_ref().ok_or(Error::ShapeMismatch {
                context: format!("buffer {id} unavailable"),
            })
        };
        let fixed = |id: BufId| -> Result<&Vec<i16>> {
            match buf(id)? {
                BufferData::Fixed(d) => Ok(d),
                _ => Err(Error::DtypeMismatch {
                    context: format!("buffer {id} is not fixed-point"),
                }),
            }
        };
        let bits = |id: BufId| -> Result<&PackedBitTensor> {
            match buf(id)? {
                BufferData::Bits(b) => Ok(b),
                _ => Err(Error::DtypeMismatch {
                    context: format!("buffer {id} is not binary"),
                }),
            }
        };
        let raw_plane = |id: BufId| -> Result<RawPlane<'_>> {
            match buf(id)? {
                BufferData::Fixed(d) => Ok(RawPlane::Fixed(d)),
                BufferData::Int(d) => Ok(RawPlane::Int(d)),
                _ => Err(Error::DtypeMismatch {
                    context: format!("buffer {id} is not numeric"),
                }),
            }
        };

        let in_shape = step
            .inputs
            .first()
            .map(|&v| self.buffers[v].shape.clone())
            .unwrap_or_default();
        let x_frac = self.q_format.frac_bits;

        Ok(match &step.op {
            StepOp::SignToBits => {
                let kern = ThresholdKernel {
                    bounds: vec![0; crate::ir::channel_count(&in_shape)],
                    dirs: vec![crate::ir::ThresholdDir::Ge; crate::ir::channel_count(&in_shape)],
                };
                BufferData::Bits(kernels::threshold_to_bits(
                    raw_plane(step.inputs[0])?,
                    &in_shape,
                    &kern,
                    self.word_size,
                ))
            }
            StepOp::Threshold(kern) => BufferData::Bits(kernels::threshold_to_bits(
                raw_plane(step.inputs[0])?,
                &in_shape,
                kern,
                self.word_size,
            )),
            StepOp::BinaryConv2d { attrs, weight, pad_bit } => BufferData::Int(
                kernels::binary_conv2d(bits(step.inputs[0])?, weight, attrs, *pad_bit, workers),
            ),
            StepOp::BinaryLinear { weight } => BufferData::Int(kernels::binary_linear(
                bits(step.inputs[0])?,
                weight,
                workers,
            )),
            StepOp::FixedConv2d(kern) => {
                let (out, s) =
                    kernels::fp_conv2d(fixed(step.inputs[0])?, &in_shape, kern, x_frac, workers);
                stats.merge(s);
                BufferData::Fixed(out)
            }
            StepOp::FixedLinear(kern) => {
                let rows = if in_shape.len() == 2 { in_shape[0] } else { 1 };
                let (out, s) = kernels::fp_linear(fixed(step.inputs[0])?, rows, kern, x_frac);
                stats.merge(s);
                BufferData::Fixed(out)
            }
            StepOp::PatchEmbed { kern, grid, .. } => {
                let (conv, s) =
                    kernels::fp_conv2d(fixed(step.inputs[0])?, &in_shape, kern, x_frac, workers);
                stats.merge(s);
                // [hidden, gh, gw] -> [gh*gw, hidden]
                let hidden = kern.c_out;
                let g = *grid;
                let mut out = vec![0i16; hidden * g * g];
                for c in 0..hidden {
                    for sy in 0..g {
                        for sx in 0..g {
                            out[(sy * g + sx) * hidden + c] = conv[(c * g + sy) * g + sx];
                        }
                    }
                }
                BufferData::Fixed(out)
            }
            StepOp::BatchNorm(bn) => {
                let in_frac = match buf(step.inputs[0])? {
                    BufferData::Int(_) => 0,
                    _ => x_frac,
                };
                let (out, s) = kernels::batchnorm_fixed(
                    raw_plane(step.inputs[0])?,
                    &in_shape,
                    bn,
                    in_frac,
                    x_frac,
                );
                stats.merge(s);
                BufferData::Fixed(out)
            }
            StepOp::BnPrelu { bn, alpha } => {
                let in_frac = match buf(step.inputs[0])? {
                    BufferData::Int(_) => 0,
                    _ => x_frac,
                };
                let (out, s) = kernels::batchnorm_prelu_fixed(
                    raw_plane(step.inputs[0])?,
                    &in_shape,
                    bn,
                    alpha,
                    in_frac,
                    x_frac,
                );
                stats.merge(s);
                BufferData::Fixed(out)
            }
            StepOp::Prelu { alpha } => {
                let (out, s) = kernels::prelu_fixed(fixed(step.inputs[0])?, &in_shape, alpha);
                stats.merge(s);
                BufferData::Fixed(out)
            }
            StepOp::AvgPool { window, stride } => {
                let (out, _) = kernels::avgpool_fixed(fixed(step.inputs[0])?, &in_shape, *window, *stride);
                BufferData::Fixed(out)
            }
            StepOp::MaxPoolOr { window, stride } => {
                BufferData::Bits(kernels::maxpool_or(bits(step.inputs[0])?, *window, *stride))
            }
            StepOp::Add => {
                let (out, s) = kernels::add_fixed(fixed(step.inputs[0])?, fixed(step.inputs[1])?);
                stats.merge(s);
                BufferData::Fixed(out)
            }
            StepOp::GlobalAvgPool => {
                BufferData::Fixed(kernels::global_avgpool_fixed(fixed(step.inputs[0])?, &in_shape))
            }
            StepOp::Transpose => {
                BufferData::Fixed(kernels::transpose_fixed(fixed(step.inputs[0])?, &in_shape))
            }
        })
    }
}

fn threshold_kernel(params: &ThresholdParams, in_dtype: DType, x_frac: u8) -> ThresholdKernel {
    let frac = match in_dtype {
        DType::Int => 0,
        _ => x_frac,
    };
    ThresholdKernel::from_params(params, frac)
}

fn fixed_param(name: &str, t: &Tensor) -> Result<(Vec<i16>, u8)> {
    match t {
        Tensor::I16(fx) => Ok((fx.data.clone(), fx.format.frac_bits)),
        _ => Err(Error::DtypeMismatch {
            context: format!("{name}: parameter not quantized; compile the graph first"),
        }),
    }
}

fn fixed_conv_kernel(
    name: &str,
    attrs: Conv2dAttrs,
    weight: &Tensor,
    bias: &Tensor,
    padding_value: Option<&Tensor>,
    x_frac: u8,
) -> Result<FixedConvKernel> {
    let (w, wf) = fixed_param(name, weight)?;
    let (b, bf) = fixed_param(name, bias)?;
    let padding = match padding_value {
        Some(p) => {
            let vals = p.to_f64();
            let q = QFormat::new(x_frac);
            Some(vals.iter().map(|&v| q.quantize_value(v).0).collect())
        }
        None => None,
    };
    Ok(FixedConvKernel {
        attrs,
        c_out: weight.shape()[0],
        c_in: weight.shape()[1],
        weight: w,
        w_frac: wf,
        bias: b,
        b_frac: bf,
        padding,
    })
}
