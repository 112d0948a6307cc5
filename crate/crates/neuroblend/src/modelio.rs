//! On-disk model container (".nblm") and tensor files (".nbt").
//!
//! Container layout: magic "NBLM", u32 version, u64 manifest length, a
//! JSON manifest (nodes, attrs, tensor descriptors), then the tensor
//! blobs, contiguous and little-endian, in descriptor order. Manifest
//! field order is fixed, so equal graphs serialize to equal bytes.
//!
//! Dtype tags: 0 = float32, 1 = int16 fixed-point, 2 = packed-u64 binary,
//! 3 = uint8, 4 = float64 (thresholds and border padding values, which
//! must round-trip at full precision).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::{FixedTensor, QFormat};
use crate::ir::{
    BnParams, Conv2dAttrs, DType, Graph, Node, OpKind, Producer, ThresholdDir, ThresholdParams,
    ValueInfo,
};
use crate::packing::PackedBitTensor;
use crate::tensor::{Tensor, TAG_F32, TAG_F64, TAG_I16, TAG_PACKED_U64, TAG_U8};

pub const MODEL_MAGIC: [u8; 4] = *b"NBLM";
pub const MODEL_VERSION: u32 = 1;
pub const TENSOR_MAGIC: [u8; 4] = *b"NBT1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: String,
    seed: u64,
    word_size: u8,
    frac_bits: u8,
    compiled: bool,
    inputs: Vec<PortM>,
    outputs: Vec<PortM>,
    values: Vec<ValueM>,
    nodes: Vec<NodeM>,
    tensors: Vec<TensorDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PortM {
    name: String,
    value: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ValueM {
    dtype: String,
    shape: Vec<usize>,
    producer: ProducerM,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index")]
enum ProducerM {
    #[serde(rename = "input")]
    Input(usize),
    #[serde(rename = "node")]
    Node(usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeM {
    name: String,
    op: OpM,
    inputs: Vec<usize>,
    output: usize,
}

/// Node attributes; tensor-valued params are indexes into the descriptor
/// table.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum OpM {
    SignFn,
    BinaryConv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        pad_bit: u8,
        weight: usize,
    },
    FixedConv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: usize,
        bias: usize,
        padding_value: Option<usize>,
    },
    BatchNorm {
        eps: f32,
        affine_free: bool,
        gamma: usize,
        beta: usize,
        mu: usize,
        sigma2: usize,
    },
    Prelu {
        alpha: usize,
    },
    Threshold {
        tau: usize,
        direction: usize,
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
    BinaryLinear {
        weight: usize,
    },
    FixedLinear {
        weight: usize,
        bias: usize,
    },
    PatchEmbed {
        patch: usize,
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool,
    Transpose,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    tag: u8,
    shape: Vec<usize>,
    byte_len: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    frac_bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    packed_axis: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lane_width: Option<u8>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::Real => "real",
        DType::Binary => "binary",
        DType::Int => "int",
    }
}

fn dtype_from_name(s: &str) -> Result<DType> {
    match s {
        "real" => Ok(DType::Real),
        "binary" => Ok(DType::Binary),
        "int" => Ok(DType::Int),
        other => Err(Error::ManifestMismatch {
            context: format!("unknown value dtype {other:?}"),
        }),
    }
}

struct BlobWriter {
    descs: Vec<TensorDesc>,
    blobs: Vec<Vec<u8>>,
}

impl BlobWriter {
    fn new() -> Self {
        Self {
            descs: Vec::new(),
            blobs: Vec::new(),
        }
    }

    fn push(&mut self, t: &Tensor) -> usize {
        let (bytes, desc) = encode_tensor(t);
        self.descs.push(desc);
        self.blobs.push(bytes);
        self.descs.len() - 1
    }
}

fn encode_tensor(t: &Tensor) -> (Vec<u8>, TensorDesc) {
    match t {
        Tensor::F32 { data, shape } => {
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let desc = TensorDesc {
                tag: TAG_F32,
                shape: shape.clone(),
                byte_len: bytes.len() as u64,
                frac_bits: None,
                packed_axis: None,
                lane_width: None,
            };
            (bytes, desc)
        }
        Tensor::F64 { data, shape } => {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let desc = TensorDesc {
                tag: TAG_F64,
                shape: shape.clone(),
                byte_len: bytes.len() as u64,
                frac_bits: None,
                packed_axis: None,
                lane_width: None,
            };
            (bytes, desc)
        }
        Tensor::I16(fx) => {
            let mut bytes = Vec::with_capacity(fx.data.len() * 2);
            for v in &fx.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let desc = TensorDesc {
                tag: TAG_I16,
                shape: fx.shape.clone(),
                byte_len: bytes.len() as u64,
                frac_bits: Some(fx.format.frac_bits),
                packed_axis: None,
                lane_width: None,
            };
            (bytes, desc)
        }
        Tensor::Packed(p) => {
            let mut bytes = Vec::with_capacity(p.words().len() * 8);
            for w in p.words() {
                bytes.extend_from_slice(&w.to_le_bytes());
            }
            let desc = TensorDesc {
                tag: TAG_PACKED_U64,
                shape: p.shape().to_vec(),
                byte_len: bytes.len() as u64,
                frac_bits: None,
                packed_axis: Some(p.packed_axis()),
                lane_width: Some(p.lane_width()),
            };
            (bytes, desc)
        }
        Tensor::U8 { data, shape } => {
            let desc = TensorDesc {
                tag: TAG_U8,
                shape: shape.clone(),
                byte_len: data.len() as u64,
                frac_bits: None,
                packed_axis: None,
                lane_width: None,
            };
            (data.clone(), desc)
        }
    }
}

fn expected_byte_len(desc: &TensorDesc) -> Result<u64> {
    let n: usize = desc.shape.iter().product();
    let bytes = match desc.tag {
        TAG_F32 => n as u64 * 4,
        TAG_F64 => n as u64 * 8,
        TAG_I16 => n as u64 * 2,
        TAG_U8 => n as u64,
        TAG_PACKED_U64 => {
            let axis = desc.packed_axis.ok_or_else(|| Error::ManifestMismatch {
                context: "packed tensor missing packed_axis".into(),
            })?;
            let width = desc.lane_width.ok_or_else(|| Error::ManifestMismatch {
                context: "packed tensor missing lane_width".into(),
            })?;
            if width == 0 || width > 64 || axis >= desc.shape.len() {
                return Err(Error::ManifestMismatch {
                    context: format!("bad packing descriptor axis={axis} width={width}"),
                });
            }
            let lanes = desc.shape[axis];
            let groups: usize = desc
                .shape
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != axis)
                .map(|(_, d)| d)
                .product();
            (groups * PackedBitTensor::words_per_group(lanes, width)) as u64 * 8
        }
        other => {
            return Err(Error::ManifestMismatch {
                context: format!("unknown dtype tag {other}"),
            })
        }
    };
    Ok(bytes)
}

fn decode_tensor(desc: &TensorDesc, bytes: &[u8]) -> Result<Tensor> {
    let expect = expected_byte_len(desc)?;
    if bytes.len() as u64 != expect {
        return Err(Error::ManifestMismatch {
            context: format!(
                "tensor blob holds {} bytes, descriptor expects {expect}",
                bytes.len()
            ),
        });
    }
    Ok(match desc.tag {
        TAG_F32 => Tensor::F32 {
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape: desc.shape.clone(),
        },
        TAG_F64 => Tensor::F64 {
            data: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape: desc.shape.clone(),
        },
        TAG_I16 => Tensor::I16(FixedTensor {
            data: bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape: desc.shape.clone(),
            format: QFormat::new(desc.frac_bits.unwrap_or(8)),
        }),
        TAG_PACKED_U64 => {
            let words: Vec<u64> = bytes
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::Packed(PackedBitTensor::from_raw(
                words,
                desc.shape.clone(),
                desc.packed_axis.unwrap(),
                desc.lane_width.unwrap(),
            )?)
        }
        TAG_U8 => Tensor::U8 {
            data: bytes.to_vec(),
            shape: desc.shape.clone(),
        },
        _ => unreachable!("tag checked in expected_byte_len"),
    })
}

fn op_to_manifest(op: &OpKind, w: &mut BlobWriter) -> OpM {
    match op {
        OpKind::SignFn => OpM::SignFn,
        OpKind::BinaryConv2d { attrs, weight, pad_bit } => OpM::BinaryConv2d {
            kernel: attrs.kernel,
            stride: attrs.stride,
            padding: attrs.padding,
            pad_bit: *pad_bit,
            weight: w.push(&Tensor::Packed(weight.clone())),
        },
        OpKind::FixedConv2d { attrs, weight, bias, padding_value } => OpM::FixedConv2d {
            kernel: attrs.kernel,
            stride: attrs.stride,
            padding: attrs.padding,
            weight: w.push(weight),
            bias: w.push(bias),
            padding_value: padding_value.as_ref().map(|p| w.push(p)),
        },
        OpKind::BatchNorm(bn) => OpM::BatchNorm {
            eps: bn.eps,
            affine_free: bn.affine_free,
            gamma: w.push(&f32_tensor(&bn.gamma)),
            beta: w.push(&f32_tensor(&bn.beta)),
            mu: w.push(&f32_tensor(&bn.mu)),
            sigma2: w.push(&f32_tensor(&bn.sigma2)),
        },
        OpKind::Prelu { alpha } => OpM::Prelu { alpha: w.push(alpha) },
        OpKind::Threshold(t) => OpM::Threshold {
            tau: w.push(&Tensor::F64 {
                data: t.tau.clone(),
                shape: vec![t.tau.len()],
            }),
            direction: w.push(&Tensor::U8 {
                data: t.direction.iter().map(|d| d.to_u8()).collect(),
                shape: vec![t.direction.len()],
            }),
        },
        OpKind::AvgPool { window, stride } => OpM::AvgPool {
            window: *window,
            stride: *stride,
        },
        OpKind::MaxPoolOr { window, stride } => OpM::MaxPoolOr {
            window: *window,
            stride: *stride,
        },
        OpKind::Add => OpM::Add,
        OpKind::BinaryLinear { weight } => OpM::BinaryLinear {
            weight: w.push(&Tensor::Packed(weight.clone())),
        },
        OpKind::FixedLinear { weight, bias } => OpM::FixedLinear {
            weight: w.push(weight),
            bias: w.push(bias),
        },
        OpKind::PatchEmbed { patch, weight, bias } => OpM::PatchEmbed {
            patch: *patch,
            weight: w.push(weight),
            bias: w.push(bias),
        },
        OpKind::GlobalAvgPool => OpM::GlobalAvgPool,
        OpKind::Transpose => OpM::Transpose,
    }
}

fn f32_tensor(data: &[f32]) -> Tensor {
    Tensor::F32 {
        data: data.to_vec(),
        shape: vec![data.len()],
    }
}

fn tensor_at(tensors: &[Tensor], idx: usize) -> Result<&Tensor> {
    tensors.get(idx).ok_or_else(|| Error::ManifestMismatch {
        context: format!("tensor index {idx} out of range"),
    })
}

fn f32_vec(tensors: &[Tensor], idx: usize) -> Result<Vec<f32>> {
    tensor_at(tensors, idx)?
        .as_f32()
        .map(|d| d.to_vec())
        .ok_or_else(|| Error::ManifestMismatch {
            context: format!("tensor {idx} is not float32"),
        })
}

fn packed_at(tensors: &[Tensor], idx: usize) -> Result<PackedBitTensor> {
    tensor_at(tensors, idx)?
        .as_packed()
        .cloned()
        .ok_or_else(|| Error::ManifestMismatch {
            context: format!("tensor {idx} is not packed binary"),
        })
}

fn op_from_manifest(op: &OpM, tensors: &[Tensor]) -> Result<OpKind> {
    Ok(match op {
        OpM::SignFn => OpKind::SignFn,
        OpM::BinaryConv2d { kernel, stride, padding, pad_bit, weight } => OpKind::BinaryConv2d {
            attrs: Conv2dAttrs {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            weight: packed_at(tensors, *weight)?,
            pad_bit: *pad_bit,
        },
        OpM::FixedConv2d { kernel, stride, padding, weight, bias, padding_value } => {
            OpKind::FixedConv2d {
                attrs: Conv2dAttrs {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                weight: tensor_at(tensors, *weight)?.clone(),
                bias: tensor_at(tensors, *bias)?.clone(),
                padding_value: match padding_value {
                    Some(idx) => Some(tensor_at(tensors, *idx)?.clone()),
                    None => None,
                },
            }
        }
        OpM::BatchNorm { eps, affine_free, gamma, beta, mu, sigma2 } => OpKind::BatchNorm(BnParams {
            gamma: f32_vec(tensors, *gamma)?,
            beta: f32_vec(tensors, *beta)?,
            mu: f32_vec(tensors, *mu)?,
            sigma2: f32_vec(tensors, *sigma2)?,
            eps: *eps,
            affine_free: *affine_free,
        }),
        OpM::Prelu { alpha } => OpKind::Prelu {
            alpha: tensor_at(tensors, *alpha)?.clone(),
        },
        OpM::Threshold { tau, direction } => {
            let tau_t = tensor_at(tensors, *tau)?
                .as_f64()
                .ok_or_else(|| Error::ManifestMismatch {
                    context: "threshold tau must be float64".into(),
                })?
                .to_vec();
            let dir_raw = tensor_at(tensors, *direction)?
                .as_u8()
                .ok_or_else(|| Error::ManifestMismatch {
                    context: "threshold direction must be uint8".into(),
                })?;
            let direction = dir_raw
                .iter()
                .map(|&d| {
                    ThresholdDir::from_u8(d).ok_or_else(|| Error::ManifestMismatch {
                        context: format!("bad threshold direction {d}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            OpKind::Threshold(ThresholdParams { tau: tau_t, direction })
        }
        OpM::AvgPool { window, stride } => OpKind::AvgPool {
            window: *window,
            stride: *stride,
        },
        OpM::MaxPoolOr { window, stride } => OpKind::MaxPoolOr {
            window: *window,
            stride: *stride,
        },
        OpM::Add => OpKind::Add,
        OpM::BinaryLinear { weight } => OpKind::BinaryLinear {
            weight: packed_at(tensors, *weight)?,
        },
        OpM::FixedLinear { weight, bias } => OpKind::FixedLinear {
            weight: tensor_at(tensors, *weight)?.clone(),
            bias: tensor_at(tensors, *bias)?.clone(),
        },
        OpM::PatchEmbed { patch, weight, bias } => OpKind::PatchEmbed {
            patch: *patch,
            weight: tensor_at(tensors, *weight)?.clone(),
            bias: tensor_at(tensors, *bias)?.clone(),
        },
        OpM::GlobalAvgPool => OpKind::GlobalAvgPool,
        OpM::Transpose => OpKind::Transpose,
    })
}

/// Serialize a graph to the container byte layout.
pub fn model_to_bytes(graph: &Graph) -> Result<Vec<u8>> {
    let mut writer = BlobWriter::new();
    let nodes: Vec<NodeM> = graph
        .iter_nodes()
        .map(|(_, node)| NodeM {
            name: node.name.clone(),
            op: op_to_manifest(&node.op, &mut writer),
            inputs: node.inputs.clone(),
            output: node.output,
        })
        .collect();

    let manifest = Manifest {
        arch: graph.arch.clone(),
        seed: graph.seed,
        word_size: graph.word_size,
        frac_bits: graph.frac_bits,
        compiled: graph.compiled,
        inputs: graph
            .inputs()
            .iter()
            .map(|(name, value)| PortM {
                name: name.clone(),
                value: *value,
            })
            .collect(),
        outputs: graph
            .outputs()
            .iter()
            .map(|(name, value)| PortM {
                name: name.clone(),
                value: *value,
            })
            .collect(),
        values: (0..graph.value_count())
            .map(|v| {
                let info = graph.value(v);
                ValueM {
                    dtype: dtype_name(info.dtype).to_string(),
                    shape: info.shape.clone(),
                    producer: match info.producer {
                        Producer::GraphInput(i) => ProducerM::Input(i),
                        Producer::Node(n) => ProducerM::Node(n),
                    },
                }
            })
            .collect(),
        nodes,
        tensors: writer.descs,
    };

    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for blob in &writer.blobs {
        out.extend_from_slice(blob);
    }
    Ok(out)
}

pub fn save_model(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(graph)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuild a graph from container bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Graph> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            context: "file shorter than magic".into(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            context: "file shorter than header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Truncated {
            context: format!(
                "manifest declares {manifest_len} bytes, file holds {}",
                bytes.len() - 16
            ),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])?;

    // Slice out tensor blobs.
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 16 + manifest_len;
    for (i, desc) in manifest.tensors.iter().enumerate() {
        let len = desc.byte_len as usize;
        let expect = expected_byte_len(desc)?;
        if expect != desc.byte_len {
            return Err(Error::ManifestMismatch {
                context: format!(
                    "tensor {i}: descriptor byte_len {} disagrees with shape ({expect} expected)",
                    desc.byte_len
                ),
            });
        }
        if bytes.len() < offset + len {
            return Err(Error::Truncated {
                context: format!(
                    "tensor {i}: blob needs {len} bytes at offset {offset}, file holds {}",
                    bytes.len()
                ),
            });
        }
        tensors.push(decode_tensor(desc, &bytes[offset..offset + len])?);
        offset += len;
    }

    let mut graph = Graph::new(manifest.arch, manifest.seed);
    graph.word_size = manifest.word_size;
    graph.frac_bits = manifest.frac_bits;
    graph.compiled = manifest.compiled;

    for vm in &manifest.values {
        graph.add_raw_value(ValueInfo {
            dtype: dtype_from_name(&vm.dtype)?,
            shape: vm.shape.clone(),
            producer: match vm.producer {
                ProducerM::Input(i) => Producer::GraphInput(i),
                ProducerM::Node(n) => Producer::Node(n),
            },
        });
    }
    for nm in &manifest.nodes {
        if nm.output >= graph.value_count() || nm.inputs.iter().any(|&v| v >= graph.value_count()) {
            return Err(Error::ManifestMismatch {
                context: format!("node {} references missing values", nm.name),
            });
        }
        graph.add_raw_node(Node {
            name: nm.name.clone(),
            op: op_from_manifest(&nm.op, &tensors)?,
            inputs: nm.inputs.clone(),
            output: nm.output,
        });
    }
    for p in &manifest.inputs {
        if p.value >= graph.value_count() {
            return Err(Error::ManifestMismatch {
                context: format!("input port {} references missing value", p.name),
            });
        }
        graph.add_raw_input_port(&p.name, p.value);
    }
    for p in &manifest.outputs {
        if p.value >= graph.value_count() {
            return Err(Error::ManifestMismatch {
                context: format!("output port {} references missing value", p.name),
            });
        }
        graph.set_output(&p.name, p.value);
    }
    Ok(graph)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Graph> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

/// Save a runtime input/output tensor: magic "NBT1", dtype tag, rank,
/// dims (u64 each), little-endian payload.
pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (payload, desc) = encode_tensor(t);
    if desc.tag == TAG_PACKED_U64 {
        return Err(Error::ManifestMismatch {
            context: "packed tensors are not supported by the tensor file format".into(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(desc.tag);
    out.push(desc.shape.len() as u8);
    for d in &desc.shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    if desc.tag == TAG_I16 {
        out.push(desc.frac_bits.unwrap_or(8));
    }
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            context: "tensor file shorter than magic".into(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: TENSOR_MAGIC,
            found,
        });
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated {
            context: "tensor file shorter than header".into(),
        });
    }
    let tag = bytes[4];
    let rank = bytes[5] as usize;
    let mut offset = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < offset + 8 {
            return Err(Error::Truncated {
                context: "tensor dims truncated".into(),
            });
        }
        shape.push(u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()) as usize);
        offset += 8;
    }
    let frac_bits = if tag == TAG_I16 {
        if bytes.len() < offset + 1 {
            return Err(Error::Truncated {
                context: "tensor frac_bits truncated".into(),
            });
        }
        let fb = bytes[offset];
        offset += 1;
        Some(fb)
    } else {
        None
    };
    let desc = TensorDesc {
        tag,
        shape,
        byte_len: (bytes.len() - offset) as u64,
        frac_bits,
        packed_axis: None,
        lane_width: None,
    };
    let expect = expected_byte_len(&desc)?;
    if (bytes.len() - offset) as u64 != expect {
        return Err(Error::Truncated {
            context: format!(
                "tensor payload holds {} bytes, shape expects {expect}",
                bytes.len() - offset
            ),
        });
    }
    decode_tensor(&desc, &bytes[offset..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DType;

    fn tiny_graph() -> Graph {
        let mut g = Graph::new("tiny", 7);
        let input = g.add_input("input", DType::Real, vec![4]);
        let bn = g
            .add_node("bn", OpKind::BatchNorm(BnParams::identity(4)), vec![input])
            .unwrap();
        let sg = g.add_node("sg", OpKind::SignFn, vec![bn]).unwrap();
        g.set_output("out", sg);
        g
    }

    #[test]
    fn roundtrip_preserves_structure() {
        let g = tiny_graph();
        let bytes = model_to_bytes(&g).unwrap();
        let g2 = model_from_bytes(&bytes).unwrap();
        assert_eq!(g, g2);
        // byte-stable serialization
        assert_eq!(bytes, model_to_bytes(&g2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = model_to_bytes(&tiny_graph()).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = model_to_bytes(&tiny_graph()).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::UnsupportedVersion(999))
        ));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = model_to_bytes(&tiny_graph()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            model_from_bytes(cut),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn descriptor_blob_disagreement_is_rejected() {
        // descriptor says 100 elements, blob holds 99
        let g = tiny_graph();
        let mut bytes = model_to_bytes(&g).unwrap();
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + manifest_len].to_vec()).unwrap();
        // gamma is the first tensor: [4] float32, 16 bytes
        let patched = json.replacen("\"shape\":[4],\"byte_len\":16", "\"shape\":[100],\"byte_len\":396", 1);
        assert_ne!(json, patched);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + manifest_len..]);
        bytes = out;
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::ManifestMismatch { .. })
        ));
    }

    #[test]
    fn tensor_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("nbt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.nbt");
        let t = Tensor::F32 {
            data: vec![1.0, -2.5, 0.125],
            shape: vec![3],
        };
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(t, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
