//! Builders for blend blocks and the NeuroBlend-20/18 architectures.
//!
//! A blend block runs a binary 3x3 convolution on its main path and either
//! an identity skip (normal block) or average pooling, a 1x1 fixed-point
//! convolution and batch normalization (downsample block) on its skip
//! path. The main-path activation precedes the addition, and every block
//! ends in an affine-free batch normalization.

use crate::error::{Error, Result};
use crate::ir::{BnParams, Conv2dAttrs, DType, Graph, OpKind, ValueId};
use crate::packing::pack_axis;
use crate::tensor::Tensor;

pub const DEFAULT_PRELU_SLOPE: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Normal,
    Downsample,
}

/// Configuration of one blend block.
#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kind: BlockKind,
    /// Per-channel negative-side slopes of the main-path activation.
    pub prelu_slopes: Vec<f32>,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, kind: BlockKind) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            kind,
            prelu_slopes: vec![DEFAULT_PRELU_SLOPE; out_channels],
        }
    }

    /// kind must be Downsample iff the block changes resolution or width.
    pub fn check(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::InvalidBlock("zero-sized block dimension".into()));
        }
        let needs_downsample = self.stride > 1 || self.in_channels != self.out_channels;
        let is_downsample = self.kind == BlockKind::Downsample;
        if needs_downsample != is_downsample {
            return Err(Error::InvalidBlock(format!(
                "kind {:?} inconsistent with {}→{} stride {} (skip paths cannot change shape)",
                self.kind, self.in_channels, self.out_channels, self.stride
            )));
        }
        if self.prelu_slopes.len() != self.out_channels {
            return Err(Error::InvalidBlock(format!(
                "prelu slope count {} != out_channels {}",
                self.prelu_slopes.len(),
                self.out_channels
            )));
        }
        Ok(())
    }
}

/// All-(-1) packed placeholder weights; `random_init` replaces them.
pub fn placeholder_binary_weight(shape: &[usize], word_size: u8) -> Tensor {
    let data = vec![-1.0f32; shape.iter().product()];
    Tensor::Packed(pack_axis(&data, shape, 1, word_size).expect("placeholder weights pack"))
}

pub fn placeholder_f32(shape: &[usize]) -> Tensor {
    Tensor::F32 {
        data: vec![0.0; shape.iter().product()],
        shape: shape.to_vec(),
    }
}

fn prelu_tensor(slopes: &[f32]) -> Tensor {
    Tensor::F32 {
        data: slopes.to_vec(),
        shape: vec![slopes.len()],
    }
}

/// Append one blend block reading `input`; returns the block output value.
pub fn append_block(
    graph: &mut Graph,
    cfg: &BlockConfig,
    input: ValueId,
    prefix: &str,
) -> Result<ValueId> {
    cfg.check()?;
    let word = graph.word_size;

    // main path: sign -> binary conv 3x3 -> batch norm -> prelu
    let sg = graph.add_node(format!("{prefix}.sign"), OpKind::SignFn, vec![input])?;
    let conv = graph.add_node(
        format!("{prefix}.conv"),
        OpKind::BinaryConv2d {
            attrs: Conv2dAttrs {
                kernel: 3,
                stride: cfg.stride,
                padding: 1,
            },
            weight: placeholder_binary_weight(
                &[cfg.out_channels, cfg.in_channels, 3, 3],
                word,
            )
            .as_packed()
            .unwrap()
            .clone(),
            pad_bit: 0,
        },
        vec![sg],
    )?;
    let bn1 = graph.add_node(
        format!("{prefix}.bn1"),
        OpKind::BatchNorm(BnParams::identity(cfg.out_channels)),
        vec![conv],
    )?;
    let act = graph.add_node(
        format!("{prefix}.prelu"),
        OpKind::Prelu {
            alpha: prelu_tensor(&cfg.prelu_slopes),
        },
        vec![bn1],
    )?;

    // skip path
    let skip = match cfg.kind {
        BlockKind::Normal => input,
        BlockKind::Downsample => {
            let pool = graph.add_node(
                format!("{prefix}.skip.pool"),
                OpKind::AvgPool {
                    window: cfg.stride,
                    stride: cfg.stride,
                },
                vec![input],
            )?;
            let conv = graph.add_node(
                format!("{prefix}.skip.conv"),
                OpKind::FixedConv2d {
                    attrs: Conv2dAttrs {
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                    },
                    weight: placeholder_f32(&[cfg.out_channels, cfg.in_channels, 1, 1]),
                    bias: placeholder_f32(&[cfg.out_channels]),
                    padding_value: None,
                },
                vec![pool],
            )?;
            graph.add_node(
                format!("{prefix}.skip.bn"),
                OpKind::BatchNorm(BnParams::identity(cfg.out_channels)),
                vec![conv],
            )?
        }
    };

    let add = graph.add_node(format!("{prefix}.add"), OpKind::Add, vec![act, skip])?;
    let out_bn = graph.add_node(
        format!("{prefix}.out_bn"),
        OpKind::BatchNorm(BnParams::affine_free(cfg.out_channels)),
        vec![add],
    )?;

    // shapes of both paths must have met at the add
    let main_shape = &graph.value(act).shape;
    let skip_shape = &graph.value(skip).shape;
    if main_shape != skip_shape {
        return Err(Error::InvalidBlock(format!(
            "main path {main_shape:?} and skip path {skip_shape:?} disagree"
        )));
    }
    Ok(out_bn)
}

/// Build one blend block as a standalone graph (for inspection and tests).
pub fn build_block(cfg: &BlockConfig, height: usize, width: usize) -> Result<Graph> {
    let mut g = Graph::new("block", 0);
    let input = g.add_input("input", DType::Real, vec![cfg.in_channels, height, width]);
    let out = append_block(&mut g, cfg, input, "block")?;
    g.set_output("out", out);
    Ok(g)
}

struct StagePlan {
    widths: Vec<usize>,
    blocks_per_stage: usize,
}

fn build_resnet_like(
    arch: &str,
    stem_out: usize,
    plan: StagePlan,
    num_classes: usize,
) -> Result<Graph> {
    if num_classes < 2 {
        return Err(Error::InvalidBlock(format!(
            "num_classes {num_classes} must be at least 2"
        )));
    }
    let mut g = Graph::new(arch, 0);
    let input = g.add_input("input", DType::Real, vec![3, 32, 32]);

    // fixed-point stem, 3x3
    let stem = g.add_node(
        "stem.conv",
        OpKind::FixedConv2d {
            attrs: Conv2dAttrs {
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            weight: placeholder_f32(&[stem_out, 3, 3, 3]),
            bias: placeholder_f32(&[stem_out]),
            padding_value: None,
        },
        vec![input],
    )?;
    let mut value = g.add_node(
        "stem.bn",
        OpKind::BatchNorm(BnParams::identity(stem_out)),
        vec![stem],
    )?;

    let mut in_ch = stem_out;
    for (si, &width) in plan.widths.iter().enumerate() {
        for bi in 0..plan.blocks_per_stage {
            let first = bi == 0;
            let stride = if first && in_ch != width { 2 } else { 1 };
            let kind = if stride > 1 || in_ch != width {
                BlockKind::Downsample
            } else {
                BlockKind::Normal
            };
            let cfg = BlockConfig::new(in_ch, width, stride, kind);
            value = append_block(&mut g, &cfg, value, &format!("s{}.b{}", si + 1, bi + 1))?;
            in_ch = width;
        }
    }

    let gap = g.add_node("gap", OpKind::GlobalAvgPool, vec![value])?;
    let head = g.add_node(
        "head",
        OpKind::FixedLinear {
            weight: placeholder_f32(&[num_classes, in_ch]),
            bias: placeholder_f32(&[num_classes]),
        },
        vec![gap],
    )?;
    g.set_output("scores", head);
    Ok(g)
}

/// ResNet-20-like: 3 stages of 3 blocks, widths {16,32,64}, one binary
/// 3x3 conv per block, fixed-point stem and head.
pub fn build_neuroblend20(num_classes: usize) -> Result<Graph> {
    build_resnet_like(
        "neuroblend20",
        16,
        StagePlan {
            widths: vec![16, 32, 64],
            blocks_per_stage: 3,
        },
        num_classes,
    )
}

/// ResNet-18-like: 4 stages of 2 blocks, widths {64,128,256,512}.
pub fn build_neuroblend18(num_classes: usize) -> Result<Graph> {
    build_resnet_like(
        "neuroblend18",
        64,
        StagePlan {
            widths: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
        },
        num_classes,
    )
}
