//! BlendMixer builders: all-MLP vision models whose mixing-block fully
//! connected layers run binary or fixed-point per a precision flag.
//!
//! Every layer stacks a token-mixing block (transpose-wrapped, features =
//! sequence length) and a channel-mixing block (features = hidden size).
//! A mixing block chains two blend units (sign -> linear -> batch norm ->
//! prelu), adds the identity skip, and ends in an affine-free batch norm.
//! Normalization is per-feature over the block's working feature axis.

use crate::builders::{placeholder_binary_weight, placeholder_f32, DEFAULT_PRELU_SLOPE};
use crate::error::{Error, Result};
use crate::ir::{BnParams, DType, Graph, OpKind, ValueId};
use crate::tensor::Tensor;

/// Design point of a mixer: sequence length S, hidden size C, mixing MLP
/// widths, patch resolution and depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerSpec {
    pub seq_len: usize,
    pub hidden: usize,
    pub d_channel: usize,
    pub d_token: usize,
    pub patch: usize,
    pub layers: usize,
}

impl MixerSpec {
    /// Small scale, 4x4 patches.
    pub fn s4() -> Self {
        Self {
            seq_len: 64,
            hidden: 128,
            d_channel: 512,
            d_token: 64,
            patch: 4,
            layers: 8,
        }
    }

    /// Base scale, 4x4 patches.
    pub fn b4() -> Self {
        Self {
            seq_len: 64,
            hidden: 192,
            d_channel: 768,
            d_token: 96,
            patch: 4,
            layers: 12,
        }
    }

    /// Widened small scale (double hidden), 4x4 patches.
    pub fn s4_wide() -> Self {
        Self {
            seq_len: 64,
            hidden: 256,
            d_channel: 1024,
            d_token: 128,
            patch: 4,
            layers: 8,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "s4" => Some(Self::s4()),
            "b4" => Some(Self::b4()),
            "2s4" => Some(Self::s4_wide()),
            _ => None,
        }
    }

    pub fn check(&self, image_side: usize) -> Result<()> {
        if self.seq_len == 0
            || self.hidden == 0
            || self.d_channel == 0
            || self.d_token == 0
            || self.patch == 0
            || self.layers == 0
        {
            return Err(Error::InvalidMixer("all spec fields must be positive".into()));
        }
        if !image_side.is_multiple_of(self.patch) {
            return Err(Error::InvalidMixer(format!(
                "patch {} does not divide image side {image_side}",
                self.patch
            )));
        }
        let s = (image_side / self.patch) * (image_side / self.patch);
        if s != self.seq_len {
            return Err(Error::InvalidMixer(format!(
                "seq_len {} != (image_side/patch)^2 = {s}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Arithmetic used by one fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcKind {
    Binary,
    Fixed,
}

/// Per-mixing-block FC precision flags: two FCs in the token block, two in
/// the channel block. Parsed from strings like "BB/BB" or "FPB/BFP" where
/// B is binary and FP is fixed-point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcPrecision {
    pub token: [FcKind; 2],
    pub channel: [FcKind; 2],
}

impl FcPrecision {
    pub const ALL_BINARY: FcPrecision = FcPrecision {
        token: [FcKind::Binary, FcKind::Binary],
        channel: [FcKind::Binary, FcKind::Binary],
    };

    pub const ALL_FIXED: FcPrecision = FcPrecision {
        token: [FcKind::Fixed, FcKind::Fixed],
        channel: [FcKind::Fixed, FcKind::Fixed],
    };

    pub fn parse(s: &str) -> Result<Self> {
        let (tok, ch) = s.split_once('/').ok_or_else(|| {
            Error::InvalidPrecision(format!("{s:?} must be <token-block>/<channel-block>"))
        })?;
        Ok(Self {
            token: parse_pair(tok)?,
            channel: parse_pair(ch)?,
        })
    }
}

impl std::fmt::Display for FcPrecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let part = |p: &[FcKind; 2]| -> String {
            p.iter()
                .map(|k| match k {
                    FcKind::Binary => "B",
                    FcKind::Fixed => "FP",
                })
                .collect()
        };
        write!(f, "{}/{}", part(&self.token), part(&self.channel))
    }
}

fn parse_pair(s: &str) -> Result<[FcKind; 2]> {
    let mut kinds = Vec::new();
    let mut rest = s;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix("FP") {
            kinds.push(FcKind::Fixed);
            rest = r;
        } else if let Some(r) = rest.strip_prefix('B') {
            kinds.push(FcKind::Binary);
            rest = r;
        } else {
            return Err(Error::InvalidPrecision(format!(
                "unknown precision token in {s:?} (use B or FP)"
            )));
        }
    }
    match kinds.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::InvalidPrecision(format!(
            "{s:?} must name exactly two FC layers"
        ))),
    }
}

/// One blend unit: (sign ->) linear -> batch norm -> prelu.
fn append_unit(
    graph: &mut Graph,
    input: ValueId,
    in_features: usize,
    out_features: usize,
    kind: FcKind,
    prefix: &str,
) -> Result<ValueId> {
    let fc = match kind {
        FcKind::Binary => {
            let sg = graph.add_node(format!("{prefix}.sign"), OpKind::SignFn, vec![input])?;
            graph.add_node(
                format!("{prefix}.fc"),
                OpKind::BinaryLinear {
                    weight: placeholder_binary_weight(
                        &[out_features, in_features],
                        graph.word_size,
                    )
                    .as_packed()
                    .unwrap()
                    .clone(),
                },
                vec![sg],
            )?
        }
        FcKind::Fixed => graph.add_node(
            format!("{prefix}.fc"),
            OpKind::FixedLinear {
                weight: placeholder_f32(&[out_features, in_features]),
                bias: placeholder_f32(&[out_features]),
            },
            vec![input],
        )?,
    };
    let bn = graph.add_node(
        format!("{prefix}.bn"),
        OpKind::BatchNorm(BnParams::identity(out_features)),
        vec![fc],
    )?;
    graph.add_node(
        format!("{prefix}.prelu"),
        OpKind::Prelu {
            alpha: Tensor::F32 {
                data: vec![DEFAULT_PRELU_SLOPE; out_features],
                shape: vec![out_features],
            },
        },
        vec![bn],
    )
}

/// Mixing block over the last axis: two blend units, identity skip,
/// trailing affine-free batch norm.
fn append_mixing_block(
    graph: &mut Graph,
    input: ValueId,
    features: usize,
    hidden: usize,
    kinds: [FcKind; 2],
    prefix: &str,
) -> Result<ValueId> {
    let u1 = append_unit(graph, input, features, hidden, kinds[0], &format!("{prefix}.u1"))?;
    let u2 = append_unit(graph, u1, hidden, features, kinds[1], &format!("{prefix}.u2"))?;
    let add = graph.add_node(format!("{prefix}.add"), OpKind::Add, vec![u2, input])?;
    graph.add_node(
        format!("{prefix}.out_bn"),
        OpKind::BatchNorm(BnParams::affine_free(features)),
        vec![add],
    )
}

/// Build a BlendMixer (or, with all-fixed flags, a plain mixer) for
/// 32x32 3-channel inputs.
pub fn build_blendmixer(spec: &MixerSpec, precision: FcPrecision, num_classes: usize) -> Result<Graph> {
    const IMAGE_SIDE: usize = 32;
    spec.check(IMAGE_SIDE)?;
    if num_classes < 2 {
        return Err(Error::InvalidMixer(format!(
            "num_classes {num_classes} must be at least 2"
        )));
    }

    let mut g = Graph::new("blendmixer", 0);
    let input = g.add_input("input", DType::Real, vec![3, IMAGE_SIDE, IMAGE_SIDE]);

    let mut value = g.add_node(
        "patch_embed",
        OpKind::PatchEmbed {
            patch: spec.patch,
            weight: placeholder_f32(&[spec.hidden, 3, spec.patch, spec.patch]),
            bias: placeholder_f32(&[spec.hidden]),
        },
        vec![input],
    )?;

    for layer in 0..spec.layers {
        let p = format!("l{}", layer + 1);
        // token mixing: transpose to [hidden, seq], mix over seq, transpose back
        let t_in = g.add_node(format!("{p}.t_in"), OpKind::Transpose, vec![value])?;
        let tok = append_mixing_block(
            &mut g,
            t_in,
            spec.seq_len,
            spec.d_token,
            precision.token,
            &format!("{p}.tok"),
        )?;
        let t_out = g.add_node(format!("{p}.t_out"), OpKind::Transpose, vec![tok])?;
        // channel mixing over the hidden axis
        value = append_mixing_block(
            &mut g,
            t_out,
            spec.hidden,
            spec.d_channel,
            precision.channel,
            &format!("{p}.ch"),
        )?;
    }

    let gap = g.add_node("gap", OpKind::GlobalAvgPool, vec![value])?;
    let head = g.add_node(
        "head",
        OpKind::FixedLinear {
            weight: placeholder_f32(&[num_classes, spec.hidden]),
            bias: placeholder_f32(&[num_classes]),
        },
        vec![gap],
    )?;
    g.set_output("scores", head);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;

    #[test]
    fn preset_fields_match_design_table() {
        let s4 = MixerSpec::s4();
        assert_eq!(
            (s4.seq_len, s4.hidden, s4.d_channel, s4.d_token, s4.layers),
            (64, 128, 512, 64, 8)
        );
        let b4 = MixerSpec::b4();
        assert_eq!(
            (b4.seq_len, b4.hidden, b4.d_channel, b4.d_token, b4.layers),
            (64, 192, 768, 96, 12)
        );
        let wide = MixerSpec::s4_wide();
        assert_eq!(
            (wide.seq_len, wide.hidden, wide.d_channel, wide.d_token, wide.layers),
            (64, 256, 1024, 128, 8)
        );
        assert_eq!(MixerSpec::preset("b4"), Some(MixerSpec::b4()));
    }

    #[test]
    fn precision_strings_parse() {
        assert_eq!(FcPrecision::parse("BB/BB").unwrap(), FcPrecision::ALL_BINARY);
        assert_eq!(FcPrecision::parse("FPFP/FPFP").unwrap(), FcPrecision::ALL_FIXED);
        let p = FcPrecision::parse("FPB/BFP").unwrap();
        assert_eq!(p.token, [FcKind::Fixed, FcKind::Binary]);
        assert_eq!(p.channel, [FcKind::Binary, FcKind::Fixed]);
        assert!(FcPrecision::parse("BB").is_err());
        assert!(FcPrecision::parse("BX/BB").is_err());
        assert!(FcPrecision::parse("BBB/BB").is_err());
    }

    #[test]
    fn all_binary_wide_variant_builds_and_validates() {
        let g = build_blendmixer(&MixerSpec::s4_wide(), FcPrecision::ALL_BINARY, 10).unwrap();
        assert!(validate(&g).is_empty());
        // four binary FCs per layer
        let bin_fcs = g
            .iter_nodes()
            .filter(|(_, n)| n.op.kind_name() == "BinaryLinear")
            .count();
        assert_eq!(bin_fcs, 4 * 8);
    }

    #[test]
    fn mixed_precision_variant_validates() {
        let g = build_blendmixer(
            &MixerSpec::s4(),
            FcPrecision::parse("FPB/BB").unwrap(),
            10,
        )
        .unwrap();
        assert!(validate(&g).is_empty());
        let fixed_fcs = g
            .iter_nodes()
            .filter(|(_, n)| n.op.kind_name() == "FixedLinear")
            .count();
        // one fixed FC per layer plus the classifier head
        assert_eq!(fixed_fcs, 8 + 1);
    }

    #[test]
    fn bad_seq_len_is_rejected() {
        let mut spec = MixerSpec::s4();
        spec.seq_len = 63;
        assert!(build_blendmixer(&spec, FcPrecision::ALL_BINARY, 10).is_err());
    }
}
