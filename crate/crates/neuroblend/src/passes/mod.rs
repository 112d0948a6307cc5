//! Graph-rewriting passes: batch-norm distribution, norm+sign to
//! threshold rewriting, norm-conv-norm folding with border correction,
//! dead-node elimination, and the pipeline driver.

mod distribute;
mod fuse;
mod quantize;
mod threshold;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::Graph;

pub use distribute::distribute_trailing_bn;
pub use fuse::{fuse_bn_conv, fuse_bn_conv_bn};
pub use quantize::quantize_graph;
pub use threshold::{fuse_bn_sign_to_threshold, threshold_from_bn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassName {
    DistributeTrailingBn,
    FuseBnSignToThreshold,
    FuseBnConv,
    FuseBnConvBn,
    DeadNodeElim,
}

impl PassName {
    pub const DEFAULT_PIPELINE: [PassName; 4] = [
        PassName::DistributeTrailingBn,
        PassName::FuseBnSignToThreshold,
        PassName::FuseBnConvBn,
        PassName::DeadNodeElim,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PassName::DistributeTrailingBn => "distribute_trailing_bn",
            PassName::FuseBnSignToThreshold => "fuse_bn_sign_to_threshold",
            PassName::FuseBnConv => "fuse_bn_conv",
            PassName::FuseBnConvBn => "fuse_bn_conv_bn",
            PassName::DeadNodeElim => "dead_node_elim",
        }
    }
}

impl std::str::FromStr for PassName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distribute_trailing_bn" => Ok(PassName::DistributeTrailingBn),
            "fuse_bn_sign_to_threshold" => Ok(PassName::FuseBnSignToThreshold),
            "fuse_bn_conv" => Ok(PassName::FuseBnConv),
            "fuse_bn_conv_bn" => Ok(PassName::FuseBnConvBn),
            "dead_node_elim" => Ok(PassName::DeadNodeElim),
            other => Err(Error::UnknownPass(other.to_string())),
        }
    }
}

/// Counters for one pass application.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassStats {
    pub name: String,
    /// Pattern sites found.
    pub matched: usize,
    /// Sites actually rewritten.
    pub rewritten: usize,
    /// Sites skipped (pattern near-miss or undefined rewrite), reported
    /// rather than failed.
    pub skipped: usize,
    pub removed_nodes: usize,
    pub added_nodes: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
}

/// Full pipeline report: per-pass counters plus op censuses before and
/// after. `removed + remaining = original` holds per pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub passes: Vec<PassStats>,
    pub census_before: BTreeMap<String, usize>,
    pub census_after: BTreeMap<String, usize>,
}

impl PassReport {
    pub fn total_rewritten(&self) -> usize {
        self.passes.iter().map(|p| p.rewritten).sum()
    }
}

pub fn op_census(graph: &Graph) -> BTreeMap<String, usize> {
    let mut census = BTreeMap::new();
    for (_, node) in graph.iter_nodes() {
        *census.entry(node.op.kind_name().to_string()).or_insert(0) += 1;
    }
    census
}

/// Remove nodes whose outputs feed nothing and are not graph outputs.
pub fn dead_node_elim(graph: &mut Graph) -> Result<PassStats> {
    let mut stats = PassStats {
        name: PassName::DeadNodeElim.as_str().to_string(),
        nodes_before: graph.node_count(),
        ..Default::default()
    };
    loop {
        let dead: Vec<usize> = graph
            .iter_nodes()
            .filter(|(_, node)| {
                graph.consumers(node.output).is_empty() && !graph.is_graph_output(node.output)
            })
            .map(|(id, _)| id)
            .collect();
        if dead.is_empty() {
            break;
        }
        for id in dead {
            graph.remove_node(id);
            stats.removed_nodes += 1;
            stats.matched += 1;
            stats.rewritten += 1;
        }
    }
    graph.compact()?;
    stats.nodes_after = graph.node_count();
    Ok(stats)
}

fn apply_pass(graph: &mut Graph, pass: PassName) -> Result<PassStats> {
    match pass {
        PassName::DistributeTrailingBn => distribute::distribute_trailing_bn(graph),
        PassName::FuseBnSignToThreshold => threshold::fuse_bn_sign_to_threshold(graph),
        PassName::FuseBnConv => fuse::fuse_bn_conv(graph),
        PassName::FuseBnConvBn => fuse::fuse_bn_conv_bn(graph),
        PassName::DeadNodeElim => dead_node_elim(graph),
    }
}

/// Run `pass_list` over an exclusively owned graph. The pipeline is
/// idempotent: a second run reports zero rewrites.
pub fn run_pipeline(mut graph: Graph, pass_list: &[PassName]) -> Result<(Graph, PassReport)> {
    let mut report = PassReport {
        census_before: op_census(&graph),
        ..Default::default()
    };
    for &pass in pass_list {
        let stats = apply_pass(&mut graph, pass)?;
        debug_assert_eq!(
            stats.nodes_before + stats.added_nodes - stats.removed_nodes,
            stats.nodes_after,
            "pass {} node accounting",
            stats.name
        );
        report.passes.push(stats);
    }
    report.census_after = op_census(&graph);
    Ok((graph, report))
}

/// Compile options: which passes to run and the target packing/Q format.
#[derive(Debug, Clone)]
pub struct CompileOptions {
    pub passes: Vec<PassName>,
    pub word_size: u8,
    pub frac_bits: u8,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            passes: PassName::DEFAULT_PIPELINE.to_vec(),
            word_size: crate::packing::DEFAULT_WORD_SIZE,
            frac_bits: 8,
        }
    }
}

/// Full compilation: pass pipeline, parameter quantization, weight
/// repacking to the target word size. The result is load-and-run.
pub fn compile_model(graph: Graph, opts: &CompileOptions) -> Result<(Graph, PassReport)> {
    if !(1..=64).contains(&opts.word_size) {
        return Err(Error::BadWordSize(opts.word_size));
    }
    let (mut graph, report) = run_pipeline(graph, &opts.passes)?;
    quantize::quantize_graph(&mut graph, opts.frac_bits)?;
    quantize::repack_binary_weights(&mut graph, opts.word_size)?;
    graph.word_size = opts.word_size;
    graph.frac_bits = opts.frac_bits;
    graph.compiled = true;
    Ok((graph, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::build_neuroblend20;
    use crate::init::random_init;
    use crate::ir::{validate, OpKind};

    fn model() -> Graph {
        random_init(build_neuroblend20(10).unwrap(), 3).unwrap()
    }

    #[test]
    fn unknown_pass_name_errors() {
        let err = "fuse_everything".parse::<PassName>().unwrap_err();
        assert!(matches!(err, Error::UnknownPass(_)));
    }

    #[test]
    fn empty_pass_list_leaves_graph_unchanged() {
        let g = model();
        let before = crate::modelio::model_to_bytes(&g).unwrap();
        let (g2, report) = run_pipeline(g, &[]).unwrap();
        assert_eq!(before, crate::modelio::model_to_bytes(&g2).unwrap());
        assert!(report.passes.is_empty());
        assert_eq!(report.census_before, report.census_after);
    }

    #[test]
    fn default_pipeline_removes_all_bn_sign_patterns() {
        let (g, _) = run_pipeline(model(), &PassName::DEFAULT_PIPELINE).unwrap();
        assert!(validate(&g).is_empty());
        // no SignFn is fed by a BatchNorm anymore
        for (_, node) in g.iter_nodes() {
            if matches!(node.op, OpKind::SignFn) {
                if let crate::ir::Producer::Node(p) = g.value(node.inputs[0]).producer {
                    assert!(
                        !matches!(g.node(p).op, OpKind::BatchNorm(_)),
                        "BatchNorm -> SignFn pattern survived at {}",
                        node.name
                    );
                }
            }
        }
        // blend-style graphs fuse every sign into a threshold
        let signs = g.iter_nodes().filter(|(_, n)| matches!(n.op, OpKind::SignFn)).count();
        assert_eq!(signs, 0);
        let thresholds = g
            .iter_nodes()
            .filter(|(_, n)| matches!(n.op, OpKind::Threshold(_)))
            .count();
        assert_eq!(thresholds, 9, "one threshold per block");
    }

    #[test]
    fn pipeline_is_idempotent() {
        let (g1, r1) = run_pipeline(model(), &PassName::DEFAULT_PIPELINE).unwrap();
        assert!(r1.total_rewritten() > 0);
        let (g2, r2) = run_pipeline(g1.clone(), &PassName::DEFAULT_PIPELINE).unwrap();
        assert_eq!(r2.total_rewritten(), 0, "second run must be a no-op");
        assert_eq!(
            crate::modelio::model_to_bytes(&g1).unwrap(),
            crate::modelio::model_to_bytes(&g2).unwrap()
        );
    }

    #[test]
    fn node_accounting_balances() {
        let before = model();
        let n0 = before.node_count();
        let (_, report) = run_pipeline(before, &PassName::DEFAULT_PIPELINE).unwrap();
        let mut n = n0;
        for p in &report.passes {
            assert_eq!(p.nodes_before, n);
            assert_eq!(p.nodes_after, p.nodes_before + p.added_nodes - p.removed_nodes);
            n = p.nodes_after;
        }
    }
}
