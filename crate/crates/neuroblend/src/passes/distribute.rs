//! Distribute a block-ending batch norm into the next block.
//!
//! Pattern: a BatchNorm whose output fans out to exactly the next block's
//! entry, one SignFn on the main path and either the skip-path AvgPool or
//! the residual Add (identity skip). The norm is duplicated onto both
//! successor paths and removed from its original position. On skip paths
//! beginning with average pooling the copy lands after the pooling node:
//! a per-channel affine commutes with a spatial mean.

use crate::error::Result;
use crate::ir::{Graph, NodeId, OpKind, Producer};

use super::{PassName, PassStats};

struct Site {
    bn: NodeId,
    sign: NodeId,
    /// AvgPool or Add on the skip side.
    skip_head: NodeId,
}

enum Match {
    Rewrite(Site),
    /// BatchNorm with block-entry-like consumers that don't fit the
    /// pattern; reported, not rewritten.
    Skip,
}

fn match_site(graph: &Graph, bn: NodeId) -> Option<Match> {
    let node = graph.node(bn);
    if !matches!(node.op, OpKind::BatchNorm(_)) {
        return None;
    }
    if graph.is_graph_output(node.output) {
        return None;
    }
    let consumers = graph.consumers(node.output);
    let signs: Vec<NodeId> = consumers
        .iter()
        .copied()
        .filter(|&c| matches!(graph.node(c).op, OpKind::SignFn))
        .collect();
    if signs.is_empty() {
        return None;
    }
    if consumers.len() != 2 || signs.len() != 1 {
        // fan-out involving a sign but not the two-path block entry
        return Some(Match::Skip);
    }
    let other = consumers.into_iter().find(|&c| c != signs[0])?;
    match graph.node(other).op {
        OpKind::AvgPool { .. } | OpKind::Add => Some(Match::Rewrite(Site {
            bn,
            sign: signs[0],
            skip_head: other,
        })),
        _ => Some(Match::Skip),
    }
}

pub fn distribute_trailing_bn(graph: &mut Graph) -> Result<PassStats> {
    let mut stats = PassStats {
        name: PassName::DistributeTrailingBn.as_str().to_string(),
        nodes_before: graph.node_count(),
        ..Default::default()
    };

    let sites: Vec<Match> = graph
        .node_ids()
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|id| match_site(graph, id))
        .collect();

    for m in sites {
        let site = match m {
            Match::Rewrite(s) => s,
            Match::Skip => {
                stats.matched += 1;
                stats.skipped += 1;
                continue;
            }
        };
        stats.matched += 1;

        let bn_node = graph.node(site.bn);
        let params = match &bn_node.op {
            OpKind::BatchNorm(p) => p.clone(),
            _ => unreachable!(),
        };
        let bn_name = bn_node.name.clone();
        let v_pre = bn_node.inputs[0];
        let v_post = bn_node.output;

        // main path: copy lands directly before the sign
        let v_main = graph.add_node(
            format!("{bn_name}.main"),
            OpKind::BatchNorm(params.clone()),
            vec![v_pre],
        )?;
        graph.replace_input(site.sign, v_post, v_main);
        stats.added_nodes += 1;

        // skip path
        match graph.node(site.skip_head).op {
            OpKind::AvgPool { .. } => {
                // pooling now reads the raw value; the copy follows it
                graph.replace_input(site.skip_head, v_post, v_pre);
                let v_pool = graph.node(site.skip_head).output;
                let v_skip = graph.add_node(
                    format!("{bn_name}.skip"),
                    OpKind::BatchNorm(params),
                    vec![v_pool],
                )?;
                let downstream: Vec<NodeId> = graph
                    .consumers(v_pool)
                    .into_iter()
                    .filter(|&c| {
                        !matches!(graph.value(v_skip).producer, Producer::Node(p) if p == c)
                    })
                    .collect();
                for c in downstream {
                    graph.replace_input(c, v_pool, v_skip);
                }
            }
            OpKind::Add => {
                let v_skip = graph.add_node(
                    format!("{bn_name}.skip"),
                    OpKind::BatchNorm(params),
                    vec![v_pre],
                )?;
                graph.replace_input(site.skip_head, v_post, v_skip);
            }
            _ => unreachable!("matched skip head"),
        }
        stats.added_nodes += 1;

        graph.remove_node(site.bn);
        stats.removed_nodes += 1;
        stats.rewritten += 1;
    }

    graph.compact()?;
    stats.nodes_after = graph.node_count();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::{build_neuroblend20, BlockConfig, BlockKind};
    use crate::init::{random_init, random_input};
    use crate::ir::{validate, BnParams, DType};
    use crate::oracle::reference_forward;

    /// Two chained blocks: the first block's trailing norm is the pattern.
    fn two_blocks(second: BlockKind) -> Graph {
        let mut g = Graph::new("two-blocks", 0);
        let input = g.add_input("input", DType::Real, vec![8, 8, 8]);
        let b1 = crate::builders::append_block(
            &mut g,
            &BlockConfig::new(8, 8, 1, BlockKind::Normal),
            input,
            "b1",
        )
        .unwrap();
        let (out_ch, stride) = match second {
            BlockKind::Normal => (8, 1),
            BlockKind::Downsample => (16, 2),
        };
        let b2 = crate::builders::append_block(
            &mut g,
            &BlockConfig::new(8, out_ch, stride, second),
            b1,
            "b2",
        )
        .unwrap();
        g.set_output("out", b2);
        g
    }

    #[test]
    fn downsample_skip_pools_before_norm() {
        let g = random_init(two_blocks(BlockKind::Downsample), 1).unwrap();
        let mut g2 = g.clone();
        let stats = distribute_trailing_bn(&mut g2).unwrap();
        assert_eq!(stats.rewritten, 1);
        assert!(validate(&g2).is_empty());

        // on the skip path the pooling node now precedes the copied norm
        let (_, pool) = g2
            .iter_nodes()
            .find(|(_, n)| n.name == "b2.skip.pool")
            .unwrap();
        let pool_out = pool.output;
        let consumers = g2.consumers(pool_out);
        assert_eq!(consumers.len(), 1);
        let bn_copy = g2.node(consumers[0]);
        assert!(matches!(bn_copy.op, OpKind::BatchNorm(_)));
        assert!(bn_copy.name.ends_with(".skip"));
        // and the copy feeds the skip conv
        let conv = g2.consumers(bn_copy.output);
        assert_eq!(g2.node(conv[0]).name, "b2.skip.conv");
    }

    #[test]
    fn identity_norm_distribution_is_bit_exact() {
        // identity norm params: moving them around cannot change anything
        let mut g = two_blocks(BlockKind::Normal);
        let ids: Vec<usize> = g.node_ids().collect();
        for id in ids {
            if let OpKind::BatchNorm(bn) = &g.node(id).op {
                let c = bn.channels();
                let fresh = BnParams::identity(c);
                if let OpKind::BatchNorm(bn) = &mut g.node_mut(id).op {
                    *bn = fresh;
                }
            }
        }
        let input = random_input(&[8, 8, 8], 5, 8);
        let xs: Vec<f64> = input.iter().map(|&x| x as f64).collect();
        let before = reference_forward(&g, &xs).unwrap();
        let mut g2 = g.clone();
        distribute_trailing_bn(&mut g2).unwrap();
        let after = reference_forward(&g2, &xs).unwrap();
        assert_eq!(before.output, after.output);
    }

    #[test]
    fn random_model_output_is_preserved() {
        let g = random_init(build_neuroblend20(10).unwrap(), 3).unwrap();
        let input = random_input(&[3, 32, 32], 33, 8);
        let xs: Vec<f64> = input.iter().map(|&x| x as f64).collect();
        let before = reference_forward(&g, &xs).unwrap();
        let mut g2 = g.clone();
        let stats = distribute_trailing_bn(&mut g2).unwrap();
        // stem norm + 8 block-ending norms feed block entries; the last
        // block's trailing norm feeds the pooling head and stays put
        assert_eq!(stats.rewritten, 9);
        assert!(validate(&g2).is_empty());
        let after = reference_forward(&g2, &xs).unwrap();
        let report = crate::oracle::compare(&before.output, &after.output).unwrap();
        assert!(report.max_abs_diff <= 1e-5, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn non_matching_fanout_is_skipped_and_reported() {
        // norm feeding two signs: consumer count is 2 but roles are wrong
        let mut g = Graph::new("skip", 0);
        let input = g.add_input("input", DType::Real, vec![4]);
        let bn = g
            .add_node("bn", OpKind::BatchNorm(BnParams::identity(4)), vec![input])
            .unwrap();
        let s1 = g.add_node("s1", OpKind::SignFn, vec![bn]).unwrap();
        let s2 = g.add_node("s2", OpKind::SignFn, vec![bn]).unwrap();
        g.set_output("a", s1);
        g.set_output("b", s2);
        let mut g2 = g.clone();
        let stats = distribute_trailing_bn(&mut g2).unwrap();
        assert_eq!(stats.rewritten, 0);
        assert_eq!(stats.skipped, 1);
        assert_eq!(g2.node_count(), 3);
    }
}
