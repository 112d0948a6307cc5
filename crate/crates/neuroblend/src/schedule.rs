//! Static scheduling: topological node order plus buffer liveness.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ir::{Graph, NodeId, Producer, ValueId};

/// Liveness range of one value in schedule positions. `def` is the
/// position of the producing step (None for graph inputs, live from the
/// start); `last_use` is the last consuming position, extended to the end
/// of the schedule for graph outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Liveness {
    pub value: ValueId,
    pub def: Option<usize>,
    pub last_use: usize,
}

/// Deterministic execution order for a graph: every node appears exactly
/// once after all of its producers, ties broken by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub order: Vec<NodeId>,
    pub liveness: Vec<Liveness>,
}

impl Schedule {
    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.order.iter().position(|&n| n == node)
    }
}

/// Compute the static schedule. Fails with `Error::Cycle` on cyclic graphs.
pub fn topo_schedule(graph: &Graph) -> Result<Schedule> {
    let order = graph.topo_order()?;
    let mut position = vec![usize::MAX; order.len().max(graph.node_ids().map(|i| i + 1).max().unwrap_or(0))];
    for (pos, &id) in order.iter().enumerate() {
        position[id] = pos;
    }

    let end = order.len();
    let mut liveness = Vec::new();
    for vid in 0..graph.value_count() {
        let info = graph.value(vid);
        let def = match info.producer {
            Producer::GraphInput(_) => None,
            Producer::Node(n) => Some(position.get(n).copied().unwrap_or(usize::MAX)),
        };
        let mut last = def.unwrap_or(0);
        for consumer in graph.consumers(vid) {
            last = last.max(position[consumer]);
        }
        if graph.is_graph_output(vid) {
            last = end;
        }
        liveness.push(Liveness {
            value: vid,
            def,
            last_use: last,
        });
    }
    Ok(Schedule { order, liveness })
}
