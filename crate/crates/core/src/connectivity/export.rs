use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::graph::{ModuleGraph, NodeKind};
use crate::tensor::Mode;

/// One consumer's connectivity as exported to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionRecord {
    pub consumer: String,
    pub producers: Vec<String>,
    pub real_mask: Vec<f64>,
    pub binary_mask: Vec<u8>,
}

/// Producer name for a candidate value: the block that produced it.
fn producer_name(graph: &ModuleGraph, id: usize) -> String {
    graph.nodes[id].name.clone()
}

pub fn connection_records(graph: &ModuleGraph) -> Vec<ConnectionRecord> {
    graph
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Aggregate {
                consumer,
                candidates,
                mask,
                ..
            } => Some(ConnectionRecord {
                consumer: consumer.clone(),
                producers: candidates.iter().map(|&c| producer_name(graph, c)).collect(),
                real_mask: mask.real().to_vec(),
                binary_mask: crate::graph::effective_mask(mask, Mode::Eval)
                    .into_iter()
                    .map(u8::from)
                    .collect(),
            }),
            _ => None,
        })
        .collect()
}

pub fn connectivity_json(graph: &ModuleGraph) -> String {
    serde_json::to_string_pretty(&connection_records(graph)).expect("records serialize")
}

/// Graphviz digraph: blocks as nodes, active connections as edges. Inputs
/// that bypass masks (block chains, stem, shortcuts) are drawn dashed.
pub fn connectivity_dot(graph: &ModuleGraph) -> String {
    let mut out = String::from("digraph connectivity {\n  rankdir=LR;\n  node [shape=box];\n");
    let live = graph.live_nodes(Mode::Eval);
    let _ = writeln!(out, "  \"stem\";");
    for (i, n) in graph.nodes.iter().enumerate() {
        if let NodeKind::Block { .. } = n.kind {
            let style = if live[i] { "" } else { " [style=dotted]" };
            let _ = writeln!(out, "  \"{}\"{style};", n.name);
        }
    }
    let _ = writeln!(out, "  \"head\" [shape=ellipse];");
    for rec in connection_records(graph) {
        for (p, &on) in rec.producers.iter().zip(&rec.binary_mask) {
            if on == 1 {
                let _ = writeln!(out, "  \"{p}\" -> \"{}\";", rec.consumer);
            }
        }
    }
    for n in &graph.nodes {
        if let NodeKind::Block { input, .. } = n.kind {
            if let NodeKind::Block { .. } | NodeKind::Stem { .. } = graph.nodes[input].kind {
                let _ = writeln!(out, "  \"{}\" -> \"{}\" [style=dashed];", graph.nodes[input].name, n.name);
            }
        }
    }
    if let NodeKind::Block { .. } = graph.nodes[graph.output].kind {
        let _ = writeln!(out, "  \"{}\" -> \"head\";", graph.nodes[graph.output].name);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build, ArchSpec, ConnectivityMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_prev_chain_export() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ArchSpec {
            image_size: 8,
            stages: 1,
            ..ArchSpec::resnet(3, 1, 4)
        }
        .with_connectivity(ConnectivityMode::FixedPrev);
        let g = build(&spec, &mut rng).unwrap();
        let recs = connection_records(&g);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].consumer, "b2");
        assert_eq!(recs[1].producers, vec!["b0", "b1"]);
        assert_eq!(recs[1].binary_mask, vec![0, 1]);
        let parsed: Vec<ConnectionRecord> = serde_json::from_str(&connectivity_json(&g)).unwrap();
        assert_eq!(parsed, recs);
        let dot = connectivity_dot(&g);
        assert!(dot.contains("\"b1\" -> \"b2\";"));
        assert!(!dot.contains("\"b0\" -> \"b2\";"));
        assert!(dot.contains("\"b2\" -> \"head\";"));
    }
}
