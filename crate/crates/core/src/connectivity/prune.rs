use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModuleGraph, Node, NodeKind};
use crate::tensor::Mode;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed_blocks: Vec<String>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Removes every node with no path to the output under the frozen masks,
/// together with unused projections and the dead candidates of surviving
/// masks. The network function is unchanged.
pub fn prune_unused(graph: ModuleGraph) -> Result<(ModuleGraph, PruneReport)> {
    if !graph.masks_frozen() {
        return Err(Error::InvalidSpec("pruning requires frozen masks".into()));
    }
    let params_before = graph.param_count();
    let live = graph.live_nodes(Mode::Eval);
    if !live[graph.output] || !live[0] {
        return Err(Error::InvalidSpec("output is disconnected from the input".into()));
    }
    let ModuleGraph {
        spec,
        nodes,
        projections,
        output,
        head,
        stem_trainable,
    } = graph;

    let mut remap = vec![usize::MAX; nodes.len()];
    let mut removed_blocks = Vec::new();
    let mut kept: Vec<Node> = Vec::new();
    for (i, node) in nodes.into_iter().enumerate() {
        if live[i] {
            remap[i] = kept.len();
            kept.push(node);
        } else if matches!(node.kind, NodeKind::Block { .. }) {
            removed_blocks.push(node.name);
        }
    }

    let mut proj_used = vec![false; projections.len()];
    for node in &kept {
        if let NodeKind::Shortcut {
            projection: Some(p), ..
        } = node.kind
        {
            proj_used[p] = true;
        }
    }
    let mut proj_remap = vec![usize::MAX; projections.len()];
    let mut kept_proj = Vec::new();
    for (p, layer) in projections.into_iter().enumerate() {
        if proj_used[p] {
            proj_remap[p] = kept_proj.len();
            kept_proj.push(layer);
        }
    }

    for node in &mut kept {
        match &mut node.kind {
            NodeKind::Input | NodeKind::Stem { .. } => {}
            NodeKind::Block { input, .. } => *input = remap[*input],
            NodeKind::Shortcut { input, projection, .. } => {
                *input = remap[*input];
                if let Some(p) = projection {
                    *p = proj_remap[*p];
                }
            }
            NodeKind::Aggregate {
                candidates,
                adapters,
                mask,
                identity,
                mask_grad,
                ..
            } => {
                let keep: Vec<bool> = candidates.iter().map(|&c| live[c]).collect();
                mask.retain(&keep)?;
                let mut k = keep.iter();
                adapters.retain(|_| *k.next().expect("aligned"));
                candidates.retain(|&c| live[c]);
                candidates.iter_mut().for_each(|c| *c = remap[*c]);
                if let Some(id) = identity {
                    *id = remap[*id];
                }
                mask_grad.clear();
            }
        }
    }

    let pruned = ModuleGraph {
        spec,
        nodes: kept,
        projections: kept_proj,
        output: remap[output],
        head,
        stem_trainable,
    };
    let report = PruneReport {
        removed_blocks,
        params_before,
        params_after: pruned.param_count(),
    };
    Ok((pruned, report))
}
