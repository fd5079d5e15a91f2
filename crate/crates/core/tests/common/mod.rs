//! Reference computations shared by the integration tests.

use maskconnect::blocks::Block;
use maskconnect::graph::{ModuleGraph, NodeKind, ShortcutKind};
use maskconnect::tensor::{self, Mode, Tensor};

fn block<'a>(g: &'a ModuleGraph, name: &str) -> &'a Block {
    g.nodes
        .iter()
        .find_map(|n| match &n.kind {
            NodeKind::Block { block, .. } if n.name == name => Some(block),
            _ => None,
        })
        .unwrap_or_else(|| panic!("no block {name}"))
}

fn stem(g: &mut ModuleGraph, x: &Tensor, mode: Mode) -> Tensor {
    let NodeKind::Stem { layer } = &mut g.nodes[1].kind else { panic!("node 1 is the stem") };
    tensor::relu(&layer.forward(x, mode).unwrap().0)
}

fn head(g: &ModuleGraph, features: &Tensor) -> Tensor {
    let pooled = tensor::global_avg_pool(features).unwrap();
    tensor::linear(&pooled, &g.head.weight, &g.head.bias).unwrap()
}

/// Stem, blocks one after another, pooling and head.
pub fn plain_chain(g: &ModuleGraph, x: &Tensor, mode: Mode) -> Tensor {
    let mut g = g.clone();
    let mut h = stem(&mut g, x, mode);
    for j in 0..g.spec.num_modules {
        let mut b = block(&g, &format!("b{j}")).clone();
        h = b.forward(&h, mode).unwrap().0;
    }
    head(&g, &h)
}

/// `x ← ReLU(shortcut(x) + Σ_j F_j(x))` per module, all branches reading the
/// same input.
pub fn multi_branch(g: &ModuleGraph, x: &Tensor, mode: Mode) -> Tensor {
    let mut g = g.clone();
    let mut h = stem(&mut g, x, mode);
    let mut projection = 0;
    for i in 0..g.spec.num_modules {
        let outs: Vec<Tensor> = (0..g.spec.cardinality)
            .map(|j| block(&g, &format!("m{i}.b{j}")).clone().forward(&h, mode).unwrap().0)
            .collect();
        let spec = block(&g, &format!("m{i}.b0")).spec;
        let mut sum = if spec.in_channels != spec.out_channels || spec.stride != 1 {
            match g.spec.shortcut {
                ShortcutKind::Projection => {
                    projection += 1;
                    g.projections[projection - 1].forward(&h, mode).unwrap().0
                }
                ShortcutKind::ZeroPad => maskconnect::blocks::shortcut(&h, spec.stride, spec.out_channels).unwrap(),
            }
        } else {
            h.clone()
        };
        for o in &outs {
            sum = tensor::add(&sum, o).unwrap();
        }
        h = tensor::relu(&sum);
    }
    head(&g, &h)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
