use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchSpec, ConnectivityMode, Family, Head, ModuleGraph, Node, NodeKind, ShortcutKind, ValueId};
use crate::blocks::{Block, BlockKind, BlockSpec, ConvBn, ConvShape};
use crate::connectivity::{Adapter, MaskState};
use crate::error::Result;
use crate::tensor::Tensor;

/// Builds the graph described by `spec`, drawing weights from `rng`.
pub fn build<R: Rng + ?Sized>(spec: &ArchSpec, rng: &mut R) -> Result<ModuleGraph> {
    match spec.family {
        Family::Resnet => build_resnet_masked(spec, rng),
        Family::Resnext => build_resnext_masked(spec, rng),
    }
}

/// Per-stage layout: output channels, bottleneck width, spatial extent.
fn stage_dims(spec: &ArchSpec, stage: usize) -> (usize, usize, usize) {
    let scale = 1 << stage;
    let size = spec.image_size / scale;
    match (spec.family, spec.block) {
        (super::Family::Resnet, BlockKind::Basic) => (spec.stem_channels * scale, 0, size),
        (super::Family::Resnet, BlockKind::Bottleneck) => {
            (4 * spec.stem_channels * scale, spec.stem_channels * scale, size)
        }
        (super::Family::Resnext, _) => (4 * spec.stem_channels * scale, spec.width * scale, size),
    }
}

struct Builder {
    nodes: Vec<Node>,
    /// Per-sample `[1, C, H, W]` shape of every value.
    shapes: Vec<[usize; 4]>,
    mask_rng: Option<ChaCha8Rng>,
}

impl Builder {
    fn new<R: Rng + ?Sized>(spec: &ArchSpec, rng: &mut R) -> (Self, ValueId) {
        let stem = ConvBn::init(
            ConvShape {
                out_channels: spec.stem_channels,
                in_channels: spec.in_channels,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            rng,
        );
        let s = spec.image_size;
        let b = Builder {
            nodes: vec![
                Node {
                    name: "input".into(),
                    kind: NodeKind::Input,
                },
                Node {
                    name: "stem".into(),
                    kind: NodeKind::Stem { layer: stem },
                },
            ],
            shapes: vec![[1, spec.in_channels, s, s], [1, spec.stem_channels, s, s]],
            mask_rng: match spec.connectivity {
                ConnectivityMode::FixedRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
                _ => None,
            },
        };
        (b, 1)
    }

    fn push(&mut self, name: String, kind: NodeKind, shape: [usize; 4]) -> ValueId {
        self.nodes.push(Node { name, kind });
        self.shapes.push(shape);
        self.nodes.len() - 1
    }

    fn push_block<R: Rng + ?Sized>(
        &mut self,
        name: String,
        id: usize,
        spec: BlockSpec,
        input: ValueId,
        rng: &mut R,
    ) -> Result<ValueId> {
        let shape = spec.output_shape(&self.shapes[input])?;
        let block = Block::init(spec, rng)?;
        Ok(self.push(
            name,
            NodeKind::Block {
                id,
                block,
                input,
                trainable: true,
            },
            shape,
        ))
    }

    /// Mask over `e` candidates for the connectivity mode; `prev` is the
    /// candidate a plain chain would use.
    fn mask(&mut self, mode: ConnectivityMode, e: usize, k: usize, prev: usize) -> Result<MaskState> {
        let k = k.min(e);
        match mode {
            ConnectivityMode::Learned => MaskState::new(e, k),
            ConnectivityMode::FixedFull => MaskState::fixed(vec![true; e]),
            ConnectivityMode::FixedPrev => {
                let mut b = vec![false; e];
                b[prev] = true;
                MaskState::fixed(b)
            }
            ConnectivityMode::FixedRandom { .. } => {
                let rng = self.mask_rng.as_mut().expect("fixed_random mask rng");
                let mut b = vec![false; e];
                for i in index::sample(rng, e, k) {
                    b[i] = true;
                }
                MaskState::fixed(b)
            }
        }
    }

    fn aggregate(
        &mut self,
        name: String,
        consumer: String,
        candidates: Vec<ValueId>,
        mask: MaskState,
        identity: Option<ValueId>,
        relu: bool,
        target: [usize; 4],
    ) -> Result<ValueId> {
        let adapters = candidates
            .iter()
            .map(|&c| Adapter::between(&self.shapes[c], &target))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(
            name,
            NodeKind::Aggregate {
                consumer,
                candidates,
                adapters,
                mask,
                identity,
                relu,
                mask_grad: Vec::new(),
            },
            target,
        ))
    }

    fn finish<R: Rng + ?Sized>(
        self,
        spec: &ArchSpec,
        projections: Vec<ConvBn>,
        output: ValueId,
        rng: &mut R,
    ) -> ModuleGraph {
        let features = self.shapes[output][1];
        let bound = 1.0 / (features as f64).sqrt();
        ModuleGraph {
            spec: spec.clone(),
            nodes: self.nodes,
            projections,
            output,
            head: Head {
                weight: Tensor::uniform(&[spec.num_classes, features], -bound, bound, rng),
                bias: Tensor::zeros(&[spec.num_classes]),
            },
            stem_trainable: true,
        }
    }
}

/// ResNet stack where block `j` reads a masked sum over the outputs of all
/// earlier blocks, adapted to its input shape.
pub fn build_resnet_masked<R: Rng + ?Sized>(spec: &ArchSpec, rng: &mut R) -> Result<ModuleGraph> {
    spec.validate()?;
    let (mut b, stem) = Builder::new(spec, rng);
    let per_stage = spec.num_modules / spec.stages;
    let mut blocks: Vec<ValueId> = Vec::with_capacity(spec.num_modules);
    let mut in_channels = spec.stem_channels;
    for j in 0..spec.num_modules {
        let stage = j / per_stage;
        let (out, width, _) = stage_dims(spec, stage);
        let stride = if stage > 0 && j % per_stage == 0 { 2 } else { 1 };
        let block_spec = match spec.block {
            BlockKind::Basic => BlockSpec::basic(in_channels, out, stride),
            BlockKind::Bottleneck => BlockSpec::bottleneck(in_channels, width, out, stride),
        };
        let input = if j == 0 {
            stem
        } else {
            let prev = blocks[j - 1];
            let target = b.shapes[prev];
            let mask = b.mask(spec.connectivity, j, spec.fan_in, j - 1)?;
            b.aggregate(
                format!("in:b{j}"),
                format!("b{j}"),
                blocks.clone(),
                mask,
                None,
                false,
                target,
            )?
        };
        blocks.push(b.push_block(format!("b{j}"), j, block_spec, input, rng)?);
        in_channels = out;
    }
    let output = *blocks.last().expect("at least one block");
    Ok(b.finish(spec, Vec::new(), output, rng))
}

/// ResNeXt stack of `L` modules with `C` bottleneck branches each. Branch
/// `j` of module `i > 0` reads the ReLU of its own lane's shortcut plus a
/// masked sum over the branch outputs of module `i - 1`. The head reads the
/// full sum of the last module's branches plus lane 0's shortcut.
pub fn build_resnext_masked<R: Rng + ?Sized>(spec: &ArchSpec, rng: &mut R) -> Result<ModuleGraph> {
    spec.validate()?;
    let (mut b, stem) = Builder::new(spec, rng);
    let per_stage = spec.num_modules / spec.stages;
    let c = spec.cardinality;
    let mut projections = Vec::new();
    let mut lanes: Vec<ValueId> = vec![stem; c];
    let mut in_channels = spec.stem_channels;
    let mut output = stem;
    let mut block_id = 0;
    for i in 0..spec.num_modules {
        let stage = i / per_stage;
        let (out, width, _) = stage_dims(spec, stage);
        let stride = if stage > 0 && i % per_stage == 0 { 2 } else { 1 };
        let mut branches = Vec::with_capacity(c);
        for (j, &lane) in lanes.iter().enumerate() {
            let bs = BlockSpec::branch(in_channels, width, out, stride);
            branches.push(b.push_block(format!("m{i}.b{j}"), block_id, bs, lane, rng)?);
            block_id += 1;
        }
        let target = b.shapes[branches[0]];
        let reshapes = in_channels != out || stride != 1;
        let projection = if reshapes && spec.shortcut == ShortcutKind::Projection {
            projections.push(ConvBn::init(
                ConvShape {
                    out_channels: out,
                    in_channels,
                    kernel: 1,
                    stride,
                    pad: 0,
                },
                rng,
            ));
            Some(projections.len() - 1)
        } else {
            None
        };
        let adapter = Adapter {
            factor: stride,
            in_channels,
            out_channels: out,
        };
        let mut shortcuts: HashMap<ValueId, ValueId> = HashMap::new();
        let mut shortcut_of = |b: &mut Builder, src: ValueId| -> ValueId {
            if !reshapes {
                return src;
            }
            *shortcuts.entry(src).or_insert_with(|| {
                b.push(
                    format!("sc:{}", b.nodes[src].name),
                    NodeKind::Shortcut {
                        input: src,
                        projection,
                        adapter,
                    },
                    target,
                )
            })
        };
        if i + 1 < spec.num_modules {
            let mut next = Vec::with_capacity(c);
            for (j, &lane) in lanes.iter().enumerate() {
                let identity = shortcut_of(&mut b, lane);
                let mask = b.mask(spec.connectivity, c, spec.fan_in, j)?;
                next.push(b.aggregate(
                    format!("m{}.in{j}", i + 1),
                    format!("m{}.b{j}", i + 1),
                    branches.clone(),
                    mask,
                    Some(identity),
                    true,
                    target,
                )?);
            }
            lanes = next;
        } else {
            let identity = shortcut_of(&mut b, lanes[0]);
            output = b.aggregate(
                "out".into(),
                "head".into(),
                branches.clone(),
                MaskState::fixed(vec![true; c])?,
                Some(identity),
                true,
                target,
            )?;
        }
        in_channels = out;
    }
    Ok(b.finish(spec, projections, output, rng))
}
