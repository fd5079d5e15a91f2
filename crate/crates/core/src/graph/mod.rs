//! Masked module graphs: a stem, a topologically ordered list of nodes, and
//! a pooled linear head.

mod build;
mod checkpoint;
mod exec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use exec::Forward;

use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockKind, ConvBn};
use crate::connectivity::{Adapter, MaskState};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor};

/// Index of a node, which is also the index of the value it produces.
pub type ValueId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet,
    Resnext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityMode {
    Learned,
    FixedPrev,
    FixedRandom { seed: u64 },
    FixedFull,
}

/// Module-level shortcut used by ResNeXt stacks where a module changes shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    /// 1×1 strided convolution plus batch norm, shared by all lanes.
    Projection,
    /// Average-downsample then zero-pad channels.
    ZeroPad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    /// Residual blocks (ResNet) or multi-branch modules (ResNeXt).
    pub num_modules: usize,
    /// Block type for ResNet stacks; ResNeXt branches are always bottlenecks.
    pub block: BlockKind,
    pub cardinality: usize,
    /// Bottleneck width of the first stage; doubles per stage.
    pub width: usize,
    pub fan_in: usize,
    pub num_classes: usize,
    pub connectivity: ConnectivityMode,
    pub stem_channels: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub stages: usize,
    pub shortcut: ShortcutKind,
}

impl ArchSpec {
    /// CIFAR-style ResNet of `num_blocks` basic blocks over three stages.
    pub fn resnet(num_blocks: usize, fan_in: usize, num_classes: usize) -> Self {
        ArchSpec {
            family: Family::Resnet,
            num_modules: num_blocks,
            block: BlockKind::Basic,
            cardinality: 1,
            width: 0,
            fan_in,
            num_classes,
            connectivity: ConnectivityMode::Learned,
            stem_channels: 16,
            in_channels: 3,
            image_size: 32,
            stages: 3,
            shortcut: ShortcutKind::ZeroPad,
        }
    }

    /// CIFAR-style ResNeXt `{depth, width, cardinality}`.
    pub fn resnext(depth: usize, width: usize, cardinality: usize, fan_in: usize, num_classes: usize) -> Result<Self> {
        if depth < 5 || !(depth - 2).is_multiple_of(3) {
            return Err(Error::InvalidSpec(format!("ResNeXt depth {depth} is not 2 + 3L")));
        }
        Ok(ArchSpec {
            family: Family::Resnext,
            num_modules: (depth - 2) / 3,
            block: BlockKind::Bottleneck,
            cardinality,
            width,
            fan_in,
            num_classes,
            connectivity: ConnectivityMode::Learned,
            stem_channels: if width >= 64 { 64 } else { 16 },
            in_channels: 3,
            image_size: 32,
            stages: 3,
            shortcut: ShortcutKind::Projection,
        })
    }

    pub fn with_connectivity(mut self, mode: ConnectivityMode) -> Self {
        self.connectivity = mode;
        self
    }

    pub fn depth(&self) -> usize {
        match (self.family, self.block) {
            (Family::Resnet, BlockKind::Basic) => 2 + 2 * self.num_modules,
            _ => 2 + 3 * self.num_modules,
        }
    }

    /// Largest candidate count of any learnable mask.
    pub fn max_candidates(&self) -> usize {
        match self.family {
            Family::Resnet => self.num_modules.saturating_sub(1),
            Family::Resnext => self.cardinality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_modules == 0 || self.stages == 0 || !self.num_modules.is_multiple_of(self.stages) {
            return bad(format!(
                "{} modules do not split evenly into {} stages",
                self.num_modules, self.stages
            ));
        }
        if self.num_classes == 0 || self.stem_channels == 0 || self.in_channels == 0 {
            return bad("classes and channel counts must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (self.stages - 1)) {
            return bad(format!(
                "image size {} not divisible across {} stages",
                self.image_size, self.stages
            ));
        }
        if self.family == Family::Resnext {
            if self.cardinality == 0 || self.width == 0 {
                return bad("ResNeXt needs cardinality and width >= 1".into());
            }
            if self.block != BlockKind::Bottleneck {
                return bad("ResNeXt branches are bottleneck blocks".into());
            }
            if self.connectivity == ConnectivityMode::FixedPrev {
                return bad("fixed_prev is defined for ResNet stacks only".into());
            }
        }
        if matches!(self.connectivity, ConnectivityMode::Learned | ConnectivityMode::FixedRandom { .. }) {
            let e = self.max_candidates();
            if e > 0 && (self.fan_in == 0 || self.fan_in > e) {
                return bad(format!("fan-in {} outside 1..={e}", self.fan_in));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    /// The network input.
    Input,
    /// 3×3 convolution, batch norm, ReLU.
    Stem { layer: ConvBn },
    Block {
        id: usize,
        block: Block,
        input: ValueId,
        trainable: bool,
    },
    /// Module-level shortcut: a shared projection or a parameter-free adapter.
    Shortcut {
        input: ValueId,
        projection: Option<usize>,
        adapter: Adapter,
    },
    /// Masked sum of candidate producers, plus an optional always-on
    /// identity term and an optional trailing ReLU.
    Aggregate {
        consumer: String,
        candidates: Vec<ValueId>,
        adapters: Vec<Adapter>,
        mask: MaskState,
        identity: Option<ValueId>,
        relu: bool,
        #[serde(skip)]
        mask_grad: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

impl Node {
    /// Values this node reads, ignoring inactive mask candidates.
    pub fn inputs(&self, view: Mode) -> Vec<ValueId> {
        match &self.kind {
            NodeKind::Input => vec![],
            NodeKind::Stem { .. } => vec![0],
            NodeKind::Block { input, .. } | NodeKind::Shortcut { input, .. } => vec![*input],
            NodeKind::Aggregate {
                candidates,
                mask,
                identity,
                ..
            } => {
                let active = effective_mask(mask, view);
                identity
                    .iter()
                    .copied()
                    .chain(candidates.iter().zip(active).filter(|(_, on)| *on).map(|(&c, _)| c))
                    .collect()
            }
        }
    }
}

/// The binary mask the forward pass uses: sampled or frozen in train mode,
/// top-`K` of the real mask for unfrozen masks in eval mode.
pub(crate) fn effective_mask(mask: &MaskState, mode: Mode) -> Vec<bool> {
    if mode == Mode::Eval && !mask.is_frozen() {
        mask.top_k()
    } else {
        mask.binary().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleGraph {
    pub spec: ArchSpec,
    pub nodes: Vec<Node>,
    pub projections: Vec<ConvBn>,
    /// Value fed to global pooling and the head.
    pub output: ValueId,
    pub head: Head,
    /// Whether SGD updates the stem.
    pub stem_trainable: bool,
}

impl ModuleGraph {
    pub fn block_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Block { .. }))
            .count()
    }

    pub fn block_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Block { id, .. } => Some(id),
                _ => None,
            })
            .collect()
    }

    pub fn masks(&self) -> impl Iterator<Item = (&Node, &MaskState)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Aggregate { mask, .. } => Some((n, mask)),
            _ => None,
        })
    }

    pub fn masks_mut(&mut self) -> impl Iterator<Item = &mut MaskState> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.kind {
            NodeKind::Aggregate { mask, .. } => Some(mask),
            _ => None,
        })
    }

    /// The mask feeding `consumer`.
    pub fn mask_mut(&mut self, consumer: &str) -> Option<&mut MaskState> {
        self.nodes.iter_mut().find_map(|n| match &mut n.kind {
            NodeKind::Aggregate { consumer: c, mask, .. } if c == consumer => Some(mask),
            _ => None,
        })
    }

    /// Whether every mask is frozen.
    pub fn masks_frozen(&self) -> bool {
        self.masks().all(|(_, m)| m.is_frozen())
    }

    pub fn sample_masks<R: rand::Rng + ?Sized>(&mut self, rng: &mut R) {
        for m in self.masks_mut() {
            m.sample_binary(rng);
        }
    }

    pub fn freeze_masks(&mut self) {
        for m in self.masks_mut() {
            m.freeze_topk();
        }
    }

    /// Applies the accumulated mask gradients to every unfrozen mask. On a
    /// non-finite gradient no mask is changed.
    pub fn update_masks(&mut self, lr: f64) -> Result<()> {
        for n in &self.nodes {
            if let NodeKind::Aggregate { mask, mask_grad, .. } = &n.kind {
                if !mask.is_frozen() && mask_grad.iter().any(|g| !g.is_finite()) {
                    log::warn!("non-finite mask gradient at {}; mask step skipped", n.name);
                    return Err(Error::NonFinite(format!("mask gradient at {}", n.name)));
                }
            }
        }
        for n in &mut self.nodes {
            if let NodeKind::Aggregate { mask, mask_grad, .. } = &mut n.kind {
                if !mask.is_frozen() && mask_grad.len() == mask.candidates() {
                    mask.update(mask_grad, lr)?;
                }
            }
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, block_id: usize, value: bool) -> Result<()> {
        for n in &mut self.nodes {
            if let NodeKind::Block { id, trainable, .. } = &mut n.kind {
                if *id == block_id {
                    *trainable = value;
                    return Ok(());
                }
            }
        }
        Err(Error::InvalidSpec(format!("no block with id {block_id}")))
    }

    pub fn block_mut(&mut self, block_id: usize) -> Option<&mut Block> {
        self.nodes.iter_mut().find_map(|n| match &mut n.kind {
            NodeKind::Block { id, block, .. } if *id == block_id => Some(block),
            _ => None,
        })
    }

    /// Nodes on some path to the output under the given mask view.
    pub fn live_nodes(&self, view: Mode) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        live[self.output] = true;
        for i in (0..self.nodes.len()).rev() {
            if live[i] {
                for j in self.nodes[i].inputs(view) {
                    live[j] = true;
                }
            }
        }
        live
    }

    /// Learnable parameters: convolutions, batch-norm affines, head.
    pub fn param_count(&self) -> usize {
        self.count_params(&vec![true; self.nodes.len()])
    }

    /// Parameters on live paths under the eval-mode mask view.
    pub fn effective_param_count(&self) -> usize {
        self.count_params(&self.live_nodes(Mode::Eval))
    }

    /// Blocks on live paths under the eval-mode mask view.
    pub fn active_blocks(&self) -> usize {
        let live = self.live_nodes(Mode::Eval);
        self.nodes
            .iter()
            .zip(&live)
            .filter(|(n, &l)| l && matches!(n.kind, NodeKind::Block { .. }))
            .count()
    }

    fn count_params(&self, live: &[bool]) -> usize {
        let mut total = self.head.weight.len() + self.head.bias.len();
        let mut used_proj = vec![false; self.projections.len()];
        for (n, &l) in self.nodes.iter().zip(live) {
            if !l {
                continue;
            }
            match &n.kind {
                NodeKind::Stem { layer } => total += layer.param_count(),
                NodeKind::Block { block, .. } => total += block.param_count(),
                NodeKind::Shortcut {
                    projection: Some(p), ..
                } => used_proj[*p] = true,
                _ => {}
            }
        }
        total
            + self
                .projections
                .iter()
                .zip(used_proj)
                .filter(|(_, u)| *u)
                .map(|(p, _)| p.param_count())
                .sum::<usize>()
    }
}

pub use build::{build, build_resnet_masked, build_resnext_masked};
