use super::{effective_mask, ModuleGraph, NodeKind};
use crate::blocks::{BlockCache, ConvBnCache, ParamMut};
use crate::connectivity::{aggregate, mask_gradient, Adapter};
use crate::error::{Error, Result};
use crate::tensor::{self, Mode, Tensor, XentOutput};

enum Cache {
    None,
    Stem { layer: ConvBnCache, pre: Tensor },
    Block(BlockCache),
    Projection(ConvBnCache),
    Adapter,
    Aggregate { active: Vec<bool>, pre: Option<Tensor> },
}

/// Values and caches of one forward pass, consumed by
/// [`ModuleGraph::backward`].
pub struct Forward {
    values: Vec<Tensor>,
    caches: Vec<Cache>,
    pooled: Tensor,
    pub logits: Tensor,
}

impl Forward {
    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }
}

impl ModuleGraph {
    /// Runs every node in order with the current binary masks (train mode)
    /// or frozen / top-`K` masks (eval mode).
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Forward> {
        let expected = [
            batch.shape().first().copied().unwrap_or(0),
            self.spec.in_channels,
            self.spec.image_size,
            self.spec.image_size,
        ];
        if batch.shape() != expected {
            return Err(Error::shape("graph input", &expected, batch.shape()));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in self.nodes.iter_mut() {
            let (v, c) = match &mut node.kind {
                NodeKind::Input => (batch.clone(), Cache::None),
                NodeKind::Stem { layer } => {
                    let (pre, cache) = layer.forward(&values[0], mode)?;
                    (tensor::relu(&pre), Cache::Stem { layer: cache, pre })
                }
                NodeKind::Block { block, input, .. } => {
                    let (y, cache) = block.forward(&values[*input], mode)?;
                    (y, Cache::Block(cache))
                }
                NodeKind::Shortcut {
                    input,
                    projection,
                    adapter,
                } => match projection {
                    Some(p) => {
                        let (y, cache) = self.projections[*p].forward(&values[*input], mode)?;
                        (y, Cache::Projection(cache))
                    }
                    None => (adapter.apply(&values[*input])?, Cache::Adapter),
                },
                NodeKind::Aggregate {
                    candidates,
                    adapters,
                    mask,
                    identity,
                    relu,
                    ..
                } => {
                    let active = effective_mask(mask, mode);
                    if active.iter().filter(|&&a| a).count() != mask.fan_in() {
                        return Err(Error::InvalidSpec(format!(
                            "mask at {} has no sampled selection",
                            node.name
                        )));
                    }
                    let producers: Vec<&Tensor> = candidates.iter().map(|&c| &values[c]).collect();
                    let sum = aggregate(&active, &producers, adapters, identity.map(|i| &values[i]))?;
                    if *relu {
                        (tensor::relu(&sum), Cache::Aggregate { active, pre: Some(sum) })
                    } else {
                        (sum, Cache::Aggregate { active, pre: None })
                    }
                }
            };
            values.push(v);
            caches.push(c);
        }
        let pooled = tensor::global_avg_pool(&values[self.output])?;
        let logits = tensor::linear(&pooled, &self.head.weight, &self.head.bias)?;
        Ok(Forward {
            values,
            caches,
            pooled,
            logits,
        })
    }

    /// Forward pass plus mean cross-entropy against `labels`.
    pub fn forward_loss(&mut self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<(Forward, XentOutput)> {
        let fwd = self.forward(batch, mode)?;
        let xent = tensor::softmax_xent(&fwd.logits, labels)?;
        Ok((fwd, xent))
    }

    /// Reverse pass from the logit gradient. Accumulates into every
    /// parameter gradient and, for unfrozen masks, into the per-candidate
    /// mask gradients.
    pub fn backward(&mut self, fwd: &Forward, grad_logits: &Tensor) -> Result<()> {
        let lin = tensor::linear_backward(&fwd.pooled, &self.head.weight, grad_logits)?;
        self.head.weight.accumulate_grad(&lin.weight)?;
        self.head.bias.accumulate_grad(&lin.bias)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(tensor::global_avg_pool_backward(
            fwd.values[self.output].shape(),
            &lin.input,
        )?);
        let add_to = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| -> Result<()> {
            grads[id] = Some(match grads[id].take() {
                None => g,
                Some(prev) => tensor::add(&prev, &g)?,
            });
            Ok(())
        };
        for i in (1..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match (&mut self.nodes[i].kind, &fwd.caches[i]) {
                (NodeKind::Stem { layer }, Cache::Stem { layer: cache, pre }) => {
                    let g = tensor::relu_backward(pre, &g)?;
                    layer.backward(cache, &g)?;
                }
                (NodeKind::Block { block, input, .. }, Cache::Block(cache)) => {
                    let gi = block.backward(cache, &g)?;
                    add_to(&mut grads, *input, gi)?;
                }
                (NodeKind::Shortcut { input, projection, .. }, Cache::Projection(cache)) => {
                    let p = projection.expect("projection cache");
                    let gi = self.projections[p].backward(cache, &g)?;
                    add_to(&mut grads, *input, gi)?;
                }
                (NodeKind::Shortcut { input, adapter, .. }, Cache::Adapter) => {
                    let gi = adapter.backward(fwd.values[*input].shape(), &g)?;
                    add_to(&mut grads, *input, gi)?;
                }
                (
                    NodeKind::Aggregate {
                        candidates,
                        adapters,
                        mask,
                        identity,
                        mask_grad,
                        ..
                    },
                    Cache::Aggregate { active, pre },
                ) => {
                    let g = match pre {
                        Some(pre) => tensor::relu_backward(pre, &g)?,
                        None => g,
                    };
                    if !mask.is_frozen() {
                        if mask_grad.len() != candidates.len() {
                            *mask_grad = vec![0.0; candidates.len()];
                        }
                        for (k, (&c, a)) in candidates.iter().zip(adapters.iter()).enumerate() {
                            mask_grad[k] += mask_gradient(&g, &a.apply(&fwd.values[c])?)?;
                        }
                    }
                    if let Some(id) = identity {
                        add_to(&mut grads, *id, g.clone())?;
                    }
                    for ((&c, a), &on) in candidates.iter().zip(adapters.iter()).zip(active) {
                        if on {
                            add_to(&mut grads, c, backward_adapter(a, &fwd.values[c], &g)?)?;
                        }
                    }
                }
                _ => return Err(Error::InvalidSpec("forward cache does not match graph".into())),
            }
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order: stem, trainable blocks,
    /// projections, head.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for n in self.nodes.iter_mut() {
            match &mut n.kind {
                NodeKind::Stem { layer } if self.stem_trainable => out.extend(layer.params_mut()),
                NodeKind::Block {
                    block, trainable: true, ..
                } => out.extend(block.params_mut()),
                _ => {}
            }
        }
        for p in self.projections.iter_mut() {
            out.extend(p.params_mut());
        }
        out.push(ParamMut {
            tensor: &mut self.head.weight,
            decay: true,
        });
        out.push(ParamMut {
            tensor: &mut self.head.bias,
            decay: false,
        });
        out
    }

    /// Clears parameter gradients (frozen blocks included) and mask
    /// gradients.
    pub fn zero_grad(&mut self) {
        for n in self.nodes.iter_mut() {
            match &mut n.kind {
                NodeKind::Stem { layer } => layer.params_mut().into_iter().for_each(|p| p.tensor.zero_grad()),
                NodeKind::Block { block, .. } => block.zero_grad(),
                NodeKind::Aggregate { mask_grad, candidates, .. } => *mask_grad = vec![0.0; candidates.len()],
                _ => {}
            }
        }
        for p in self.projections.iter_mut() {
            p.params_mut().into_iter().for_each(|p| p.tensor.zero_grad());
        }
        self.head.weight.zero_grad();
        self.head.bias.zero_grad();
    }

    /// Accumulated mask gradient per aggregate node, in node order.
    pub fn mask_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Aggregate { mask_grad, .. } => Some((n.name.clone(), mask_grad.clone())),
                _ => None,
            })
            .collect()
    }

    /// Logits in eval mode, in batches of at most `chunk` samples.
    pub fn predict(&mut self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.spec.num_classes);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            let fwd = self.forward(&images.gather(&idx), Mode::Eval)?;
            out.extend_from_slice(fwd.logits.data());
            start += idx.len();
        }
        Tensor::from_vec(&[n, self.spec.num_classes], out)
    }
}

fn backward_adapter(a: &Adapter, input: &Tensor, g: &Tensor) -> Result<Tensor> {
    a.backward(input.shape(), g)
}
