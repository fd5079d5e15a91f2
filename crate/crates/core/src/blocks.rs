//! Residual blocks `G(x) = ReLU(F(x) + shortcut(x))` and bare bottleneck
//! branches `F(x)`, the vertices of a module graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Mode, RunningStats, Tensor};

/// Mutable view of one learnable tensor, handed to the optimizer.
pub struct ParamMut<'a> {
    pub tensor: &'a mut Tensor,
    /// Whether weight decay applies (conv and linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce to `width`, 3×3 at `width`, 1×1 expand.
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Bottleneck width; unused by basic blocks.
    pub width: usize,
    pub stride: usize,
    /// Adds the parameter-free shortcut and a trailing ReLU. Basic blocks are
    /// always residual; ResNeXt branches are not.
    pub residual: bool,
}

/// One convolution layer of a block: output channels, input channels,
/// kernel size, stride, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl BlockSpec {
    pub fn basic(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Basic,
            in_channels,
            out_channels,
            width: out_channels,
            stride,
            residual: true,
        }
    }

    /// A ResNeXt branch: no internal shortcut, no trailing ReLU.
    pub fn branch(in_channels: usize, width: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Bottleneck,
            in_channels,
            out_channels,
            width,
            stride,
            residual: false,
        }
    }

    /// A residual bottleneck block (ResNet-50 style).
    pub fn bottleneck(in_channels: usize, width: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            residual: true,
            ..Self::branch(in_channels, width, out_channels, stride)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::InvalidSpec(format!("degenerate block {self:?}")));
        }
        if self.kind == BlockKind::Bottleneck && self.width == 0 {
            return Err(Error::InvalidSpec("bottleneck width must be >= 1".into()));
        }
        if self.residual && self.out_channels < self.in_channels {
            return Err(Error::InvalidSpec(format!(
                "zero-padding shortcut cannot shrink {} -> {} channels",
                self.in_channels, self.out_channels
            )));
        }
        if self.kind == BlockKind::Basic && !self.residual {
            return Err(Error::InvalidSpec("basic blocks are always residual".into()));
        }
        Ok(())
    }

    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        let conv = |out_channels, in_channels, kernel, stride| ConvShape {
            out_channels,
            in_channels,
            kernel,
            stride,
            pad: kernel / 2,
        };
        match self.kind {
            BlockKind::Basic => vec![
                conv(self.out_channels, self.in_channels, 3, self.stride),
                conv(self.out_channels, self.out_channels, 3, 1),
            ],
            BlockKind::Bottleneck => vec![
                conv(self.width, self.in_channels, 1, 1),
                conv(self.width, self.width, 3, self.stride),
                conv(self.out_channels, self.width, 1, 1),
            ],
        }
    }

    /// Conv weights only.
    pub fn conv_param_count(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|c| c.out_channels * c.in_channels * c.kernel * c.kernel)
            .sum()
    }

    /// Learnable parameters: conv weights plus BN scale and shift.
    pub fn param_count(&self) -> usize {
        self.conv_param_count()
            + self
                .conv_shapes()
                .iter()
                .map(|c| 2 * c.out_channels)
                .sum::<usize>()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input[..] else {
            return Err(Error::shape("block input", &[0, self.in_channels, 0, 0], input));
        };
        if c != self.in_channels {
            return Err(Error::shape("block input", &[n, self.in_channels, h, w], input));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::InvalidSpec(format!(
                "spatial extent {h}x{w} not divisible by stride {}",
                self.stride
            )));
        }
        Ok([n, self.out_channels, h / self.stride, w / self.stride])
    }
}

/// Batch-norm affine parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub stats: RunningStats,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }
}

/// A convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBn {
    pub filters: Tensor,
    pub bn: BnParams,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvBnCache {
    input: Tensor,
    bn: tensor::BatchNormCache,
}

impl ConvBn {
    /// He-normal (fan-in) filters, unit scale, zero shift.
    pub fn init<R: Rng + ?Sized>(shape: ConvShape, rng: &mut R) -> Self {
        let fan_in = shape.in_channels * shape.kernel * shape.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        ConvBn {
            filters: Tensor::randn(
                &[shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
                std,
                rng,
            ),
            bn: BnParams::new(shape.out_channels),
            stride: shape.stride,
            pad: shape.pad,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ConvBnCache)> {
        let z = tensor::conv2d(x, &self.filters, self.stride, self.pad)?;
        let (y, bn) = tensor::batchnorm(&z, &self.bn.scale, &self.bn.shift, mode, &mut self.bn.stats)?;
        Ok((
            y,
            ConvBnCache {
                input: x.clone(),
                bn,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvBnCache, grad_out: &Tensor) -> Result<Tensor> {
        let bn = tensor::batchnorm_backward(&cache.bn, &self.bn.scale, grad_out)?;
        self.bn.scale.accumulate_grad(&bn.scale)?;
        self.bn.shift.accumulate_grad(&bn.shift)?;
        let conv = tensor::conv2d_backward(&cache.input, &self.filters, self.stride, self.pad, &bn.input)?;
        self.filters.accumulate_grad(&conv.filters)?;
        Ok(conv.input)
    }

    pub fn params_mut(&mut self) -> [ParamMut<'_>; 3] {
        [
            ParamMut {
                tensor: &mut self.filters,
                decay: true,
            },
            ParamMut {
                tensor: &mut self.bn.scale,
                decay: false,
            },
            ParamMut {
                tensor: &mut self.bn.shift,
                decay: false,
            },
        ]
    }

    pub fn param_count(&self) -> usize {
        self.filters.len() + self.bn.scale.len() + self.bn.shift.len()
    }
}

/// Learnable state of one block, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub layers: Vec<ConvBn>,
}

impl BlockParams {
    /// Ordered `(role, tensor)` listing, including running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), l.filters.clone()));
            out.push((format!("bn{i}.scale"), l.bn.scale.clone()));
            out.push((format!("bn{i}.shift"), l.bn.shift.clone()));
            let c = l.bn.stats.mean.len();
            out.push((
                format!("bn{i}.running_mean"),
                Tensor::from_vec(&[c], l.bn.stats.mean.clone()).expect("stat length"),
            ));
            out.push((
                format!("bn{i}.running_var"),
                Tensor::from_vec(&[c], l.bn.stats.var.clone()).expect("stat length"),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub spec: BlockSpec,
    pub params: BlockParams,
}

/// Forward state of a [`Block`], consumed by [`Block::backward`].
pub struct BlockCache {
    input_shape: Vec<usize>,
    layers: Vec<ConvBnCache>,
    /// Pre-activations of the internal ReLUs.
    hidden: Vec<Tensor>,
    /// Pre-activation of the trailing ReLU for residual blocks.
    sum: Option<Tensor>,
}

/// Parameter-free residual shortcut: average-downsample by the stride, then
/// zero-pad channels.
pub fn shortcut(x: &Tensor, stride: usize, out_channels: usize) -> Result<Tensor> {
    let down = tensor::avg_downsample(x, stride)?;
    tensor::zero_pad_channels(&down, out_channels)
}

pub fn shortcut_backward(input_shape: &[usize], stride: usize, grad_out: &Tensor) -> Result<Tensor> {
    let g = tensor::zero_pad_channels_backward(input_shape[1], grad_out)?;
    tensor::avg_downsample_backward(input_shape, stride, &g)
}

impl Block {
    pub fn init<R: Rng + ?Sized>(spec: BlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec.conv_shapes().into_iter().map(|s| ConvBn::init(s, rng)).collect();
        Ok(Block {
            spec,
            params: BlockParams { layers },
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockCache)> {
        self.spec.output_shape(x.shape())?;
        let n_layers = self.params.layers.len();
        let mut caches = Vec::with_capacity(n_layers);
        let mut hidden = Vec::with_capacity(n_layers - 1);
        let mut a = x.clone();
        for (i, layer) in self.params.layers.iter_mut().enumerate() {
            let (b, cache) = layer.forward(&a, mode)?;
            caches.push(cache);
            if i + 1 < n_layers {
                a = tensor::relu(&b);
                hidden.push(b);
            } else {
                a = b;
            }
        }
        let (out, sum) = if self.spec.residual {
            let s = tensor::add(&a, &shortcut(x, self.spec.stride, self.spec.out_channels)?)?;
            (tensor::relu(&s), Some(s))
        } else {
            (a, None)
        };
        Ok((
            out,
            BlockCache {
                input_shape: x.shape().to_vec(),
                layers: caches,
                hidden,
                sum,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// block input.
    pub fn backward(&mut self, cache: &BlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let (mut g, mut d_input) = match &cache.sum {
            Some(sum) => {
                let g = tensor::relu_backward(sum, grad_out)?;
                let d_short = shortcut_backward(&cache.input_shape, self.spec.stride, &g)?;
                (g, Some(d_short))
            }
            None => (grad_out.clone(), None),
        };
        for i in (0..self.params.layers.len()).rev() {
            if i + 1 < self.params.layers.len() {
                g = tensor::relu_backward(&cache.hidden[i], &g)?;
            }
            g = self.params.layers[i].backward(&cache.layers[i], &g)?;
        }
        if let Some(d) = d_input.take() {
            g = tensor::add(&g, &d)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.params.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.layers.iter().map(ConvBn::param_count).sum()
    }
}
