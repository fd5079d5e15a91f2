//! Central finite-difference checks of every analytic backward pass.
//!
//! Each check compares the analytic gradient of a scalar probe loss with
//! `(ℓ(p + ε) − ℓ(p − ε)) / 2ε` at randomly chosen coordinates. Probes whose
//! perturbation flips any ReLU lie across a kink where the function is not
//! differentiable; they are skipped and counted.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Block, BlockSpec};
use crate::error::{Error, Result};
use crate::graph::{build, ArchSpec, ConnectivityMode, ModuleGraph};
use crate::tensor::{self, relu_pattern, Mode, RunningStats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Guards the relative error against `0 / 0`.
    pub floor: f64,
    pub probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tolerance: 1e-3,
            floor: 1e-12,
            probes_per_tensor: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: Vec<Probe>,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.probes.iter().map(|p| p.error).fold(0.0, f64::max)
    }

    pub fn skip_fraction(&self) -> f64 {
        let total = self.probes.len() + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }

    /// At least one probe was measured, no more than half were skipped, and
    /// every measured error is within tolerance.
    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.skip_fraction() <= 0.5 && self.max_error() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.error.total_cmp(&b.error))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Probes every tensor in `analytic`. `eval(t, i, v)` must evaluate the loss with
/// element `i` of tensor `t` set to `v`, restoring it afterwards; `base(t, i)`
/// reads the current value.
fn run_probes(
    name: &str,
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    mut base: impl FnMut(usize, usize) -> f64,
    mut eval: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        name: name.to_string(),
        probes: Vec::new(),
        skipped: 0,
        tolerance: cfg.tolerance,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.len().min(cfg.probes_per_tensor);
        for i in index::sample(rng, grad.len(), n) {
            let p = base(t, i);
            let (hi, lo) = (p + cfg.eps, p - cfg.eps);
            let (l0, h0) = relu_pattern(|| eval(t, i, p));
            let (lp, hp) = relu_pattern(|| eval(t, i, hi));
            let (lm, hm) = relu_pattern(|| eval(t, i, lo));
            let (_, lp, lm) = (l0?, lp?, lm?);
            if hp != h0 || hm != h0 {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (hi - lo);
            let analytic = grad[i];
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::NonFinite(format!("{name}: tensor {t} index {i}")));
            }
            report.probes.push(Probe {
                tensor: t,
                index: i,
                analytic,
                numeric,
                error: relative_error(analytic, numeric, cfg.floor),
            });
        }
    }
    Ok(report)
}

/// `Σ r ⊙ y` in f64.
fn weighted(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r).expect("probe weights match output")
}

/// Checks a pure function of tensors. `f` returns its output; `grad` maps
/// the output gradient to gradients of every input.
pub fn check_op(
    name: &str,
    mut inputs: Vec<Tensor>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    grad: impl Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
) -> Result<GradCheckReport> {
    let out = f(&inputs)?;
    let r = Tensor::randn(out.shape(), 1.0, rng);
    let analytic: Vec<Vec<f64>> = grad(&inputs, &r)?.into_iter().map(Tensor::into_data).collect();
    let cell = std::cell::RefCell::new(&mut inputs);
    run_probes(
        name,
        &analytic,
        cfg,
        rng,
        |t, i| cell.borrow()[t].data()[i],
        |t, i, v| {
            let mut ins = cell.borrow_mut();
            let old = std::mem::replace(&mut ins[t].data_mut()[i], v);
            let y = f(&ins);
            ins[t].data_mut()[i] = old;
            Ok(weighted(&y?, &r))
        },
    )
}

/// Checks a block's input and parameter gradients in train mode.
pub fn check_block(name: &str, spec: BlockSpec, input_shape: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = Block::init(spec, &mut rng)?;
    let x = Tensor::randn(input_shape, 1.0, &mut rng);
    let cell = std::cell::RefCell::new((block, x));
    let (y, cache) = {
        let (b, x) = &mut *cell.borrow_mut();
        b.forward(x, Mode::Train)?
    };
    let r = Tensor::randn(y.shape(), 1.0, &mut rng);
    let mut analytic = Vec::new();
    {
        let (b, _) = &mut *cell.borrow_mut();
        b.zero_grad();
        analytic.push(b.backward(&cache, &r)?.into_data());
        for p in b.params_mut() {
            analytic.push(p.tensor.grad().expect("accumulated").to_vec());
        }
    }
    run_probes(
        name,
        &analytic,
        cfg,
        &mut rng,
        |t, i| {
            let s = &mut *cell.borrow_mut();
            let v = set_block_value(s, t, i, 0.0);
            set_block_value(s, t, i, v);
            v
        },
        |t, i, v| {
            let s = &mut *cell.borrow_mut();
            let old = set_block_value(s, t, i, v);
            let out = s.0.forward(&s.1, Mode::Train).map(|(y, _)| weighted(&y, &r));
            set_block_value(s, t, i, old);
            out
        },
    )
}

/// Writes element `i` of the input (`t = 0`) or of parameter `t - 1`,
/// returning the previous value.
fn set_block_value(s: &mut (Block, Tensor), t: usize, i: usize, v: f64) -> f64 {
    if t == 0 {
        std::mem::replace(&mut s.1.data_mut()[i], v)
    } else {
        std::mem::replace(&mut s.0.params_mut().swap_remove(t - 1).tensor.data_mut()[i], v)
    }
}

/// Checks every parameter gradient of a graph whose masks are already
/// sampled or frozen, in train mode.
pub fn check_graph(name: &str, graph: &mut ModuleGraph, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let fwd = graph.forward(x, Mode::Train)?;
    let r = Tensor::randn(fwd.logits.shape(), 1.0, &mut rng);
    graph.zero_grad();
    graph.backward(&fwd, &r)?;
    drop(fwd);
    let analytic: Vec<Vec<f64>> = graph
        .params_mut()
        .into_iter()
        .map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();
    let cell = std::cell::RefCell::new(graph);
    run_probes(
        name,
        &analytic,
        cfg,
        &mut rng,
        |t, i| cell.borrow_mut().params_mut()[t].tensor.data()[i],
        |t, i, v| {
            let mut g = cell.borrow_mut();
            let old = std::mem::replace(&mut g.params_mut()[t].tensor.data_mut()[i], v);
            let out = g.forward(x, Mode::Train).map(|f| weighted(&f.logits, &r));
            g.params_mut()[t].tensor.data_mut()[i] = old;
            out
        },
    )
}

/// Small three-module graphs used by the graph checks: a masked ResNet chain
/// across two stages and a two-branch ResNeXt stack with projections.
pub fn small_graphs(seed: u64) -> Result<Vec<(String, ModuleGraph, Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resnet = ArchSpec {
        stem_channels: 4,
        image_size: 8,
        stages: 3,
        ..ArchSpec::resnet(3, 1, 5)
    };
    let mut resnext = ArchSpec::resnext(11, 2, 2, 1, 5)?;
    resnext.stem_channels = 2;
    resnext.image_size = 8;
    let full = ArchSpec {
        stages: 1,
        ..resnet.clone()
    }
    .with_connectivity(ConnectivityMode::FixedFull);
    let mut out = Vec::new();
    for (name, spec) in [
        ("graph resnet learned K=1", resnet),
        ("graph resnet fixed_full", full),
        ("graph resnext learned K=1", resnext),
    ] {
        let mut g = build(&spec, &mut rng)?;
        g.sample_masks(&mut rng);
        let x = Tensor::randn(&[3, spec.in_channels, spec.image_size, spec.image_size], 1.0, &mut rng);
        out.push((name.to_string(), g, x));
    }
    Ok(out)
}

/// Every suite: tensor ops, both block kinds, and the small graphs.
pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let rn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);

    reports.push(check_op(
        "relu",
        vec![rn(&[2, 3, 4, 4], &mut rng)],
        cfg,
        &mut rng,
        |x| Ok(tensor::relu(&x[0])),
        |x, g| Ok(vec![tensor::relu_backward(&x[0], g)?]),
    )?);
    reports.push(check_op(
        "add",
        vec![rn(&[2, 3, 2, 2], &mut rng), rn(&[2, 3, 2, 2], &mut rng)],
        cfg,
        &mut rng,
        |x| tensor::add(&x[0], &x[1]),
        |_, g| {
            let (a, b) = tensor::add_backward(g);
            Ok(vec![a, b])
        },
    )?);
    reports.push(check_op(
        "global_avg_pool",
        vec![rn(&[2, 3, 4, 4], &mut rng)],
        cfg,
        &mut rng,
        |x| tensor::global_avg_pool(&x[0]),
        |x, g| Ok(vec![tensor::global_avg_pool_backward(x[0].shape(), g)?]),
    )?);
    reports.push(check_op(
        "linear",
        vec![rn(&[3, 5], &mut rng), rn(&[4, 5], &mut rng), rn(&[4], &mut rng)],
        cfg,
        &mut rng,
        |x| tensor::linear(&x[0], &x[1], &x[2]),
        |x, g| {
            let l = tensor::linear_backward(&x[0], &x[1], g)?;
            Ok(vec![l.input, l.weight, l.bias])
        },
    )?);
    let labels = [1usize, 0, 5, 3];
    reports.push(check_op(
        "softmax_xent",
        vec![rn(&[4, 6], &mut rng)],
        cfg,
        &mut rng,
        |x| Ok(Tensor::full(&[1], tensor::softmax_xent(&x[0], &labels)?.loss as f64)),
        |x, g| Ok(vec![tensor::softmax_xent(&x[0], &labels)?.grad.scaled(g.data()[0])]),
    )?);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
        reports.push(check_op(
            &format!("conv2d k{k} s{stride} p{pad}"),
            vec![rn(&[2, 3, 6, 6], &mut rng), rn(&[4, 3, k, k], &mut rng)],
            cfg,
            &mut rng,
            |x| tensor::conv2d(&x[0], &x[1], stride, pad),
            |x, g| {
                let c = tensor::conv2d_backward(&x[0], &x[1], stride, pad, g)?;
                Ok(vec![c.input, c.filters])
            },
        )?);
    }
    for mode in [Mode::Train, Mode::Eval] {
        let mut stats = RunningStats::new(3);
        stats.mean = vec![0.3, -0.2, 0.1];
        stats.var = vec![1.5, 0.7, 2.0];
        reports.push(check_op(
            &format!("batchnorm {mode:?}").to_lowercase(),
            vec![rn(&[3, 3, 3, 3], &mut rng), rn(&[3], &mut rng), rn(&[3], &mut rng)],
            cfg,
            &mut rng,
            |x| Ok(tensor::batchnorm(&x[0], &x[1], &x[2], mode, &mut stats.clone())?.0),
            |x, g| {
                let (_, cache) = tensor::batchnorm(&x[0], &x[1], &x[2], mode, &mut stats.clone())?;
                let b = tensor::batchnorm_backward(&cache, &x[1], g)?;
                Ok(vec![b.input, b.scale, b.shift])
            },
        )?);
    }
    reports.push(check_op(
        "avg_downsample",
        vec![rn(&[2, 3, 4, 4], &mut rng)],
        cfg,
        &mut rng,
        |x| tensor::avg_downsample(&x[0], 2),
        |x, g| Ok(vec![tensor::avg_downsample_backward(x[0].shape(), 2, g)?]),
    )?);
    reports.push(check_op(
        "zero_pad_channels",
        vec![rn(&[2, 3, 2, 2], &mut rng)],
        cfg,
        &mut rng,
        |x| tensor::zero_pad_channels(&x[0], 5),
        |_, g| Ok(vec![tensor::zero_pad_channels_backward(3, g)?]),
    )?);

    let blocks = [
        ("basic block", BlockSpec::basic(3, 3, 1), [2, 3, 6, 6]),
        ("basic block stride 2", BlockSpec::basic(3, 6, 2), [2, 3, 6, 6]),
        ("bottleneck branch", BlockSpec::branch(4, 2, 6, 1), [2, 4, 4, 4]),
        ("bottleneck block stride 2", BlockSpec::bottleneck(4, 2, 8, 2), [2, 4, 4, 4]),
    ];
    for (i, (name, spec, shape)) in blocks.into_iter().enumerate() {
        let c = GradCheckConfig {
            seed: cfg.seed.wrapping_add(i as u64 + 1),
            ..*cfg
        };
        reports.push(check_block(name, spec, &shape, &c)?);
    }
    for (name, mut g, x) in small_graphs(cfg.seed)? {
        reports.push(check_graph(&name, &mut g, &x, cfg)?);
    }
    Ok(reports)
}
