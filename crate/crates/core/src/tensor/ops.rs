use std::cell::Cell;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static RELU_PATTERN: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` while hashing the on/off pattern of every ReLU evaluated on this
/// thread. Two runs with equal hashes took the same linear piece of every
/// ReLU, which is what finite-difference probes need to be meaningful.
pub(crate) fn relu_pattern<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = RELU_PATTERN.with(|p| p.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let hash = RELU_PATTERN.with(|p| p.replace(prev)).unwrap_or(0);
    (out, hash)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    RELU_PATTERN.with(|p| {
        if let Some(mut h) = p.get() {
            for &v in input.data() {
                h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3);
            }
            p.set(Some(h));
        }
    });
    out
}

/// Gradient of [`relu`]; `input` is the pre-activation.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Gradient of [`add`]: the output gradient flows unchanged to both operands.
pub fn add_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    (grad_out.clone(), grad_out.clone())
}

/// N×C×H×W → N×C spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("global_avg_pool_backward", &[0, 0, 0, 0], input_shape));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("global_avg_pool_backward", &[n, c], grad_out.shape()));
    }
    let inv = 1.0 / (h * w) as f64;
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(input_shape, data)
}

/// `input` (N×F) · `weight`ᵀ (F×O) + `bias` (O).
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, f] = input.shape()[..] else {
        return Err(Error::shape("linear input", &[0, 0], input.shape()));
    };
    let [o, wf] = weight.shape()[..] else {
        return Err(Error::shape("linear weight", &[0, f], weight.shape()));
    };
    if wf != f {
        return Err(Error::shape("linear weight", &[o, f], weight.shape()));
    }
    if bias.shape() != [o] {
        return Err(Error::shape("linear bias", &[o], bias.shape()));
    }
    let mut out = Tensor::zeros(&[n, o]);
    for s in 0..n {
        let x = &input.data()[s * f..(s + 1) * f];
        for j in 0..o {
            let wr = &weight.data()[j * f..(j + 1) * f];
            let dot: f64 = x.iter().zip(wr).map(|(a, b)| *a * *b).sum();
            out.data_mut()[s * o + j] = dot + bias.data()[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let [n, f] = input.shape()[..] else {
        return Err(Error::shape("linear_backward", &[0, 0], input.shape()));
    };
    let o = weight.shape()[0];
    if grad_out.shape() != [n, o] {
        return Err(Error::shape("linear_backward", &[n, o], grad_out.shape()));
    }
    let mut d_in = Tensor::zeros(&[n, f]);
    let mut d_w = Tensor::zeros(&[o, f]);
    let mut d_b = Tensor::zeros(&[o]);
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    for j in 0..o {
        let mut gb = 0.0f64;
        for s in 0..n {
            gb += g[s * o + j];
        }
        d_b.data_mut()[j] = gb;
        for k in 0..f {
            let mut acc = 0.0f64;
            for s in 0..n {
                acc += g[s * o + j] * x[s * f + k];
            }
            d_w.data_mut()[j * f + k] = acc;
        }
    }
    for s in 0..n {
        for k in 0..f {
            let mut acc = 0.0f64;
            for j in 0..o {
                acc += g[s * o + j] * w[j * f + k];
            }
            d_in.data_mut()[s * f + k] = acc;
        }
    }
    Ok(LinearGrads {
        input: d_in,
        weight: d_w,
        bias: d_b,
    })
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct XentOutput {
    pub loss: f64,
    pub grad: Tensor,
}

pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<XentOutput> {
    let [n, k] = logits.shape()[..] else {
        return Err(Error::shape("softmax_xent", &[labels.len(), 0], logits.shape()));
    };
    if labels.len() != n {
        return Err(Error::shape("softmax_xent labels", &[n], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("softmax_xent label", &[k], &[bad]));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + denom.ln();
        total += log_z - row[label];
        let g = &mut grad.data_mut()[s * k..(s + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            let t = if j == label { 1.0 } else { 0.0 };
            *gv = (p - t) / n as f64 ;
        }
    }
    Ok(XentOutput {
        loss: total / n as f64,
        grad,
    })
}

/// Averages non-overlapping `factor`×`factor` windows.
pub fn avg_downsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidAdapter {
            from: input.shape().to_vec(),
            to: vec![n, c, h / factor.max(1), w / factor.max(1)],
        });
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let x = input.data();
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub fn avg_downsample_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("avg_downsample_backward", &[0, 0, 0, 0], input_shape));
    };
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::shape("avg_downsample_backward", &[n, c, ho, wo], grad_out.shape()));
    }
    let inv = 1.0 / (factor * factor) as f64;
    let mut d_in = Tensor::zeros(input_shape);
    for plane in 0..n * c {
        let g = &grad_out.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut d_in.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / factor) * wo + x / factor] * inv;
            }
        }
    }
    Ok(d_in)
}

/// Appends zero-valued channels up to `target_channels`.
pub fn zero_pad_channels(input: &Tensor, target_channels: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if target_channels < c {
        return Err(Error::InvalidAdapter {
            from: input.shape().to_vec(),
            to: vec![n, target_channels, h, w],
        });
    }
    if target_channels == c {
        return Ok(input.clone());
    }
    let per_in = c * h * w;
    let per_out = target_channels * h * w;
    let mut out = Tensor::zeros(&[n, target_channels, h, w]);
    for s in 0..n {
        out.data_mut()[s * per_out..s * per_out + per_in]
            .copy_from_slice(&input.data()[s * per_in..(s + 1) * per_in]);
    }
    Ok(out)
}

/// Gradient of [`zero_pad_channels`]: drops the padded slice.
pub fn zero_pad_channels_backward(input_channels: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = grad_out.dims4()?;
    if input_channels > c {
        return Err(Error::shape("zero_pad_channels_backward", &[n, input_channels, h, w], grad_out.shape()));
    }
    let per_in = input_channels * h * w;
    let per_out = c * h * w;
    let mut data = Vec::with_capacity(n * per_in);
    for s in 0..n {
        data.extend_from_slice(&grad_out.data()[s * per_out..s * per_out + per_in]);
    }
    Tensor::from_vec(&[n, input_channels, h, w], data)
}
