use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Forward state needed by [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

fn check_params(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if scale.shape() != [c] {
        return Err(Error::shape("batchnorm scale", &[c], scale.shape()));
    }
    if shift.shape() != [c] {
        return Err(Error::shape("batchnorm shift", &[c], shift.shape()));
    }
    Ok((n, c, h * w))
}

/// Per-channel batch normalization over N×H×W.
///
/// Train mode normalizes with batch statistics and folds them into `state`;
/// eval mode normalizes with `state` and leaves it untouched.
pub fn batchnorm(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: Mode,
    state: &mut RunningStats,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, hw) = check_params(input, scale, shift)?;
    if state.mean.len() != c || state.var.len() != c {
        return Err(Error::shape("batchnorm running stats", &[c], &[state.mean.len()]));
    }
    let count = n * hw;
    if mode == Mode::Train && count < 2 {
        return Err(Error::DegenerateBatch { count });
    }
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let mut x_hat = Tensor::zeros(input.shape());
    let mut inv_std = vec![0.0f64; c];
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for s in 0..n {
                    sum += x[(s * c + ch) * hw..][..hw].iter().copied().sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    sq += x[(s * c + ch) * hw..][..hw]
                        .iter()
                        .map(|&v| (v - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let unbiased = sq / (count - 1) as f64;
                state.mean[ch] = BN_MOMENTUM * state.mean[ch] + (1.0 - BN_MOMENTUM) * mean;
                state.var[ch] = BN_MOMENTUM * state.var[ch] + (1.0 - BN_MOMENTUM) * unbiased;
                (mean, var)
            }
            Mode::Eval => (state.mean[ch], state.var[ch]),
        };
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (scale.data()[ch], shift.data()[ch]);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean) * istd;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((out, BatchNormCache { mode, x_hat, inv_std }))
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    scale: &Tensor,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::shape("batchnorm_backward", cache.x_hat.shape(), grad_out.shape()));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.x_hat.data();
    let mut d_in = Tensor::zeros(grad_out.shape());
    let mut d_scale = Tensor::zeros(&[c]);
    let mut d_shift = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * xh[i];
            }
        }
        d_scale.data_mut()[ch] = sum_dy_xh;
        d_shift.data_mut()[ch] = sum_dy;
        let k = scale.data()[ch] * cache.inv_std[ch];
        let mean_dy = sum_dy / count ;
        let mean_dy_xh = sum_dy_xh / count ;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                d_in.data_mut()[i] = match cache.mode {
                    Mode::Train => k * (dy[i] - mean_dy - xh[i] * mean_dy_xh),
                    Mode::Eval => k * dy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: d_in,
        scale: d_scale,
        shift: d_shift,
    })
}
