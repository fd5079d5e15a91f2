//! Learnable connectivity between modules.
//!
//! Every consumer keeps a real-valued mask in `[0, 1]^E` over its `E`
//! candidate producers. Each training step draws a binary mask with exactly
//! `K` ones from the normalized real mask (without replacement), the forward
//! pass sums the selected producer outputs, and the real mask moves along the
//! gradient of the loss with respect to the binary entries, clipped back into
//! `[0, 1]`. After the search phase the binary mask is frozen to the top-`K`
//! real values.

mod export;
mod prune;

pub use export::{connection_records, connectivity_dot, connectivity_json, ConnectionRecord};
pub use prune::{prune_unused, PruneReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Initial real-valued mask entry.
pub const MASK_INIT: f64 = 0.5;

/// Real-valued and sampled binary mask over the candidate producers of one
/// consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    real: Vec<f64>,
    binary: Vec<bool>,
    fan_in: usize,
    frozen: bool,
}

impl MaskState {
    /// A learnable mask over `candidates` inputs with `fan_in` active ones.
    pub fn new(candidates: usize, fan_in: usize) -> Result<Self> {
        if fan_in == 0 || fan_in > candidates {
            return Err(Error::InvalidSpec(format!(
                "fan-in {fan_in} outside 1..={candidates}"
            )));
        }
        Ok(MaskState {
            real: vec![MASK_INIT; candidates],
            binary: vec![false; candidates],
            fan_in,
            frozen: false,
        })
    }

    /// A frozen mask with the given active set; the real values mirror it.
    pub fn fixed(binary: Vec<bool>) -> Result<Self> {
        let fan_in = binary.iter().filter(|&&b| b).count();
        if fan_in == 0 {
            return Err(Error::InvalidSpec("fixed mask with no active input".into()));
        }
        Ok(MaskState {
            real: binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            binary,
            fan_in,
            frozen: true,
        })
    }

    pub fn from_parts(real: Vec<f64>, binary: Vec<bool>, fan_in: usize, frozen: bool) -> Result<Self> {
        if real.len() != binary.len() || fan_in == 0 || fan_in > real.len() {
            return Err(Error::InvalidSpec("inconsistent mask state".into()));
        }
        Ok(MaskState {
            real,
            binary,
            fan_in,
            frozen,
        })
    }

    pub fn candidates(&self) -> usize {
        self.real.len()
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    pub fn binary(&self) -> &[bool] {
        &self.binary
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn active_count(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }

    /// The multinomial distribution `m̃ / Σ m̃`. The stored mask is not
    /// modified. An all-zero mask yields the uniform distribution.
    pub fn normalize(&self) -> Vec<f64> {
        let total: f64 = self.real.iter().copied().sum();
        let e = self.real.len();
        if total <= 0.0 || !total.is_finite() {
            log::warn!("degenerate mask (sum {total}), using uniform distribution over {e} inputs");
            return vec![1.0 / e as f64; e];
        }
        self.real.iter().map(|&v| v / total).collect()
    }

    /// Draws `K` distinct inputs from the normalized mask and stores them as
    /// the binary mask. Frozen masks are left as they are.
    pub fn sample_binary<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[bool] {
        if !self.frozen {
            let picks = sample_without_replacement(&self.normalize(), self.fan_in, rng);
            self.binary.iter_mut().for_each(|b| *b = false);
            for i in picks {
                self.binary[i] = true;
            }
        }
        &self.binary
    }

    /// `m̃ ← clip(m̃ − lr·g, 0, 1)`. A non-finite gradient leaves the mask
    /// untouched and returns an error.
    pub fn update(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.real.len() {
            return Err(Error::shape("update_masks", &[self.real.len()], &[grads.len()]));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            log::warn!("non-finite mask gradient {bad}; keeping previous mask");
            return Err(Error::NonFinite(format!("mask gradient {bad}")));
        }
        for (m, &g) in self.real.iter_mut().zip(grads) {
            let next = *m - lr * g;
            *m = next.clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// Binary mask of the `K` largest real entries, ties to the lowest index.
    pub fn top_k(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.real.len()).collect();
        order.sort_by(|&a, &b| self.real[b].total_cmp(&self.real[a]).then(a.cmp(&b)));
        let mut out = vec![false; self.real.len()];
        for &i in &order[..self.fan_in] {
            out[i] = true;
        }
        out
    }

    /// Fixes the binary mask to [`MaskState::top_k`]; later sampling and
    /// updates leave it unchanged.
    pub fn freeze_topk(&mut self) {
        if !self.frozen {
            self.binary = self.top_k();
            self.frozen = true;
        }
    }

    /// Drops candidates where `keep` is false. Dropped candidates must be
    /// inactive.
    pub(crate) fn retain(&mut self, keep: &[bool]) -> Result<()> {
        if keep.len() != self.real.len() {
            return Err(Error::shape("mask retain", &[self.real.len()], &[keep.len()]));
        }
        if keep.iter().zip(&self.binary).any(|(&k, &b)| !k && b) {
            return Err(Error::InvalidSpec("cannot drop an active connection".into()));
        }
        let mut i = 0;
        self.real.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.binary.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        Ok(())
    }
}

/// Draws `k` distinct indices: pick one from the categorical distribution,
/// zero its probability, renormalize, repeat. If fewer than `k` entries have
/// positive probability, all of them are taken and the rest are filled
/// uniformly at random from the zero-probability entries.
pub fn sample_without_replacement<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<f64> = probs.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let support = p.iter().filter(|&&v| v > 0.0).count();
    let mut picks = Vec::with_capacity(k);
    if support < k {
        log::warn!(
            "only {support} of {} candidates have positive probability, need {k}; filling uniformly",
            p.len()
        );
        picks.extend((0..p.len()).filter(|&i| p[i] > 0.0));
        let mut rest: Vec<usize> = (0..p.len()).filter(|&i| p[i] <= 0.0).collect();
        while picks.len() < k {
            let j = rng.random_range(0..rest.len());
            picks.push(rest.swap_remove(j));
        }
        picks.sort_unstable();
        return picks;
    }
    for _ in 0..k {
        let total: f64 = p.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &v) in p.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            acc += v;
            chosen = Some(i);
            if u < acc {
                break;
            }
        }
        // `chosen` falls back to the last positive entry when rounding puts
        // `u` at the very top of the range.
        let i = chosen.expect("positive support");
        p[i] = 0.0;
        picks.push(i);
    }
    picks.sort_unstable();
    picks
}

/// Parameter-free map from a producer's output shape onto a consumer's input
/// shape: average-downsample by an integral factor, then zero-pad channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adapter {
    pub factor: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Adapter {
    pub fn between(from: &[usize], to: &[usize]) -> Result<Self> {
        let err = || Error::InvalidAdapter {
            from: from.to_vec(),
            to: to.to_vec(),
        };
        let ([n0, c0, h0, w0], [n1, c1, h1, w1]) = (from, to) else {
            return Err(err());
        };
        if n0 != n1 || c1 < c0 || *h1 == 0 || *w1 == 0 || h0 % h1 != 0 || w0 % w1 != 0 || h0 / h1 != w0 / w1 {
            return Err(err());
        }
        Ok(Adapter {
            factor: h0 / h1,
            in_channels: *c0,
            out_channels: *c1,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.factor == 1 && self.in_channels == self.out_channels
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(x.clone());
        }
        let down = tensor::avg_downsample(x, self.factor)?;
        tensor::zero_pad_channels(&down, self.out_channels)
    }

    /// Gradient w.r.t. the producer output given the gradient at the
    /// consumer side.
    pub fn backward(&self, input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(grad.clone());
        }
        let g = tensor::zero_pad_channels_backward(self.in_channels, grad)?;
        tensor::avg_downsample_backward(input_shape, self.factor, &g)
    }
}

/// Element-wise sum of the adapted active producers, in candidate order,
/// after an optional always-on `identity` term.
pub fn aggregate(
    mask: &[bool],
    producers: &[&Tensor],
    adapters: &[Adapter],
    identity: Option<&Tensor>,
) -> Result<Tensor> {
    if mask.len() != producers.len() || adapters.len() != producers.len() {
        return Err(Error::shape("aggregate", &[mask.len()], &[producers.len()]));
    }
    let mut acc: Option<Tensor> = identity.cloned();
    for ((&on, y), adapter) in mask.iter().zip(producers).zip(adapters) {
        if !on {
            continue;
        }
        let y = adapter.apply(y)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tensor::add(&a, &y)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidSpec("aggregation with no active input".into()))
}

/// ∂ℓ/∂m for one candidate: the full inner product of the gradient at the
/// consumer input with the adapted producer output.
pub fn mask_gradient(grad_input: &Tensor, adapted_output: &Tensor) -> Result<f64> {
    grad_input.dot(adapted_output).map_err(|_| {
        Error::shape("mask_gradient", grad_input.shape(), adapted_output.shape())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(real: &[f64], k: usize) -> MaskState {
        MaskState::from_parts(real.to_vec(), vec![false; real.len()], k, false).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(mask(&[0.5; 4], 1).normalize(), vec![0.25; 4]);
        let p = mask(&[0.2, 0.2, 0.6], 1).normalize();
        for (a, b) in p.iter().zip([0.2, 0.2, 0.6]) {
            assert!((a - b).abs() < 1e-6);
        }
        let m = mask(&[0.0; 3], 1);
        assert_eq!(m.normalize(), vec![1.0 / 3.0; 3]);
        assert_eq!(m.real(), &[0.0; 3], "normalize must not write back");
    }

    #[test]
    fn sampling_full_and_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all = MaskState::new(5, 5).unwrap();
        let mut point = mask(&[1.0, 0.0, 0.0], 1);
        for _ in 0..200 {
            assert_eq!(all.sample_binary(&mut rng), &[true; 5]);
            assert_eq!(point.sample_binary(&mut rng), &[true, false, false]);
        }
    }

    #[test]
    fn sparse_support_falls_back_to_uniform_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = mask(&[0.0, 0.7, 0.0, 0.0], 3);
        for _ in 0..100 {
            let b = m.sample_binary(&mut rng).to_vec();
            assert!(b[1]);
            assert_eq!(b.iter().filter(|&&x| x).count(), 3);
        }
    }

    #[test]
    fn update_examples() {
        let cases = [(10.0, 0.0), (-10.0, 1.0), (0.5, 0.4)];
        for (g, want) in cases {
            let mut m = mask(&[0.5], 1);
            m.update(&[g], 0.2).unwrap();
            assert!((m.real()[0] - want).abs() < 1e-7, "g={g}");
        }
        let mut m = mask(&[0.5, 0.3], 1);
        assert!(m.update(&[f64::NAN, 1.0], 0.2).is_err());
        assert_eq!(m.real(), &[0.5, 0.3]);
    }

    #[test]
    fn freeze_examples() {
        let mut m = mask(&[0.9, 0.1, 0.8], 2);
        m.freeze_topk();
        assert_eq!(m.binary(), &[true, false, true]);
        let mut m = mask(&[0.5, 0.5, 0.2], 1);
        m.freeze_topk();
        assert_eq!(m.binary(), &[true, false, false]);
        let mut m = mask(&[0.3; 4], 4);
        m.freeze_topk();
        assert_eq!(m.binary(), &[true; 4]);
        // frozen masks ignore sampling and keep their selection
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = mask(&[0.1, 0.9], 1);
        m.freeze_topk();
        for _ in 0..20 {
            assert_eq!(m.sample_binary(&mut rng), &[false, true]);
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ys: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng)).collect();
        let refs: Vec<&Tensor> = ys.iter().collect();
        let id = Adapter::between(&[1, 2, 2, 2], &[1, 2, 2, 2]).unwrap();
        let out = aggregate(&[false, true, false], &refs, &[id; 3], None).unwrap();
        assert_eq!(out, ys[1]);
        let out = aggregate(&[true, true], &[&ys[0], &ys[0]], &[id; 2], None).unwrap();
        assert_eq!(out, ys[0].scaled(2.0));
        assert!(aggregate(&[false, false], &[&ys[0], &ys[1]], &[id; 2], None).is_err());
    }

    #[test]
    fn mixed_shapes_match_adapter_then_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let big = Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rng);
        let small = Tensor::randn(&[2, 32, 4, 4], 1.0, &mut rng);
        let target = [2, 32, 4, 4];
        let adapters = [
            Adapter::between(big.shape(), &target).unwrap(),
            Adapter::between(small.shape(), &target).unwrap(),
        ];
        let out = aggregate(&[true, true], &[&big, &small], &adapters, None).unwrap();
        // oracle: explicit 2x2 window means and channel padding
        for s in 0..2 {
            for c in 0..32 {
                for y in 0..4 {
                    for x in 0..4 {
                        let mut want = small.data()[((s * 32 + c) * 4 + y) * 4 + x];
                        if c < 16 {
                            let mut acc = 0.0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += big.data()[((s * 16 + c) * 8 + 2 * y + dy) * 8 + 2 * x + dx];
                                }
                            }
                            want += acc / 4.0;
                        }
                        let got = out.data()[((s * 32 + c) * 4 + y) * 4 + x];
                        assert!((got - want).abs() < 1e-6);
                    }
                }
            }
        }
        assert!(Adapter::between(&[2, 32, 8, 8], &[2, 16, 4, 4]).is_err());
        assert!(Adapter::between(&[2, 16, 6, 6], &[2, 16, 4, 4]).is_err());
    }

    #[test]
    fn mask_gradient_examples() {
        let g = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let y = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(mask_gradient(&g, &y).unwrap(), 6.0);
        assert_eq!(mask_gradient(&g, &Tensor::zeros(&[1, 1])).unwrap(), 0.0);
        assert!(mask_gradient(&g, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn invalid_fan_in() {
        assert!(MaskState::new(3, 0).is_err());
        assert!(MaskState::new(3, 4).is_err());
    }
}
