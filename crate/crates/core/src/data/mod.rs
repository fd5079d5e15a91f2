//! Datasets: CIFAR binary files, augmentation, and synthetic tasks.

mod cifar;
mod synthetic;

pub use cifar::{find_cifar_dir, load_cifar, load_cifar_file, write_cifar, CifarSplits, Variant};
pub use synthetic::{make_blobs, make_planted, PlantedOracle, PlantedTask};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×C×H×W.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Per-pixel mean (C×H×W) of the training split, already subtracted.
    pub mean: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::shape("dataset labels", &[n], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidSpec(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            mean: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn subset(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            images: self.images.gather(&idx),
            labels: self.labels[..idx.len()].to_vec(),
            mean: self.mean.clone(),
            ..*self
        }
    }

    /// Images and labels at `indices`, optionally augmented.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], augment_rng: Option<&mut R>) -> (Tensor, Vec<usize>) {
        let mut images = self.images.gather(indices);
        if let Some(rng) = augment_rng {
            let [c, h, w] = self.image_shape();
            let per = c * h * w;
            for chunk in images.data_mut().chunks_mut(per) {
                let out = augment(chunk, [c, h, w], rng);
                chunk.copy_from_slice(&out);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// Per-pixel mean over all samples, C×H×W.
    pub fn pixel_mean(&self) -> Vec<f64> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut mean = vec![0.0; per];
        for chunk in self.images.data().chunks(per) {
            for (m, &v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn subtract_mean(&mut self, mean: &[f64]) {
        for chunk in self.images.data_mut().chunks_mut(mean.len()) {
            for (v, m) in chunk.iter_mut().zip(mean) {
                *v -= m;
            }
        }
        self.mean = Some(mean.to_vec());
    }
}

/// Padding on each side before the random crop.
pub const AUGMENT_PAD: usize = 4;

/// Zero-pads by [`AUGMENT_PAD`], takes a random crop of the original size
/// and flips it horizontally with probability 1/2.
pub fn augment<R: Rng + ?Sized>(image: &[f64], shape: [usize; 3], rng: &mut R) -> Vec<f64> {
    let dy = rng.random_range(0..=2 * AUGMENT_PAD);
    let dx = rng.random_range(0..=2 * AUGMENT_PAD);
    let flip = rng.random_bool(0.5);
    crop_flip(image, shape, dy, dx, flip)
}

/// Crop at offset `(dy, dx)` of the zero-padded image, then optionally
/// mirror. Offset `(AUGMENT_PAD, AUGMENT_PAD)` without flip is the identity.
pub fn crop_flip(image: &[f64], [c, h, w]: [usize; 3], dy: usize, dx: usize, flip: bool) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + ox] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(rng: &mut ChaCha8Rng) -> Vec<f64> {
        Tensor::uniform(&[3 * 32 * 32], 0.1, 1.0, rng).into_data()
    }

    #[test]
    fn centered_crop_is_identity_and_flip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = image(&mut rng);
        let shape = [3, 32, 32];
        assert_eq!(crop_flip(&img, shape, 4, 4, false), img);
        let once = crop_flip(&img, shape, 4, 4, true);
        assert_ne!(once, img);
        assert_eq!(crop_flip(&once, shape, 4, 4, true), img);
    }

    #[test]
    fn corner_crop_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = image(&mut rng);
        let out = crop_flip(&img, [3, 32, 32], 8, 8, false);
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out[(ch * 32 + y) * 32 + x];
                    if y >= 28 || x >= 28 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, img[(ch * 32 + y + 4) * 32 + x + 4]);
                    }
                }
            }
        }
        // offset (0, 0): the top-left four rows and columns are padding
        let out = crop_flip(&img, [3, 32, 32], 0, 0, false);
        assert!((0..32).all(|x| out[x] == 0.0 && out[3 * 32 + x] == 0.0));
        assert_eq!(out[4 * 32 + 4], img[0]);
    }

    #[test]
    fn augmentation_only_moves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = image(&mut rng);
        for _ in 0..20 {
            let out = augment(&img, [3, 32, 32], &mut rng);
            for v in out.iter().filter(|&&v| v != 0.0) {
                assert!(img.contains(v));
            }
        }
    }

    #[test]
    fn dataset_validation_and_mean() {
        let images = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert!(Dataset::new(images.clone(), vec![0], 2, Split::Train).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 2], 2, Split::Train).is_err());
        let mut d = Dataset::new(images, vec![0, 1], 2, Split::Train).unwrap();
        let mean = d.pixel_mean();
        assert_eq!(mean, vec![2.0, 4.0]);
        d.subtract_mean(&mean);
        assert_eq!(d.images.data(), &[-1.0, -2.0, 1.0, 2.0]);
        assert_eq!(d.subset(1).labels, vec![0]);
    }
}
