use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::connectivity::MaskState;
use crate::error::{Error, Result};
use crate::graph::{build, ArchSpec, ModuleGraph, NodeKind};
use crate::tensor::{Mode, Tensor};
use crate::train::{evaluate, run_phases, EvalResult, PhaseSchedule, TrainConfig};

/// Gaussian blobs: each class has a random colour (one value per channel,
/// norm `separation`) painted over the whole image; samples add per-pixel
/// Gaussian noise of std `noise`.
pub fn make_blobs<R: Rng + ?Sized>(
    n: usize,
    num_classes: usize,
    shape: [usize; 3],
    separation: f64,
    noise: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes == 0 {
        return Err(Error::InvalidSpec("blobs need at least one class".into()));
    }
    let [c, h, w] = shape;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v = Tensor::randn(&[c], 1.0, rng).into_data();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * separation / norm).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let mut data = Tensor::randn(&[n * c * h * w], noise, rng).into_data();
    for (image, &l) in data.chunks_mut(c * h * w).zip(&labels) {
        for (plane, &v) in image.chunks_mut(h * w).zip(&centers[l]) {
            plane.iter_mut().for_each(|x| *x += v);
        }
    }
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, num_classes, Split::Train)
}

/// Shift that pins a channel at zero once its last scale is zero.
const DEAD_SHIFT: f64 = -1e3;

/// Every `KEEP_EVERY`-th channel of the damaged block passes its input
/// through; the rest are zero.
const KEEP_EVERY: usize = 4;

/// Three basic blocks where `b2` picks one input among `{b0, b1}` and `b1`
/// is frozen to pass through only a quarter of `b0`'s channels. Labels come from a teacher wired `b0 → b2`, so
/// reading `b0` is the best single connection.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    /// Student architecture, learned connectivity with `K = 1`.
    pub spec: ArchSpec,
    pub teacher: ModuleGraph,
    pub train: Dataset,
    pub test: Dataset,
    pub damaged_block: usize,
    pub consumer: String,
}

/// Freezes block `id` so that its output equals its input on every
/// [`KEEP_EVERY`]-th channel and is zero elsewhere.
fn damage_block(graph: &mut ModuleGraph, id: usize) -> Result<()> {
    let block = graph
        .block_mut(id)
        .ok_or_else(|| Error::InvalidSpec(format!("no block {id}")))?;
    let last = block.params.layers.last_mut().expect("blocks have layers");
    last.bn.scale.data_mut().fill(0.0);
    for (c, s) in last.bn.shift.data_mut().iter_mut().enumerate() {
        *s = if c % KEEP_EVERY == 0 { 0.0 } else { DEAD_SHIFT };
    }
    graph.set_trainable(id, false)
}

impl PlantedTask {
    /// Number of single-input configurations of the consumer.
    pub fn configurations(&self) -> usize {
        self.spec.num_modules - 1
    }

    /// Fresh student with learnable connectivity. The stem and `b0` are
    /// frozen copies of the teacher's; `b2` and the head start from scratch.
    pub fn student<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModuleGraph> {
        let mut g = build(&self.spec, rng)?;
        for (dst, src) in g.nodes.iter_mut().zip(&self.teacher.nodes) {
            match (&mut dst.kind, &src.kind) {
                (NodeKind::Stem { layer }, NodeKind::Stem { layer: t }) => *layer = t.clone(),
                (NodeKind::Block { id: 0, block, .. }, NodeKind::Block { block: t, .. }) => *block = t.clone(),
                _ => {}
            }
        }
        g.stem_trainable = false;
        g.set_trainable(0, false)?;
        damage_block(&mut g, self.damaged_block)?;
        Ok(g)
    }

    /// Fresh student whose consumer reads only `producer`.
    pub fn student_fixed<R: Rng + ?Sized>(&self, producer: usize, rng: &mut R) -> Result<ModuleGraph> {
        let mut g = self.student(rng)?;
        let n = self.configurations();
        if producer >= n {
            return Err(Error::InvalidSpec(format!("producer {producer} outside 0..{n}")));
        }
        let mask = g.mask_mut(&self.consumer).expect("consumer mask exists");
        *mask = MaskState::fixed((0..n).map(|i| i == producer).collect())?;
        Ok(g)
    }

    /// Phase schedule and optimizer settings used for every run on this task.
    pub fn recipe() -> (PhaseSchedule, TrainConfig) {
        let lr = 0.05;
        let schedule = PhaseSchedule::four_phase([6, 4, 2, 2], [lr, lr, lr / 10.0, lr / 100.0], 0.1);
        let cfg = TrainConfig {
            batch_size: 32,
            augment: false,
            weight_decay: 1e-4,
            ..TrainConfig::default()
        };
        (schedule, cfg)
    }

    /// Trains one student per single-input configuration and ranks them by
    /// test accuracy, then test loss.
    pub fn oracle(&self, seed: u64) -> Result<PlantedOracle> {
        let (schedule, cfg) = Self::recipe();
        let mut results = Vec::new();
        for p in 0..self.configurations() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(p as u64));
            let mut g = self.student_fixed(p, &mut rng)?;
            run_phases(&mut g, &self.train, None, &schedule, &cfg, &mut rng, |_| {})?;
            results.push(evaluate(&mut g, &self.test, cfg.eval_batch)?);
        }
        let best = (0..results.len())
            .reduce(|b, i| {
                let (x, y) = (results[i], results[b]);
                if x.top1 > y.top1 || (x.top1 == y.top1 && x.loss < y.loss) { i } else { b }
            })
            .expect("at least one configuration");
        Ok(PlantedOracle { results, best })
    }

    /// Runs the search phase on a learnable student and returns the frozen
    /// selection with the trained graph.
    pub fn search(&self, seed: u64) -> Result<(usize, ModuleGraph)> {
        let (schedule, cfg) = Self::recipe();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(999));
        let mut g = self.student(&mut rng)?;
        run_phases(&mut g, &self.train, None, &schedule.truncated(1), &cfg, &mut rng, |_| {})?;
        g.freeze_masks();
        let sel = self.selected(&g).expect("consumer has an active input");
        Ok((sel, g))
    }

    /// Producer the consumer reads in eval mode (top-1 of the real mask if
    /// not yet frozen).
    pub fn selected(&self, graph: &ModuleGraph) -> Option<usize> {
        let (_, mask) = graph.masks().find(|(n, _)| n.name == format!("in:{}", self.consumer))?;
        let active = if mask.is_frozen() { mask.binary().to_vec() } else { mask.top_k() };
        active.iter().position(|&b| b)
    }
}

/// Brute-force ranking of the single-input configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOracle {
    pub results: Vec<EvalResult>,
    pub best: usize,
}

const TEACHER_HEAD_GAIN: f64 = 8.0;

/// Planted task on 3×8×8 Gaussian inputs with 4 classes.
pub fn make_planted(seed: u64, n_train: usize, n_test: usize) -> Result<PlantedTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ArchSpec {
        stem_channels: 8,
        image_size: 8,
        stages: 1,
        ..ArchSpec::resnet(3, 1, 4)
    };
    let mut task = PlantedTask {
        teacher: build(&spec, &mut rng)?,
        spec,
        train: Dataset::new(Tensor::zeros(&[0, 3, 8, 8]), vec![], 4, Split::Train)?,
        test: Dataset::new(Tensor::zeros(&[0, 3, 8, 8]), vec![], 4, Split::Test)?,
        damaged_block: 1,
        consumer: "b2".into(),
    };
    let teacher = &mut task.teacher;
    *teacher.mask_mut(&task.consumer).expect("consumer mask exists") = MaskState::fixed(vec![true, false])?;
    teacher.sample_masks(&mut rng);
    teacher.head.weight = teacher.head.weight.scaled(TEACHER_HEAD_GAIN);

    let n = n_train + n_test;
    let images = Tensor::randn(&[n, 3, 8, 8], 1.0, &mut rng);
    // batch statistics over the whole set, as a student sees them in training
    let logits = teacher.forward(&images, Mode::Train)?.logits;
    // centre each class logit so the labels are roughly balanced
    let k = task.spec.num_classes;
    let mut mean = vec![0.0; k];
    for row in logits.data().chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let labels: Vec<usize> = logits
        .data()
        .chunks(k)
        .map(|row| {
            (0..k).fold(0, |b, i| if row[i] - mean[i] > row[b] - mean[b] { i } else { b })
        })
        .collect();
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n).collect();
    task.train = Dataset::new(images.gather(&train_idx), labels[..n_train].to_vec(), k, Split::Train)?;
    task.test = Dataset::new(images.gather(&test_idx), labels[n_train..].to_vec(), k, Split::Test)?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = make_blobs(40, 4, [3, 8, 8], 10.0, 0.1, &mut rng).unwrap();
        assert_eq!(d.images.shape(), &[40, 3, 8, 8]);
        assert_eq!(d.labels.iter().filter(|&&l| l == 3).count(), 10);
    }

    #[test]
    fn damaged_block_keeps_a_quarter() {
        let task = make_planted(1, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = task.student_fixed(1, &mut rng).unwrap();
        g.sample_masks(&mut rng);
        let fwd = g.forward(&task.test.images, Mode::Train).unwrap();
        let id = |name: &str| g.nodes.iter().position(|n| n.name == name).unwrap();
        let (b0, b1) = (fwd.value(id("b0")), fwd.value(id("b1")));
        let plane = 8 * 8;
        for (i, (x, y)) in b0.data().chunks(plane).zip(b1.data().chunks(plane)).enumerate() {
            if i % 8 % KEEP_EVERY == 0 {
                assert_eq!(x, y);
            } else {
                assert!(y.iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(task.selected(&g), Some(1));
        assert_eq!(task.selected(&task.teacher), Some(0));
    }

    #[test]
    fn planted_labels_use_every_class() {
        let task = make_planted(3, 256, 64).unwrap();
        for c in 0..4 {
            assert!(task.train.labels.iter().filter(|&&l| l == c).count() > 16);
        }
    }
}
