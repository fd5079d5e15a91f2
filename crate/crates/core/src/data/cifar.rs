use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn record_len(self) -> usize {
        match self {
            Variant::Cifar10 => 1 + PIXELS,
            Variant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            Variant::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
            ),
            Variant::Cifar100 => (vec!["train.bin"], "test.bin"),
        }
    }
}

/// Raw records of one file: pixel bytes (channel-major, row-major within a
/// channel) and labels (the fine label for CIFAR-100).
pub fn load_cifar_file(path: &Path, variant: Variant) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            offset: (bytes.len() / rec * rec) as u64,
            reason: format!("trailing {} bytes do not form a {rec}-byte record", bytes.len() % rec),
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[rec - PIXELS - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                offset: (i * rec) as u64,
                reason: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&r[rec - PIXELS..]);
    }
    Ok((pixels, labels))
}

/// Writes records in the binary format. CIFAR-100 coarse labels are written
/// as 0.
pub fn write_cifar(path: &Path, variant: Variant, pixels: &[u8], labels: &[usize]) -> Result<()> {
    if pixels.len() != labels.len() * PIXELS {
        return Err(Error::shape("write_cifar", &[labels.len() * PIXELS], &[pixels.len()]));
    }
    let mut out = Vec::with_capacity(labels.len() * variant.record_len());
    for (img, &l) in pixels.chunks_exact(PIXELS).zip(labels) {
        if variant == Variant::Cifar100 {
            out.push(0);
        }
        out.push(u8::try_from(l).map_err(|_| Error::InvalidSpec(format!("label {l} does not fit a byte")))?);
        out.extend_from_slice(img);
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: Dataset,
    pub test: Dataset,
}

fn to_dataset(pixels: Vec<u8>, labels: Vec<usize>, variant: Variant, split: Split) -> Result<Dataset> {
    let n = labels.len();
    let data = pixels.into_iter().map(|p| f64::from(p) / 255.0).collect();
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], data)?, labels, variant.num_classes(), split)
}

/// Loads the standard train and test files from `dir`. Pixels are scaled to
/// [0, 1]; the per-pixel mean of the (possibly truncated) training split is
/// subtracted from both splits. `train_subset` keeps the first `n` training
/// records.
pub fn load_cifar(dir: &Path, variant: Variant, train_subset: Option<usize>) -> Result<CifarSplits> {
    let (train_files, test_file) = variant.files();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in train_files {
        let (p, l) = load_cifar_file(&dir.join(f), variant)?;
        pixels.extend(p);
        labels.extend(l);
        if train_subset.is_some_and(|n| labels.len() >= n) {
            break;
        }
    }
    if let Some(n) = train_subset {
        labels.truncate(n);
        pixels.truncate(labels.len() * PIXELS);
    }
    let mut train = to_dataset(pixels, labels, variant, Split::Train)?;
    let (p, l) = load_cifar_file(&dir.join(test_file), variant)?;
    let mut test = to_dataset(p, l, variant, Split::Test)?;
    let mean = train.pixel_mean();
    train.subtract_mean(&mean);
    test.subtract_mean(&mean);
    Ok(CifarSplits { train, test })
}

/// Directory holding the standard files, if every one of them exists.
pub fn find_cifar_dir(dir: &Path, variant: Variant) -> Option<PathBuf> {
    let (train, test) = variant.files();
    let ok = train.iter().chain(std::iter::once(&test)).all(|f| dir.join(f).is_file());
    ok.then(|| dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_label_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let pixels: Vec<u8> = (0..2 * PIXELS).map(|i| (i * 7 % 256) as u8).collect();
        for variant in [Variant::Cifar10, Variant::Cifar100] {
            write_cifar(&path, variant, &pixels, &[6, 3]).unwrap();
            assert_eq!(fs::metadata(&path).unwrap().len() as usize, 2 * variant.record_len());
            let (p, l) = load_cifar_file(&path, variant).unwrap();
            assert_eq!(l, vec![6, 3]);
            assert_eq!(p, pixels);
        }
    }

    #[test]
    fn channel_major_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut rec = vec![1u8];
        rec.extend((0..PIXELS).map(|i| (i / 1024) as u8 * 100 + (i % 32 == 0) as u8));
        fs::write(&path, &rec).unwrap();
        let (p, _) = load_cifar_file(&path, Variant::Cifar10).unwrap();
        let d = to_dataset(p, vec![1], Variant::Cifar10, Split::Test).unwrap();
        // red plane, then green, then blue; column 0 of each row is marked
        assert_eq!(d.images.data()[0], 1.0 / 255.0);
        assert_eq!(d.images.data()[1], 0.0);
        assert_eq!(d.images.data()[1024 + 1], 100.0 / 255.0);
        assert_eq!(d.images.data()[2048 + 32], 201.0 / 255.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        fs::write(&path, vec![0u8; 2 * 3073 + 100]).unwrap();
        match load_cifar_file(&path, Variant::Cifar10) {
            Err(Error::CorruptFile { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_from_train_applied_to_both() {
        let dir = tempfile::tempdir().unwrap();
        let px = |v: u8| vec![v; PIXELS];
        write_cifar(&dir.path().join("train.bin"), Variant::Cifar100, &[px(10), px(30)].concat(), &[0, 1]).unwrap();
        write_cifar(&dir.path().join("test.bin"), Variant::Cifar100, &px(20), &[2]).unwrap();
        let s = load_cifar(dir.path(), Variant::Cifar100, None).unwrap();
        assert!(s.test.images.data().iter().all(|&v| v.abs() < 1e-12));
        assert!((s.train.images.data()[0] + 10.0 / 255.0).abs() < 1e-12);
        let s = load_cifar(dir.path(), Variant::Cifar100, Some(1)).unwrap();
        assert_eq!(s.train.len(), 1);
        assert!(s.train.images.data().iter().all(|&v| v == 0.0));
    }
}
