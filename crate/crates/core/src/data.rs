//! Dataset loading (IDX, CIFAR-10 binary), sampling and synthetic fixtures.
//!
//! Pixels are scaled by 1/255 into `[0, 1]`; no standardisation is applied.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

pub const NUM_CLASSES: usize = 10;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    /// `(N, C, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: &str, split: Split, images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for images shaped {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label {bad} out of range")));
        }
        Ok(Dataset {
            name: name.to_string(),
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.select_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        (
            self.images.select_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parses a pair of IDX files (big-endian, magic 0x803 images / 0x801 labels).
pub fn parse_idx(name: &str, split: Split, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    if be_u32(images, 0)? != IDX_IMAGES {
        return Err(Error::Format("bad IDX image magic".into()));
    }
    if be_u32(labels, 0)? != IDX_LABELS {
        return Err(Error::Format("bad IDX label magic".into()));
    }
    let n = be_u32(images, 4)? as usize;
    let (h, w) = (be_u32(images, 8)? as usize, be_u32(images, 12)? as usize);
    let nl = be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    let pixels = images
        .get(16..)
        .filter(|p| p.len() == n * h * w)
        .ok_or_else(|| Error::Format("IDX image payload truncated or oversized".into()))?;
    let labels = labels
        .get(8..)
        .filter(|p| p.len() == n)
        .ok_or_else(|| Error::Format("IDX label payload truncated or oversized".into()))?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(name, split, Tensor::new(vec![n, 1, h, w], data)?, labels.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or("idx")
        .to_string();
    let split = if images_path.to_string_lossy().contains("t10k") {
        Split::Test
    } else {
        Split::Train
    };
    parse_idx(&name, split, &read(images_path)?, &read(labels_path)?)
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut ds = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = split;
    Ok(ds)
}

/// Parses concatenated CIFAR-10 records: one label byte then 3x32x32 CHW pixels.
pub fn parse_cifar(name: &str, split: Split, bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(name, split, Tensor::new(vec![n, 3, 32, 32], data)?, labels)
}

pub fn load_cifar_bin(paths: &[&Path], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = read(p)?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!("{}: record-size mismatch", p.display())));
        }
        bytes.extend(chunk);
    }
    parse_cifar("cifar10", split, &bytes)
}

/// Inverse of the 1/255 scaling, as written by CIFAR-style record files.
pub fn encode_cifar_record(label: u8, image: &[f32]) -> Vec<u8> {
    let mut rec = Vec::with_capacity(CIFAR_RECORD);
    rec.push(label);
    rec.extend(image.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    rec
}

/// Picks `per_class` random examples of every class, ordered by class.
pub fn sample_class_balanced(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES as u8 {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} examples, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    Ok(ds.subset(&chosen))
}

/// Deterministic learnable noise: each class has a fixed random prototype and
/// every example is its prototype blended with fresh noise.
pub fn synth_dataset(n: usize, shape: [usize; 3], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..NUM_CLASSES)
        .map(|_| (0..per).map(|_| rng.gen::<f32>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen_range(0..NUM_CLASSES);
        labels.push(y as u8);
        data.extend(protos[y].iter().map(|&p| 0.7 * p + 0.3 * rng.gen::<f32>()));
    }
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("consistent shape");
    Dataset::new("synth", Split::Train, images, labels).expect("labels in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(pixels: &[u8], labels: &[u8], h: u32, w: u32) -> (Vec<u8>, Vec<u8>) {
        let n = labels.len() as u32;
        let mut img = Vec::new();
        for v in [IDX_IMAGES, n, h, w] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [IDX_LABELS, n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_scaling_and_shape() {
        let (img, lab) = idx_pair(&[0, 255, 128, 7, 255, 0, 0, 0], &[3, 9], 2, 2);
        let ds = parse_idx("t", Split::Train, &img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images.data()[1], 1.0);
        assert_eq!(ds.images.data()[0], 0.0);
        assert_eq!(ds.labels, vec![3, 9]);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_pair(&[0; 8], &[1, 2], 2, 2);
        assert!(parse_idx("t", Split::Train, &img[..img.len() - 1], &lab).is_err());
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(parse_idx("t", Split::Train, &bad, &lab).is_err());
        let (_, lab3) = idx_pair(&[0; 12], &[1, 2, 3], 2, 2);
        assert!(parse_idx("t", Split::Train, &img, &lab3).is_err());
        let (img, lab) = idx_pair(&[0; 4], &[12], 2, 2);
        assert!(parse_idx("t", Split::Train, &img, &lab).is_err());
    }

    #[test]
    fn cifar_record_round_trip() {
        let pixels: Vec<u8> = (0..3072).map(|i| (i * 7 % 256) as u8).collect();
        let mut rec = vec![4u8];
        rec.extend_from_slice(&pixels);
        let ds = parse_cifar("c", Split::Test, &rec).unwrap();
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(encode_cifar_record(ds.labels[0], ds.images.data()), rec);
        assert!(parse_cifar("c", Split::Test, &rec[..3000]).is_err());
    }

    #[test]
    fn balanced_sampling() {
        let ds = synth_dataset(300, [1, 4, 4], 1);
        let s = sample_class_balanced(&ds, 1, 5).unwrap();
        assert_eq!(s.labels, (0..10).collect::<Vec<u8>>());
        assert_eq!(s, sample_class_balanced(&ds, 1, 5).unwrap());
        assert_eq!(sample_class_balanced(&ds, 0, 5).unwrap().len(), 0);
        assert!(sample_class_balanced(&ds, 1000, 5).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(20, [1, 8, 8], 3);
        let b = synth_dataset(20, [1, 8, 8], 3);
        assert!(a.images.bits_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
