//! Labeled image datasets: IDX and CIFAR-10 binary containers, class-balanced
//! subsetting, and a synthetic generator for download-free runs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `[count, channels, height, width]`, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("dataset pixels must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Self {
            images,
            labels,
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, kind: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(kind, "truncated header"))
}

fn byte_to_unit<T: Real>(b: u8) -> T {
    T::lit(b as f64 / 255.0)
}

fn unit_to_byte<T: Real>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn load_idx<T: Real>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let mut ds = parse_idx(&read(images_path)?, &read(labels_path)?)?;
    ds.provenance = format!("idx:{}", images_path.display());
    Ok(ds)
}

/// Parses an IDX image file (`0x00000803`, count, rows, cols, bytes) and its
/// label file (`0x00000801`, count, bytes).
pub fn parse_idx<T: Real>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    const KIND: &str = "idx";
    let magic = be_u32(images, 0, KIND)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(KIND, format!("bad image magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0, KIND)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(KIND, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, KIND)? as usize;
    let rows = be_u32(images, 8, KIND)? as usize;
    let cols = be_u32(images, 12, KIND)? as usize;
    let label_count = be_u32(labels, 4, KIND)? as usize;
    if count != label_count {
        return Err(Error::format(KIND, format!("{count} images but {label_count} labels")));
    }
    let payload = &images[16..];
    if payload.len() != count * rows * cols {
        return Err(Error::format(
            KIND,
            format!("header declares {} pixel bytes, file has {}", count * rows * cols, payload.len()),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != count {
        return Err(Error::format(
            KIND,
            format!("header declares {count} labels, file has {}", label_bytes.len()),
        ));
    }
    if count == 0 {
        return Err(Error::format(KIND, "empty dataset"));
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let images = Tensor::new(vec![count, 1, rows, cols], payload.iter().map(|&b| byte_to_unit(b)).collect())?;
    Dataset::new(images, labels, classes, "idx")
}

/// Serializes a single-channel dataset to IDX `(images, labels)` bytes.
pub fn write_idx<T: Real>(ds: &Dataset<T>) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::invalid(format!("IDX images are single-channel, got {c} channels")));
    }
    if ds.classes > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&v| unit_to_byte(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn load_cifar10_binary<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let mut ds = parse_cifar10(&read(path)?)?;
    ds.provenance = format!("cifar10:{}", path.display());
    Ok(ds)
}

/// Parses concatenated 3073-byte records: one label byte, then the red,
/// green and blue 32x32 planes.
pub fn parse_cifar10<T: Real>(bytes: &[u8]) -> Result<Dataset<T>> {
    const KIND: &str = "cifar-10 binary";
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::format(
            KIND,
            format!("length {} is not a positive multiple of {CIFAR10_RECORD}", bytes.len()),
        ));
    }
    let count = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR10_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(KIND, format!("record {i} has label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| byte_to_unit::<T>(b)));
    }
    Dataset::new(Tensor::new(vec![count, 3, 32, 32], pixels)?, labels, 10, "cifar10")
}

pub fn write_cifar10_binary<T: Real>(ds: &Dataset<T>) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, 32, 32] || ds.classes > 10 {
        return Err(Error::invalid("CIFAR-10 records are 3x32x32 with labels below 10"));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR10_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.images.row(i).iter().map(|&v| unit_to_byte(v)));
    }
    Ok(out)
}

/// Indices of a class-balanced random subset, `per_class` from each class.
pub fn subset_indices(labels: &[usize], classes: usize, per_class: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::with_capacity(per_class * classes);
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} examples, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(rng);
        picked.extend_from_slice(&members[..per_class]);
    }
    picked.shuffle(rng);
    Ok(picked)
}

pub fn subset<T: Real>(ds: &Dataset<T>, per_class: usize, rng: &mut impl Rng) -> Result<Dataset<T>> {
    let idx = subset_indices(&ds.labels, ds.classes, per_class, rng)?;
    let mut out = ds.select(&idx);
    out.provenance = format!("{}[{per_class}/class]", ds.provenance);
    Ok(out)
}

/// One Gaussian blob per image whose position and channel tint depend on the
/// class, plus pixel noise.
pub fn synthetic_blobs<T: Real>(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    rng: &mut impl Rng,
) -> Result<Dataset<T>> {
    let [c, h, w] = shape;
    if classes < 2 || per_class == 0 || c == 0 || h < 4 || w < 4 {
        return Err(Error::invalid("synthetic data needs >= 2 classes, >= 1 example each, images >= 4x4"));
    }
    let jitter = Normal::new(0.0, 0.05 * h.min(w) as f64).expect("positive std");
    let width = 0.15 * h.min(w) as f64;
    let mut pixels = Vec::with_capacity(classes * per_class * c * h * w);
    let mut labels = Vec::with_capacity(classes * per_class);
    for n in 0..classes * per_class {
        let class = n % classes;
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let cy = h as f64 / 2.0 + 0.28 * h as f64 * angle.sin() + jitter.sample(rng);
        let cx = w as f64 / 2.0 + 0.28 * w as f64 * angle.cos() + jitter.sample(rng);
        for ch in 0..c {
            let tint = if c == 1 { 1.0 } else { 0.55 + 0.45 * (angle + ch as f64 * 2.1).cos() };
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = tint * (-d2 / (2.0 * width * width)).exp() + rng.random_range(0.0..0.08);
                    pixels.push(T::lit(v.clamp(0.0, 1.0)));
                }
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![classes * per_class, c, h, w], pixels)?;
    Dataset::new(images, labels, classes, format!("synthetic:{classes}x{per_class}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_bytes(count: u32, rows: u32, cols: u32, payload: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..payload).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_header_arithmetic() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let (img, lab) = idx_bytes(100, 28, 28, 100 * 28 * 28, &labels);
        let ds = parse_idx::<f32>(&img, &lab).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.images.shape(), &[100, 1, 28, 28]);
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn idx_rejects_bad_input() {
        let labels = [0u8, 1, 2];
        let (img, lab) = idx_bytes(3, 4, 4, 3 * 16 - 1, &labels);
        assert!(matches!(parse_idx::<f32>(&img, &lab), Err(Error::Format { .. })));
        let (mut img, lab) = idx_bytes(3, 4, 4, 3 * 16, &labels);
        img[3] = 0x01;
        assert!(parse_idx::<f32>(&img, &lab).is_err());
        let (img, lab) = idx_bytes(3, 4, 4, 3 * 16, &labels[..2]);
        assert!(parse_idx::<f32>(&img, &lab).is_err());
        assert!(parse_idx::<f32>(&img[..10], &lab).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.push(i);
            bytes.extend(std::iter::repeat_n(128u8, 3072));
        }
        let ds = parse_cifar10::<f64>(&bytes).unwrap();
        assert_eq!(ds.images.shape(), &[10, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|&v| v == 128.0 / 255.0));
        assert!(parse_cifar10::<f64>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = 10;
        assert!(parse_cifar10::<f64>(&bytes).is_err());
        assert!(parse_cifar10::<f64>(&[]).is_err());
    }

    #[test]
    fn balanced_deterministic_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = synthetic_blobs::<f32>(10, 12, [1, 8, 8], &mut rng).unwrap();
        let a = subset(&ds, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = subset(&ds, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.class_counts(), vec![5; 10]);
        assert_eq!(a, b);
        assert!(subset(&ds, 13, &mut rng).is_err());
    }

    #[test]
    fn synthetic_pixels_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = synthetic_blobs::<f64>(3, 4, [3, 16, 16], &mut rng).unwrap();
        assert_eq!(ds.images.shape(), &[12, 3, 16, 16]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
