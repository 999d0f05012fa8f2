//! MNIST in IDX format, and seeded batch iteration.
//!
//! IDX layout: a big-endian `u32` magic (`0x00000803` for 3-d image arrays,
//! `0x00000801` for 1-d label arrays), one big-endian `u32` per dimension,
//! then the unsigned byte payload.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse(format!("truncated header while reading {what}")))
}

/// Raw image array: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse(format!(
            "bad magic number {magic:#010x} for image file (expected {IMAGES_MAGIC:#010x})"
        )));
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Parse(format!(
            "truncated image payload: {} bytes, header promises {need}",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse(format!(
            "bad magic number {magic:#010x} for label file (expected {LABELS_MAGIC:#010x})"
        )));
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Parse(format!(
            "truncated label payload: {} bytes, header promises {count}",
            payload.len()
        )));
    }
    let labels = payload[..count].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::Parse(format!("label {bad} out of range 0..={}", CLASSES - 1)));
    }
    Ok(labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images scaled to `[0, 1]` with their labels.
///
/// Pixels are stored contiguously, one row of `dim` values per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn from_idx(images: &IdxImages, labels: &[u8]) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Parse(format!(
                "image/label count mismatch: {} images, {} labels",
                images.count,
                labels.len()
            )));
        }
        let dim = images.rows * images.cols;
        let pixels = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Self::new(dim, pixels, labels.to_vec())
    }

    pub fn from_idx_bytes(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        Self::from_idx(&parse_idx_images(image_bytes)?, &parse_idx_labels(label_bytes)?)
    }

    /// Builds a dataset from already-normalized pixels.
    pub fn new(dim: usize, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || pixels.len() != dim * labels.len() {
            return Err(Error::Parse(format!(
                "pixel buffer of {} values does not hold {} images of dimension {dim}",
                pixels.len(),
                labels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parse("pixel outside [0, 1]".into()));
        }
        if labels.iter().any(|&l| l as usize >= CLASSES) {
            return Err(Error::Parse("label outside 0..=9".into()));
        }
        Ok(Self { dim, pixels, labels })
    }

    /// Back to raw IDX arrays; pixels are rounded to the nearest byte.
    pub fn to_idx(&self, rows: usize, cols: usize) -> (IdxImages, Vec<u8>) {
        assert_eq!(rows * cols, self.dim);
        let pixels = self
            .pixels
            .iter()
            .map(|&p| libm::round(p * 255.0) as u8)
            .collect();
        (
            IdxImages {
                count: self.len(),
                rows,
                cols,
                pixels,
            },
            self.labels.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dim: self.dim,
            pixels: self.pixels[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Samples at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            dim: self.dim,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One-hot encoding of a class label.
pub fn one_hot(label: usize) -> [f64; CLASSES] {
    let mut t = [0.0; CLASSES];
    t[label] = 1.0;
    t
}

/// Batch size and shuffle seed for an epoch-wise pass over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self { batch_size, seed })
    }

    /// Sample order for `epoch`, shuffled with seed `seed ^ epoch`.
    pub fn order(&self, count: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch);
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self, count: usize) -> usize {
        count.div_ceil(self.batch_size)
    }
}

/// A group of samples drawn from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub dataset: &'a Dataset,
    pub indices: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(image, label)` pairs in batch order.
    pub fn samples(&self) -> impl Iterator<Item = (&'a [f64], usize)> + 'a {
        let d = self.dataset;
        self.indices.iter().map(move |&i| (d.image(i), d.label(i)))
    }

    /// `(image, one-hot target)` pairs in batch order.
    pub fn one_hot_samples(&self) -> impl Iterator<Item = (&'a [f64], [f64; CLASSES])> + 'a {
        self.samples().map(|(x, l)| (x, one_hot(l)))
    }
}

/// Batches covering one epoch's shuffled `order`; the last may be short.
pub fn batches<'a>(
    dataset: &'a Dataset,
    plan: &BatchPlan,
    order: &'a [usize],
) -> impl Iterator<Item = Batch<'a>> + 'a {
    order
        .chunks(plan.batch_size)
        .map(move |indices| Batch { dataset, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny(count: usize) -> Dataset {
        let dim = 4;
        let pixels = (0..count * dim).map(|i| (i % 256) as f64 / 255.0).collect();
        let labels = (0..count).map(|i| (i % 10) as u8).collect();
        Dataset::new(dim, pixels, labels).unwrap()
    }

    #[test]
    fn saturated_image_parses_to_ones() {
        let img = IdxImages {
            count: 1,
            rows: 28,
            cols: 28,
            pixels: vec![255; 784],
        };
        let d = Dataset::from_idx_bytes(&encode_idx_images(&img), &encode_idx_labels(&[3])).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.dim(), 784);
        assert!(d.image(0).iter().all(|&p| p == 1.0));
        assert_eq!(d.label(0), 3);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let labels = encode_idx_labels(&[1, 2]);
        let err = parse_idx_labels(&{
            let mut b = labels.clone();
            b[3] = 0x03;
            b
        })
        .unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("magic")));
        // A label file handed to the image parser.
        assert!(parse_idx_images(&labels).is_err());
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let img = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0; 8],
        };
        let bytes = encode_idx_images(&img);
        assert!(parse_idx_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx_images(&bytes[..10]).is_err());
        let err = Dataset::from_idx(&img, &[1]).unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("mismatch")));
        assert!(parse_idx_labels(&encode_idx_labels(&[11])).is_err());
    }

    #[test]
    fn batch_sizes_with_remainder() {
        let d = tiny(10);
        let plan = BatchPlan::new(4, 1).unwrap();
        let order = plan.order(d.len(), 0);
        let sizes: Vec<usize> = batches(&d, &plan, &order).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(plan.batches_per_epoch(10), 3);
    }

    #[test]
    fn same_seed_same_batches_and_epochs_differ() {
        let d = tiny(50);
        let plan = BatchPlan::new(8, 99).unwrap();
        assert_eq!(plan.order(d.len(), 0), plan.order(d.len(), 0));
        assert_ne!(plan.order(d.len(), 0), plan.order(d.len(), 1));
    }

    #[test]
    fn singleton_batches() {
        let d = tiny(7);
        let plan = BatchPlan::new(1, 3).unwrap();
        let order = plan.order(d.len(), 0);
        assert_eq!(batches(&d, &plan, &order).count(), 7);
        assert!(BatchPlan::new(0, 3).is_err());
    }

    #[test]
    fn one_hot_targets() {
        let d = tiny(3);
        let plan = BatchPlan::new(3, 0).unwrap();
        let order = [2usize, 0, 1];
        let b = batches(&d, &plan, &order).next().unwrap();
        let targets: Vec<[f64; CLASSES]> = b.one_hot_samples().map(|(_, t)| t).collect();
        assert_eq!(targets[0][2], 1.0);
        assert_eq!(targets[1][0], 1.0);
        assert_eq!(targets[2].iter().sum::<f64>(), 1.0);
    }
}
