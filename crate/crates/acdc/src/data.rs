//! Dataset ingestion and deterministic batching.
//!
//! Two sources are supported: big-endian IDX files (the MNIST container
//! format) and built-in synthetic generators. When no IDX data is present
//! the digit generator renders jittered bitmap-font glyphs, which keeps the
//! training and analysis pipelines runnable offline; real data is picked up
//! automatically from `ACDC_MNIST_DIR` (default `data/mnist`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::{Path, PathBuf};

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// In-memory labeled image set, pixels already scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<u8>,
        shape: (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        let per = c * h * w;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::config(format!(
                "dataset size mismatch: {} pixels for {} labels of {per} pixels each",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| (l as usize) >= classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            c,
            h,
            w,
            classes,
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

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.c * self.h * self.w;
        &self.images[i * per..(i + 1) * per]
    }

    /// Assembles the selected samples into a [b, c, h, w] tensor plus their
    /// labels.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v)));
            labels.push(self.label(i));
        }
        let t = Tensor::from_vec(&[idx.len(), self.c, self.h, self.w], data)
            .expect("batch shape consistent");
        (t, labels)
    }

    /// First `n` samples (or all, when fewer exist).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.c * self.h * self.w;
        Dataset {
            c: self.c,
            h: self.h,
            w: self.w,
            classes: self.classes,
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Seeded shuffled index order for one epoch; every sample exactly once.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(
        seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

// ---- IDX files ----

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::io(format!("file truncated at offset {offset}")))
}

/// Reads an IDX image file: magic 2051, dims (n, h, w), unsigned bytes.
/// Pixels are scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::io(format!(
            "{}: bad magic {magic} at offset 0 (expected {IDX_IMAGE_MAGIC})",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let h = be_u32(&bytes, 8)? as usize;
    let w = be_u32(&bytes, 12)? as usize;
    let expected = n * h * w;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::io(format!(
            "{}: expected {expected} pixel bytes from offset 16, found {}",
            path.display(),
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n, h, w, data))
}

/// Reads an IDX label file: magic 2049, one unsigned byte per sample.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::io(format!(
            "{}: bad magic {magic} at offset 0 (expected {IDX_LABEL_MAGIC})",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::io(format!(
            "{}: expected {n} label bytes from offset 8, found {}",
            path.display(),
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Loads one MNIST-layout split (`train-*` or `t10k-*`) from a directory.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let (img, lab) = if train {
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    } else {
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    };
    let (n, h, w, images) = load_idx_images(&dir.join(img))?;
    let labels = load_idx_labels(&dir.join(lab))?;
    if labels.len() != n {
        return Err(Error::io(format!(
            "{}: {n} images but {} labels",
            dir.display(),
            labels.len()
        )));
    }
    Dataset::new(images, labels, (1, h, w), 10)
}

/// Directory searched for IDX data: `ACDC_MNIST_DIR` or `data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("ACDC_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Real MNIST when present, synthetic digit glyphs otherwise. Returns the
/// dataset and a source tag for manifests.
pub fn digits_or_mnist(
    dir: &Path,
    train: bool,
    n: usize,
    seed: u64,
) -> Result<(Dataset, &'static str)> {
    let marker = if train {
        "train-images-idx3-ubyte"
    } else {
        "t10k-images-idx3-ubyte"
    };
    if dir.join(marker).exists() {
        Ok((load_mnist(dir, train)?.take(n), "mnist"))
    } else {
        // Disjoint seed streams for the two splits.
        let split_seed = seed.wrapping_add(if train { 0 } else { 0x5EED });
        Ok((synthetic_digits(n, split_seed), "synthetic-digits"))
    }
}

// ---- synthetic digits ----

/// 5x7 bitmap font, one row byte per glyph row, low 5 bits used.
const DIGIT_FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

fn font_sample(digit: usize, u: f64, v: f64) -> f64 {
    // Bilinear sample of the 5x7 bitmap; outside the glyph box is 0.
    let sample = |x: i64, y: i64| -> f64 {
        if !(0..5).contains(&x) || !(0..7).contains(&y) {
            return 0.0;
        }
        let row = DIGIT_FONT[digit][y as usize];
        if row >> (4 - x as usize) & 1 == 1 {
            1.0
        } else {
            0.0
        }
    };
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + sample(x0 + 1, y0) * fx * (1.0 - fy)
        + sample(x0, y0 + 1) * (1.0 - fx) * fy
        + sample(x0 + 1, y0 + 1) * fx * fy
}

/// Renders n 28x28 digit images with jittered position, scale, intensity,
/// and additive noise; labels cycle 0..9. Deterministic in the seed.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let (h, w) = (28usize, 28usize);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let box_h = rng.gen_range(16.0..22.0);
        let box_w = box_h * 5.0 / 7.0 * rng.gen_range(0.9..1.1);
        let y0 = rng.gen_range(1.0..(h as f64 - box_h - 1.0));
        let x0 = rng.gen_range(1.0..(w as f64 - box_w - 1.0));
        let amp = rng.gen_range(0.75..1.0);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 - x0) / box_w * 5.0 - 0.5;
                let v = (y as f64 - y0) / box_h * 7.0 - 0.5;
                let val = font_sample(digit, u, v) * amp + rng.gen_range(-0.03..0.03);
                images.push(val.clamp(0.0, 1.0));
            }
        }
        labels.push(digit as u8);
    }
    Dataset::new(images, labels, (1, h, w), 10).expect("generator is consistent")
}

// ---- synthetic blobs ----

/// Two-class localization set: a bright Gaussian blob in the left half
/// (class 0) or right half (class 1) of an otherwise dark image.
pub fn synthetic_blobs(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let s = size as f64;
    for i in 0..n {
        let class = (i % 2) as u8;
        let cx = if class == 0 {
            rng.gen_range(0.15 * s..0.35 * s)
        } else {
            rng.gen_range(0.65 * s..0.85 * s)
        };
        let cy = rng.gen_range(0.3 * s..0.7 * s);
        let sigma = rng.gen_range(0.08 * s..0.14 * s);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let val = (-d2 / (2.0 * sigma * sigma)).exp() + rng.gen_range(-0.02..0.02);
                images.push(val.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Dataset::new(images, labels, (1, size, size), 2).expect("generator is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend_from_slice(&(h as u32).to_be_bytes());
        bytes.extend_from_slice(&(w as u32).to_be_bytes());
        bytes.extend_from_slice(pixels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 256) as u8).collect();
        write_idx_images(&img_path, 4, 28, 28, &pixels);
        let (n, h, w, data) = load_idx_images(&img_path).unwrap();
        assert_eq!((n, h, w), (4, 28, 28));
        assert_eq!(data.len(), 4 * 28 * 28);
        assert!((data[255] - 1.0).abs() < 1e-12);

        let lab_path = dir.path().join("labels");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[3, 1, 4, 1]);
        std::fs::write(&lab_path, bytes).unwrap();
        let labels = load_idx_labels(&lab_path).unwrap();
        assert_eq!(labels, vec![3, 1, 4, 1]);

        let ds = Dataset::new(data, labels, (1, 28, 28), 10).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.label(2), 4);
    }

    #[test]
    fn truncated_idx_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        let pixels: Vec<u8> = vec![0; 10];
        write_idx_images(&path, 4, 28, 28, &pixels);
        let err = load_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("offset 16"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("magic");
        std::fs::write(&path, 99u32.to_be_bytes()).unwrap();
        let err = load_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let err = Dataset::new(vec![0.0; 4], vec![255], (1, 2, 2), 10).unwrap_err();
        assert!(err.to_string().contains("255"));
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synthetic_digits(20, 5);
        let b = synthetic_digits(20, 5);
        assert_eq!(a.image(7), b.image(7));
        assert_eq!(a.label(7), b.label(7));
        let c = synthetic_digits(20, 6);
        assert_ne!(a.image(7), c.image(7));
    }

    #[test]
    fn empty_dataset_iterates_nothing() {
        let ds = synthetic_digits(0, 1);
        assert!(ds.is_empty());
        assert!(epoch_permutation(ds.len(), 1, 0).is_empty());
    }

    #[test]
    fn blob_halves_pass_linear_probe() {
        // Fixed linear probe: sign of (left-half mass - right-half mass).
        let ds = synthetic_blobs(200, 28, 9);
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = ds.image(i);
            let (mut left, mut right) = (0.0, 0.0);
            for y in 0..28 {
                for x in 0..28 {
                    if x < 14 {
                        left += img[y * 28 + x];
                    } else {
                        right += img[y * 28 + x];
                    }
                }
            }
            let pred = usize::from(right > left);
            if pred == ds.label(i) {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 > 0.95);
    }

    #[test]
    fn permutation_covers_every_sample_once() {
        let perm = epoch_permutation(100, 3, 2);
        let mut seen = vec![false; 100];
        for &i in &perm {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(perm, epoch_permutation(100, 3, 2));
        assert_ne!(perm, epoch_permutation(100, 3, 3));
    }

    #[test]
    fn batch_tensor_shapes() {
        let ds = synthetic_digits(12, 4);
        let (t, labels) = ds.batch::<f32>(&[0, 5, 7]);
        assert_eq!(t.shape(), &[3, 1, 28, 28]);
        assert_eq!(labels, vec![0, 5, 7]);
    }
}
