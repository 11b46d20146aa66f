//! Datasets and reproducible batch streams.
//!
//! Shuffling and augmentation draw from ChaCha streams keyed on `(seed, epoch)` and
//! positioned by sample index, so any batch can be regenerated without replaying the ones
//! before it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Overrides the directory relative dataset paths are resolved against.
pub const DATA_ROOT_ENV: &str = "CASCADE_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N,C,H,W`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 || n != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("dataset", format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, rows: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.gather_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// Per-channel mean and standard deviation over the whole split.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let (c, h, w) = self.image_shape();
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in self.images.data().iter().enumerate() {
            let ch = (i / hw) % c;
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        let count = (self.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        (mean.iter().map(|&m| m as f32).collect(), std)
    }
}

/// Resolves a dataset path: relative paths go under `$CASCADE_DATA_ROOT` when it is set.
pub fn resolve_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST: &str = "test_batch.bin";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Parses CIFAR-10 binary records: one label byte, then 3072 CHW pixel bytes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::data(
            path,
            format!(
                "truncated record at byte offset {offset}: file size {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::data(
                path,
                format!("label {} > 9 at byte offset {}", rec[0], i * CIFAR_RECORD),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_split(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let (p, l) = parse_cifar10(&read(&path)?, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::data(dir, "no CIFAR-10 records"));
    }
    let images = Tensor::new([labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, split)
}

/// Reads the five training batches and the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_path(dir);
    Ok((
        cifar_split(&dir, &CIFAR_TRAIN, Split::Train)?,
        cifar_split(&dir, &[CIFAR_TEST], Split::Test)?,
    ))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::data(path, format!("header truncated at byte offset {at}")))
}

/// Parses an idx image file (magic `0x803`) and its label file (magic `0x801`).
pub fn parse_mnist(images: &[u8], labels: &[u8], image_path: &Path, label_path: &Path) -> Result<(Vec<f32>, Vec<usize>, usize, usize)> {
    let magic = be_u32(images, 0, image_path)?;
    if magic != 0x0000_0803 {
        return Err(Error::data(image_path, format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = be_u32(labels, 0, label_path)?;
    if magic != 0x0000_0801 {
        return Err(Error::data(label_path, format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(images, 4, image_path)? as usize;
    let rows = be_u32(images, 8, image_path)? as usize;
    let cols = be_u32(images, 12, image_path)? as usize;
    let n_labels = be_u32(labels, 4, label_path)? as usize;
    if n != n_labels {
        return Err(Error::data(
            label_path,
            format!("{n_labels} labels for {n} images in {}", image_path.display()),
        ));
    }
    let body = &images[16..];
    if body.len() != n * rows * cols {
        return Err(Error::data(
            image_path,
            format!("expected {} pixel bytes after the header, found {}", n * rows * cols, body.len()),
        ));
    }
    let lab = &labels[8..];
    if lab.len() != n {
        return Err(Error::data(label_path, format!("expected {n} label bytes, found {}", lab.len())));
    }
    if let Some(i) = lab.iter().position(|&l| l > 9) {
        return Err(Error::data(label_path, format!("label {} > 9 at byte offset {}", lab[i], 8 + i)));
    }
    Ok((
        body.iter().map(|&b| b as f32 / 255.0).collect(),
        lab.iter().map(|&l| l as usize).collect(),
        rows,
        cols,
    ))
}

fn mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (pixels, labels, rows, cols) = parse_mnist(&read(&ip)?, &read(&lp)?, &ip, &lp)?;
    if labels.is_empty() {
        return Err(Error::data(&ip, "no images"));
    }
    let images = Tensor::new([labels.len(), 1, rows, cols], pixels)?;
    Dataset::new(images, labels, 10, split)
}

/// Reads `train-*` and `t10k-*` idx files.
pub fn load_mnist_idx(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_path(dir);
    Ok((mnist_split(&dir, "train", Split::Train)?, mnist_split(&dir, "t10k", Split::Test)?))
}

/// Class-conditional Gaussian-blob images. Each class has two blobs with fixed centers,
/// widths and colors; samples jitter the centers and amplitudes and add pixel noise.
/// Labels cycle through the classes, so counts are balanced to within one.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, shape: (usize, usize, usize)) -> Result<Dataset> {
    let (c, h, w) = shape;
    if n < classes || classes == 0 {
        return Err(Error::config("data.samples", format!("need at least {classes} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Blob {
        cy: f64,
        cx: f64,
        width: f64,
        color: Vec<f64>,
    }
    let protos: Vec<[Blob; 2]> = (0..classes)
        .map(|_| {
            let mut blob = || Blob {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                width: rng.random_range(0.12..0.3) * h.max(w) as f64,
                color: (0..c).map(|_| rng.random_range(0.3..1.0)).collect(),
            };
            [blob(), blob()]
        })
        .collect();
    let jitter = 0.1 * h.max(w) as f64;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        let placed: Vec<(f64, f64, f64, f64)> = protos[label]
            .iter()
            .map(|b| {
                let dy: f64 = StandardNormal.sample(&mut rng);
                let dx: f64 = StandardNormal.sample(&mut rng);
                (b.cy + jitter * dy, b.cx + jitter * dx, b.width, rng.random_range(0.6..1.2))
            })
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for ((cy, cx, width, amp), b) in placed.iter().zip(&protos[label]) {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        v += amp * b.color[ch] * (-d2 / (2.0 * width * width)).exp();
                    }
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push((v + 0.25 * noise).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let images = Tensor::new([n, c, h, w], data)?;
    Dataset::new(images, labels, classes, Split::Train)
}

/// Splits off the last `test_fraction` of a dataset (after a seeded shuffle) as the test
/// split.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("data.test_fraction", "must lie in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut keyed_rng(seed, u64::MAX / 2, PERMUTATION_STREAM));
    let n_test = ((ds.len() as f64) * test_fraction).round() as usize;
    let (train, test) = idx.split_at(ds.len() - n_test);
    Ok((ds.subset(train, Split::Train), ds.subset(test, Split::Test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    #[default]
    None,
    /// Random window of the original size from the zero-padded image.
    Random,
    /// Central window of the zero-padded image.
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop: CropMode,
    pub pad: usize,
    /// Per-channel `(mean, std)` applied after augmentation.
    #[serde(skip)]
    pub normalize: Option<(Vec<f32>, Vec<f32>)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            crop: CropMode::None,
            pad: 4,
            normalize: None,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    /// One-hot rows.
    pub targets: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset rows in emission order.
    pub indices: Vec<usize>,
}

const PERMUTATION_STREAM: u64 = 0;
const AUGMENT_STREAM: u64 = 1;
/// ChaCha words reserved per sample for augmentation draws.
const WORDS_PER_SAMPLE: u128 = 16;

fn keyed_rng(seed: u64, epoch: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch.wrapping_mul(2).wrapping_add(purpose));
    r
}

/// Visiting order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut keyed_rng(seed, epoch, PERMUTATION_STREAM));
    }
    order
}

/// Applies flip, crop and normalization to one `C,H,W` image in place.
fn augment_one(img: &mut [f32], shape: (usize, usize, usize), cfg: &AugmentConfig, seed: u64, epoch: u64, position: usize) {
    let (c, h, w) = shape;
    let mut rng = keyed_rng(seed, epoch, AUGMENT_STREAM);
    rng.set_word_pos(position as u128 * WORDS_PER_SAMPLE);
    let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
    let (oy, ox) = match cfg.crop {
        CropMode::None => (cfg.pad, cfg.pad),
        CropMode::Center => (cfg.pad, cfg.pad),
        CropMode::Random => (rng.random_range(0..=2 * cfg.pad), rng.random_range(0..=2 * cfg.pad)),
    };
    if flip || (oy, ox) != (cfg.pad, cfg.pad) {
        let src = img.to_vec();
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    // Source pixel in the padded frame, then back to the original frame.
                    let sy = (y + oy) as isize - cfg.pad as isize;
                    let sx0 = (x + ox) as isize - cfg.pad as isize;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        plane[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    img[ch * h * w + y * w + x] = v;
                }
            }
        }
    }
    if let Some((mean, std)) = &cfg.normalize {
        for ch in 0..c {
            for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                *v = (*v - mean[ch]) / std[ch];
            }
        }
    }
}

/// Batches of one epoch in stream order; the final batch may be short.
pub fn batches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    augment: &'a AugmentConfig,
    shuffle: bool,
) -> impl Iterator<Item = Batch> + 'a {
    let batch_size = batch_size.max(1);
    let order = epoch_order(ds.len(), seed, epoch, shuffle);
    let shape = ds.image_shape();
    let per = shape.0 * shape.1 * shape.2;
    let k = ds.classes;
    (0..ds.len().div_ceil(batch_size)).map(move |b| {
        let start = b * batch_size;
        let rows = &order[start..(start + batch_size).min(order.len())];
        let mut images = ds.images.gather_rows(rows);
        for (j, chunk) in images.data_mut().chunks_mut(per).enumerate() {
            augment_one(chunk, shape, augment, seed, epoch, start + j);
        }
        let labels: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
        let mut onehot = vec![0.0f32; rows.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = 1.0;
        }
        Batch {
            images,
            targets: Tensor::new([rows.len(), k], onehot).expect("non-empty batch"),
            labels,
            indices: rows.to_vec(),
        }
    })
}
