//! Datasets: IDX and CIFAR-binary loaders, normalization, augmentation and
//! deterministic batch order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Per-channel statistics of the train split.
    #[default]
    PerChannel,
    /// Each image standardized by its own mean and std.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mode: NormMode,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Parsed contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, row-major.
    Images {
        rows: usize,
        cols: usize,
        pixels: Vec<f32>,
    },
    Labels(Vec<u8>),
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::Images { rows, cols, pixels } => pixels.len() / (rows * cols).max(1),
            IdxData::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), offset: offset as u64, msg: msg.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    parse_idx(&read(path)?, path)
}

/// Parses big-endian IDX bytes; `path` is only used in diagnostics.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxData> {
    let word = |i: usize| -> Result<u32> {
        let at = 4 * i;
        bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or_else(|| {
            format_err(path, at, format!("truncated header: need {} bytes, file has {}", at + 4, bytes.len()))
        })
    };
    let magic = word(0)?;
    let (dims, header) = match magic {
        IDX_IMAGES => (vec![word(1)? as usize, word(2)? as usize, word(3)? as usize], 16),
        IDX_LABELS => (vec![word(1)? as usize], 8),
        other => return Err(format_err(path, 0, format!("bad magic 0x{other:08x}"))),
    };
    let body: usize = dims.iter().product();
    if bytes.len() != header + body {
        return Err(format_err(
            path,
            bytes.len().min(header + body),
            format!("expected {} bytes for dims {dims:?}, file has {}", header + body, bytes.len()),
        ));
    }
    let payload = &bytes[header..];
    Ok(if magic == IDX_IMAGES {
        IdxData::Images {
            rows: dims[1],
            cols: dims[2],
            pixels: payload.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    } else {
        IdxData::Labels(payload.to_vec())
    })
}

/// Raw CIFAR-10 binary records: `N × 3 × 32 × 32` pixels in `[0, 1]` plus labels.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = read(p)?;
        parse_cifar(&bytes, p, &mut pixels, &mut labels)?;
    }
    Ok((pixels, labels))
}

pub fn parse_cifar(bytes: &[u8], path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<usize> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            path,
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(bytes.len() / CIFAR_RECORD)
}

/// Images `N × C × H × W` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::invalid(
                "dataset",
                format!("{} pixels do not form {} images of shape {shape:?}", images.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid("dataset", format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { images, labels, shape, num_classes, split, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { images: self.images[..n * self.image_len()].to_vec(), labels: self.labels[..n].to_vec(), ..self.clone() }
    }

    /// Per-channel mean and (population) std.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in self.images.chunks_exact(c * hw) {
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    mean[ch] += f64::from(v);
                    sq[ch] += f64::from(v) * f64::from(v);
                }
            }
        }
        let n = (self.len() * hw).max(1) as f64;
        let mut std = vec![0f32; c];
        let mut out_mean = vec![0f32; c];
        for ch in 0..c {
            let m = mean[ch] / n;
            out_mean[ch] = m as f32;
            std[ch] = ((sq[ch] / n - m * m).max(0.0).sqrt()).max(1e-8) as f32;
        }
        Normalization { mode: NormMode::PerChannel, mean: out_mean, std }
    }

    pub fn normalize(&mut self, stats: &Normalization) -> Result<()> {
        let [c, h, w] = self.shape;
        let hw = h * w;
        match stats.mode {
            NormMode::PerChannel => {
                if stats.mean.len() != c || stats.std.len() != c {
                    return Err(Error::shape("normalize", &[stats.mean.len()], &[c]));
                }
                for img in self.images.chunks_exact_mut(c * hw) {
                    for ch in 0..c {
                        let (m, s) = (stats.mean[ch], stats.std[ch]);
                        img[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) / s);
                    }
                }
            }
            NormMode::PerImage => {
                for img in self.images.chunks_exact_mut(c * hw) {
                    let n = img.len() as f64;
                    let m = img.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                    let var = img.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / n;
                    let s = var.sqrt().max(1e-8);
                    img.iter_mut().for_each(|v| *v = ((f64::from(*v) - m) / s) as f32);
                }
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    /// Gathers `indices` into a `[B, C, H, W]` tensor, optionally augmenting
    /// image `j` of the batch with seed `(seed, j)`.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        augmentation: Option<(&AugmentationPolicy, u64)>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid("batch", format!("index {i} out of range {}", self.len())));
            }
            match augmentation {
                Some((policy, seed)) if policy.enabled => {
                    let img = augment(self.image(i), self.shape, policy, rng::derive_seed(&[seed, j as u64]))?;
                    data.extend(img.into_iter().map(|v| T::c(f64::from(v))));
                }
                _ => data.extend(self.image(i).iter().map(|&v| T::c(f64::from(v)))),
            }
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.shape;
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }
}

/// Computes normalization on `train` and applies it to both splits.
pub fn normalize_splits(train: &mut Dataset, test: &mut Dataset, mode: NormMode) -> Result<Normalization> {
    let stats = match mode {
        NormMode::PerChannel => train.channel_stats(),
        NormMode::PerImage => Normalization { mode, mean: Vec::new(), std: Vec::new() },
    };
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok(stats)
}

/// Reads the four standard IDX files from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let split = |imgs: &str, lbls: &str, split| -> Result<Dataset> {
        let images = load_idx(dir.join(imgs))?;
        let labels = load_idx(dir.join(lbls))?;
        let (IdxData::Images { rows, cols, pixels }, IdxData::Labels(labels)) = (images, labels) else {
            return Err(Error::invalid("load_mnist_dir", format!("{imgs}/{lbls} hold the wrong IDX kinds")));
        };
        Dataset::new(pixels, labels.into_iter().map(usize::from).collect(), [1, rows, cols], 10, split)
    };
    Ok((
        split("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?,
        split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?,
    ))
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from a CIFAR-10 directory.
pub fn load_cifar_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let (px, lb) = load_cifar_binary(&train)?;
    let (tpx, tlb) = load_cifar_binary(&[dir.join("test_batch.bin")])?;
    Ok((Dataset::new(px, lb, [3, 32, 32], 10, Split::Train)?, Dataset::new(tpx, tlb, [3, 32, 32], 10, Split::Test)?))
}

/// Gaussian blobs: one random centre per class, isotropic noise of std `spread`.
pub fn synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    spread: f32,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes == 0 || per_class < 2 {
        return Err(Error::invalid("synthetic_blobs", "need at least one class and two examples per class"));
    }
    let n: usize = shape.iter().product();
    let mut r = rng::stream_for(&[seed, 0xb10b]);
    let centres: Vec<Vec<f32>> =
        (0..num_classes).map(|_| (0..n).map(|_| rng::normal::<f32, _>(&mut r)).collect()).collect();
    let mut make = |count: usize, split| {
        let mut images = Vec::with_capacity(count * num_classes * n);
        let mut labels = Vec::with_capacity(count * num_classes);
        for i in 0..count * num_classes {
            let k = i % num_classes;
            images.extend(centres[k].iter().map(|&c| c + spread * rng::normal::<f32, _>(&mut r)));
            labels.push(k);
        }
        Dataset::new(images, labels, shape, num_classes, split)
    };
    let test_count = (per_class / 4).max(1);
    let train = make(per_class - test_count, Split::Train)?;
    let test = make(test_count, Split::Test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub pad: usize,
    /// Crop side; `0` means the input size.
    pub crop: usize,
    pub flip_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { enabled: true, pad: 4, crop: 0, flip_prob: 0.5 }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    fn crop_size(&self, shape: [usize; 3]) -> Result<(usize, usize)> {
        let (h, w) = if self.crop == 0 { (shape[1], shape[2]) } else { (self.crop, self.crop) };
        if h > shape[1] + 2 * self.pad || w > shape[2] + 2 * self.pad || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(
                "augment",
                format!("crop {h}×{w} does not fit {shape:?} padded by {}", self.pad),
            ));
        }
        Ok((h, w))
    }
}

/// Zero-pad, random crop, random horizontal flip. Identity when disabled.
pub fn augment(image: &[f32], shape: [usize; 3], policy: &AugmentationPolicy, seed: u64) -> Result<Vec<f32>> {
    if !policy.enabled {
        return Ok(image.to_vec());
    }
    let (ch, cw) = policy.crop_size(shape)?;
    let mut r = rng::stream(seed);
    let top = r.gen_range(0..=shape[1] + 2 * policy.pad - ch);
    let left = r.gen_range(0..=shape[2] + 2 * policy.pad - cw);
    let flip = r.gen::<f64>() < policy.flip_prob;
    crop_flip(image, shape, policy.pad, (top, left), (ch, cw), flip)
}

/// Crop at `offset` of the `pad`-padded image, then optionally mirror columns.
pub fn crop_flip(
    image: &[f32],
    shape: [usize; 3],
    pad: usize,
    offset: (usize, usize),
    size: (usize, usize),
    flip: bool,
) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    if image.len() != c * h * w {
        return Err(Error::shape("crop_flip", &[image.len()], &shape));
    }
    let (ch, cw) = size;
    if offset.0 + ch > h + 2 * pad || offset.1 + cw > w + 2 * pad {
        return Err(Error::invalid("crop_flip", "crop window leaves the padded image"));
    }
    let mut out = vec![0f32; c * ch * cw];
    for k in 0..c {
        for y in 0..ch {
            let sy = (offset.0 + y) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..cw {
                let sx = (offset.1 + x) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dx = if flip { cw - 1 - x } else { x };
                out[(k * ch + y) * cw + dx] = image[(k * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Index batches over a seeded permutation; the last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    size: usize,
    at: usize,
}

/// `seed = None` keeps the natural order.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed));
    }
    Ok(Batches { order, size: batch_size, at: 0 })
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.size).min(self.order.len());
        let b = self.order[self.at..end].to_vec();
        self.at = end;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.at).div_ceil(self.size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches {}
