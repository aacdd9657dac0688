//! Datasets, splitting, augmentation and the synthetic grating task.
//!
//! Two on-disk corpus formats are supported; both are described in
//! `docs/formats.md`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel affine normalization, computed on a training portion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(C, H, W)` of one example.
    pub shape: [usize; 3],
    /// Row-major `N x C x H x W` pixels.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub norm: Option<Normalization>,
    /// SHA-256 of the source file, when loaded from disk.
    pub checksum: Option<String>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], images: Vec<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if labels.is_empty() {
            return Err(Error::Dataset("zero examples".into()));
        }
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixels do not fit {} examples of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            shape,
            images,
            labels,
            num_classes,
            norm: None,
            checksum: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.example_len());
        for &i in indices {
            images.extend_from_slice(self.example(i));
        }
        Dataset {
            shape: self.shape,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            norm: self.norm.clone(),
            checksum: self.checksum.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation of this dataset.
    pub fn compute_normalization(&self) -> Normalization {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for ex in self.images.chunks_exact(c * plane) {
            for ch in 0..c {
                for &v in &ex[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let var = s / n - (m / n) * (m / n);
                var.max(0.0).sqrt().max(1e-6) as f32
            })
            .collect();
        Normalization {
            mean: mean.iter().map(|m| (m / n) as f32).collect(),
            std,
        }
    }

    /// Returns a copy normalized with `norm`.
    pub fn normalized(&self, norm: &Normalization) -> Dataset {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut out = self.clone();
        for ex in out.images.chunks_exact_mut(c * plane) {
            for ch in 0..c {
                for v in &mut ex[ch * plane..(ch + 1) * plane] {
                    *v = (*v - norm.mean[ch]) / norm.std[ch];
                }
            }
        }
        out.norm = Some(norm.clone());
        out
    }

    /// Stacks the given examples into an `(N, C, H, W)` batch, optionally
    /// augmenting each one.
    pub fn batch(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * self.example_len());
        for &i in indices {
            match augment.as_deref_mut() {
                Some(rng) => data.extend(augment_example(self.example(i), self.shape, rng)),
                None => data.extend_from_slice(self.example(i)),
            }
        }
        let t = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape is consistent");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Crop padding of the standard small-image augmentation.
pub const CROP_PAD: usize = 4;

/// Random crop from a zero-padded copy plus a horizontal flip with
/// probability 1/2.
pub fn augment_example(example: &[f32], shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let dy = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let dx = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let flip = rng.gen_bool(0.5);
    let mut out = vec![0.0; example.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let tx = if flip { w - 1 - x } else { x };
                let sx = tx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = example[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Seeded shuffled mini-batches of indices; the last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Label-stratified, seed-deterministic split.
///
/// The overall train size is `round(ratio * N)`; each class receives
/// `floor(ratio * n_c)` plus one for the classes with the largest
/// fractional remainders. Both halves are normalized with statistics of
/// the training half.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<SplitDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Dataset(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() < 2) {
        return Err(Error::Dataset(format!("class {c} has {} example; splitting needs at least 2", members.len())));
    }
    let target = (ratio * data.len() as f64).round() as usize;
    let mut quota: Vec<usize> = by_class.iter().map(|m| (ratio * m.len() as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    let frac = |c: usize| ratio * by_class[c].len() as f64 - quota[c] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for (members, &q) in by_class.iter().zip(&quota) {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        train_idx.extend_from_slice(&m[..q]);
        val_idx.extend_from_slice(&m[q..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let raw_train = data.subset(&train_idx);
    let norm = raw_train.compute_normalization();
    Ok(SplitDataset {
        train: raw_train.normalized(&norm),
        val: data.subset(&val_idx).normalized(&norm),
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Parameters of the synthetic grating task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise (signal amplitude is 1).
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub const DEFAULT_NOISE: f64 = 0.6;
}

/// Orientation count of the grating task; classes combine an orientation
/// with a spatial period.
const ORIENTATIONS: usize = 5;
const PERIODS: [f64; 4] = [3.5, 6.0, 2.5, 9.0];

/// Single-channel images of mirror-symmetric plaids.
///
/// Class `c` superimposes two gratings at angles `±theta` (so horizontal
/// flips preserve the class) with `theta = (c mod 5) * 22.5 deg` and period
/// `PERIODS[c / 5]`; phases and contrast are random per example and
/// Gaussian noise is added.
pub fn make_synthetic_task(task: &SyntheticTask) -> Result<Dataset> {
    let k = task.num_classes;
    if k < 2 || k > ORIENTATIONS * PERIODS.len() {
        return Err(Error::Dataset(format!(
            "synthetic task supports 2..={} classes, got {k}",
            ORIENTATIONS * PERIODS.len()
        )));
    }
    if task.examples_per_class == 0 || task.image_size < 4 {
        return Err(Error::Dataset("synthetic task needs examples and an image of at least 4x4".into()));
    }
    if !(task.noise >= 0.0 && task.noise.is_finite()) {
        return Err(Error::Dataset(format!("noise must be non-negative, got {}", task.noise)));
    }
    let s = task.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let noise = Normal::new(0.0, task.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut images = Vec::with_capacity(k * task.examples_per_class * s * s);
    let mut labels = Vec::with_capacity(k * task.examples_per_class);
    for _ in 0..task.examples_per_class {
        for c in 0..k {
            let theta = (c % ORIENTATIONS) as f64 * std::f64::consts::PI / 8.0;
            let freq = 2.0 * std::f64::consts::PI / PERIODS[c / ORIENTATIONS];
            let contrast = rng.gen_range(0.7..1.3);
            let (p1, p2): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
            for y in 0..s {
                for x in 0..s {
                    let (xf, yf) = (x as f64, y as f64);
                    let a = (freq * (xf * theta.cos() + yf * theta.sin()) + p1).cos();
                    let b = (freq * (-xf * theta.cos() + yf * theta.sin()) + p2).cos();
                    let mut v = 0.5 * contrast * (a + b);
                    if task.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    images.push(v as f32);
                }
            }
            labels.push(c);
        }
    }
    Dataset::new([1, s, s], images, labels, k)
}

/// On-disk corpus format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Idx,
    Csv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(CorpusFormat::Idx),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::Dataset(format!("unknown corpus format {other:?} (expected idx or csv)"))),
        }
    }
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads a corpus file. `shape` is required for CSV input and ignored for
/// the self-describing binary format.
pub fn load_small_image_corpus(path: &Path, format: CorpusFormat, shape: Option<[usize; 3]>) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = match format {
        CorpusFormat::Idx => parse_idx(&bytes)?,
        CorpusFormat::Csv => parse_csv(&bytes, shape)?,
    };
    let sum = checksum(&bytes);
    log::info!("loaded {} examples from {} (sha256 {sum})", ds.len(), path.display());
    ds.checksum = Some(sum);
    Ok(ds)
}

/// Magic of the binary corpus: two zero bytes, type code 0x08 (unsigned
/// bytes) and rank 4.
pub const IDX_MAGIC: [u8; 4] = [0, 0, 0x08, 4];

pub fn encode_idx(data: &Dataset) -> Vec<u8> {
    let [c, h, w] = data.shape;
    let mut out = IDX_MAGIC.to_vec();
    for d in [data.len(), c, h, w, data.num_classes] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend(data.example(i).iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn parse_idx(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Dataset("zero examples: the file is empty".into()));
    }
    let err = |offset: usize, detail: String| Error::Parse { offset, detail };
    if bytes.len() < 24 {
        return Err(err(bytes.len(), "header needs 24 bytes".into()));
    }
    if bytes[..4] != IDX_MAGIC {
        return Err(err(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let dim = |i: usize| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("four bytes")) as usize;
    let (n, c, h, w, k) = (dim(0), dim(1), dim(2), dim(3), dim(4));
    if n == 0 {
        return Err(Error::Dataset("zero examples".into()));
    }
    let per = c * h * w;
    let expected = 24 + n * (1 + per);
    if bytes.len() != expected {
        return Err(err(bytes.len().min(expected), format!("expected {expected} bytes for {n} examples, file has {}", bytes.len())));
    }
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes[24..].chunks_exact(1 + per).enumerate() {
        if rec[0] as usize >= k {
            return Err(err(24 + i * (1 + per), format!("label {} outside [0, {k})", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new([c, h, w], images, labels, k)
}

/// `label,p0,p1,...` rows; an optional first line starting with `label` is
/// a header. The class count is one more than the largest label.
pub fn parse_csv(bytes: &[u8], shape: Option<[usize; 3]>) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        detail: "file is not valid utf-8".into(),
    })?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let row = line.trim_end_matches(['\n', '\r']);
        if row.trim().is_empty() || (labels.is_empty() && images.is_empty() && row.starts_with("label")) {
            continue;
        }
        let mut field_start = start;
        let mut fields = 0;
        for (j, field) in row.split(',').enumerate() {
            let f = field.trim();
            let bad = |what: &str| Error::Parse {
                offset: field_start,
                detail: format!("{what} {f:?}"),
            };
            if j == 0 {
                labels.push(f.parse::<usize>().map_err(|_| bad("invalid label"))?);
            } else {
                let v: f32 = f.parse().map_err(|_| bad("invalid pixel value"))?;
                if !v.is_finite() {
                    return Err(bad("non-finite pixel value"));
                }
                images.push(v);
            }
            field_start += field.len() + 1;
            fields += 1;
        }
        match width {
            None => width = Some(fields - 1),
            Some(wd) if wd != fields - 1 => {
                return Err(Error::Parse {
                    offset: start,
                    detail: format!("row has {} pixels, earlier rows have {wd}", fields - 1),
                })
            }
            _ => {}
        }
    }
    let Some(pixels) = width else {
        return Err(Error::Dataset("zero examples".into()));
    };
    let shape = match shape {
        Some(s) => s,
        None => {
            let side = (pixels as f64).sqrt().round() as usize;
            if side * side != pixels {
                return Err(Error::Dataset(format!("{pixels} pixels per row is not a square image; give the shape explicitly")));
            }
            [1, side, side]
        }
    };
    if shape.iter().product::<usize>() != pixels {
        return Err(Error::Dataset(format!("shape {shape:?} does not match {pixels} pixels per row")));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(shape, images, labels, k)
}

pub fn encode_csv(data: &Dataset) -> String {
    let mut out = String::from("label");
    for i in 0..data.example_len() {
        out.push_str(&format!(",p{i}"));
    }
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&data.labels[i].to_string());
        for v in data.example(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
