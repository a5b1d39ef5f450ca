//! Image datasets: MNIST IDX and CIFAR-10 binary readers/writers, synthetic
//! blob images, and stratified down-sampling.
//!
//! Pixels are kept as the raw bytes of the source files and scaled by 1/255
//! only when an image is materialized as a [`Tensor`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const MNIST_SAMPLE_IMAGES: &str = "mnist-sample-images-idx3-ubyte";
pub const MNIST_SAMPLE_LABELS: &str = "mnist-sample-labels-idx1-ubyte";

/// `K` labelled images of a common `H×W×C` shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    split: String,
    height: usize,
    width: usize,
    channels: usize,
    classes: usize,
    /// `K·H·W·C` bytes, each image stored `H×W×C` row-major.
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

impl Dataset {
    pub fn new(
        name: &str,
        split: &str,
        shape: [usize; 3],
        classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let [height, width, channels] = shape;
        if shape.contains(&0) || classes == 0 {
            return Err(data_err(format!("invalid image shape {shape:?} or class count {classes}")));
        }
        let per = height * width * channels;
        if pixels.len() != per * labels.len() {
            return Err(data_err(format!(
                "{} pixel bytes for {} images of {per} bytes",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(data_err(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            split: split.into(),
            height,
            width,
            channels,
            classes,
            pixels,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = split.into();
        self
    }

    /// Number of examples `K`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Raw bytes of image `i`.
    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as an `H×W×C` tensor in `[0, 1]`.
    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self
            .image_bytes(i)
            .iter()
            .map(|&b| T::lit(f64::from(b) / 255.0))
            .collect();
        Tensor::new(&self.image_shape(), data).expect("dataset shape is valid")
    }

    pub fn images<T: Real>(&self, indices: &[usize]) -> Vec<Tensor<T>> {
        indices.iter().map(|&i| self.image(i)).collect()
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given examples in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.header()
        }
    }

    fn header(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            pixels: Vec::new(),
            labels: Vec::new(),
            ..*self
        }
    }
}

/// Per-class quotas summing to `n`, proportional to `counts` (largest
/// remainder; ties go to the lower class index).
fn quotas(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let mut q: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let mut rest: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c * n % total, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - q.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        q[i] += 1;
    }
    q
}

/// Indices of a stratified random sample of `n` examples, in ascending order.
pub fn stratified_indices(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > ds.len() {
        return Err(data_err(format!("cannot take {n} examples from {}", ds.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut picked = Vec::with_capacity(n);
    for (members, q) in by_class.iter_mut().zip(quotas(&counts, n)) {
        let (chosen, _) = members.partial_shuffle(&mut rng, q);
        picked.extend_from_slice(chosen);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Stratified down-sample to `n` examples, preserving original order.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&stratified_indices(ds, n, seed)?))
}

/// Disjoint stratified `(train, val)` split with `val_n` validation examples.
pub fn stratified_split(ds: &Dataset, val_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let val = stratified_indices(ds, val_n, seed)?;
    let mut in_val = vec![false; ds.len()];
    for &i in &val {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !in_val[i]).collect();
    Ok((
        ds.select(&train).with_split("train"),
        ds.select(&val).with_split("val"),
    ))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| data_err(format!("{what}: truncated header")))
}

/// Parses in-memory IDX image and label files.
pub fn parse_mnist(images: &[u8], labels: &[u8], split: &str) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(data_err(format!("images: bad magic {magic:#010x}")));
    }
    let k = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let body = &images[16..];
    if body.len() != k * rows * cols {
        return Err(data_err(format!(
            "images: expected {} pixel bytes, found {}",
            k * rows * cols,
            body.len()
        )));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(data_err(format!("labels: bad magic {magic:#010x}")));
    }
    let kl = be_u32(labels, 4, "labels")? as usize;
    let lbody = &labels[8..];
    if lbody.len() != kl {
        return Err(data_err(format!("labels: expected {kl} bytes, found {}", lbody.len())));
    }
    if kl != k {
        return Err(data_err(format!("count mismatch: {k} images, {kl} labels")));
    }
    let labels = lbody.iter().map(|&b| usize::from(b)).collect();
    Dataset::new("mnist", split, [rows, cols, 1], 10, body.to_vec(), labels)
}

/// Serializes a single-channel dataset as `(images, labels)` IDX bytes.
pub fn to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.channels != 1 || ds.classes > 256 {
        return Err(data_err("IDX output needs one channel and at most 256 classes"));
    }
    let mut img = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IDX_IMAGE_MAGIC, ds.len() as u32, ds.height as u32, ds.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&ds.pixels);
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn split_tag(path: &Path) -> String {
    let stem = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
    match stem {
        s if s.starts_with("train") || s.starts_with("data_batch") => "train".into(),
        s if s.starts_with("t10k") || s.starts_with("test") => "test".into(),
        s => s.split('-').next().unwrap_or(s).to_string(),
    }
}

/// Reads an MNIST IDX image/label file pair.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    parse_mnist(&images, &labels, &split_tag(images_path))
        .map_err(|e| data_err(format!("{}: {e}", images_path.display())))
}

/// Parses CIFAR-10 binary batches: records of one label byte followed by the
/// red, green and blue 32×32 planes.
pub fn parse_cifar10(batches: &[&[u8]], split: &str) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (b, bytes) in batches.iter().enumerate() {
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(data_err(format!(
                "batch {b}: length {} is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(usize::from(rec[0]));
            let planes = &rec[1..];
            for p in 0..1024 {
                for c in 0..3 {
                    pixels.push(planes[c * 1024 + p]);
                }
            }
        }
    }
    Dataset::new("cifar10", split, [32, 32, 3], 10, pixels, labels)
}

/// Serializes a 32×32×3 dataset as one CIFAR-10 binary batch.
pub fn to_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [32, 32, 3] || ds.classes > 256 {
        return Err(data_err("CIFAR output needs 32×32×3 images"));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        let img = ds.image_bytes(i);
        for c in 0..3 {
            out.extend((0..1024).map(|p| img[p * 3 + c]));
        }
    }
    Ok(out)
}

pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let files = batch_paths
        .iter()
        .map(|p| read(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let slices: Vec<&[u8]> = files.iter().map(Vec::as_slice).collect();
    let split = batch_paths
        .first()
        .map(|p| split_tag(p.as_ref()))
        .unwrap_or_default();
    parse_cifar10(&slices, &split)
}

/// Class-conditional Gaussian-blob images at signal-to-noise ratio 10.
pub fn synthetic(classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Dataset {
    synthetic_with_snr(classes, per_class, shape, 10.0, seed)
}

/// Each class owns a Gaussian bump centred on a circle around the image
/// centre; images are `0.2 + 0.6·bump + noise`, noise standard deviation
/// `0.6 / snr`, clamped and quantized to bytes. Labels cycle `0..M`.
pub fn synthetic_with_snr(classes: usize, per_class: usize, shape: [usize; 3], snr: f64, seed: u64) -> Dataset {
    let [h, w, c] = shape;
    let classes = classes.max(1);
    let radius = 0.3 * h.min(w) as f64;
    let sigma = 0.2 * h.min(w) as f64;
    let proto: Vec<Vec<f64>> = (0..classes)
        .map(|m| {
            let angle = std::f64::consts::TAU * m as f64 / classes as f64;
            let cy = (h as f64 - 1.0) / 2.0 + radius * angle.sin();
            let cx = (w as f64 - 1.0) / 2.0 + radius * angle.cos();
            let mut img = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    img.extend(std::iter::repeat_n(v, c));
                }
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0, 0.6 / snr).expect("finite positive deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(classes * per_class * h * w * c);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (m, p) in proto.iter().enumerate() {
            labels.push(m);
            pixels.extend(p.iter().map(|&v| {
                let x = 0.2 + 0.6 * v + noise.sample(&mut rng);
                (x.clamp(0.0, 1.0) * 255.0).round() as u8
            }));
        }
    }
    Dataset::new("synthetic", "train", shape, classes, pixels, labels).expect("consistent by construction")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Official train + t10k IDX files.
    Mnist,
    /// A single IDX pair split stratified into train/val.
    MnistSample,
    Cifar10,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Mnist => "mnist",
            Source::MnistSample => "mnist_sample",
            Source::Cifar10 => "cifar10",
            Source::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mnist" => Ok(Source::Mnist),
            "mnist_sample" => Ok(Source::MnistSample),
            "cifar10" => Ok(Source::Cifar10),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset '{other}' (mnist, mnist_sample, cifar10, synthetic)"
            ))),
        }
    }
}

pub const DATA_KEYS: [&str; 7] = [
    "data.dataset",
    "data.dir",
    "data.train_size",
    "data.val_size",
    "data.seed",
    "data.per_class",
    "data.snr",
];

/// Which dataset to load and how to cut it down.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: Source,
    /// Directory holding the dataset files; overridden by the CLI.
    pub dir: Option<PathBuf>,
    /// Stratified training subset size, `0` keeps everything.
    pub train_size: usize,
    /// Validation size; `0` keeps the full test split. For
    /// [`Source::MnistSample`] it is the held-out count.
    pub val_size: usize,
    pub seed: u64,
    /// Synthetic images per class in the training split.
    pub per_class: usize,
    pub snr: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Mnist,
            dir: None,
            train_size: 0,
            val_size: 0,
            seed: 0,
            per_class: 64,
            snr: 10.0,
        }
    }
}

impl DataConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("data.dataset", &self.source.to_string());
        if let Some(d) = &self.dir {
            kv.set("data.dir", &d.display().to_string());
        }
        kv.set("data.train_size", &self.train_size.to_string());
        kv.set("data.val_size", &self.val_size.to_string());
        kv.set("data.seed", &self.seed.to_string());
        kv.set("data.per_class", &self.per_class.to_string());
        kv.set("data.snr", &self.snr.to_string());
        kv
    }

    pub fn from_kv(kv: &KeyValues, base: DataConfig) -> Result<Self> {
        let mut c = base;
        if let Some(v) = kv.parse_opt("data.dataset")? {
            c.source = v;
        }
        if let Some(d) = kv.get("data.dir") {
            c.dir = Some(PathBuf::from(d));
        }
        if let Some(v) = kv.parse_opt("data.train_size")? {
            c.train_size = v;
        }
        if let Some(v) = kv.parse_opt("data.val_size")? {
            c.val_size = v;
        }
        if let Some(v) = kv.parse_opt("data.seed")? {
            c.seed = v;
        }
        if let Some(v) = kv.parse_opt("data.per_class")? {
            c.per_class = v;
        }
        if let Some(v) = kv.parse_opt("data.snr")? {
            c.snr = v;
        }
        if !(c.snr > 0.0) {
            return Err(Error::Config("data.snr must be positive".into()));
        }
        Ok(c)
    }

    /// Loads `(train, val)`. Synthetic data uses `shape` and `classes` from
    /// the model; file-backed sources read from `dir` (or [`Self::dir`]).
    pub fn load(&self, dir: Option<&Path>, shape: [usize; 3], classes: usize) -> Result<(Dataset, Dataset)> {
        let dir = dir.or(self.dir.as_deref());
        let need_dir = || {
            dir.ok_or_else(|| Error::Config(format!("dataset '{}' needs a data directory", self.source)))
        };
        let (train, val) = match self.source {
            Source::Synthetic => {
                let train = synthetic_with_snr(classes, self.per_class, shape, self.snr, self.seed);
                let val_per = (self.per_class / 4).max(1);
                let val = synthetic_with_snr(classes, val_per, shape, self.snr, self.seed.wrapping_add(1));
                (train, val.with_split("val"))
            }
            Source::Mnist => {
                let d = need_dir()?;
                let train = load_mnist(&d.join(MNIST_TRAIN_IMAGES), &d.join(MNIST_TRAIN_LABELS))?;
                let val = load_mnist(&d.join(MNIST_TEST_IMAGES), &d.join(MNIST_TEST_LABELS))?;
                (train, val)
            }
            Source::MnistSample => {
                let d = need_dir()?;
                let all = load_mnist(&d.join(MNIST_SAMPLE_IMAGES), &d.join(MNIST_SAMPLE_LABELS))?;
                let val_n = if self.val_size == 0 { all.len() / 5 } else { self.val_size };
                let (train, val) = stratified_split(&all, val_n, self.seed)?;
                let train = if self.train_size == 0 { train } else { subset(&train, self.train_size, self.seed)? };
                return Ok((train, val));
            }
            Source::Cifar10 => {
                let d = need_dir()?;
                let d = if d.join("cifar-10-batches-bin").is_dir() { d.join("cifar-10-batches-bin") } else { d.to_path_buf() };
                let train_paths: Vec<PathBuf> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
                let train = load_cifar10(&train_paths)?;
                let val = load_cifar10(&[d.join("test_batch.bin")])?;
                (train, val)
            }
        };
        let train = if self.train_size == 0 { train } else { subset(&train, self.train_size, self.seed)? };
        let val = if self.val_size == 0 { val } else { subset(&val, self.val_size, self.seed.wrapping_add(1))? };
        Ok((train, val.with_split("val")))
    }
}

/// Shuffled example order for one epoch.
pub(crate) fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}
