//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, normalization and
//! class-balanced subsets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{format_err, invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "HARM_DATA_DIR";

/// Undecoded 8-bit images as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn plane(&self) -> usize {
        self.rows * self.cols
    }

    /// Per-channel mean and (population) standard deviation of `pixel/255`.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let plane = self.plane();
        let mut sums = vec![(0f64, 0f64); self.channels];
        for img in self.pixels.chunks_exact(self.channels * plane) {
            for (c, ch) in img.chunks_exact(plane).enumerate() {
                for &p in ch {
                    let v = p as f64 / 255.0;
                    sums[c].0 += v;
                    sums[c].1 += v * v;
                }
            }
        }
        let n = (self.len() * plane) as f64;
        sums.into_iter()
            .map(|(s, sq)| {
                let mean = s / n;
                (mean, (sq / n - mean * mean).max(0.0).sqrt())
            })
            .collect()
    }

    /// Converts to `(pixel/255 − mean[c]) / std[c]`.
    pub fn normalize(&self, mean: &[f64], std: &[f64], name: &str, class_count: usize) -> Result<LabeledDataset> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(invalid!("need {} normalization constants per statistic", self.channels));
        }
        let plane = self.plane();
        let data = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i / plane) % self.channels;
                ((p as f64 / 255.0 - mean[c]) / std[c]) as f32
            })
            .collect();
        let images = Tensor::from_vec(&[self.len(), self.channels, self.rows, self.cols], data)?;
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        LabeledDataset::new(name, images, labels, class_count)
    }
}

/// Normalized images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = images.dims().first().copied().unwrap_or(0);
        if images.rank() != 4 || n != labels.len() || n == 0 {
            return Err(invalid!("{} images for {} labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid!("label {bad} outside [0, {class_count})"));
        }
        images.ensure_finite("dataset images")?;
        Ok(LabeledDataset { name: name.into(), images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample dims `[C, H, W]`.
    pub fn sample_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gathers the given samples into a batch of element type `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.sample_dims().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&v| T::lit(v as f64)));
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.sample_dims());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&dims, data).expect("sample dims are consistent"), labels)
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let (images, labels) = self.batch::<f32>(indices);
        LabeledDataset { name: self.name.clone(), images, labels, class_count: self.class_count }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err!("{}: truncated header", path.display()))
}

pub fn read_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err!("{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}", images_path.display()));
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err!("{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}", labels_path.display()));
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if count != label_count {
        return Err(format_err!("{count} images but {label_count} labels"));
    }
    let pixels = img
        .get(16..16 + count * rows * cols)
        .ok_or_else(|| format_err!("{}: truncated pixel data", images_path.display()))?
        .to_vec();
    let labels = lab
        .get(8..8 + count)
        .ok_or_else(|| format_err!("{}: truncated label data", labels_path.display()))?
        .to_vec();
    Ok(RawImages { channels: 1, rows, cols, pixels, labels })
}

/// Loads an IDX image/label pair with the MNIST normalization applied.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let raw = read_mnist_idx(images_path, labels_path)?;
    if let Some(&bad) = raw.labels.iter().find(|&&l| l > 9) {
        return Err(format_err!("{}: label {bad} > 9", labels_path.display()));
    }
    raw.normalize(&[MNIST_MEAN], &[MNIST_STD], "mnist", 10)
}

pub fn read_cifar10_bin(batch_paths: &[PathBuf]) -> Result<RawImages> {
    let mut raw = RawImages { channels: 3, rows: 32, cols: 32, pixels: Vec::new(), labels: Vec::new() };
    for path in batch_paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(format_err!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_LEN}",
                path.display(),
                bytes.len()
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            if rec[0] > 9 {
                return Err(format_err!("{}: label {} > 9", path.display(), rec[0]));
            }
            raw.labels.push(rec[0]);
            raw.pixels.extend_from_slice(&rec[1..]);
        }
    }
    if raw.is_empty() {
        return Err(invalid!("no CIFAR-10 batch files given"));
    }
    Ok(raw)
}

/// Loads CIFAR-10 binary batches with per-channel normalization applied.
pub fn load_cifar10_bin(batch_paths: &[PathBuf]) -> Result<LabeledDataset> {
    read_cifar10_bin(batch_paths)?.normalize(&CIFAR_MEAN, &CIFAR_STD, "cifar10", 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Locates the standard file names under `root` or `root/mnist`.
pub fn mnist_files(root: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    for dir in [root.join("mnist"), root.to_path_buf()] {
        let images = dir.join(format!("{stem}-images-idx3-ubyte"));
        let labels = dir.join(format!("{stem}-labels-idx1-ubyte"));
        if images.is_file() && labels.is_file() {
            return Ok((images, labels));
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("MNIST {stem} files not found under {} (or its mnist/ subdirectory)", root.display()),
    )))
}

/// Locates `data_batch_{1..5}.bin` or `test_batch.bin` under `root`,
/// `root/cifar-10-batches-bin` or `root/cifar10`.
pub fn cifar_files(root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    for dir in [root.join("cifar-10-batches-bin"), root.join("cifar10"), root.to_path_buf()] {
        let paths: Vec<_> = names.iter().map(|n| dir.join(n)).collect();
        if paths.iter().all(|p| p.is_file()) {
            return Ok(paths);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("CIFAR-10 binary batches ({}) not found under {}", names.join(", "), root.display()),
    )))
}

pub fn load_mnist(root: &Path, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = mnist_files(root, split)?;
    load_mnist_idx(&images, &labels)
}

pub fn load_cifar10(root: &Path, split: Split) -> Result<LabeledDataset> {
    load_cifar10_bin(&cifar_files(root, split)?)
}

/// `HARM_DATA_DIR` if set, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubsetSpec {
    pub size: usize,
    pub seed: u64,
}

/// Sample indices of a class-balanced subset: per class, `size/classes`
/// indices drawn without replacement by a ChaCha8 stream seeded with
/// `seed`, then the union shuffled with the same stream.
pub fn balanced_indices(labels: &[usize], class_count: usize, spec: SubsetSpec) -> Result<Vec<usize>> {
    if class_count == 0 || spec.size % class_count != 0 {
        return Err(invalid!("subset size {} is not divisible by {class_count} classes", spec.size));
    }
    let per_class = spec.size / class_count;
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = Vec::with_capacity(spec.size);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(invalid!("class {c} has {} samples, subset needs {per_class}", members.len()));
        }
        chosen.extend(index::sample(&mut rng, members.len(), per_class).into_iter().map(|j| members[j]));
    }
    chosen.shuffle(&mut rng);
    Ok(chosen)
}

pub fn balanced_subset(ds: &LabeledDataset, spec: SubsetSpec) -> Result<LabeledDataset> {
    Ok(ds.select(&balanced_indices(&ds.labels, ds.class_count, spec)?))
}

/// Serializes raw images as an IDX image/label file pair.
pub fn encode_idx(raw: &RawImages) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + raw.pixels.len());
    for v in [IDX_IMAGES_MAGIC, raw.len() as u32, raw.rows as u32, raw.cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&raw.pixels);
    let mut lab = Vec::with_capacity(8 + raw.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    lab.extend_from_slice(&raw.labels);
    (img, lab)
}

/// Serializes raw 3×32×32 images as one CIFAR-10 binary batch.
pub fn encode_cifar(raw: &RawImages) -> Vec<u8> {
    let per = raw.channels * raw.plane();
    let mut out = Vec::with_capacity(raw.len() * (per + 1));
    for (i, &l) in raw.labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&raw.pixels[i * per..(i + 1) * per]);
    }
    out
}
