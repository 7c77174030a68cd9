//! Model builders for the MNIST limited-data comparison and the shallow
//! strided networks, plus the sweep drivers that train them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{balanced_subset, LabeledDataset, SubsetSpec};
use crate::error::{invalid, Error, Result};
use crate::harmonic::{Algorithm, HarmonicBlock, HarmonicSpec, Subset};
use crate::model::{BatchNorm, Conv2d, Dense, Layer, Model};
use crate::ops::conv;
use crate::scalar::{DType, Scalar};
use crate::train::{train, MetricsRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Conv,
    Separable,
    Harmonic,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Conv, Variant::Separable, Variant::Harmonic];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Conv => "conv",
            Variant::Separable => "separable",
            Variant::Harmonic => "harmonic",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?} (conv, separable, harmonic)"))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the strided shallow nets are made comparable to the stride-1 net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShallowMode {
    /// Same feature count; lower-resolution maps are upsampled.
    Replicate,
    /// More feature maps at larger strides.
    Balanced,
}

impl ShallowMode {
    pub fn name(self) -> &'static str {
        match self {
            ShallowMode::Replicate => "replicate",
            ShallowMode::Balanced => "balanced",
        }
    }
}

impl FromStr for ShallowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicate" => Ok(ShallowMode::Replicate),
            "balanced" => Ok(ShallowMode::Balanced),
            _ => Err(invalid!("unknown mode {s:?} (replicate, balanced)")),
        }
    }
}

/// Feature maps used at stride 1 in replicate mode.
pub const REPLICATE_FEATURES: usize = 16;

/// Feature-map counts that keep the classifier input size roughly constant.
pub fn balanced_features(k: usize, stride: usize) -> Result<usize> {
    match (k, stride) {
        (4, 1) | (8, 1) => Ok(16),
        (4, 2) => Ok(50),
        (4, 4) | (8, 4) => Ok(200),
        (8, 8) => Ok(625),
        _ => Err(invalid!("no balanced feature count for K={k}, stride {stride}")),
    }
}

/// Weight decay for a training-set size: log-linear from 0.0005 at 300
/// samples to 0.05 at 60000.
pub fn weight_decay_for_size(n: usize) -> f64 {
    0.0005 * 100f64.powf((n as f64 / 300.0).ln() / 200f64.ln())
}

/// Rebuildable architecture descriptor, e.g. `mnist:harmonic:alg2` or
/// `shallow:k4:s2:m50:t16:balanced`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mnist { variant: Variant, algorithm: Algorithm },
    Shallow { kernel: usize, stride: usize, features: usize, truncate: usize, mode: ShallowMode },
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Arch::Mnist { variant: Variant::Conv, .. } => write!(f, "mnist:conv"),
            Arch::Mnist { variant, algorithm } => write!(f, "mnist:{variant}:alg{}", algorithm.number()),
            Arch::Shallow { kernel, stride, features, truncate, mode } => {
                write!(f, "shallow:k{kernel}:s{stride}:m{features}:t{truncate}:{}", mode.name())
            }
        }
    }
}

fn tagged(field: Option<&str>, tag: &str, arch: &str) -> Result<usize> {
    field
        .and_then(|f| f.strip_prefix(tag))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| invalid!("bad architecture {arch:?}: expected field {tag}<n>"))
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = s.trim().split(':');
        let arch = match f.next() {
            Some("mnist") => {
                let variant: Variant = f.next().unwrap_or_default().parse()?;
                let algorithm = match variant {
                    Variant::Conv => Algorithm::Folded,
                    _ => Algorithm::from_number(tagged(f.next(), "alg", s)? as u8)?,
                };
                Arch::Mnist { variant, algorithm }
            }
            Some("shallow") => Arch::Shallow {
                kernel: tagged(f.next(), "k", s)?,
                stride: tagged(f.next(), "s", s)?,
                features: tagged(f.next(), "m", s)?,
                truncate: tagged(f.next(), "t", s)?,
                mode: f.next().unwrap_or_default().parse()?,
            },
            _ => return Err(invalid!("unknown architecture {s:?}")),
        };
        if f.next().is_some() {
            return Err(invalid!("trailing fields in architecture {s:?}"));
        }
        Ok(arch)
    }
}

impl Arch {
    /// Builds the model with weights drawn from a ChaCha8 stream seeded by `seed`.
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Model<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            Arch::Mnist { variant, algorithm } => build_mnist_model(variant, algorithm, &mut rng),
            Arch::Shallow { kernel, stride, features, truncate, mode } => {
                build_shallow_model(kernel, stride, features, truncate, mode, &mut rng)
            }
        }
    }

    /// Shallow architecture with the feature count implied by `mode`.
    pub fn shallow(kernel: usize, stride: usize, truncate: usize, mode: ShallowMode) -> Result<Arch> {
        let features = match mode {
            ShallowMode::Replicate => REPLICATE_FEATURES,
            ShallowMode::Balanced => balanced_features(kernel, stride)?,
        };
        Ok(Arch::Shallow { kernel, stride, features, truncate, mode })
    }
}

pub const MNIST_STAGE_WIDTHS: [usize; 3] = [32, 64, 128];
pub const MNIST_HIDDEN: usize = 512;

/// Three 3×3 stages (32, 64, 128 channels) with overlapping average pooling
/// between them, then dense(512) → BN → ReLU → dense(10).
///
/// Each stage is spatial layer → BN(affine) → ReLU. Harmonic and separable
/// stages normalize their coefficients in the first block, which therefore
/// always runs the expanded algorithm; later blocks use `algorithm`.
pub fn build_mnist_model<T: Scalar>(
    variant: Variant,
    algorithm: Algorithm,
    rng: &mut ChaCha8Rng,
) -> Result<Model<T>> {
    let mut layers = Vec::new();
    let mut in_ch = 1;
    for (i, &width) in MNIST_STAGE_WIDTHS.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let first = i == 0;
        let spec = HarmonicSpec::new(in_ch, width, 3).padding(1).normalize(first);
        let alg = if first { Algorithm::Expanded } else { algorithm };
        let spatial = match variant {
            Variant::Conv => Layer::Conv2d(Conv2d::new(format!("{name}.conv"), in_ch, width, 3, 1, 1, rng)),
            Variant::Harmonic => Layer::Harmonic(HarmonicBlock::new(format!("{name}.harm"), spec, alg, rng)?),
            Variant::Separable => Layer::Harmonic(HarmonicBlock::separable(format!("{name}.sep"), spec, alg, rng)?),
        };
        layers.push(spatial);
        layers.push(Layer::BatchNorm(BatchNorm::new(format!("{name}.bn"), width, true)));
        layers.push(Layer::relu());
        if i + 1 < MNIST_STAGE_WIDTHS.len() {
            layers.push(Layer::avgpool(3, 2, 1));
        }
        in_ch = width;
    }
    layers.push(Layer::flatten());
    layers.push(Layer::Dense(Dense::new("fc1", in_ch * 7 * 7, MNIST_HIDDEN, rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new("fc1.bn", MNIST_HIDDEN, true)));
    layers.push(Layer::relu());
    layers.push(Layer::Dense(Dense::new("fc2", MNIST_HIDDEN, 10, rng)));
    Model::new(Arch::Mnist { variant, algorithm }.to_string(), &[1, 28, 28], 10, layers)
}

pub const SHALLOW_INPUT: [usize; 3] = [3, 32, 32];

/// One normalized harmonic block (padding 0, first `truncate` zigzag
/// coefficients) → ReLU → [upsample to stride-1 size] → flatten → dense(10).
pub fn build_shallow_model<T: Scalar>(
    kernel: usize,
    stride: usize,
    features: usize,
    truncate: usize,
    mode: ShallowMode,
    rng: &mut ChaCha8Rng,
) -> Result<Model<T>> {
    let side = SHALLOW_INPUT[1];
    if kernel == 0 || kernel > side || stride == 0 || (side - kernel) % stride != 0 {
        return Err(invalid!("stride {stride} does not tile a {side}×{side} input with {kernel}×{kernel} windows"));
    }
    let spec = HarmonicSpec::new(SHALLOW_INPUT[0], features, kernel)
        .stride(stride)
        .subset(Subset::Truncate(truncate))
        .normalize(true);
    let block = HarmonicBlock::new("block", spec, Algorithm::Expanded, rng)?;
    let full = conv::out_extent(side, kernel, 1, 0)?;
    let mut out = conv::out_extent(side, kernel, stride, 0)?;
    let mut layers = vec![Layer::Harmonic(block), Layer::relu()];
    if mode == ShallowMode::Replicate && out != full {
        layers.push(Layer::upsample(full, full));
        out = full;
    }
    layers.push(Layer::flatten());
    layers.push(Layer::Dense(Dense::new("fc", features * out * out, 10, rng)));
    let arch = Arch::Shallow { kernel, stride, features, truncate, mode };
    Model::new(arch.to_string(), &SHALLOW_INPUT, 10, layers)
}

fn build_and_train<T: Scalar>(
    arch: Arch,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<Vec<MetricsRecord>> {
    let mut model = arch.build::<T>(cfg.seed)?;
    train(&mut model, train_ds, test_ds, cfg, run_id)
}

/// Trains `arch` in the configured element type and returns its metrics.
pub fn run_one(
    arch: Arch,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<Vec<MetricsRecord>> {
    match cfg.dtype {
        DType::F32 => build_and_train::<f32>(arch, train_ds, test_ds, cfg, run_id),
        DType::F64 => build_and_train::<f64>(arch, train_ds, test_ds, cfg, run_id),
    }
}

/// Median of an odd- or even-length sample (mean of the middle pair).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Published median test errors (%) of the MNIST comparison by training size.
pub fn reference_error(size: usize, variant: Variant) -> Option<f64> {
    const ROWS: [(usize, [f64; 3]); 8] = [
        (300, [3.9, 4.67, 3.71]),
        (1000, [1.88, 1.91, 1.84]),
        (2000, [1.39, 1.35, 1.21]),
        (5000, [0.97, 1.06, 0.86]),
        (10000, [0.7, 0.76, 0.65]),
        (20000, [0.59, 0.57, 0.57]),
        (40000, [0.48, 0.47, 0.45]),
        (60000, [0.44, 0.46, 0.38]),
    ];
    let col = Variant::ALL.iter().position(|&v| v == variant)?;
    ROWS.iter().find(|(s, _)| *s == size).map(|(_, r)| r[col])
}

/// Training-set sizes of the MNIST comparison.
pub const TABLE2_SIZES: [usize; 8] = [300, 1000, 2000, 5000, 10000, 20000, 40000, 60000];

#[derive(Clone, Debug, PartialEq)]
pub struct Table2Row {
    pub size: usize,
    pub variant: Variant,
    pub test_errors: Vec<f64>,
    pub median: f64,
    pub reference: Option<f64>,
}

pub const TABLE2_HEADER: &str = "size,variant,runs,median_test_err,reference_test_err";

impl Table2Row {
    pub fn csv(&self) -> String {
        let reference = self.reference.map(|r| r.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.size, self.variant, self.test_errors.len(), self.median, reference)
    }
}

/// For every size and variant, trains one model per seed `0..seeds` on a
/// balanced subset (subset and initialization both seeded by the run seed)
/// with the size-dependent weight decay, and records the median final test
/// error. Every per-epoch record is passed to `on_record`.
pub fn run_table2(
    train_full: &LabeledDataset,
    test_ds: &LabeledDataset,
    sizes: &[usize],
    variants: &[Variant],
    algorithm: Algorithm,
    seeds: u64,
    base: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<Vec<Table2Row>> {
    let mut rows = Vec::new();
    for &size in sizes {
        for &variant in variants {
            let arch = Arch::Mnist { variant, algorithm };
            let mut errors = Vec::new();
            for seed in 0..seeds {
                let subset = if size >= train_full.len() {
                    train_full.clone()
                } else {
                    balanced_subset(train_full, SubsetSpec { size, seed })?
                };
                let cfg = TrainConfig { seed, weight_decay: weight_decay_for_size(size), ..base.clone() };
                let run_id = format!("{arch}-n{size}-s{seed}");
                let records = run_one(arch, &subset, test_ds, &cfg, &run_id)?;
                records.iter().for_each(&mut on_record);
                errors.push(final_test_error(&records)?);
            }
            rows.push(Table2Row {
                size,
                variant,
                median: median(&errors),
                test_errors: errors,
                reference: reference_error(size, variant),
            });
        }
    }
    Ok(rows)
}

pub fn final_test_error(records: &[MetricsRecord]) -> Result<f64> {
    records
        .last()
        .and_then(|r| r.test_err)
        .ok_or_else(|| invalid!("run did not evaluate the test set at its final epoch"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub mode: ShallowMode,
    pub kernel: usize,
    pub stride: usize,
    pub truncate: usize,
    pub features: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

pub const SWEEP_HEADER: &str = "mode,k,stride,truncate,features,runs,mean_test_acc";

impl SweepCell {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mode.name(),
            self.kernel,
            self.stride,
            self.truncate,
            self.features,
            self.accuracies.len(),
            self.mean_accuracy
        )
    }
}

/// Default strides for a window size: 1, K/2 and K.
pub fn sweep_strides(kernel: usize) -> Vec<usize> {
    let mut s = vec![1, kernel / 2, kernel];
    s.dedup();
    s.retain(|&x| x > 0);
    s
}

/// Trains one shallow model per (stride, truncation, seed) and reports the
/// mean final test accuracy (%) per cell. A fresh model is trained for every
/// truncation level.
#[allow(clippy::too_many_arguments)]
pub fn run_stride_sweep(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    kernel: usize,
    strides: &[usize],
    truncations: &[usize],
    mode: ShallowMode,
    seeds: u64,
    base: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &stride in strides {
        for &truncate in truncations {
            let arch = Arch::shallow(kernel, stride, truncate, mode)?;
            let Arch::Shallow { features, .. } = arch else { unreachable!() };
            let mut accs = Vec::new();
            for seed in 0..seeds {
                let cfg = TrainConfig { seed, ..base.clone() };
                let records = run_one(arch, train_ds, test_ds, &cfg, &format!("{arch}-s{seed}"))?;
                records.iter().for_each(&mut on_record);
                accs.push(100.0 - final_test_error(&records)?);
            }
            cells.push(SweepCell {
                mode,
                kernel,
                stride,
                truncate,
                features,
                mean_accuracy: mean(&accs),
                accuracies: accs,
            });
        }
    }
    Ok(cells)
}
