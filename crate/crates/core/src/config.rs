//! Line-based `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every
//! [`TrainConfig`] field has a key; overrides are applied after the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::save_checkpoint;
use crate::data::{self, balanced_subset, LabeledDataset, Split, SubsetSpec};
use crate::error::{invalid, Result};
use crate::experiments::{weight_decay_for_size, Arch};
use crate::optim::LrSchedule;
use crate::scalar::DType;
use crate::train::{train, MetricsRecord, TrainConfig, METRICS_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(invalid!("unknown dataset {s:?} (mnist, cifar10)")),
        }
    }
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn load(self, root: &Path, split: Split) -> Result<LabeledDataset> {
        match self {
            DatasetKind::Mnist => data::load_mnist(root, split),
            DatasetKind::Cifar10 => data::load_cifar10(root, split),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightDecay {
    Fixed(f64),
    /// Size-dependent schedule evaluated at the training-set size.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub arch: Arch,
    pub dataset: DatasetKind,
    /// Falls back to `HARM_DATA_DIR`, then `./data`.
    pub data_dir: Option<PathBuf>,
    /// Balanced training subset size; `None` uses the whole split.
    pub train_size: Option<usize>,
    /// Defaults to `train.seed`.
    pub subset_seed: Option<u64>,
    pub test_size: Option<usize>,
    pub weight_decay: WeightDecay,
    pub train: TrainConfig,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            arch: "mnist:harmonic:alg1".parse().expect("valid descriptor"),
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_size: None,
            subset_seed: None,
            test_size: None,
            weight_decay: WeightDecay::Fixed(TrainConfig::default().weight_decay),
            train: TrainConfig::default(),
            metrics: None,
            checkpoint: None,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid!("{key}: cannot parse {value:?}"))
}

fn optional_size(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "" | "all" | "0" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid!("{key}: expected true/false, got {value:?}")),
    }
}

/// `epoch:factor` pairs separated by commas, e.g. `10:0.1,20:0.1`.
pub fn parse_schedule(value: &str) -> Result<LrSchedule> {
    let mut milestones = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
        let (e, f) = part
            .split_once(':')
            .ok_or_else(|| invalid!("lr_schedule: expected epoch:factor, got {part:?}"))?;
        milestones.push((num("lr_schedule", e.trim())?, num("lr_schedule", f.trim())?));
    }
    Ok(LrSchedule { milestones })
}

pub fn format_schedule(s: &LrSchedule) -> String {
    if s.milestones.is_empty() {
        return "none".into();
    }
    s.milestones.iter().map(|(e, f)| format!("{e}:{f}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 20] = [
        "run_id",
        "arch",
        "dataset",
        "data_dir",
        "train_size",
        "subset_seed",
        "test_size",
        "epochs",
        "batch_size",
        "lr",
        "lr_schedule",
        "momentum",
        "nesterov",
        "weight_decay",
        "seed",
        "dtype",
        "eval_every",
        "record_wall_time",
        "metrics",
        "checkpoint",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "run_id" => self.run_id = value.to_string(),
            "arch" => self.arch = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_size" => self.train_size = optional_size(key, value)?,
            "subset_seed" => self.subset_seed = Some(num(key, value)?),
            "test_size" => self.test_size = optional_size(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "lr_schedule" => t.lr_schedule = parse_schedule(value)?,
            "momentum" => t.momentum = num(key, value)?,
            "nesterov" => t.nesterov = parse_bool(key, value)?,
            "weight_decay" => {
                self.weight_decay = match value {
                    "auto" => WeightDecay::Auto,
                    v => WeightDecay::Fixed(num(key, v)?),
                }
            }
            "seed" => t.seed = num(key, value)?,
            "dtype" => t.dtype = DType::from_tag(value).ok_or_else(|| invalid!("dtype: expected f32 or f64"))?,
            "eval_every" => t.eval_every = num(key, value)?,
            "record_wall_time" => t.record_wall_time = parse_bool(key, value)?,
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            other => return Err(invalid!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| invalid!("expected key=value, got {assignment:?}"))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply(line).map_err(|e| invalid!("line {}: {e}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        for o in overrides {
            cfg.apply(o)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let opt = |v: Option<usize>| v.map_or("all".to_string(), |x| x.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("run_id", self.run_id.clone());
        line("arch", self.arch.to_string());
        line("dataset", self.dataset.name().into());
        if let Some(d) = path(&self.data_dir) {
            line("data_dir", d);
        }
        line("train_size", opt(self.train_size));
        if let Some(s) = self.subset_seed {
            line("subset_seed", s.to_string());
        }
        line("test_size", opt(self.test_size));
        line("epochs", t.epochs.to_string());
        line("batch_size", t.batch_size.to_string());
        line("lr", t.lr.to_string());
        line("lr_schedule", format_schedule(&t.lr_schedule));
        line("momentum", t.momentum.to_string());
        line("nesterov", t.nesterov.to_string());
        line(
            "weight_decay",
            match self.weight_decay {
                WeightDecay::Auto => "auto".into(),
                WeightDecay::Fixed(w) => w.to_string(),
            },
        );
        line("seed", t.seed.to_string());
        line("dtype", t.dtype.tag().into());
        line("eval_every", t.eval_every.to_string());
        line("record_wall_time", t.record_wall_time.to_string());
        if let Some(m) = path(&self.metrics) {
            line("metrics", m);
        }
        if let Some(c) = path(&self.checkpoint) {
            line("checkpoint", c);
        }
        s
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(data::default_data_dir)
    }

    /// The optimizer settings with the weight decay resolved for `train_len` samples.
    pub fn resolved_train(&self, train_len: usize) -> TrainConfig {
        let weight_decay = match self.weight_decay {
            WeightDecay::Fixed(w) => w,
            WeightDecay::Auto => weight_decay_for_size(train_len),
        };
        TrainConfig { weight_decay, ..self.train.clone() }
    }

    /// Loads the configured train/test sets, taking balanced subsets if sizes are set.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let root = self.data_root();
        let mut train_ds = self.dataset.load(&root, Split::Train)?;
        let mut test_ds = self.dataset.load(&root, Split::Test)?;
        let seed = self.subset_seed.unwrap_or(self.train.seed);
        if let Some(size) = self.train_size {
            train_ds = balanced_subset(&train_ds, SubsetSpec { size, seed })?;
        }
        if let Some(size) = self.test_size {
            test_ds = balanced_subset(&test_ds, SubsetSpec { size, seed: 0 })?;
        }
        Ok((train_ds, test_ds))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_test_err: f64,
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn run_typed<T: crate::Scalar>(
    cfg: &RunConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
) -> Result<Vec<MetricsRecord>> {
    let tcfg = cfg.resolved_train(train_ds.len());
    let mut model = cfg.arch.build::<T>(tcfg.seed)?;
    let records = train(&mut model, train_ds, test_ds, &tcfg, &cfg.run_id)?;
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&mut model, path)?;
    }
    Ok(records)
}

/// Trains with already-loaded data and writes the metrics CSV and final
/// checkpoint if paths are configured.
pub fn run_with_data(cfg: &RunConfig, train_ds: &LabeledDataset, test_ds: &LabeledDataset) -> Result<RunOutcome> {
    cfg.train.validate()?;
    let records = match cfg.train.dtype {
        DType::F32 => run_typed::<f32>(cfg, train_ds, test_ds)?,
        DType::F64 => run_typed::<f64>(cfg, train_ds, test_ds)?,
    };
    if let Some(path) = &cfg.metrics {
        fs::write(path, metrics_csv(&records))?;
    }
    let final_test_err = crate::experiments::final_test_error(&records)?;
    Ok(RunOutcome { records, final_test_err })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.train.validate()?;
    let (train_ds, test_ds) = cfg.datasets()?;
    run_with_data(cfg, &train_ds, &test_ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply("lr_schedule=5:0.5").unwrap();
        cfg.apply("weight_decay=auto").unwrap();
        cfg.apply("train_size=300").unwrap();
        cfg.apply("metrics=/tmp/m.csv").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_addressable() {
        let text = RunConfig::default().to_text();
        for key in RunConfig::KEYS {
            let mut cfg = RunConfig::default();
            let sample = match key {
                "arch" => "mnist:conv",
                "dataset" => "cifar10",
                "lr_schedule" => "3:0.1",
                "nesterov" => "false",
                "record_wall_time" => "true",
                "dtype" => "f64",
                "lr" | "momentum" | "weight_decay" => "0.5",
                _ => "7",
            };
            cfg.set(key, sample).unwrap_or_else(|e| panic!("{key}: {e}"));
            assert_ne!(cfg.to_text(), text, "{key}");
        }
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse("# comment\n\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(RunConfig::parse("epochs=x").is_err());
        assert!(RunConfig::parse("bogus=1").is_err());
        assert!(RunConfig::parse("epochs").is_err());
    }

    #[test]
    fn schedule_format() {
        let s = parse_schedule("10:0.1, 20:0.1").unwrap();
        assert_eq!(s.milestones, vec![(10, 0.1), (20, 0.1)]);
        assert_eq!(format_schedule(&s), "10:0.1,20:0.1");
        assert!(parse_schedule("none").unwrap().milestones.is_empty());
    }
}
