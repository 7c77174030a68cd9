//! Seeded mini-batch SGD training and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::Model;
use crate::ops::{self, Mode};
use crate::optim::{sgd_step, LrSchedule, SgdConfig};
use crate::scalar::{DType, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub seed: u64,
    pub dtype: DType,
    /// Evaluate the test set every this many epochs; the final epoch is
    /// always evaluated.
    pub eval_every: usize,
    /// Fill the `wall_time_s` column. Off by default so that metrics files
    /// stay byte-identical across repeated runs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    /// The MNIST protocol: 30 epochs, batch 128, lr 0.1 divided by 10 at
    /// epochs 10 and 20, Nesterov momentum 0.9, weight decay 0.0005.
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            lr_schedule: LrSchedule { milestones: vec![(10, 0.1), (20, 0.1)] },
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0005,
            seed: 0,
            dtype: DType::F32,
            eval_every: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted and turns every step into a no-op.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be >= 2 (batch statistics need two samples)"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if self.eval_every == 0 {
            return Err(invalid!("eval_every must be >= 1"));
        }
        Ok(())
    }

    /// A single division by 10 at `epoch`.
    pub fn step_at(epoch: usize) -> LrSchedule {
        LrSchedule { milestones: vec![(epoch, 0.1)] }
    }
}

pub const METRICS_HEADER: &str = "run_id,seed,epoch,train_loss,train_acc,test_err,wall_time_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent of training samples classified correctly during the epoch.
    pub train_acc: f64,
    /// Percent test error, when evaluated this epoch.
    pub test_err: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl MetricsRecord {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.test_err),
            opt(self.wall_time_s.map(|t| (t * 1000.0).round() / 1000.0)),
        )
    }
}

/// Percent of `ds` misclassified by the eval-mode model.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, ds: &LabeledDataset, batch: usize) -> Result<f64> {
    if ds.sample_dims() != model.input_dims.as_slice() {
        return Err(shape_err!("dataset samples {:?} do not fit model input {:?}", ds.sample_dims(), model.input_dims));
    }
    let mut wrong = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (x, labels) = ds.batch::<T>(chunk);
        let logits = model.forward(&x, Mode::Eval)?;
        wrong += ops::argmax(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

/// Trains in place. Sample order comes from a ChaCha8 stream seeded with
/// `cfg.seed`; a trailing batch of one sample is skipped.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if train_ds.sample_dims() != model.input_dims.as_slice() {
        return Err(shape_err!(
            "training samples {:?} do not fit model input {:?}",
            train_ds.sample_dims(),
            model.input_dims
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_schedule.rate(cfg.lr, epoch);
        let sgd = SgdConfig { lr, momentum: cfg.momentum, nesterov: cfg.nesterov, weight_decay: cfg.weight_decay };
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train_ds.batch::<T>(chunk);
            let (loss, logits) = model.loss_and_grad(&x, &labels).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {}, batch {b})", epoch + 1)),
                other => other,
            })?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}, batch {b}", epoch + 1)));
            }
            if lr > 0.0 {
                sgd_step(model.params_mut(), &sgd)?;
            }
            loss_sum += loss * chunk.len() as f64;
            correct += ops::argmax(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += chunk.len();
        }
        let last = epoch + 1 == cfg.epochs;
        let test_err = if last || (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(model, test_ds, cfg.batch_size.max(256))?)
        } else {
            None
        };
        records.push(MetricsRecord {
            run_id: run_id.to_string(),
            seed: cfg.seed,
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: 100.0 * correct as f64 / seen.max(1) as f64,
            test_err,
            wall_time_s: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
    }
    Ok(records)
}
