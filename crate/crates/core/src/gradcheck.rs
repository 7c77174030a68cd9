//! Central-difference gradient checking for whole models.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::ops::{self, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub tol: f64,
    /// Coordinates sampled per parameter (and for the input); `None` checks all.
    pub samples: Option<usize>,
    pub seed: u64,
    pub check_input: bool,
}

impl GradCheckConfig {
    pub fn new(tol: f64) -> Self {
        GradCheckConfig { tol, samples: None, seed: 0, check_input: true }
    }

    pub fn samples(mut self, n: usize) -> Self {
        self.samples = Some(n);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    /// Parameter name, or `"input"`.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub failures: usize,
    /// Coordinates re-measured with a smaller step because the one-sided
    /// differences disagreed (a ReLU or pooling kink inside `[θ−h, θ+h]`).
    pub kink_retries: usize,
    pub worst: Option<Offender>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn max_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.error)
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let error = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        self.checked += 1;
        if !(error <= self.tol) {
            self.failures += 1;
        }
        if self.worst.as_ref().map_or(true, |w| error > w.error || error.is_nan()) {
            self.worst = Some(Offender { tensor: tensor.to_string(), index, analytic, numeric, error });
        }
    }
}

/// Analytic gradients of the mean loss: one tensor per parameter (graph
/// order) followed by the input gradient.
pub fn analytic_gradients(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<Vec<Tensor<f64>>> {
    for p in model.params_mut() {
        p.zero_grad();
    }
    let logits = model.forward(x, Mode::Train)?;
    let (_, dlogits) = ops::softmax_xent(&logits, labels)?;
    let dx = model.backward(&dlogits)?;
    let mut grads: Vec<_> = model.params().iter().map(|p| p.grad().clone()).collect();
    grads.push(dx);
    Ok(grads)
}

/// Compares [`analytic_gradients`] against central differences of the
/// train-mode loss.
pub fn grad_check(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(model, x, labels, cfg, analytic_gradients)
}

/// Central difference at `h = 1e-5·max(1, |θ|)`. When the two one-sided
/// differences disagree by more than `tol` the interval contains a kink of
/// the loss, and the step is shrunk tenfold (at most four times).
fn derivative(theta: f64, base: f64, tol: f64, retries: &mut usize, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut h = 1e-5 * theta.abs().max(1.0);
    let mut attempt = 0;
    loop {
        let plus = f(theta + h)?;
        let minus = f(theta - h)?;
        let (fwd, bwd) = ((plus - base) / h, (base - minus) / h);
        let smooth = (fwd - bwd).abs() <= tol * 1f64.max(fwd.abs()).max(bwd.abs());
        if smooth || attempt == 4 {
            return Ok((plus - minus) / (2.0 * h));
        }
        *retries += 1;
        attempt += 1;
        h /= 10.0;
    }
}

/// Like [`grad_check`] with a caller-supplied analytic gradient routine.
/// Frozen (masked) coordinates are skipped.
pub fn grad_check_with<F>(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
    mut analytic: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Model<f64>, &Tensor<f64>, &[usize]) -> Result<Vec<Tensor<f64>>>,
{
    let grads = analytic(model, x, labels)?;
    let base = model.loss(x, labels, Mode::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { tol: cfg.tol, checked: 0, failures: 0, kink_retries: 0, worst: None };
    let mut pick = |len: usize| -> Vec<usize> {
        match cfg.samples {
            Some(s) if s < len => {
                let mut v = index::sample(&mut rng, len, s).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let n_params = model.params().len();
    for pi in 0..n_params {
        let (name, len, mask) = {
            let p = &model.params()[pi];
            (p.name().to_string(), p.value().len(), p.mask().cloned())
        };
        for i in pick(len) {
            if mask.as_ref().is_some_and(|m| m.data()[i] == 0.0) {
                continue;
            }
            let theta = model.params()[pi].value().data()[i];
            let numeric = derivative(theta, base, cfg.tol, &mut report.kink_retries, |v| {
                model.params_mut()[pi].value_mut().data_mut()[i] = v;
                model.loss(x, labels, Mode::Train)
            });
            model.params_mut()[pi].value_mut().data_mut()[i] = theta;
            report.record(&name, i, grads[pi].data()[i], numeric?);
        }
    }

    if cfg.check_input {
        let dx = &grads[n_params];
        let mut xp = x.clone();
        for i in pick(x.len()) {
            let v = x.data()[i];
            let numeric = derivative(v, base, cfg.tol, &mut report.kink_retries, |t| {
                xp.data_mut()[i] = t;
                model.loss(&xp, labels, Mode::Train)
            });
            xp.data_mut()[i] = v;
            report.record("input", i, dx.data()[i], numeric?);
        }
    }
    Ok(report)
}
