//! Learnable parameters and the SGD optimiser.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A learnable tensor with its gradient and momentum buffer.
///
/// `version` increases on every mutable access to the value so derived
/// caches (folded harmonic filters) can tell when they are stale.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    momentum: Tensor<T>,
    version: u64,
    /// Entries where the mask is zero are held at zero (λ/T subsets).
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let dims = value.dims().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&dims),
            momentum: Tensor::zeros(&dims),
            version: 0,
            mask: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn momentum_buffer(&self) -> &Tensor<T> {
        &self.momentum
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mask(&self) -> Option<&Tensor<T>> {
        self.mask.as_ref()
    }

    /// Freeze the entries where `mask` is zero: they are zeroed now and
    /// their gradients are zeroed on every [`set_grad`](Self::set_grad).
    pub fn set_mask(&mut self, mask: Tensor<T>) -> Result<()> {
        self.value.check_same(&mask)?;
        self.value_mut()
            .data_mut()
            .iter_mut()
            .zip(mask.data())
            .for_each(|(v, &m)| *v = *v * m);
        self.mask = Some(mask);
        Ok(())
    }

    pub fn set_grad(&mut self, mut grad: Tensor<T>) -> Result<()> {
        self.value.check_same(&grad)?;
        if let Some(mask) = &self.mask {
            grad.data_mut().iter_mut().zip(mask.data()).for_each(|(g, &m)| *g = *g * m);
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn reset_momentum(&mut self) {
        self.momentum.fill(T::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

/// One SGD step on every parameter:
///
/// ```text
/// g   ← grad + weight_decay·value
/// buf ← momentum·buf + g
/// value ← value − lr·(g + momentum·buf)   (nesterov)
/// value ← value − lr·buf                  (classical)
/// ```
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    cfg: &SgdConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(invalid!("learning rate must be > 0, got {}", cfg.lr));
    }
    let lr = T::lit(cfg.lr);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for p in params {
        p.version += 1;
        let Parameter { value, grad, momentum, .. } = p;
        for ((v, &g0), b) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(momentum.data_mut())
        {
            let g = g0 + wd * *v;
            *b = mu * *b + g;
            let step = if cfg.nesterov { g + mu * *b } else { *b };
            *v = *v - lr * step;
        }
    }
    Ok(())
}

/// Step schedule: the base rate is multiplied by `factor` from `epoch` on,
/// cumulatively over all milestones reached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrSchedule {
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(base, |lr, (_, f)| lr * f)
    }
}
