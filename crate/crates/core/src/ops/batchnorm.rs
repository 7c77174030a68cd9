//! Batch normalisation over every axis except the channel axis (axis 1).
//! Works for `[n, c]` and `[n, c, h, w]` inputs.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance tracked across training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

fn layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(shape_err!("batchnorm needs [n, c, ...], got {dims:?}"));
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

/// Optional learned per-channel scale and shift.
pub struct Affine<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    eps: T,
    affine: Option<Affine<'_, T>>,
    mode: Mode,
    stats: &mut RunningStats<T>,
    momentum: T,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let (n, c, sp) = layout(x.dims())?;
    if stats.channels() != c {
        return Err(shape_err!("batchnorm has {} channels, input has {c}", stats.channels()));
    }
    if let Some(a) = &affine {
        if a.gamma.len() != c || a.beta.len() != c {
            return Err(shape_err!("affine parameters must have {c} entries"));
        }
    }
    let xd = x.data();
    let mut y = Tensor::zeros(x.dims());
    let per_channel = |ch: usize| {
        (0..n).flat_map(move |b| {
            let base = (b * c + ch) * sp;
            base..base + sp
        })
    };
    let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(invalid!("train-mode batchnorm needs batch size >= 2, got {n}"));
            }
            let m = T::from_usize(n * sp).unwrap();
            let mut means = Vec::with_capacity(c);
            let mut inv = Vec::with_capacity(c);
            for ch in 0..c {
                let mu = per_channel(ch).map(|i| xd[i]).sum::<T>() / m;
                let var = per_channel(ch).map(|i| (xd[i] - mu).powi(2)).sum::<T>() / m;
                let unbiased = if n * sp > 1 { var * m / (m - T::one()) } else { var };
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (T::one() - momentum) * *rm + momentum * mu;
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (T::one() - momentum) * *rv + momentum * unbiased;
                means.push(mu);
                inv.push(T::one() / (var + eps).sqrt());
            }
            (means, inv)
        }
        Mode::Eval => (
            stats.mean.data().to_vec(),
            stats.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        ),
    };
    let mut xhat = Tensor::zeros(x.dims());
    for ch in 0..c {
        let (g, bt) = match &affine {
            Some(a) => (a.gamma.data()[ch], a.beta.data()[ch]),
            None => (T::one(), T::zero()),
        };
        for i in per_channel(ch) {
            let h = (xd[i] - mean[ch]) * inv_std[ch];
            xhat.data_mut()[i] = h;
            y.data_mut()[i] = h * g + bt;
        }
    }
    let cache = (mode == Mode::Train).then_some(BnCache { xhat, inv_std });
    Ok((y, cache))
}

/// Returns `(dx, dgamma, dbeta)`; the parameter gradients are present only
/// when `gamma` is given.
#[allow(clippy::type_complexity)]
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    dy.check_same(&cache.xhat)?;
    let (n, c, sp) = layout(dy.dims())?;
    let m = T::from_usize(n * sp).unwrap();
    let dyd = dy.data();
    let xh = cache.xhat.data();
    let mut dx = Tensor::zeros(dy.dims());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = || {
            (0..n).flat_map(move |b| {
                let base = (b * c + ch) * sp;
                base..base + sp
            })
        };
        let g = gamma.map_or(T::one(), |g| g.data()[ch]);
        let sum_dy: T = idx().map(|i| dyd[i]).sum();
        let sum_dy_xh: T = idx().map(|i| dyd[i] * xh[i]).sum();
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let k = g * cache.inv_std[ch] / m;
        for i in idx() {
            dx.data_mut()[i] = k * (m * dyd[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    let params = match gamma {
        Some(_) => Some((Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?)),
        None => None,
    };
    Ok((dx, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_samples_normalise_to_zero() {
        let x = Tensor::<f64>::full(&[4, 2, 3, 3], 2.5);
        let mut st = RunningStats::new(2);
        let (y, _) = batchnorm_forward(&x, 1e-5, None, Mode::Train, &mut st, 0.1).unwrap();
        assert!(y.max_abs() == 0.0);
    }

    #[test]
    fn train_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::from_fn(&[16, 4, 5, 5], |_| rng.gen_range(-3.0..5.0));
        let mut st = RunningStats::new(4);
        let (y, _) = batchnorm_forward(&x, 1e-5, None, Mode::Train, &mut st, 0.1).unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..16)
                .flat_map(|b| (0..25).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[(b * 4 + ch) * 25 + i])
                .collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let mut st = RunningStats::new(2);
        st.mean = Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap();
        st.var = Tensor::from_vec(&[2], vec![2.0, 0.5]).unwrap();
        let (y, cache) = batchnorm_forward(&x, 1e-5, None, Mode::Eval, &mut st, 0.1).unwrap();
        assert!(cache.is_none());
        for b in 0..3 {
            for ch in 0..2 {
                for i in 0..4 {
                    let xi = x.data()[(b * 2 + ch) * 4 + i];
                    let want = (xi - st.mean.data()[ch]) / (st.var.data()[ch] + 1e-5).sqrt();
                    assert!((y.data()[(b * 2 + ch) * 4 + i] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn running_stats_use_momentum_and_unbiased_variance() {
        let x = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let mut st = RunningStats::new(1);
        batchnorm_forward(&x, 1e-5, None, Mode::Train, &mut st, 0.1).unwrap();
        assert!((st.mean.data()[0] - 0.2).abs() < 1e-15);
        // biased var 1, unbiased 2 → 0.9*1 + 0.1*2
        assert!((st.var.data()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut st = RunningStats::new(3);
        assert!(batchnorm_forward(&x, 1e-5, None, Mode::Train, &mut st, 0.1).is_err());
        assert!(batchnorm_forward(&x, 1e-5, None, Mode::Eval, &mut st, 0.1).is_ok());
    }
}
