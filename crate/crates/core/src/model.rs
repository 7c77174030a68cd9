//! Sequential model graphs with reverse-mode differentiation.
//!
//! Every layer keeps what its train-mode forward needs for the backward
//! pass; [`Model::backward`] walks the layers in reverse order.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::harmonic::HarmonicBlock;
use crate::ops::batchnorm::{self, Affine, BnCache, Mode, RunningStats};
use crate::ops::{self, conv};
use crate::optim::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Harmonic,
    Separable,
    BatchNorm,
    Relu,
    AvgPool,
    UpsampleNearest,
    Flatten,
    Dense,
    SoftmaxXent,
}

impl LayerKind {
    /// Layers that extract spatial features from their input channels.
    pub fn is_spatial_filter(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Harmonic | LayerKind::Separable)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub name: String,
    pub weight: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Bias-free convolution, weights uniform in `±sqrt(6/(C·K²))`.
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let name = name.into();
        let bound = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let w = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            T::lit(rng.gen_range(-bound..bound))
        });
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), w),
            name,
            stride,
            padding,
            input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub name: String,
    pub affine: Option<(Parameter<T>, Parameter<T>)>,
    pub stats: RunningStats<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize, affine: bool) -> Self {
        let name = name.into();
        let affine = affine.then(|| {
            (
                Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
                Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            )
        });
        BatchNorm {
            name,
            affine,
            stats: RunningStats::new(channels),
            eps: batchnorm::DEFAULT_EPS,
            momentum: batchnorm::DEFAULT_MOMENTUM,
            cache: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub name: String,
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    /// Weights uniform in `±sqrt(6/in)`, zero bias.
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let name = name.into();
        let bound = (6.0 / inputs as f64).sqrt();
        let w = Tensor::from_fn(&[outputs, inputs], |_| T::lit(rng.gen_range(-bound..bound)));
        Dense {
            weight: Parameter::new(format!("{name}.weight"), w),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            name,
            input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Harmonic(HarmonicBlock<T>),
    BatchNorm(BatchNorm<T>),
    Relu { input: Option<Tensor<T>> },
    AvgPool { window: usize, stride: usize, padding: usize, input_dims: Vec<usize> },
    UpsampleNearest { height: usize, width: usize, input_dims: Vec<usize> },
    Flatten { input_dims: Vec<usize> },
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu { input: None }
    }

    pub fn avgpool(window: usize, stride: usize, padding: usize) -> Self {
        Layer::AvgPool { window, stride, padding, input_dims: Vec::new() }
    }

    pub fn upsample(height: usize, width: usize) -> Self {
        Layer::UpsampleNearest { height, width, input_dims: Vec::new() }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { input_dims: Vec::new() }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Harmonic(h) if h.is_separable() => LayerKind::Separable,
            Layer::Harmonic(_) => LayerKind::Harmonic,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
            Layer::UpsampleNearest { .. } => LayerKind::UpsampleNearest,
            Layer::Flatten { .. } => LayerKind::Flatten,
            Layer::Dense(_) => LayerKind::Dense,
        }
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                let w = c.weight.value().dims();
                if input.get(1) != Some(&w[1]) {
                    return Err(shape_err!("{}: expected {} channels, got {input:?}", c.name, w[1]));
                }
                conv::output_dims(input, w[0], w[2], c.stride, c.padding)
            }
            Layer::Harmonic(h) => h.output_dims(input),
            Layer::BatchNorm(b) => {
                if input.len() < 2 || input[1] != b.stats.channels() {
                    return Err(shape_err!("{}: channel mismatch for {input:?}", b.name));
                }
                Ok(input.to_vec())
            }
            Layer::Relu { .. } => Ok(input.to_vec()),
            Layer::AvgPool { window, stride, padding, .. } => {
                let c = input.get(1).copied().unwrap_or(0);
                conv::output_dims(input, c, *window, *stride, *padding)
            }
            Layer::UpsampleNearest { height, width, .. } => match *input {
                [n, c, _, _] => Ok(vec![n, c, *height, *width]),
                _ => Err(shape_err!("upsample expects NCHW, got {input:?}")),
            },
            Layer::Flatten { .. } => {
                if input.is_empty() {
                    return Err(shape_err!("cannot flatten a scalar"));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Dense(d) => {
                let w = d.weight.value().dims();
                if input != [input[0], w[1]] {
                    return Err(shape_err!("{}: expected [n, {}], got {input:?}", d.name, w[1]));
                }
                Ok(vec![input[0], w[0]])
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let train = mode == Mode::Train;
        match self {
            Layer::Conv2d(c) => {
                let y = ops::conv2d_forward(x, c.weight.value(), c.stride, c.padding)?;
                c.input = train.then(|| x.clone());
                Ok(y)
            }
            Layer::Harmonic(h) => h.forward(x, mode),
            Layer::BatchNorm(b) => {
                let affine = b.affine.as_ref().map(|(g, bt)| Affine { gamma: g.value(), beta: bt.value() });
                let (y, cache) = batchnorm::batchnorm_forward(
                    x,
                    T::lit(b.eps),
                    affine,
                    mode,
                    &mut b.stats,
                    T::lit(b.momentum),
                )?;
                b.cache = cache;
                Ok(y)
            }
            Layer::Relu { input } => {
                *input = train.then(|| x.clone());
                Ok(ops::relu_forward(x))
            }
            Layer::AvgPool { window, stride, padding, input_dims } => {
                *input_dims = x.dims().to_vec();
                ops::avgpool_forward(x, *window, *stride, *padding)
            }
            Layer::UpsampleNearest { height, width, input_dims } => {
                *input_dims = x.dims().to_vec();
                ops::upsample_nearest_forward(x, *height, *width)
            }
            Layer::Flatten { input_dims } => {
                *input_dims = x.dims().to_vec();
                let n = x.dims()[0];
                x.clone().reshape(&[n, x.len() / n.max(1)])
            }
            Layer::Dense(d) => {
                let y = ops::dense_forward(x, d.weight.value(), d.bias.value())?;
                d.input = train.then(|| x.clone());
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let missing = || invalid!("backward called without a train-mode forward");
        match self {
            Layer::Conv2d(c) => {
                let x = c.input.take().ok_or_else(missing)?;
                let (dx, dw) = ops::conv2d_backward(dy, &x, c.weight.value(), c.stride, c.padding)?;
                c.weight.set_grad(dw)?;
                Ok(dx)
            }
            Layer::Harmonic(h) => h.backward(dy),
            Layer::BatchNorm(b) => {
                let cache = b.cache.take().ok_or_else(missing)?;
                let gamma = b.affine.as_ref().map(|(g, _)| g.value());
                let (dx, dparams) = batchnorm::batchnorm_backward(dy, &cache, gamma)?;
                if let (Some((g, bt)), Some((dg, db))) = (&mut b.affine, dparams) {
                    g.set_grad(dg)?;
                    bt.set_grad(db)?;
                }
                Ok(dx)
            }
            Layer::Relu { input } => {
                let x = input.take().ok_or_else(missing)?;
                ops::relu_backward(dy, &x)
            }
            Layer::AvgPool { window, stride, padding, input_dims } => {
                ops::avgpool_backward(dy, input_dims, *window, *stride, *padding)
            }
            Layer::UpsampleNearest { input_dims, .. } => ops::upsample_nearest_backward(dy, input_dims),
            Layer::Flatten { input_dims } => dy.clone().reshape(input_dims),
            Layer::Dense(d) => {
                let x = d.input.take().ok_or_else(missing)?;
                let (dx, dw, db) = ops::dense_backward(dy, &x, d.weight.value(), d.bias.value())?;
                d.weight.set_grad(dw)?;
                d.bias.set_grad(db)?;
                Ok(dx)
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight],
            Layer::Harmonic(h) => h.params(),
            Layer::BatchNorm(b) => b.affine.iter().flat_map(|(g, bt)| [g, bt]).collect(),
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight],
            Layer::Harmonic(h) => h.params_mut(),
            Layer::BatchNorm(b) => b.affine.iter_mut().flat_map(|(g, bt)| [g, bt]).collect(),
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Running statistics with their checkpoint name prefix.
    pub fn running_stats_mut(&mut self) -> Option<(String, &mut RunningStats<T>)> {
        match self {
            Layer::BatchNorm(b) => Some((b.name.clone(), &mut b.stats)),
            Layer::Harmonic(h) => {
                let name = format!("{}.bn", h.name());
                h.running_stats_mut().map(|s| (name, s))
            }
            _ => None,
        }
    }
}

/// Suffixes under which batch-norm running statistics are checkpointed.
pub const RUNNING_MEAN_SUFFIX: &str = ".running_mean";
pub const RUNNING_VAR_SUFFIX: &str = ".running_var";

/// An ordered stack of layers ending in a softmax cross-entropy head.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub layers: Vec<Layer<T>>,
    /// Architecture descriptor used to rebuild the graph from a checkpoint.
    pub arch: String,
    pub input_dims: Vec<usize>,
    pub classes: usize,
}

/// One row of [`Model::topology`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub kind: LayerKind,
    pub output_dims: Vec<usize>,
    pub param_count: usize,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: impl Into<String>, input_dims: &[usize], classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let model = Model { layers, arch: arch.into(), input_dims: input_dims.to_vec(), classes };
        let out = model.output_dims(1)?;
        if out != [1, classes] {
            return Err(shape_err!("model produces {out:?}, expected [1, {classes}] logits"));
        }
        Ok(model)
    }

    pub fn output_dims(&self, batch: usize) -> Result<Vec<usize>> {
        let mut dims = vec![batch];
        dims.extend_from_slice(&self.input_dims);
        for l in &self.layers {
            dims = l.output_dims(&dims)?;
        }
        Ok(dims)
    }

    /// Layer kinds, per-sample output dims and parameter counts, head included.
    pub fn topology(&self) -> Result<Vec<LayerSummary>> {
        let mut dims = vec![1];
        dims.extend_from_slice(&self.input_dims);
        let mut rows = Vec::with_capacity(self.layers.len() + 1);
        for l in &self.layers {
            dims = l.output_dims(&dims)?;
            rows.push(LayerSummary {
                kind: l.kind(),
                output_dims: dims.clone(),
                param_count: l.params().iter().map(|p| p.value().len()).sum(),
            });
        }
        rows.push(LayerSummary { kind: LayerKind::SoftmaxXent, output_dims: vec![1], param_count: 0 });
        Ok(rows)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.dims().get(1..) != Some(&self.input_dims[..]) {
            return Err(shape_err!("model expects [n, {:?}], got {:?}", self.input_dims, x.dims()));
        }
        let mut h = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            h = l.forward(&h, mode)?;
            h.ensure_finite(&format!("forward of layer {i} ({:?})", l.kind()))?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dlogits.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            g = l.backward(&g)?;
            g.ensure_finite(&format!("backward of layer {i} ({:?})", l.kind()))?;
        }
        Ok(g)
    }

    /// Train-mode forward, softmax cross-entropy, backward. Gradients are
    /// stored on the parameters; returns the loss and the logits.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let logits = self.forward(x, Mode::Train)?;
        let (loss, dlogits) = ops::softmax_xent(&logits, labels)?;
        self.backward(&dlogits)?;
        Ok((loss, logits))
    }

    /// Mean loss only, in the given mode, without touching gradients.
    pub fn loss(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<T> {
        let logits = self.forward(x, mode)?;
        Ok(ops::softmax_xent(&logits, labels)?.0)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    pub fn harmonic_blocks(&self) -> impl Iterator<Item = &HarmonicBlock<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Harmonic(h) => Some(h),
            _ => None,
        })
    }

    pub fn harmonic_blocks_mut(&mut self) -> impl Iterator<Item = &mut HarmonicBlock<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Harmonic(h) => Some(h),
            _ => None,
        })
    }

    /// Parameters and running statistics by checkpoint name, in graph order.
    pub fn state(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for p in l.params() {
                out.push((p.name().to_string(), p.value().clone()));
            }
            if let Some((prefix, stats)) = l.running_stats_mut() {
                out.push((format!("{prefix}{RUNNING_MEAN_SUFFIX}"), stats.mean.clone()));
                out.push((format!("{prefix}{RUNNING_VAR_SUFFIX}"), stats.var.clone()));
            }
        }
        out
    }

    /// Overwrite parameters and running statistics from named tensors. Every
    /// model tensor must be present with matching dims.
    pub fn load_state(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let find = |name: &str, dims: &[usize]| -> Result<Tensor<T>> {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| shape_err!("checkpoint has no entry {name:?}"))?;
            if t.dims() != dims {
                return Err(shape_err!("{name}: checkpoint dims {:?}, model dims {dims:?}", t.dims()));
            }
            Ok(t.clone())
        };
        for l in &mut self.layers {
            for p in l.params_mut() {
                let t = find(p.name(), p.value().dims())?;
                *p.value_mut() = t;
                p.reset_momentum();
            }
            if let Some((prefix, stats)) = l.running_stats_mut() {
                stats.mean = find(&format!("{prefix}{RUNNING_MEAN_SUFFIX}"), stats.mean.dims())?;
                stats.var = find(&format!("{prefix}{RUNNING_VAR_SUFFIX}"), stats.var.dims())?;
            }
        }
        Ok(())
    }

    /// Eval-mode logits for `x`, processed `batch` samples at a time.
    pub fn predict(&mut self, x: &Tensor<T>, batch: usize) -> Result<Vec<usize>> {
        let n = x.dims()[0];
        let per = x.len() / n.max(1);
        let mut preds = Vec::with_capacity(n);
        for lo in (0..n).step_by(batch.max(1)) {
            let hi = (lo + batch).min(n);
            let mut dims = x.dims().to_vec();
            dims[0] = hi - lo;
            let xb = Tensor::from_vec(&dims, x.data()[lo * per..hi * per].to_vec())?;
            preds.extend(ops::argmax(&self.forward(&xb, Mode::Eval)?));
        }
        Ok(preds)
    }
}
