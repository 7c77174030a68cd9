//! Harmonic convolution: a fixed bank of DCT filters applied to every input
//! channel, recombined by learned weights `w[m, n, u, v]`.
//!
//! Two execution strategies compute the same linear map:
//!
//! * [`Algorithm::Expanded`] materialises the `N·|S|` filter responses `z`,
//!   optionally normalises each one over the batch, then mixes them with a
//!   1×1 convolution.
//! * [`Algorithm::Folded`] first folds the weights into ordinary kernels
//!   `g[m, n] = Σ w[m, n, u, v] · ψ[u, v]` and runs one convolution. It needs
//!   the block to be linear, so it rejects `normalize`.
//!
//! Filter subsets (λ or zigzag prefix) are applied by masking `w`, so weight
//! shapes never change with the subset.

use num_rational::Ratio;
use rand::Rng;

use crate::dct::{FilterBank, FrequencyPair};
use crate::error::{invalid, shape_err, Result};
use crate::ops::batchnorm::{self, BnCache, Mode, RunningStats};
use crate::ops::conv::{self, conv2d_backward, conv2d_forward};
use crate::optim::Parameter;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Expanded,
    Folded,
}

impl Algorithm {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Algorithm::Expanded),
            2 => Ok(Algorithm::Folded),
            _ => Err(invalid!("algorithm must be 1 or 2, got {n}")),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Algorithm::Expanded => 1,
            Algorithm::Folded => 2,
        }
    }
}

/// Which filters of the bank a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    All,
    /// `u + v < λ`
    Lambda(usize),
    /// First `T` filters in zigzag order.
    Truncate(usize),
}

impl Subset {
    pub fn pairs(self, bank: &FilterBank) -> Result<Vec<FrequencyPair>> {
        match self {
            Subset::All => Ok(bank.zigzag().to_vec()),
            Subset::Lambda(l) => bank.lambda_subset(l),
            Subset::Truncate(t) => bank.truncation_prefix(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub subset: Subset,
    /// Per-coefficient batch normalisation of the filter responses.
    pub normalize: bool,
}

impl HarmonicSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        HarmonicSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            subset: Subset::All,
            normalize: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn subset(mut self, subset: Subset) -> Self {
        self.subset = subset;
        self
    }

    pub fn normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(invalid!("harmonic block needs non-zero channels and kernel: {self:?}"));
        }
        if self.stride == 0 {
            return Err(invalid!("stride must be >= 1"));
        }
        Ok(())
    }

    /// Filter indices (`u*K + v`) of the active subset, ascending.
    pub fn active_filters(&self, bank: &FilterBank) -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = self.subset.pairs(bank)?.into_iter().map(|p| bank.index(p)).collect();
        idx.sort_unstable();
        Ok(idx)
    }
}

/// Spatial filters applied depthwise: the fixed DCT bank or, for the
/// separable baseline, learned filters of the same shape.
#[derive(Clone, Debug)]
pub enum FilterStage<T> {
    Dct(Tensor<T>),
    Learned(Parameter<T>),
}

impl<T: Scalar> FilterStage<T> {
    pub fn kernels(&self) -> &Tensor<T> {
        match self {
            FilterStage::Dct(t) => t,
            FilterStage::Learned(p) => p.value(),
        }
    }

    fn version(&self) -> u64 {
        match self {
            FilterStage::Dct(_) => 0,
            FilterStage::Learned(p) => p.version(),
        }
    }
}

#[derive(Clone, Debug)]
enum Saved<T> {
    Expanded {
        input: Tensor<T>,
        active_kernels: Tensor<T>,
        mixed_in: Tensor<T>,
        mix_kernels: Tensor<T>,
        bn: Option<BnCache<T>>,
    },
    Folded {
        input: Tensor<T>,
        folded: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
pub struct HarmonicBlock<T> {
    name: String,
    spec: HarmonicSpec,
    algorithm: Algorithm,
    filters: FilterStage<T>,
    active: Vec<usize>,
    weights: Parameter<T>,
    bn: Option<RunningStats<T>>,
    saved: Option<Saved<T>>,
    fold_cache: Option<((u64, u64), Tensor<T>)>,
    peak_elems: usize,
}

/// `g[m,n] = Σ_f w[m,n,f] · filter_f`; `weights [M,N,K,K]`, `filters [K²,1,K,K]`.
pub fn fold_weights<T: Scalar>(weights: &Tensor<T>, filters: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n, k, _) = weights.nchw()?;
    let kk = k * k;
    if filters.dims() != [kk, 1, k, k] {
        return Err(shape_err!("filters {:?} do not match weights {:?}", filters.dims(), weights.dims()));
    }
    let mut g = Tensor::zeros(&[m, n, k, k]);
    gemm(Trans::N, Trans::N, m * n, kk, kk, weights.data(), filters.data(), T::zero(), g.data_mut());
    Ok(g)
}

/// Gradients of the fold with respect to weights and filters given `dL/dg`.
pub fn fold_backward<T: Scalar>(
    dg: &Tensor<T>,
    weights: &Tensor<T>,
    filters: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    dg.check_same(weights)?;
    let (m, n, k, _) = weights.nchw()?;
    let kk = k * k;
    let mut dw = Tensor::zeros(weights.dims());
    gemm(Trans::N, Trans::T, m * n, kk, kk, dg.data(), filters.data(), T::zero(), dw.data_mut());
    let mut df = Tensor::zeros(filters.dims());
    gemm(Trans::T, Trans::N, kk, m * n, kk, weights.data(), dg.data(), T::zero(), df.data_mut());
    Ok((dw, df))
}

fn gather_filters<T: Scalar>(filters: &Tensor<T>, active: &[usize], k: usize) -> Tensor<T> {
    let kk = k * k;
    let mut data = Vec::with_capacity(active.len() * kk);
    for &f in active {
        data.extend_from_slice(&filters.data()[f * kk..(f + 1) * kk]);
    }
    Tensor::from_vec(&[active.len(), 1, k, k], data).expect("gathered dims")
}

impl<T: Scalar> HarmonicBlock<T> {
    /// DCT-backed block with weights drawn uniformly from `±sqrt(6/(N·K²))`.
    pub fn new(
        name: impl Into<String>,
        spec: HarmonicSpec,
        algorithm: Algorithm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let bank = FilterBank::new(spec.kernel)?;
        let filters = FilterStage::Dct(bank.psi_kernels());
        Self::with_filters(name, spec, algorithm, filters, rng)
    }

    /// Separable baseline: same structure, but the `K²` spatial filters are
    /// learned, initialised uniformly from `±sqrt(6/K²)`.
    pub fn separable(
        name: impl Into<String>,
        spec: HarmonicSpec,
        algorithm: Algorithm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let k = spec.kernel;
        let bound = (6.0 / (k * k) as f64).sqrt();
        let init = Tensor::from_fn(&[k * k, 1, k, k], |_| T::lit(rng.gen_range(-bound..bound)));
        let filters = FilterStage::Learned(Parameter::new(format!("{name}.filters"), init));
        Self::with_filters(name, spec, algorithm, filters, rng)
    }

    fn with_filters(
        name: impl Into<String>,
        spec: HarmonicSpec,
        algorithm: Algorithm,
        filters: FilterStage<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.normalize && algorithm == Algorithm::Folded {
            return Err(invalid!("normalize=true cannot run folded; use the expanded algorithm"));
        }
        let name = name.into();
        let bank = FilterBank::new(spec.kernel)?;
        let active = spec.active_filters(&bank)?;
        let k = spec.kernel;
        let bound = (6.0 / (spec.in_channels * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&spec.weight_dims(), |_| T::lit(rng.gen_range(-bound..bound)));
        let mut weights = Parameter::new(format!("{name}.weight"), w);
        if active.len() < k * k {
            let mut mask = Tensor::zeros(&spec.weight_dims());
            for (i, m) in mask.data_mut().iter_mut().enumerate() {
                if active.binary_search(&(i % (k * k))).is_ok() {
                    *m = T::one();
                }
            }
            weights.set_mask(mask)?;
        }
        let bn = spec
            .normalize
            .then(|| RunningStats::new(spec.in_channels * active.len()));
        Ok(HarmonicBlock {
            name,
            spec,
            algorithm,
            filters,
            active,
            weights,
            bn,
            saved: None,
            fold_cache: None,
            peak_elems: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &HarmonicSpec {
        &self.spec
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn set_algorithm(&mut self, algorithm: Algorithm) -> Result<()> {
        if self.spec.normalize && algorithm == Algorithm::Folded {
            return Err(invalid!("normalize=true cannot run folded"));
        }
        self.algorithm = algorithm;
        self.saved = None;
        Ok(())
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.filters, FilterStage::Learned(_))
    }

    pub fn filters(&self) -> &FilterStage<T> {
        &self.filters
    }

    pub fn active_filters(&self) -> &[usize] {
        &self.active
    }

    pub fn weights(&self) -> &Parameter<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Parameter<T> {
        &mut self.weights
    }

    pub fn running_stats(&self) -> Option<&RunningStats<T>> {
        self.bn.as_ref()
    }

    pub fn running_stats_mut(&mut self) -> Option<&mut RunningStats<T>> {
        self.bn.as_mut()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weights];
        if let FilterStage::Learned(p) = &self.filters {
            v.push(p);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weights];
        if let FilterStage::Learned(p) = &mut self.filters {
            v.push(p);
        }
        v
    }

    /// Largest tensor (elements) alive during the most recent forward pass.
    pub fn last_peak_elems(&self) -> usize {
        self.peak_elems
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let dims = conv::output_dims(input, self.spec.out_channels, self.spec.kernel, self.spec.stride, self.spec.padding)?;
        if input[1] != self.spec.in_channels {
            return Err(shape_err!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.spec.in_channels,
                input[1]
            ));
        }
        Ok(dims)
    }

    /// Folded kernels `[M, N, K, K]`.
    pub fn fold(&self) -> Result<Tensor<T>> {
        if self.spec.normalize {
            return Err(invalid!("{}: folding requires normalize=false", self.name));
        }
        fold_weights(self.weights.value(), self.filters.kernels())
    }

    fn folded_for(&mut self, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            self.fold_cache = None;
            return self.fold();
        }
        let key = (self.weights.version(), self.filters.version());
        match &self.fold_cache {
            Some((k, g)) if *k == key => Ok(g.clone()),
            _ => {
                let g = self.fold()?;
                self.fold_cache = Some((key, g.clone()));
                Ok(g)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.output_dims(x.dims())?;
        self.saved = None;
        match self.algorithm {
            Algorithm::Folded => {
                let g = self.folded_for(mode)?;
                let y = conv2d_forward(x, &g, self.spec.stride, self.spec.padding)?;
                self.peak_elems = x.len().max(g.len()).max(y.len());
                if mode == Mode::Train {
                    self.saved = Some(Saved::Folded { input: x.clone(), folded: g });
                }
                Ok(y)
            }
            Algorithm::Expanded => self.forward_expanded(x, mode),
        }
    }

    fn forward_expanded(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (b, n, h, w) = x.nchw()?;
        let k = self.spec.kernel;
        let a = self.active.len();
        let active_kernels = gather_filters(self.filters.kernels(), &self.active, k);
        // Every channel becomes its own sample for the depthwise stage.
        let per_channel = x.clone().reshape(&[b * n, 1, h, w])?;
        let z = conv2d_forward(&per_channel, &active_kernels, self.spec.stride, self.spec.padding)?;
        let (_, _, oh, ow) = z.nchw()?;
        let z = z.reshape(&[b, n * a, oh, ow])?;
        let (mixed_in, bn_cache) = match &mut self.bn {
            Some(stats) => {
                let (zn, cache) = batchnorm::batchnorm_forward(
                    &z,
                    T::lit(batchnorm::DEFAULT_EPS),
                    None,
                    mode,
                    stats,
                    T::lit(batchnorm::DEFAULT_MOMENTUM),
                )?;
                (zn, cache)
            }
            None => (z, None),
        };
        let m = self.spec.out_channels;
        let kk = k * k;
        let wd = self.weights.value().data();
        let mut mix = Vec::with_capacity(m * n * a);
        for mi in 0..m {
            for ni in 0..n {
                let row = &wd[(mi * n + ni) * kk..(mi * n + ni + 1) * kk];
                mix.extend(self.active.iter().map(|&f| row[f]));
            }
        }
        let mix_kernels = Tensor::from_vec(&[m, n * a, 1, 1], mix)?;
        let y = conv2d_forward(&mixed_in, &mix_kernels, 1, 0)?;
        self.peak_elems = x.len().max(mixed_in.len()).max(y.len());
        if mode == Mode::Train {
            self.saved = Some(Saved::Expanded {
                input: per_channel,
                active_kernels,
                mixed_in,
                mix_kernels,
                bn: bn_cache,
            });
        }
        Ok(y)
    }

    /// Consumes the state saved by the last train-mode forward, stores
    /// parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let saved = self
            .saved
            .take()
            .ok_or_else(|| invalid!("{}: backward without a train-mode forward", self.name))?;
        let k = self.spec.kernel;
        let kk = k * k;
        match saved {
            Saved::Folded { input, folded } => {
                let (dx, dg) = conv2d_backward(dy, &input, &folded, self.spec.stride, self.spec.padding)?;
                let (dw, df) = fold_backward(&dg, self.weights.value(), self.filters.kernels())?;
                self.weights.set_grad(dw)?;
                if let FilterStage::Learned(p) = &mut self.filters {
                    p.set_grad(df)?;
                }
                Ok(dx)
            }
            Saved::Expanded { input, active_kernels, mixed_in, mix_kernels, bn } => {
                let (b, _, h, w) = (input.dims()[0], 1, input.dims()[2], input.dims()[3]);
                let n = self.spec.in_channels;
                let batch = b / n;
                let a = self.active.len();
                let (dmixed, dmix) = conv2d_backward(dy, &mixed_in, &mix_kernels, 1, 0)?;
                let dz = match &bn {
                    Some(cache) => batchnorm::batchnorm_backward(&dmixed, cache, None)?.0,
                    None => dmixed,
                };
                let (_, _, oh, ow) = dz.nchw()?;
                let dz = dz.reshape(&[batch * n, a, oh, ow])?;
                let (dx, dact) = conv2d_backward(&dz, &input, &active_kernels, self.spec.stride, self.spec.padding)?;
                let m = self.spec.out_channels;
                let mut dw = Tensor::zeros(&self.spec.weight_dims());
                for mi in 0..m {
                    for ni in 0..n {
                        for (ai, &f) in self.active.iter().enumerate() {
                            dw.data_mut()[(mi * n + ni) * kk + f] = dmix.data()[(mi * n + ni) * a + ai];
                        }
                    }
                }
                self.weights.set_grad(dw)?;
                if let FilterStage::Learned(p) = &mut self.filters {
                    let mut df = Tensor::zeros(p.value().dims());
                    for (ai, &f) in self.active.iter().enumerate() {
                        df.data_mut()[f * kk..(f + 1) * kk].copy_from_slice(&dact.data()[ai * kk..(ai + 1) * kk]);
                    }
                    p.set_grad(df)?;
                }
                dx.reshape(&[batch, n, h, w])
            }
        }
    }
}

/// Analytic cost of one forward pass of a harmonic block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub algorithm: Algorithm,
    /// Multiply-adds of the block.
    pub madds: u64,
    /// Multiply-adds of a standard convolution with the same shapes.
    pub standard_madds: u64,
    /// Elements of the largest tensor live during the pass.
    pub peak_intermediate_elems: u64,
    /// `madds / standard_madds`.
    pub ratio_vs_standard_conv: Ratio<u64>,
    /// Extra work over a standard convolution. Expanded: the basis stage
    /// relative to the whole convolution (`K²/M` with the full bank, where
    /// the mixing stage costs exactly one convolution). Folded: the one-time
    /// fold relative to the convolution cost of a single image (`K²/(A·B)`
    /// for a resolution-preserving block on `A×B` inputs).
    pub overhead: Ratio<u64>,
}

/// Count multiply-adds and peak live elements for `input_dims = [B, N, A, B']`.
pub fn cost_report(spec: &HarmonicSpec, input_dims: &[usize], algorithm: Algorithm) -> Result<CostReport> {
    spec.validate()?;
    let [batch, n, h, w] = *input_dims else {
        return Err(shape_err!("expected NCHW dims, got {input_dims:?}"));
    };
    if n != spec.in_channels {
        return Err(shape_err!("spec expects {} channels, dims have {n}", spec.in_channels));
    }
    let k = spec.kernel;
    let oh = conv::out_extent(h, k, spec.stride, spec.padding)?;
    let ow = conv::out_extent(w, k, spec.stride, spec.padding)?;
    let bank = FilterBank::new(k)?;
    let a = spec.active_filters(&bank)?.len() as u64;
    let (batch, n, m, kk) = (batch as u64, n as u64, spec.out_channels as u64, (k * k) as u64);
    let pix = (oh * ow) as u64;
    let standard = batch * m * n * kk * pix;
    let input = batch * n * (h * w) as u64;
    let output = batch * m * pix;
    let (madds, peak, overhead) = match algorithm {
        Algorithm::Expanded => {
            let basis = batch * n * a * kk * pix;
            let combine = batch * m * n * a * pix;
            let z = batch * n * a * pix;
            (basis + combine, input.max(z).max(output), Ratio::new(basis, standard))
        }
        Algorithm::Folded => {
            let fold = m * n * a * kk;
            let per_image = m * n * kk * pix;
            (fold + standard, input.max(m * n * kk).max(output), Ratio::new(fold, per_image))
        }
    };
    Ok(CostReport {
        algorithm,
        madds,
        standard_madds: standard,
        peak_intermediate_elems: peak,
        ratio_vs_standard_conv: Ratio::new(madds, standard),
        overhead,
    })
}

/// Plain-loop implementations with a multiply-add counter, used to audit
/// [`cost_report`] and as an independent check of the fast kernels.
pub mod reference {
    use super::*;

    fn tap(x: &Tensor<f64>, b: usize, c: usize, y: isize, xx: isize) -> f64 {
        let (_, _, h, w) = x.nchw().unwrap();
        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
            0.0
        } else {
            x.at(&[b, c, y as usize, xx as usize])
        }
    }

    /// Direct convolution; every kernel tap counts, padded or not.
    pub fn conv(x: &Tensor<f64>, g: &Tensor<f64>, stride: usize, pad: usize, count: &mut u64) -> Tensor<f64> {
        let (b, c, h, w) = x.nchw().unwrap();
        let (m, _, k, _) = g.nchw().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(&[b, m, oh, ow]);
        for bi in 0..b {
            for mi in 0..m {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for p in 0..k {
                                for q in 0..k {
                                    let yy = (i * stride + p) as isize - pad as isize;
                                    let xx = (j * stride + q) as isize - pad as isize;
                                    acc += tap(x, bi, ci, yy, xx) * g.at(&[mi, ci, p, q]);
                                    *count += 1;
                                }
                            }
                        }
                        y.set(&[bi, mi, i, j], acc);
                    }
                }
            }
        }
        y
    }

    /// Expanded form without normalisation: basis responses then mixing.
    pub fn expanded(
        x: &Tensor<f64>,
        weights: &Tensor<f64>,
        bank: &FilterBank,
        active: &[usize],
        stride: usize,
        pad: usize,
        count: &mut u64,
    ) -> Tensor<f64> {
        let (b, n, h, w) = x.nchw().unwrap();
        let (m, _, k, _) = weights.nchw().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut z = vec![0.0; b * n * active.len() * oh * ow];
        let zi = |bi: usize, ni: usize, ai: usize, i: usize, j: usize| {
            (((bi * n + ni) * active.len() + ai) * oh + i) * ow + j
        };
        for bi in 0..b {
            for ni in 0..n {
                for (ai, &f) in active.iter().enumerate() {
                    let psi = bank.psi(bank.pair(f));
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for p in 0..k {
                                for q in 0..k {
                                    let yy = (i * stride + p) as isize - pad as isize;
                                    let xx = (j * stride + q) as isize - pad as isize;
                                    acc += tap(x, bi, ni, yy, xx) * psi[p * k + q];
                                    *count += 1;
                                }
                            }
                            z[zi(bi, ni, ai, i, j)] = acc;
                        }
                    }
                }
            }
        }
        let mut y = Tensor::zeros(&[b, m, oh, ow]);
        for bi in 0..b {
            for mi in 0..m {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            for (ai, &f) in active.iter().enumerate() {
                                let p = bank.pair(f);
                                acc += weights.at(&[mi, ni, p.u, p.v]) * z[zi(bi, ni, ai, i, j)];
                                *count += 1;
                            }
                        }
                        y.set(&[bi, mi, i, j], acc);
                    }
                }
            }
        }
        y
    }

    /// Fold over the active filters, then convolve.
    pub fn folded(
        x: &Tensor<f64>,
        weights: &Tensor<f64>,
        bank: &FilterBank,
        active: &[usize],
        stride: usize,
        pad: usize,
        count: &mut u64,
    ) -> Tensor<f64> {
        let (m, n, k, _) = weights.nchw().unwrap();
        let mut g = Tensor::zeros(&[m, n, k, k]);
        for mi in 0..m {
            for ni in 0..n {
                for &f in active {
                    let p = bank.pair(f);
                    let wv = weights.at(&[mi, ni, p.u, p.v]);
                    let psi = bank.psi(p);
                    for t in 0..k * k {
                        let idx = [mi, ni, t / k, t % k];
                        g.set(&idx, g.at(&idx) + wv * psi[t]);
                        *count += 1;
                    }
                }
            }
        }
        conv(x, &g, stride, pad, count)
    }
}
