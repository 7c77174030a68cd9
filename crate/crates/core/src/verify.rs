//! Self-check suites behind the `verify` command: basis properties,
//! lapped-transform identities, expanded/folded equivalence, cost
//! accounting and gradient checks.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dct::FilterBank;
use crate::error::Result;
use crate::experiments::{Arch, Variant};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::harmonic::{cost_report, reference, Algorithm, HarmonicBlock, HarmonicSpec, Subset};
use crate::lapped::{self, ShiftSpec, WindowedSignal};
use crate::model::{BatchNorm, Conv2d, Dense, Layer, Model};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Largest window length for the lapped-transform suites.
    pub max_n: usize,
    /// Tolerance of the identity suites (basis, lapped, f64 equivalence).
    pub tol: f64,
    pub seed: u64,
    pub equivalence_configs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { max_n: 32, tol: 1e-10, seed: 0, equivalence_configs: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tol: f64,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, tol: f64) -> Self {
        SuiteResult { name: name.into(), cases: 0, failures: 0, max_error: 0.0, tol, detail: String::new() }
    }

    fn check(&mut self, error: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if error > self.max_error || error.is_nan() {
            self.max_error = error;
            self.detail = what();
        }
        if !(error <= self.tol) {
            self.failures += 1;
        }
    }

    fn absorb(&mut self, report: &GradCheckReport, label: &str) {
        self.cases += report.checked;
        self.failures += report.failures;
        if report.max_error() > self.max_error || report.max_error().is_nan() {
            self.max_error = report.max_error();
            self.detail = format!("{label}: {:?}", report.worst);
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// L1 normalization of ψ and orthogonality of φ for K ∈ {2, 3, 4, 8}.
pub fn basis_suite(tol: f64) -> Result<SuiteResult> {
    let mut r = SuiteResult::new("basis", tol);
    for k in [2, 3, 4, 8] {
        let bank = FilterBank::new(k)?;
        let pairs = bank.zigzag().to_vec();
        for (i, &p) in pairs.iter().enumerate() {
            let l1: f64 = bank.psi(p).iter().map(|v| v.abs()).sum();
            r.check((l1 - 1.0).abs(), || format!("K={k} |psi{p:?}|_1 = {l1}"));
            for &q in &pairs[i + 1..] {
                let dot: f64 = bank.phi(p).iter().zip(bank.phi(q)).map(|(a, b)| a * b).sum();
                r.check(dot.abs(), || format!("K={k} <phi{p:?}, phi{q:?}> = {dot:e}"));
            }
        }
    }
    Ok(r)
}

/// Sine coefficients against their phase-shifted and index-shifted cosine
/// forms for every N ≤ `max_n`, 1 ≤ k < N, z ∈ {−3, 0, 5}.
pub fn shifted_cosine_suites(max_n: usize, tol: f64, seed: u64) -> Result<(SuiteResult, SuiteResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase = SuiteResult::new("lapped.phase_shift", tol);
    let mut shifted = SuiteResult::new("lapped.shifted_cosine", tol);
    for n in 2..=max_n {
        let signals: Vec<Vec<f64>> = (0..4).map(|_| random_signal(&mut rng, n)).collect();
        for k in 1..n {
            for z in [-3i64, 0, 5] {
                for s in &signals {
                    let w = WindowedSignal::whole(s)?;
                    let g = lapped::dst_coeff(&w, k)?;
                    let e = (g - lapped::dst_as_phase_shifted_cosine(&w, k, z)?).abs();
                    phase.check(e, || format!("N={n} k={k} z={z}"));
                }
                let e = lapped::verify_shifted_cosine(n, k, z, &signals)?;
                shifted.check(e, || format!("N={n} k={k} z={z}"));
            }
        }
    }
    Ok((phase, shifted))
}

/// Window-shift identity on N-periodic signals for even k and integral δ.
pub fn window_shift_suite(max_n: usize, tol: f64, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut r = SuiteResult::new("lapped.window_shift", tol);
    for n in 2..=max_n {
        let period = random_signal(&mut rng, n);
        for k in (2..n).step_by(2) {
            for z in -3i64..=5 {
                let spec = ShiftSpec::new(n, k, z)?;
                if let Some(delta) = spec.integer_delta() {
                    let e = lapped::verify_window_shift(n, k, z, &period)?;
                    r.check(e, || format!("N={n} k={k} z={z} delta={delta}"));
                }
            }
        }
    }
    Ok(r)
}

/// Integrality predicate of δ against exhaustive evaluation.
pub fn delta_suite(max_n: usize) -> Result<SuiteResult> {
    let mut r = SuiteResult::new("lapped.delta_integrality", 0.0);
    for n in 1..=max_n {
        for k in 1..=2 * n {
            for z in -10i64..=10 {
                let spec = ShiftSpec::new(n, k, z)?;
                let exact = (n as f64 * (1 + 4 * z) as f64 / (2 * k) as f64).fract() == 0.0;
                let mismatch = if spec.is_integral() == exact { 0.0 } else { 1.0 };
                r.check(mismatch, || format!("N={n} k={k} z={z}"));
            }
        }
    }
    Ok(r)
}

/// Random block configuration for the equivalence checks.
pub fn random_spec(rng: &mut ChaCha8Rng) -> (HarmonicSpec, [usize; 4]) {
    let k = if rng.gen_bool(0.5) { 3 } else { 4 };
    let subset = match rng.gen_range(0..3) {
        0 => Subset::All,
        1 => Subset::Lambda(rng.gen_range(1..2 * k)),
        _ => Subset::Truncate(rng.gen_range(1..=k * k)),
    };
    let spec = HarmonicSpec::new(rng.gen_range(1..=8), rng.gen_range(1..=8), k)
        .stride(rng.gen_range(1..=2))
        .padding(rng.gen_range(0..=1))
        .subset(subset);
    let dims = [rng.gen_range(1..=3), spec.in_channels, rng.gen_range(k..=9), rng.gen_range(k..=9)];
    (spec, dims)
}

/// Largest relative differences (forward, input gradient, weight gradient)
/// between the expanded and folded execution of one random block.
pub fn equivalence_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, [f64; 3])> {
    let (spec, dims) = random_spec(rng);
    let label = format!("{spec:?} input {dims:?}");
    let mut expanded = HarmonicBlock::<T>::new("h", spec, Algorithm::Expanded, rng)?;
    let mut folded = expanded.clone();
    folded.set_algorithm(Algorithm::Folded)?;
    let x = Tensor::from_fn(&dims, |_| T::lit(rng.gen_range(-1.0..1.0)));
    let ye = expanded.forward(&x, Mode::Train)?;
    let yf = folded.forward(&x, Mode::Train)?;
    let dy = Tensor::from_fn(ye.dims(), |_| T::lit(rng.gen_range(-1.0..1.0)));
    let dxe = expanded.backward(&dy)?;
    let dxf = folded.backward(&dy)?;
    let rel = |a: &Tensor<T>, b: &Tensor<T>| a.rel_diff(b).to_f64().unwrap_or(f64::NAN);
    Ok((
        label,
        [
            rel(&yf, &ye),
            rel(&dxf, &dxe),
            rel(folded.weights().grad(), expanded.weights().grad()),
        ],
    ))
}

pub fn equivalence_suite<T: Scalar>(configs: usize, tol: f64, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new(&format!("equivalence.{}", T::DTYPE.tag()), tol);
    for _ in 0..configs {
        let (label, errs) = equivalence_case::<T>(&mut rng)?;
        for (what, e) in ["forward", "grad_input", "grad_weight"].iter().zip(errs) {
            r.check(e, || format!("{what}: {label}"));
        }
    }
    Ok(r)
}

/// Counted reference loops against the analytic report, plus the two
/// overhead identities.
pub fn cost_suite() -> Result<SuiteResult> {
    let mut r = SuiteResult::new("cost", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [
        (HarmonicSpec::new(2, 3, 3).padding(1), [2, 2, 6, 6]),
        (HarmonicSpec::new(3, 2, 4).stride(2), [1, 3, 9, 8]),
        (HarmonicSpec::new(2, 4, 3).subset(Subset::Lambda(2)), [1, 2, 5, 7]),
        (HarmonicSpec::new(1, 2, 4).padding(1).subset(Subset::Truncate(5)), [2, 1, 6, 6]),
    ];
    for (spec, dims) in cases {
        let bank = FilterBank::new(spec.kernel)?;
        let active = spec.active_filters(&bank)?;
        let x = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&spec.weight_dims(), |_| rng.gen_range(-1.0..1.0));
        for alg in [Algorithm::Expanded, Algorithm::Folded] {
            let mut count = 0;
            match alg {
                Algorithm::Expanded => {
                    reference::expanded(&x, &w, &bank, &active, spec.stride, spec.padding, &mut count);
                }
                Algorithm::Folded => {
                    reference::folded(&x, &w, &bank, &active, spec.stride, spec.padding, &mut count);
                }
            }
            let report = cost_report(&spec, &dims, alg)?;
            let diff = (report.madds as f64 - count as f64).abs();
            r.check(diff, || format!("{alg:?} {spec:?}: counted {count}, reported {}", report.madds));
        }
    }
    for (k, m, a) in [(3usize, 16usize, 32usize), (3, 64, 32), (5, 8, 16), (7, 32, 28)] {
        let spec = HarmonicSpec::new(4, m, k).padding(k / 2);
        let e = cost_report(&spec, &[2, 4, a, a], Algorithm::Expanded)?.overhead;
        let expect = Ratio::new((k * k) as u64, m as u64);
        r.check(if e == expect { 0.0 } else { 1.0 }, || format!("K={k} M={m}: {e} != {expect}"));
        let f = cost_report(&spec, &[2, 4, a, a], Algorithm::Folded)?.overhead;
        let expect = Ratio::new((k * k) as u64, (a * a) as u64);
        r.check(if f == expect { 0.0 } else { 1.0 }, || format!("K={k} A=B={a}: {f} != {expect}"));
    }
    Ok(r)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// One small model per layer kind, each terminated by the softmax head.
pub fn isolated_layer_models(rng: &mut ChaCha8Rng) -> Result<Vec<(String, Model<f64>, usize)>> {
    let harm = |alg, normalize, rng: &mut ChaCha8Rng| -> Result<Layer<f64>> {
        let spec = HarmonicSpec::new(2, 3, 3).stride(2).padding(1).normalize(normalize);
        Ok(Layer::Harmonic(HarmonicBlock::new("h", spec, alg, rng)?))
    };
    let sep = {
        let spec = HarmonicSpec::new(2, 3, 3).stride(2).padding(1).subset(Subset::Lambda(3));
        Layer::Harmonic(HarmonicBlock::separable("s", spec, Algorithm::Expanded, rng)?)
    };
    let cases: Vec<(&str, Vec<usize>, Vec<Layer<f64>>)> = vec![
        ("conv2d", vec![2, 5, 5], vec![Layer::Conv2d(Conv2d::new("c", 2, 3, 3, 2, 1, rng)), Layer::flatten()]),
        ("harmonic.expanded", vec![2, 5, 5], vec![harm(Algorithm::Expanded, false, rng)?, Layer::flatten()]),
        ("harmonic.folded", vec![2, 5, 5], vec![harm(Algorithm::Folded, false, rng)?, Layer::flatten()]),
        ("harmonic.normalized", vec![2, 5, 5], vec![harm(Algorithm::Expanded, true, rng)?, Layer::flatten()]),
        ("separable", vec![2, 5, 5], vec![sep, Layer::flatten()]),
        ("batchnorm", vec![3, 2, 2], vec![Layer::BatchNorm(BatchNorm::new("bn", 3, true)), Layer::flatten()]),
        ("relu", vec![6], vec![Layer::relu()]),
        ("avgpool", vec![2, 4, 4], vec![Layer::avgpool(3, 2, 1), Layer::flatten()]),
        ("upsample", vec![2, 2, 2], vec![Layer::upsample(3, 5), Layer::flatten()]),
        ("flatten", vec![2, 2, 3], vec![Layer::flatten()]),
        ("dense", vec![6], vec![Layer::Dense(Dense::new("fc", 6, 4, rng))]),
    ];
    let mut out = Vec::new();
    for (name, dims, layers) in cases {
        let probe = Model { layers, arch: name.into(), input_dims: dims.clone(), classes: 0 };
        let classes = *probe.output_dims(1)?.last().unwrap_or(&1);
        let model = Model::new(name, &dims, classes, probe.layers)?;
        out.push((name.to_string(), model, classes));
    }
    Ok(out)
}

/// Gradient checks of every layer kind at `layer_tol` and of the MNIST
/// variants on a 4-sample batch at `model_tol`.
pub fn gradient_suites(layer_tol: f64, model_tol: f64, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = SuiteResult::new("gradcheck.layers", layer_tol);
    for (name, mut model, classes) in isolated_layer_models(&mut rng)? {
        let mut dims = vec![4];
        dims.extend_from_slice(&model.input_dims);
        let x = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0..1.0));
        let y = labels(&mut rng, 4, classes);
        let report = grad_check(&mut model, &x, &y, &GradCheckConfig::new(layer_tol))?;
        layers.absorb(&report, &name);
    }
    let mut models = SuiteResult::new("gradcheck.mnist", model_tol);
    for (variant, algorithm) in [
        (Variant::Conv, Algorithm::Folded),
        (Variant::Harmonic, Algorithm::Expanded),
        (Variant::Harmonic, Algorithm::Folded),
        (Variant::Separable, Algorithm::Expanded),
    ] {
        let arch = Arch::Mnist { variant, algorithm };
        let mut model: Model<f64> = arch.build(seed)?;
        let x = Tensor::from_fn(&[4, 1, 28, 28], |_| rng.gen_range(-1.0..1.0));
        let y = labels(&mut rng, 4, 10);
        let cfg = GradCheckConfig { seed, ..GradCheckConfig::new(model_tol).samples(12) };
        let report = grad_check(&mut model, &x, &y, &cfg)?;
        models.absorb(&report, &arch.to_string());
    }
    Ok(vec![layers, models])
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    let mut out = vec![basis_suite(opts.tol)?];
    let (phase, shifted) = shifted_cosine_suites(opts.max_n, opts.tol, opts.seed)?;
    out.push(phase);
    out.push(shifted);
    out.push(window_shift_suite(opts.max_n, opts.tol, opts.seed)?);
    out.push(delta_suite(opts.max_n)?);
    out.push(equivalence_suite::<f32>(opts.equivalence_configs, 1e-4, opts.seed)?);
    out.push(equivalence_suite::<f64>(opts.equivalence_configs, opts.tol, opts.seed)?);
    out.push(cost_suite()?);
    out.extend(gradient_suites(1e-6, 1e-4, opts.seed)?);
    Ok(out)
}
