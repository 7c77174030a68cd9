use std::fs;

use harmonic_core::checkpoint::{load_checkpoint, save_checkpoint};
use harmonic_core::config::{run_with_data, RunConfig};
use harmonic_core::data::LabeledDataset;
use harmonic_core::experiments::{Arch, ShallowMode, Variant};
use harmonic_core::harmonic::Algorithm;
use harmonic_core::model::{Dense, Layer, LayerKind, Model};
use harmonic_core::ops::Mode;
use harmonic_core::train::{evaluate, train, TrainConfig};
use harmonic_core::{DType, Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

/// Class `c` images are noise plus a bright horizontal bar at row `2c + 4`.
fn digits(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let images = Tensor::from_fn(&[n, 1, 28, 28], |i| {
        let (img, row) = (i / 784, (i % 784) / 28);
        let bar = if row == 2 * labels[img] + 4 { 2.0 } else { 0.0 };
        bar + rng.gen_range(-0.5..0.5)
    });
    LabeledDataset::new("digits", images, labels, 10).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, lr: 0.05, ..TrainConfig::default() }
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = tempdir().unwrap();
    let (tr, te) = (digits(40, 1), digits(20, 2));
    let mut texts = Vec::new();
    for i in 0..2 {
        let mut cfg = RunConfig { train: quick(2), ..RunConfig::default() };
        cfg.apply("arch=mnist:harmonic:alg2").unwrap();
        cfg.metrics = Some(dir.path().join(format!("m{i}.csv")));
        run_with_data(&cfg, &tr, &te).unwrap();
        texts.push(fs::read(cfg.metrics.unwrap()).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    let text = String::from_utf8(texts.pop().unwrap()).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("run_id,seed,epoch,train_loss,train_acc,test_err,wall_time_s\n"));
}

#[test]
fn zero_learning_rate_leaves_a_bn_free_model_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layers = vec![Layer::flatten(), Layer::Dense(Dense::new("fc", 784, 10, &mut rng))];
    let mut model = Model::<f32>::new("dense", &[1, 28, 28], 10, layers).unwrap();
    let (tr, te) = (digits(30, 4), digits(20, 5));
    let before = model.state();
    let initial = evaluate(&mut model, &te, 64).unwrap();
    let records = train(&mut model, &tr, &te, &TrainConfig { lr: 0.0, ..quick(1) }, "zero").unwrap();
    assert_eq!(model.state(), before);
    assert_eq!(records[0].test_err, Some(initial));
}

#[test]
fn training_reduces_loss_on_separable_classes() {
    let mut model = Arch::Mnist { variant: Variant::Harmonic, algorithm: Algorithm::Folded }.build::<f32>(0).unwrap();
    let records = train(&mut model, &digits(60, 6), &digits(30, 7), &quick(4), "fit").unwrap();
    assert!(records.last().unwrap().train_loss < records[0].train_loss);
    assert!(records.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
}

#[test]
fn non_finite_input_is_reported_with_context() {
    let mut ds = digits(16, 8);
    ds.images.data_mut()[5] = f32::NAN;
    let mut model = Arch::Mnist { variant: Variant::Conv, algorithm: Algorithm::Folded }.build::<f32>(0).unwrap();
    match train(&mut model, &ds, &digits(10, 9), &quick(1), "nan") {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn checkpoint_restores_predictions_in_both_dtypes() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let arch = Arch::Mnist { variant: Variant::Separable, algorithm: Algorithm::Expanded };
    let mut model = arch.build::<f64>(5).unwrap();
    let (tr, te) = (digits(30, 10), digits(20, 11));
    train(&mut model, &tr, &te, &TrainConfig { dtype: DType::F64, ..quick(1) }, "ck").unwrap();
    save_checkpoint(&mut model, &path).unwrap();

    let mut back = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.arch, arch.to_string());
    assert_eq!(back.state(), model.state());
    let (x, _) = te.batch::<f64>(&(0..20).collect::<Vec<_>>());
    assert_eq!(back.predict(&x, 7).unwrap(), model.predict(&x, 20).unwrap());

    let mut single = load_checkpoint::<f32>(&path).unwrap();
    let l64 = model.forward(&x, Mode::Eval).unwrap();
    let l32: Tensor<f64> = single.forward(&x.cast(), Mode::Eval).unwrap().cast();
    assert!(l32.rel_diff(&l64) < 1e-4);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let mut model = Arch::shallow(4, 4, 16, ShallowMode::Balanced).unwrap().build::<f32>(1).unwrap();
    save_checkpoint(&mut model, &path).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_ok());

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));

    let mut renamed = bytes.clone();
    renamed[0] = b'X';
    fs::write(&path, &renamed).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));
}

#[test]
fn mnist_variants_differ_only_in_the_spatial_stage() {
    let build = |variant| Arch::Mnist { variant, algorithm: Algorithm::Expanded }.build::<f32>(0).unwrap();
    let (conv, harm, sep) = (build(Variant::Conv), build(Variant::Harmonic), build(Variant::Separable));
    let (tc, th, ts) = (conv.topology().unwrap(), harm.topology().unwrap(), sep.topology().unwrap());
    assert_eq!(tc.len(), th.len());
    assert_eq!(th.len(), ts.len());
    for ((c, h), s) in tc.iter().zip(&th).zip(&ts) {
        assert_eq!(c.output_dims, h.output_dims);
        assert_eq!(h.output_dims, s.output_dims);
        if c.kind.is_spatial_filter() {
            assert_eq!(c.kind, LayerKind::Conv2d);
            assert_eq!(h.kind, LayerKind::Harmonic);
            assert_eq!(s.kind, LayerKind::Separable);
        } else {
            assert_eq!((c.kind, c.param_count), (h.kind, h.param_count));
            assert_eq!((h.kind, h.param_count), (s.kind, s.param_count));
        }
    }
    // Weights [M, N, 3, 3] in every variant; the separable net adds 9 learned 3×3 filters per block.
    assert_eq!(conv.param_count(), harm.param_count());
    assert_eq!(sep.param_count(), harm.param_count() + 3 * 9 * 9);
    let expect = 32 * 9 + 64 * 32 * 9 + 128 * 64 * 9 + 2 * (32 + 64 + 128) + 6272 * 512 + 512 + 2 * 512 + 512 * 10 + 10;
    assert_eq!(harm.param_count(), expect);
}
