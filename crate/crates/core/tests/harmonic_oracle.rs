//! Harmonic blocks against plain-loop oracles written from the closed-form
//! basis, independent of the library's kernels.

use std::f64::consts::PI;

use harmonic_core::dct::FilterBank;
use harmonic_core::harmonic::{fold_weights, Algorithm, HarmonicBlock, HarmonicSpec, Subset};
use harmonic_core::ops::Mode;
use harmonic_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn basis(k: usize, u: usize, v: usize, x: usize, y: usize) -> f64 {
    let c = |f: usize, t: usize| (PI * (t as f64 + 0.5) * f as f64 / k as f64).cos();
    c(u, x) * c(v, y)
}

fn psi(k: usize, u: usize, v: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k * k).map(|i| basis(k, u, v, i / k, i % k)).collect();
    let l1: f64 = raw.iter().map(|a| a.abs()).sum();
    raw.into_iter().map(|a| a / l1).collect()
}

fn active(spec: &HarmonicSpec) -> Vec<(usize, usize)> {
    let k = spec.kernel;
    let mut zig: Vec<(usize, usize)> = (0..k).flat_map(|u| (0..k).map(move |v| (u, v))).collect();
    zig.sort_by_key(|&(u, v)| (u + v, u));
    match spec.subset {
        Subset::All => zig,
        Subset::Lambda(l) => zig.into_iter().filter(|&(u, v)| u + v < l).collect(),
        Subset::Truncate(t) => zig.into_iter().take(t).collect(),
    }
}

/// `y[b,m,i,j] = Σ_n Σ_(u,v) w[m,n,u,v] Σ_(p,q) ψ_uv[p,q] x[b,n,i·s+p−pad,j·s+q−pad]`.
fn oracle_forward(x: &Tensor<f64>, w: &Tensor<f64>, spec: &HarmonicSpec) -> Tensor<f64> {
    let [b, n, h, wd] = x.dims()[..] else { unreachable!() };
    let (k, s, pad, m) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let oh = (h + 2 * pad - k) / s + 1;
    let ow = (wd + 2 * pad - k) / s + 1;
    let filters: Vec<((usize, usize), Vec<f64>)> = active(spec).into_iter().map(|(u, v)| ((u, v), psi(k, u, v))).collect();
    Tensor::from_fn(&[b, m, oh, ow], |idx| {
        let (j, rest) = (idx % ow, idx / ow);
        let (i, rest) = (rest % oh, rest / oh);
        let (mi, bi) = (rest % m, rest / m);
        let mut acc = 0.0;
        for ni in 0..n {
            for ((u, v), f) in &filters {
                let mut z = 0.0;
                for p in 0..k {
                    for q in 0..k {
                        let (yy, xx) = ((i * s + p) as isize - pad as isize, (j * s + q) as isize - pad as isize);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                            z += f[p * k + q] * x.at(&[bi, ni, yy as usize, xx as usize]);
                        }
                    }
                }
                acc += w.at(&[mi, ni, *u, *v]) * z;
            }
        }
        acc
    })
}

fn random_case(rng: &mut ChaCha8Rng) -> (HarmonicSpec, [usize; 4]) {
    let k = rng.gen_range(2..=5);
    let subset = match rng.gen_range(0..3) {
        0 => Subset::All,
        1 => Subset::Lambda(rng.gen_range(1..2 * k)),
        _ => Subset::Truncate(rng.gen_range(1..=k * k)),
    };
    let spec = HarmonicSpec::new(rng.gen_range(1..=4), rng.gen_range(1..=4), k)
        .stride(rng.gen_range(1..=3))
        .padding(rng.gen_range(0..=k / 2))
        .subset(subset);
    let dims = [rng.gen_range(1..=2), spec.in_channels, rng.gen_range(k..=9), rng.gen_range(k..=9)];
    (spec, dims)
}

#[test]
fn both_algorithms_match_the_oracle_on_sixty_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..60 {
        let (spec, dims) = random_case(&mut rng);
        let x = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0..1.0));
        let mut block = HarmonicBlock::<f64>::new("h", spec.clone(), Algorithm::Expanded, &mut rng).unwrap();
        let w = block.weights().value().clone();
        let expect = oracle_forward(&x, &w, &spec);
        for alg in [Algorithm::Expanded, Algorithm::Folded] {
            block.set_algorithm(alg).unwrap();
            let y = block.forward(&x, Mode::Eval).unwrap();
            let err = y.rel_diff(&expect);
            assert!(err <= 1e-12, "case {case} {alg:?} {spec:?} {dims:?}: rel err {err:e}");
        }
    }
}

#[test]
fn f32_blocks_track_the_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (spec, dims) = random_case(&mut rng);
        let x = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0f64..1.0));
        let mut block = HarmonicBlock::<f32>::new("h", spec.clone(), Algorithm::Folded, &mut rng).unwrap();
        let w: Tensor<f64> = block.weights().value().cast();
        let y: Tensor<f64> = block.forward(&x.cast(), Mode::Eval).unwrap().cast();
        assert!(y.rel_diff(&oracle_forward(&x, &w, &spec)) <= 1e-5);
    }
}

#[test]
fn library_bank_matches_closed_form() {
    for k in 1..=8 {
        let bank = FilterBank::new(k).unwrap();
        for &p in bank.zigzag() {
            let expect = psi(k, p.u, p.v);
            for (a, b) in bank.psi(p).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

/// The normalised basis spans all K×K kernels, so any kernel bank `g` has a
/// unique weight tensor `w` with `fold(w) = g`. Solve the normal equations
/// per (m, n) and check the fold reproduces `g`.
#[test]
fn least_squares_weights_reproduce_target_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in [2usize, 3, 4] {
        let kk = k * k;
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|u| (0..k).map(move |v| (u, v))).collect();
        let a = DMatrix::from_fn(kk, kk, |t, f| psi(k, pairs[f].0, pairs[f].1)[t]);
        let gram = a.transpose() * &a;
        let (m, n) = (3, 2);
        let target = Tensor::from_fn(&[m, n, k, k], |_| rng.gen_range(-1.0..1.0));
        let mut w = Tensor::zeros(&[m, n, k, k]);
        for mn in 0..m * n {
            let g = DVector::from_column_slice(&target.data()[mn * kk..(mn + 1) * kk]);
            let sol = gram.clone().cholesky().expect("Gram matrix is SPD").solve(&(a.transpose() * g));
            w.data_mut()[mn * kk..(mn + 1) * kk].copy_from_slice(sol.as_slice());
        }
        let filters = FilterBank::new(k).unwrap().psi_kernels::<f64>();
        let folded = fold_weights(&w, &filters).unwrap();
        assert!(folded.max_abs_diff(&target) < 1e-10, "K={k}");
    }
}
