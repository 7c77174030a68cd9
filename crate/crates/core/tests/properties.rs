use harmonic_core::checkpoint::{decode, encode, Entry, Payload};
use harmonic_core::data::{balanced_indices, SubsetSpec};
use harmonic_core::dct::FilterBank;
use harmonic_core::harmonic::{fold_weights, Algorithm, HarmonicBlock, HarmonicSpec, Subset};
use harmonic_core::lapped::ShiftSpec;
use harmonic_core::ops::{conv2d_backward, conv2d_forward, Mode};
use harmonic_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

fn subset_strategy(k: usize) -> impl Strategy<Value = Subset> {
    prop_oneof![
        Just(Subset::All),
        (1..2 * k).prop_map(Subset::Lambda),
        (1..=k * k).prop_map(Subset::Truncate),
    ]
}

fn spec_strategy() -> impl Strategy<Value = (HarmonicSpec, [usize; 4])> {
    (2usize..=4)
        .prop_flat_map(|k| (Just(k), subset_strategy(k), 1usize..=4, 1usize..=4, 1usize..=2, 0usize..=1, 1usize..=2, 0usize..=4))
        .prop_map(|(k, subset, n, m, stride, pad, b, extra)| {
            let spec = HarmonicSpec::new(n, m, k).stride(stride).padding(pad).subset(subset);
            (spec, [b, n, k + extra, k + 4 - extra])
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zigzag_is_sorted_permutation(k in 1usize..=8) {
        let bank = FilterBank::new(k).unwrap();
        let z = bank.zigzag();
        prop_assert_eq!(z.len(), k * k);
        for w in z.windows(2) {
            prop_assert!((w[0].u + w[0].v, w[0].u) < (w[1].u + w[1].v, w[1].u));
        }
    }

    #[test]
    fn lambda_subset_is_a_zigzag_prefix(k in 1usize..=6, lambda in 1usize..12) {
        let bank = FilterBank::new(k).unwrap();
        let sub = bank.lambda_subset(lambda).unwrap();
        prop_assert!(sub.iter().all(|p| p.u + p.v < lambda));
        prop_assert_eq!(&sub[..], &bank.zigzag()[..sub.len()]);
    }

    #[test]
    fn expanded_and_folded_agree((spec, dims) in spec_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = HarmonicBlock::<f64>::new("h", spec, Algorithm::Expanded, &mut rng).unwrap();
        let mut b = a.clone();
        b.set_algorithm(Algorithm::Folded).unwrap();
        let x = random(&dims, &mut rng);
        let ya = a.forward(&x, Mode::Train).unwrap();
        let yb = b.forward(&x, Mode::Train).unwrap();
        prop_assert!(yb.rel_diff(&ya) <= 1e-10);
        let dy = random(ya.dims(), &mut rng);
        let dxa = a.backward(&dy).unwrap();
        let dxb = b.backward(&dy).unwrap();
        prop_assert!(dxb.rel_diff(&dxa) <= 1e-10);
        prop_assert!(b.weights().grad().rel_diff(a.weights().grad()) <= 1e-10);
    }

    #[test]
    fn fold_is_linear_in_weights(k in 2usize..=4, m in 1usize..=3, n in 1usize..=3, alpha in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = FilterBank::new(k).unwrap().psi_kernels::<f64>();
        let w1 = random(&[m, n, k, k], &mut rng);
        let w2 = random(&[m, n, k, k], &mut rng);
        let mut combo = w1.scale(alpha);
        combo.add_assign(&w2).unwrap();
        let mut expect = fold_weights(&w1, &filters).unwrap().scale(alpha);
        expect.add_assign(&fold_weights(&w2, &filters).unwrap()).unwrap();
        prop_assert!(fold_weights(&combo, &filters).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn conv_backward_is_the_adjoint(
        b in 1usize..=2, c in 1usize..=3, m in 1usize..=3, k in 1usize..=3,
        h in 3usize..=7, w in 3usize..=7, stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[b, c, h, w], &mut rng);
        let g = random(&[m, c, k, k], &mut rng);
        let y = conv2d_forward(&x, &g, stride, pad).unwrap();
        let dy = random(y.dims(), &mut rng);
        let (dx, dg) = conv2d_backward(&dy, &x, &g, stride, pad).unwrap();
        let lhs = y.dot(&dy);
        prop_assert!((lhs - x.dot(&dx)).abs() < 1e-10 * (1.0 + lhs.abs()));
        prop_assert!((lhs - g.dot(&dg)).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn balanced_subsets_have_uniform_histograms(per_class in 1usize..=6, classes in 2usize..=5, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..classes * 8).map(|i| (i * 7 + 3) % classes).collect();
        let size = per_class * classes;
        let idx = balanced_indices(&labels, classes, SubsetSpec { size, seed }).unwrap();
        prop_assert_eq!(idx.len(), size);
        let mut hist = vec![0; classes];
        for &i in &idx {
            hist[labels[i]] += 1;
        }
        prop_assert!(hist.iter().all(|&h| h == per_class));
        let mut uniq = idx.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), size);
        prop_assert_eq!(idx, balanced_indices(&labels, classes, SubsetSpec { size, seed }).unwrap());
    }

    #[test]
    fn checkpoint_entries_round_trip(dims in prop::collection::vec(1usize..=4, 0..=4), seed in any::<u64>(), bytes in prop::collection::vec(any::<u8>(), 0..16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&dims, &mut rng);
        let entries = vec![
            Entry { name: "arch".into(), payload: Payload::U8(bytes) },
            Entry { name: "w64".into(), payload: Payload::F64(a.clone()) },
            Entry { name: "w32".into(), payload: Payload::F32(a.cast()) },
        ];
        prop_assert_eq!(decode(&encode(&entries).unwrap()).unwrap(), entries);
    }

    #[test]
    fn delta_integrality_matches_divisibility(n in 1usize..=64, k in 1usize..=64, z in -10i64..=10) {
        let spec = ShiftSpec::new(n, k, z).unwrap();
        let d = spec.delta();
        prop_assert_eq!(spec.is_integral(), *d.denom() == 1);
        prop_assert_eq!(*d.numer() * 2 * k as i64, n as i64 * (1 + 4 * z) * *d.denom());
    }
}
