//! Overlapping-window DCT identities: the sine transform of a window is a
//! cosine transform of a shifted window.

use std::f64::consts::PI;

use num_rational::Ratio;

use crate::error::{invalid, Result};

/// A length-`len` window into `samples` starting at `start`.
#[derive(Clone, Copy, Debug)]
pub struct WindowedSignal<'a> {
    samples: &'a [f64],
    start: usize,
    len: usize,
}

impl<'a> WindowedSignal<'a> {
    pub fn new(samples: &'a [f64], start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > samples.len() {
            return Err(invalid!(
                "window [{start}, {}) does not fit {} samples",
                start + len,
                samples.len()
            ));
        }
        Ok(WindowedSignal { samples, start, len })
    }

    pub fn whole(samples: &'a [f64]) -> Result<Self> {
        Self::new(samples, 0, samples.len())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &'a [f64] {
        &self.samples[self.start..self.start + self.len]
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k >= self.len {
            return Err(invalid!("frequency {k} outside [0, {})", self.len));
        }
        Ok(())
    }
}

fn phase(n: usize, k: usize, len: usize) -> f64 {
    PI / len as f64 * (n as f64 + 0.5) * k as f64
}

/// `F_k = Σ x_n cos(π(n+½)k/N)`.
pub fn dct2_coeff(w: &WindowedSignal<'_>, k: usize) -> Result<f64> {
    w.check_k(k)?;
    Ok(w.values().iter().enumerate().map(|(n, x)| x * phase(n, k, w.len).cos()).sum())
}

/// `G_k = Σ x_n sin(π(n+½)k/N)`.
pub fn dst_coeff(w: &WindowedSignal<'_>, k: usize) -> Result<f64> {
    w.check_k(k)?;
    Ok(w.values().iter().enumerate().map(|(n, x)| x * phase(n, k, w.len).sin()).sum())
}

/// `G_k` written as a cosine sum with phase `π/2 + 2πz − π(n+½)k/N`.
pub fn dst_as_phase_shifted_cosine(w: &WindowedSignal<'_>, k: usize, z: i64) -> Result<f64> {
    w.check_k(k)?;
    Ok(w.values()
        .iter()
        .enumerate()
        .map(|(n, x)| x * (PI / 2.0 + 2.0 * PI * z as f64 - phase(n, k, w.len)).cos())
        .sum())
}

/// `G_k` written as a cosine sum over indices shifted by `δ = N(1+4z)/(2k)`:
/// `Σ x_n cos(π/N (n − δ + ½) k)`.
pub fn dst_as_shifted_cosine(w: &WindowedSignal<'_>, k: usize, z: i64) -> Result<f64> {
    w.check_k(k)?;
    if k == 0 {
        return Err(invalid!("shifted-cosine form needs k >= 1"));
    }
    let n_len = w.len as f64;
    let delta = n_len * (1.0 + 4.0 * z as f64) / (2.0 * k as f64);
    Ok(w.values()
        .iter()
        .enumerate()
        .map(|(n, x)| x * (PI / n_len * (n as f64 - delta + 0.5) * k as f64).cos())
        .sum())
}

/// The pixel shift `δ = N(1+4z)/(2k)` as an exact rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub n: usize,
    pub k: usize,
    pub z: i64,
}

impl ShiftSpec {
    pub fn new(n: usize, k: usize, z: i64) -> Result<Self> {
        if k == 0 {
            return Err(invalid!("shift undefined for k = 0"));
        }
        Ok(ShiftSpec { n, k, z })
    }

    pub fn delta(&self) -> Ratio<i64> {
        Ratio::new(self.n as i64 * (1 + 4 * self.z), 2 * self.k as i64)
    }

    /// `δ ∈ ℤ  ⇔  2k | N(1+4z)`.
    pub fn is_integral(&self) -> bool {
        (self.n as i64 * (1 + 4 * self.z)) % (2 * self.k as i64) == 0
    }

    pub fn integer_delta(&self) -> Option<i64> {
        self.is_integral().then(|| self.delta().to_integer())
    }
}

pub fn shift_delta(n: usize, k: usize, z: i64) -> Result<Ratio<i64>> {
    Ok(ShiftSpec::new(n, k, z)?.delta())
}

/// Max `|G_k − shifted-cosine form|` over `signals`, each of length `n`.
pub fn verify_shifted_cosine(n: usize, k: usize, z: i64, signals: &[Vec<f64>]) -> Result<f64> {
    if k == 0 {
        return Err(invalid!("k must be >= 1"));
    }
    let mut worst: f64 = 0.0;
    for s in signals {
        let w = WindowedSignal::new(s, 0, n)?;
        worst = worst.max((dst_coeff(&w, k)? - dst_as_shifted_cosine(&w, k, z)?).abs());
    }
    Ok(worst)
}

fn wrap(i: i64, len: usize) -> usize {
    i.rem_euclid(len as i64) as usize
}

/// Max over window offsets `s ∈ [0, N)` of `|G_k(window at s) − F_k(window at s+δ)|`
/// on the periodic extension of `period` (length `N`). Exact for even `k`.
pub fn verify_window_shift(n: usize, k: usize, z: i64, period: &[f64]) -> Result<f64> {
    let shift = ShiftSpec::new(n, k, z)?;
    let delta = shift
        .integer_delta()
        .ok_or_else(|| invalid!("δ = {} is not an integer pixel shift", shift.delta()))?;
    if period.len() != n {
        return Err(invalid!("periodic signal must have length N = {n}"));
    }
    window_shift_error(n, k, delta, |i| period[wrap(i, n)])
}

/// Same comparison for an arbitrary (not necessarily periodic) long signal;
/// windows that would leave the signal are skipped. Reports the error
/// without asserting it.
pub fn measure_window_shift(n: usize, k: usize, z: i64, signal: &[f64]) -> Result<f64> {
    let delta = ShiftSpec::new(n, k, z)?
        .integer_delta()
        .ok_or_else(|| invalid!("non-integer δ"))?;
    let len = signal.len() as i64;
    let (lo, hi) = (0i64.max(-delta), (len - n as i64).min(len - n as i64 - delta));
    if lo > hi {
        return Err(invalid!("signal too short for shift {delta}"));
    }
    let mut worst: f64 = 0.0;
    for s in lo..=hi {
        let dst = (0..n).map(|i| signal[(s + i as i64) as usize] * phase(i, k, n).sin()).sum::<f64>();
        let dct = (0..n)
            .map(|i| signal[(s + delta + i as i64) as usize] * phase(i, k, n).cos())
            .sum::<f64>();
        worst = worst.max((dst - dct).abs());
    }
    Ok(worst)
}

fn window_shift_error(n: usize, k: usize, delta: i64, x: impl Fn(i64) -> f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..n as i64 {
        let dst: f64 = (0..n).map(|i| x(s + i as i64) * phase(i, k, n).sin()).sum();
        let dct: f64 = (0..n).map(|i| x(s + delta + i as i64) * phase(i, k, n).cos()).sum();
        worst = worst.max((dst - dct).abs());
    }
    Ok(worst)
}

/// Odd-`k` variant on the sign-alternating extension `x[i + N] = −x[i]`.
pub fn measure_window_shift_antiperiodic(n: usize, k: usize, z: i64, base: &[f64]) -> Result<f64> {
    let delta = ShiftSpec::new(n, k, z)?
        .integer_delta()
        .ok_or_else(|| invalid!("non-integer δ"))?;
    if base.len() != n {
        return Err(invalid!("base signal must have length N = {n}"));
    }
    window_shift_error(n, k, delta, |i| {
        let flips = i.div_euclid(n as i64);
        let v = base[wrap(i, n)];
        if flips % 2 == 0 { v } else { -v }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(len: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dct_of_constant() {
        let x = vec![1.0; 8];
        let w = WindowedSignal::whole(&x).unwrap();
        assert!((dct2_coeff(&w, 0).unwrap() - 8.0).abs() < 1e-12);
        for k in 1..8 {
            assert!(dct2_coeff(&w, k).unwrap().abs() < 1e-12);
        }
        assert!(dct2_coeff(&w, 8).is_err());
    }

    #[test]
    fn dct_of_basis_vector_is_half_length() {
        let n = 8;
        for k in 1..n {
            let x: Vec<f64> = (0..n).map(|i| phase(i, k, n).cos()).collect();
            let w = WindowedSignal::whole(&x).unwrap();
            assert!((dct2_coeff(&w, k).unwrap() - n as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dst_basic_values() {
        let x = signal(6, 1);
        let w = WindowedSignal::whole(&x).unwrap();
        assert_eq!(dst_coeff(&w, 0).unwrap(), 0.0);
        let c = vec![1.0; 4];
        let w = WindowedSignal::whole(&c).unwrap();
        assert!(dst_coeff(&w, 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn phase_shifted_cosine_equals_sine() {
        let x = signal(12, 2);
        let w = WindowedSignal::whole(&x).unwrap();
        for k in 0..12 {
            for z in [0, 1, -3] {
                let g = dst_coeff(&w, k).unwrap();
                assert!((g - dst_as_phase_shifted_cosine(&w, k, z).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_values() {
        assert_eq!(shift_delta(4, 2, 0).unwrap(), Ratio::from_integer(1));
        assert_eq!(shift_delta(8, 2, 0).unwrap(), Ratio::from_integer(2));
        assert_eq!(shift_delta(6, 4, 0).unwrap(), Ratio::new(3, 4));
        assert!(!ShiftSpec::new(6, 4, 0).unwrap().is_integral());
        assert!(shift_delta(6, 0, 0).is_err());
    }

    #[test]
    fn shifted_cosine_identity() {
        let signals: Vec<Vec<f64>> = (0..100).map(|s| signal(8, s)).collect();
        assert!(verify_shifted_cosine(8, 3, 0, &signals).unwrap() < 1e-12);
        let signals: Vec<Vec<f64>> = (0..20).map(|s| signal(4, s)).collect();
        assert!(verify_shifted_cosine(4, 1, 5, &signals).unwrap() < 1e-12);
        let signals: Vec<Vec<f64>> = (0..20).map(|s| signal(16, s)).collect();
        for k in 1..16 {
            assert!(verify_shifted_cosine(16, k, 0, &signals).unwrap() < 1e-12);
        }
    }

    #[test]
    fn window_shift_on_periodic_signals() {
        for (n, k, z) in [(4, 2, 0), (8, 4, 0), (8, 2, 1)] {
            let p = signal(n, 9);
            assert!(verify_window_shift(n, k, z, &p).unwrap() < 1e-12, "N={n} k={k} z={z}");
        }
        assert!(verify_window_shift(6, 4, 0, &signal(6, 1)).is_err());
    }

    #[test]
    fn odd_k_needs_antiperiodic_extension() {
        // N=2, k=1, z=0 gives δ=1.
        let base = signal(2, 3);
        assert!(measure_window_shift_antiperiodic(2, 1, 0, &base).unwrap() < 1e-12);
        assert!(verify_window_shift(2, 1, 0, &base).unwrap() > 1e-6);
    }
}
