//! The 2-D DCT-II filter bank used by harmonic blocks.
//!
//! `phi[u,v](x,y) = cos(π(x+½)u/K) · cos(π(y+½)v/K)` where `x` is the row
//! (vertical) coordinate, so `u` is the vertical frequency. `psi` is each
//! filter divided by its L1 norm.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{format_err, invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrequencyPair {
    pub u: usize,
    pub v: usize,
}

impl FrequencyPair {
    pub fn new(u: usize, v: usize) -> Self {
        FrequencyPair { u, v }
    }
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    k: usize,
    /// `[K², K, K]`, filter `u*K + v`.
    phi: Vec<f64>,
    psi: Vec<f64>,
    order: Vec<FrequencyPair>,
}

/// `cos(π(x+½)u/K)` for `x in 0..K`.
pub fn cosine_vector(k: usize, u: usize) -> Vec<f64> {
    (0..k)
        .map(|x| (PI * (x as f64 + 0.5) * u as f64 / k as f64).cos())
        .collect()
}

impl FilterBank {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid!("filter size must be >= 1"));
        }
        let kk = k * k;
        let mut phi = vec![0.0; kk * kk];
        let mut psi = vec![0.0; kk * kk];
        for u in 0..k {
            let cu = cosine_vector(k, u);
            for v in 0..k {
                let cv = cosine_vector(k, v);
                let f = u * k + v;
                let filt = &mut phi[f * kk..(f + 1) * kk];
                for x in 0..k {
                    for y in 0..k {
                        filt[x * k + y] = cu[x] * cv[y];
                    }
                }
                let l1: f64 = filt.iter().map(|a| a.abs()).sum();
                for (d, &s) in psi[f * kk..(f + 1) * kk].iter_mut().zip(filt.iter()) {
                    *d = s / l1;
                }
            }
        }
        let mut order: Vec<FrequencyPair> = (0..k)
            .flat_map(|u| (0..k).map(move |v| FrequencyPair::new(u, v)))
            .collect();
        order.sort_by_key(|p| (p.u + p.v, p.u));
        Ok(FilterBank { k, phi, psi, order })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn filter_count(&self) -> usize {
        self.k * self.k
    }

    pub fn index(&self, p: FrequencyPair) -> usize {
        p.u * self.k + p.v
    }

    pub fn pair(&self, index: usize) -> FrequencyPair {
        FrequencyPair::new(index / self.k, index % self.k)
    }

    /// Raw basis filter as a row-major `K×K` slice.
    pub fn phi(&self, p: FrequencyPair) -> &[f64] {
        let kk = self.k * self.k;
        let f = self.index(p);
        &self.phi[f * kk..(f + 1) * kk]
    }

    /// L1-normalised filter as a row-major `K×K` slice.
    pub fn psi(&self, p: FrequencyPair) -> &[f64] {
        let kk = self.k * self.k;
        let f = self.index(p);
        &self.psi[f * kk..(f + 1) * kk]
    }

    /// All `psi` filters stacked as conv kernels `[K², 1, K, K]`.
    pub fn psi_kernels<T: Scalar>(&self) -> Tensor<T> {
        let k = self.k;
        Tensor::from_vec(&[k * k, 1, k, k], self.psi.iter().map(|&v| T::lit(v)).collect())
            .expect("bank dims")
    }

    /// Zigzag enumeration: ascending `u+v`, ties by ascending `u`.
    pub fn zigzag(&self) -> &[FrequencyPair] {
        &self.order
    }

    /// Pairs with `u + v < lambda`, in zigzag order.
    pub fn lambda_subset(&self, lambda: usize) -> Result<Vec<FrequencyPair>> {
        if lambda == 0 {
            return Err(invalid!("lambda must be >= 1"));
        }
        Ok(self.order.iter().copied().filter(|p| p.u + p.v < lambda).collect())
    }

    /// The first `t` pairs of the zigzag order.
    pub fn truncation_prefix(&self, t: usize) -> Result<Vec<FrequencyPair>> {
        if t == 0 || t > self.filter_count() {
            return Err(invalid!("truncation {t} outside [1, {}]", self.filter_count()));
        }
        Ok(self.order[..t].to_vec())
    }
}

/// Map a filter affinely so its minimum becomes 0 and maximum 255. Constant
/// filters map to 255.
pub fn to_gray(filter: &[f64]) -> Vec<u8> {
    let lo = filter.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = filter.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    filter
        .iter()
        .map(|&v| {
            if span <= f64::EPSILON * hi.abs().max(1.0) {
                255
            } else {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// Binary (P5) 8-bit greymap.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub const FILTER_CSV_HEADER: &str = "u,v,x,y,value";

/// Write one PGM per filter in `subset` plus `psi.csv` holding the raw
/// normalised values. Returns the paths written.
pub fn export_filters(bank: &FilterBank, subset: &[FrequencyPair], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let k = bank.size();
    let mut written = Vec::with_capacity(subset.len() + 1);
    let mut csv = String::from(FILTER_CSV_HEADER);
    csv.push('\n');
    for &p in subset {
        let psi = bank.psi(p);
        let path = dir.join(format!("psi_u{}_v{}.pgm", p.u, p.v));
        fs::write(&path, encode_pgm(k, k, &to_gray(psi)))?;
        written.push(path);
        for x in 0..k {
            for y in 0..k {
                let _ = writeln!(csv, "{},{},{},{},{}", p.u, p.v, x, y, psi[x * k + y]);
            }
        }
    }
    let path = dir.join("psi.csv");
    fs::write(&path, csv)?;
    written.push(path);
    Ok(written)
}

/// Parse a filter CSV back into `(pair, x, y, value)` rows.
pub fn read_filter_csv(path: &Path) -> Result<Vec<(FrequencyPair, usize, usize, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(FILTER_CSV_HEADER) {
        return Err(format_err!("{}: missing header {FILTER_CSV_HEADER:?}", path.display()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format_err!("malformed filter row {line:?}");
            if f.len() != 5 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok((
                FrequencyPair::new(int(f[0])?, int(f[1])?),
                int(f[2])?,
                int(f[3])?,
                f[4].parse::<f64>().map_err(|_| bad())?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_filter_is_constant() {
        let bank = FilterBank::new(3).unwrap();
        let dc = FrequencyPair::new(0, 0);
        assert!(bank.phi(dc).iter().all(|&v| v == 1.0));
        assert!(bank.psi(dc).iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn basis_entry_matches_closed_form() {
        let bank = FilterBank::new(3).unwrap();
        let v = bank.phi(FrequencyPair::new(1, 0))[0];
        assert!((v - (PI / 6.0).cos()).abs() < 1e-15);
        assert!((v - 0.866025).abs() < 1e-6);
    }

    #[test]
    fn u_indexes_rows() {
        let bank = FilterBank::new(4).unwrap();
        let f = bank.phi(FrequencyPair::new(1, 0));
        // constant along each row, varying down the columns
        assert_eq!(f[0], f[3]);
        assert_ne!(f[0], f[4]);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(FilterBank::new(0).is_err());
    }

    #[test]
    fn lambda_subsets_match_figure_layout() {
        let bank = FilterBank::new(3).unwrap();
        let p = FrequencyPair::new;
        assert_eq!(bank.lambda_subset(2).unwrap(), vec![p(0, 0), p(0, 1), p(1, 0)]);
        assert_eq!(bank.lambda_subset(3).unwrap().len(), 6);
        assert_eq!(bank.lambda_subset(5).unwrap().len(), 9);
        assert_eq!(bank.lambda_subset(40).unwrap().len(), 9);
        assert!(bank.lambda_subset(0).is_err());
    }

    #[test]
    fn truncation_prefixes() {
        let bank = FilterBank::new(4).unwrap();
        let p = FrequencyPair::new;
        assert_eq!(bank.truncation_prefix(1).unwrap(), vec![p(0, 0)]);
        assert_eq!(bank.truncation_prefix(3).unwrap(), vec![p(0, 0), p(0, 1), p(1, 0)]);
        assert_eq!(bank.truncation_prefix(16).unwrap(), bank.zigzag().to_vec());
        assert!(bank.truncation_prefix(0).is_err());
        assert!(bank.truncation_prefix(17).is_err());
    }

    #[test]
    fn gray_mapping() {
        assert_eq!(to_gray(&[0.25; 4]), vec![255; 4]);
        assert_eq!(to_gray(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn export_writes_pgm_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let bank = FilterBank::new(3).unwrap();
        let files = export_filters(&bank, bank.zigzag(), dir.path()).unwrap();
        assert_eq!(files.len(), 10);
        let dc = fs::read(dir.path().join("psi_u0_v0.pgm")).unwrap();
        assert!(dc.starts_with(b"P5\n3 3\n255\n"));
        assert!(dc[dc.len() - 9..].iter().all(|&b| b == 255));
        let rows = read_filter_csv(&dir.path().join("psi.csv")).unwrap();
        assert_eq!(rows.len(), 81);
        for (p, x, y, v) in rows {
            assert!((bank.psi(p)[x * 3 + y] - v).abs() < 1e-6);
        }
    }
}
