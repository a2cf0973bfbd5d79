//! Gaussian-kernel density entropy of LR patches and the corpus-level
//! entropy distribution the bit refinement is calibrated against.
//!
//! Two readings of the kernel density are supported. `BinWise` (default)
//! spreads each pixel over `B` bin centers `(j + 0.5) / B` with a Gaussian
//! kernel and takes the Shannon entropy of the resulting bin masses.
//! `PixelWise` assigns each pixel the normalised total kernel mass it
//! contributes and sums `-P log P` over pixels.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel taps farther than this many bandwidths from a pixel are dropped;
/// `exp(-40^2 / 2)` underflows f64.
const KERNEL_RADIUS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    #[default]
    BinWise,
    PixelWise,
}

impl std::str::FromStr for Interpretation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bin" | "bin_wise" | "bin-wise" => Ok(Interpretation::BinWise),
            "pixel" | "pixel_wise" | "pixel-wise" => Ok(Interpretation::PixelWise),
            _ => Err(Error::contract(format!("unknown entropy mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub bins: usize,
    /// Kernel bandwidth in pixel-value units; `None` means one bin width.
    pub sigma: Option<f64>,
    pub epsilon: f64,
    pub interpretation: Interpretation,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            bins: 256,
            sigma: None,
            epsilon: 1e-12,
            interpretation: Interpretation::BinWise,
        }
    }
}

impl EntropyConfig {
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(1.0 / self.bins as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::contract(format!("need >= 2 bins, got {}", self.bins)));
        }
        let s = self.sigma();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::contract(format!("bandwidth {s} must be > 0")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::contract("epsilon must be > 0"));
        }
        Ok(())
    }
}

/// Distinct values with multiplicities, ascending. Working on the sorted
/// multiset makes the result independent of pixel order.
fn value_counts(mut v: Vec<f64>) -> Vec<(f64, f64)> {
    v.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for x in v {
        match out.last_mut() {
            Some((y, n)) if *y == x => *n += 1.0,
            _ => out.push((x, 1.0)),
        }
    }
    out
}

/// Kernel weights of one pixel value against the bins within reach.
fn kernel_row(x: f64, bins: usize, sigma: f64) -> (usize, Vec<f64>) {
    let b = bins as f64;
    let reach = KERNEL_RADIUS * sigma * b;
    let lo = ((x * b - 0.5 - reach).floor().max(0.0)) as usize;
    let hi = ((x * b - 0.5 + reach).ceil().min(b - 1.0)).max(0.0) as usize;
    let lo = lo.min(bins - 1);
    let denom = 2.0 * sigma * sigma;
    let row = (lo..=hi.max(lo))
        .map(|j| {
            let center = (j as f64 + 0.5) / b;
            (-(x - center).powi(2) / denom).exp()
        })
        .collect();
    (lo, row)
}

/// Entropy in nats of a patch's luma distribution.
pub fn patch_entropy<T: Scalar>(patch: &Tensor<T>, cfg: &EntropyConfig) -> Result<f64> {
    cfg.validate()?;
    if patch.is_empty() {
        return Err(Error::contract("entropy of an empty patch"));
    }
    let luma = patch.luma()?;
    Ok(entropy_of_values(
        luma.data().iter().map(|v| v.as_f64()).collect(),
        cfg,
    ))
}

pub(crate) fn entropy_of_values(values: Vec<f64>, cfg: &EntropyConfig) -> f64 {
    let sigma = cfg.sigma();
    let groups = value_counts(values);
    let rows: Vec<(f64, usize, Vec<f64>)> = groups
        .iter()
        .map(|&(x, n)| {
            let (lo, row) = kernel_row(x, cfg.bins, sigma);
            (n, lo, row)
        })
        .collect();
    let total: f64 = rows
        .iter()
        .map(|(n, _, row)| n * row.iter().sum::<f64>())
        .sum();
    let norm = total + cfg.epsilon;
    let plogp = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let h = match cfg.interpretation {
        Interpretation::BinWise => {
            let mut mass = vec![0.0f64; cfg.bins];
            for (n, lo, row) in &rows {
                for (m, k) in mass[*lo..*lo + row.len()].iter_mut().zip(row) {
                    *m += n * k;
                }
            }
            mass.iter().map(|&m| plogp(m / norm)).sum::<f64>()
        }
        Interpretation::PixelWise => rows
            .iter()
            .map(|(n, _, row)| n * plogp(row.iter().sum::<f64>() / norm))
            .sum(),
    };
    h.max(0.0)
}

/// Per-bin probabilities `q_j` of the bin-wise density (diagnostics and tests).
pub fn bin_masses<T: Scalar>(patch: &Tensor<T>, cfg: &EntropyConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let luma = patch.luma()?;
    let sigma = cfg.sigma();
    let mut mass = vec![0.0f64; cfg.bins];
    for (x, n) in value_counts(luma.data().iter().map(|v| v.as_f64()).collect()) {
        let (lo, row) = kernel_row(x, cfg.bins, sigma);
        for (m, k) in mass[lo..lo + row.len()].iter_mut().zip(&row) {
            *m += n * k;
        }
    }
    let norm = mass.iter().sum::<f64>() + cfg.epsilon;
    Ok(mass.into_iter().map(|m| m / norm).collect())
}

/// Ascending entropies of a patch corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub m: usize,
    pub values: Vec<f64>,
    pub h_min: f64,
    pub h_max: f64,
}

impl EntropyStats {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("entropy statistics need at least one patch"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite entropy {v}")));
        }
        values.sort_by(f64::total_cmp);
        Ok(EntropyStats {
            m: values.len(),
            h_min: values[0],
            h_max: values[values.len() - 1],
            values,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m == self.values.len()
            && self.m > 0
            && self.values.windows(2).all(|w| w[0] <= w[1])
            && self.values.first() == Some(&self.h_min)
            && self.values.last() == Some(&self.h_max);
        if ok {
            Ok(())
        } else {
            Err(Error::contract("entropy statistics are not a sorted list matching M/H_min/H_max"))
        }
    }

    /// SHA-256 over the little-endian value bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Equal-width histogram over `[h_min, h_max]`: (lower, upper, count).
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let bins = bins.max(1);
        let span = self.h_max - self.h_min;
        let width = if span > 0.0 { span / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in &self.values {
            let k = if span > 0.0 {
                (((v - self.h_min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let lo = self.h_min + k as f64 * width;
                (lo, lo + width, c)
            })
            .collect()
    }
}

/// Entropy of every patch, sorted. Patches are scored in parallel.
pub fn build_entropy_stats<T: Scalar>(
    corpus: impl IntoIterator<Item = Tensor<T>>,
    cfg: &EntropyConfig,
) -> Result<EntropyStats> {
    let patches: Vec<Tensor<T>> = corpus.into_iter().collect();
    if patches.is_empty() {
        return Err(Error::contract("empty patch corpus"));
    }
    let values = patches
        .par_iter()
        .map(|p| patch_entropy(p, cfg))
        .collect::<Result<Vec<f64>>>()?;
    EntropyStats::from_values(values)
}

/// `ceil(M * t)` clamped to `[1, M]`, with products within 1e-9 of an
/// integer snapped to it first so that e.g. `M = 10, t = 0.7` gives 7.
pub fn quantile_position(m: usize, t: f64) -> usize {
    let x = m as f64 * t;
    let r = x.round();
    let x = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x
    };
    (x.ceil() as usize).clamp(1, m)
}

/// 1-based quantile index and the entropy it points at.
pub fn quantile_index(stats: &EntropyStats, t: f64) -> Result<(usize, f64)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::contract(format!("quantile fraction {t} outside (0, 1)")));
    }
    let i = quantile_position(stats.m, t);
    Ok((i, stats.values[i - 1]))
}

/// On-disk form of [`EntropyStats`], echoing the configuration used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub m: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub digest: String,
    pub config: EntropyConfig,
    pub values: Vec<f64>,
}

impl StatsFile {
    pub fn new(stats: &EntropyStats, config: &EntropyConfig) -> Self {
        StatsFile {
            m: stats.m,
            h_min: stats.h_min,
            h_max: stats.h_max,
            digest: stats.digest(),
            config: config.clone(),
            values: stats.values.clone(),
        }
    }

    pub fn stats(&self) -> Result<EntropyStats> {
        let s = EntropyStats {
            m: self.m,
            values: self.values.clone(),
            h_min: self.h_min,
            h_max: self.h_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: StatsFile = serde_json::from_slice(&bytes)?;
        f.stats()?;
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(values: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(Dims::new(1, 1, h, w), values.to_vec()).unwrap()
    }

    fn sharp() -> EntropyConfig {
        EntropyConfig::default().with_sigma(1.0 / (4.0 * 256.0))
    }

    /// Histogram oracle: exact Shannon entropy of the value frequencies.
    fn histogram_entropy(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        value_counts(values.to_vec())
            .iter()
            .map(|&(_, c)| -(c / n) * (c / n).ln())
            .sum()
    }

    #[test]
    fn constant_patch_is_near_zero() {
        for v in [0.0, 1.0, 100.5 / 256.0] {
            let h = patch_entropy(&gray(&[v; 64], 8, 8), &sharp()).unwrap();
            assert!(h <= 0.01, "value {v}: {h}");
        }
    }

    #[test]
    fn two_level_patch_is_ln2() {
        let mut v = vec![0.0; 32];
        v.extend(vec![1.0; 32]);
        let h = patch_entropy(&gray(&v, 8, 8), &sharp()).unwrap();
        let oracle = histogram_entropy(&v);
        assert!((oracle - 2f64.ln()).abs() < 1e-15);
        assert!((h - oracle).abs() < 0.01, "{h}");
    }

    #[test]
    fn uniform_noise_bounded_by_ln_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..64).map(|_| rng.random()).collect();
        let cfg = EntropyConfig::default();
        let h = patch_entropy(&gray(&v, 8, 8), &cfg).unwrap();
        assert!(h > 0.0 && h <= (cfg.bins as f64).ln());
    }

    #[test]
    fn pixel_wise_matches_printed_formula_on_constant() {
        let cfg = EntropyConfig {
            interpretation: Interpretation::PixelWise,
            ..EntropyConfig::default()
        };
        let h = patch_entropy(&gray(&[0.4; 16], 4, 4), &cfg).unwrap();
        assert!((h - 16f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn masses_normalised_up_to_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let cfg = EntropyConfig::default();
        let q = bin_masses(&gray(&v, 10, 10), &cfg).unwrap();
        let s: f64 = q.iter().sum();
        assert!(s <= 1.0 + 1e-12 && s >= 1.0 - 10.0 * cfg.epsilon * cfg.bins as f64);
    }

    #[test]
    fn rgb_uses_luma() {
        let rgb = Tensor::<f64>::from_vec(Dims::new(1, 3, 1, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
            .unwrap();
        let l = gray(&[0.299 + 0.114, 0.587], 1, 2);
        assert_eq!(
            patch_entropy(&rgb, &sharp()).unwrap(),
            patch_entropy(&l, &sharp()).unwrap()
        );
    }

    #[test]
    fn stats_sort_and_quantiles() {
        let s = EntropyStats::from_values(vec![0.6, 0.2, 0.4]).unwrap();
        assert_eq!(s.values, vec![0.2, 0.4, 0.6]);
        assert_eq!((s.m, s.h_min, s.h_max), (3, 0.2, 0.6));
        let d = EntropyStats::from_values(vec![0.5, 0.5]).unwrap();
        assert_eq!(d.values, vec![0.5, 0.5]);
        assert!(EntropyStats::from_values(vec![]).is_err());

        let hundred = EntropyStats::from_values((0..100).map(f64::from).collect()).unwrap();
        assert_eq!(quantile_index(&hundred, 0.5).unwrap().0, 50);
        let ten = EntropyStats::from_values((0..10).map(f64::from).collect()).unwrap();
        assert_eq!(quantile_index(&ten, 0.95).unwrap().0, 10);
        assert_eq!(quantile_index(&ten, 0.7).unwrap().0, 7);
        let seven = EntropyStats::from_values(vec![0.7, 0.1, 0.5, 0.3, 0.6, 0.2, 0.4]).unwrap();
        assert_eq!(quantile_index(&seven, 0.5).unwrap(), (4, 0.4));
        assert!(quantile_index(&seven, 1.0).is_err());
        assert!(quantile_index(&seven, 0.0).is_err());
    }

    #[test]
    fn build_rejects_empty_and_sorts() {
        let cfg = EntropyConfig::default();
        assert!(build_entropy_stats(Vec::<Tensor<f32>>::new(), &cfg).is_err());
        let patches = vec![
            Tensor::<f32>::full(Dims::new(1, 1, 4, 4), 0.5),
            Tensor::<f32>::from_vec(Dims::new(1, 1, 4, 4), (0..16).map(|i| i as f32 / 15.0).collect())
                .unwrap(),
        ];
        let s = build_entropy_stats(patches.clone(), &cfg).unwrap();
        assert_eq!(s.m, 2);
        assert_eq!(s.values[1], patch_entropy(&patches[1], &cfg).unwrap());
    }

    #[test]
    fn stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = EntropyStats::from_values(vec![0.3, 0.1, 0.2]).unwrap();
        let f = StatsFile::new(&s, &EntropyConfig::default());
        let p = dir.path().join("s.json");
        f.write(&p).unwrap();
        let back = StatsFile::read(&p).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.stats().unwrap().digest(), s.digest());
    }

    #[test]
    fn histogram_counts_everything() {
        let s = EntropyStats::from_values((0..50).map(|i| i as f64 / 7.0).collect()).unwrap();
        let h = s.histogram(8);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 50);
        assert_eq!(h.len(), 8);
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut v in prop::collection::vec(0.0f64..1.0, 16), seed: u64) {
            let cfg = EntropyConfig::default();
            let a = patch_entropy(&gray(&v, 4, 4), &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..v.len()).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            let b = patch_entropy(&gray(&v, 4, 4), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn quantile_monotone(values in prop::collection::vec(0.0f64..5.0, 1..50), t1 in 0.001f64..0.999, t2 in 0.001f64..0.999) {
            let s = EntropyStats::from_values(values).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (i, a) = quantile_index(&s, lo).unwrap();
            let (j, b) = quantile_index(&s, hi).unwrap();
            prop_assert!(i <= j && a <= b);
        }
    }
}
