//! Entropy-to-bit refinement and adaptive threshold calibration.
//!
//! Threshold fractions `t_k` are resolved against the sorted corpus
//! entropies to entropy cutoffs. A patch with entropy `E` receives
//! `codes[k]` for the first cutoff with `E <= cutoff[k]`, and the last code
//! when it exceeds every cutoff. During the one-pass calibration each
//! fraction drifts by an exponential moving average toward the normalised
//! entropy of the calibration patch.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{quantile_index, EntropyStats};
use crate::error::{Error, Result};
use crate::plan::{BitCode, PatchPlan};

const FRACTION_FLOOR: f64 = f64::EPSILON;
const FRACTION_CEIL: f64 = 1.0 - f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2BConfig {
    pub thresholds: Vec<f64>,
    pub bit_codes: Vec<BitCode>,
    pub gamma: f64,
}

impl Default for E2BConfig {
    fn default() -> Self {
        E2BConfig {
            thresholds: vec![0.5, 0.9],
            bit_codes: vec![BitCode(4), BitCode(5), BitCode(8)],
            gamma: 0.9997,
        }
    }
}

impl E2BConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::contract("at least one threshold is required"));
        }
        if self.bit_codes.len() != self.thresholds.len() + 1 {
            return Err(Error::contract(format!(
                "{} thresholds need {} bit codes, got {}",
                self.thresholds.len(),
                self.thresholds.len() + 1,
                self.bit_codes.len()
            )));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::contract(format!("threshold {t} outside (0, 1)")));
        }
        if !self.thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::contract("thresholds must be strictly increasing"));
        }
        if !self.bit_codes.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::contract("bit codes must be non-decreasing"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::contract(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Which entropy drives each calibration step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtcSelect {
    /// The first patch of each (shuffled) mini-batch.
    #[default]
    PerPatchSequential,
    /// The mean entropy of the mini-batch.
    BatchMean,
}

impl std::str::FromStr for AtcSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-patch-sequential" => Ok(AtcSelect::PerPatchSequential),
            "batch-mean" => Ok(AtcSelect::BatchMean),
            _ => Err(Error::contract(format!("unknown ATC selection {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtcConfig {
    pub batch_size: usize,
    pub select: AtcSelect,
    /// Seed of the corpus shuffle.
    pub seed: u64,
}

impl Default for AtcConfig {
    fn default() -> Self {
        AtcConfig {
            batch_size: 16,
            select: AtcSelect::PerPatchSequential,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThresholds {
    pub fractions: Vec<f64>,
    /// Entropy cutoffs in nats, one per fraction.
    pub cutoffs: Vec<f64>,
    pub bit_codes: Vec<BitCode>,
    pub gamma: f64,
    /// Number of calibration updates applied.
    pub iterations: usize,
    pub source_digest: String,
}

impl CalibratedThresholds {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let thr: CalibratedThresholds = serde_json::from_slice(&bytes)?;
        thr.validate()?;
        Ok(thr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.len() != self.fractions.len()
            || self.bit_codes.len() != self.cutoffs.len() + 1
        {
            return Err(Error::contract(
                "thresholds file: need one cutoff per fraction and one more bit code",
            ));
        }
        if !self.cutoffs.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::contract("thresholds file: cutoffs must be non-decreasing"));
        }
        Ok(())
    }
}

/// Resolve threshold fractions to entropy cutoffs.
pub fn resolve_thresholds(stats: &EntropyStats, cfg: &E2BConfig) -> Result<CalibratedThresholds> {
    cfg.validate()?;
    resolve_fractions(stats, &cfg.thresholds, cfg, 0)
}

fn resolve_fractions(
    stats: &EntropyStats,
    fractions: &[f64],
    cfg: &E2BConfig,
    iterations: usize,
) -> Result<CalibratedThresholds> {
    stats.validate()?;
    let cutoffs = fractions
        .iter()
        .map(|&t| quantile_index(stats, t).map(|(_, h)| h))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedThresholds {
        fractions: fractions.to_vec(),
        cutoffs,
        bit_codes: cfg.bit_codes.clone(),
        gamma: cfg.gamma,
        iterations,
        source_digest: stats.digest(),
    })
}

/// Bit code for a patch entropy. Ties go to the lower interval.
pub fn assign_bit(entropy: f64, thr: &CalibratedThresholds) -> BitCode {
    let k = thr.cutoffs.partition_point(|&c| c < entropy);
    thr.bit_codes[k.min(thr.bit_codes.len() - 1)]
}

/// Min-max normalise `e` by the batch range; a flat batch maps to 0.5.
pub fn normalized_entropy(e: f64, batch: &[f64]) -> f64 {
    let (lo, hi) = batch
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        ((e - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

/// One EMA step of a threshold fraction, kept inside (0, 1).
pub fn atc_update(t: f64, batch: &[f64], e: f64, gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("calibration batch is empty"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::contract(format!("gamma {gamma} outside (0, 1]")));
    }
    let n = normalized_entropy(e, batch);
    Ok((t * gamma + n * (1.0 - gamma)).clamp(FRACTION_FLOOR, FRACTION_CEIL))
}

/// Result of a calibration pass, with the fraction trajectory (one row per
/// update, starting from the initial fractions).
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub thresholds: CalibratedThresholds,
    pub trajectory: Vec<Vec<f64>>,
}

/// One pass over the corpus entropies in shuffled mini-batches, one update of
/// every fraction per batch, then resolution against the sorted corpus.
pub fn calibrate(stats: &EntropyStats, cfg: &E2BConfig, atc: &AtcConfig) -> Result<Calibration> {
    cfg.validate()?;
    if atc.batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    let mut order = stats.values.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(atc.seed));
    let mut fractions = cfg.thresholds.clone();
    let mut trajectory = vec![fractions.clone()];
    for batch in order.chunks(atc.batch_size) {
        let e = match atc.select {
            AtcSelect::PerPatchSequential => batch[0],
            AtcSelect::BatchMean => batch.iter().sum::<f64>() / batch.len() as f64,
        };
        for t in fractions.iter_mut() {
            *t = atc_update(*t, batch, e, cfg.gamma)?;
        }
        trajectory.push(fractions.clone());
    }
    let iterations = trajectory.len() - 1;
    let thresholds = resolve_fractions(stats, &fractions, cfg, iterations)?;
    Ok(Calibration {
        thresholds,
        trajectory,
    })
}

/// Re-map patches the controller put on `gbc_high_bit`; others keep their bit.
pub fn refine_plan(
    plans: &[PatchPlan],
    thr: &CalibratedThresholds,
    gbc_high_bit: BitCode,
) -> Vec<PatchPlan> {
    plans
        .iter()
        .map(|p| {
            let final_bit = if p.gbc_bit == gbc_high_bit {
                assign_bit(p.entropy, thr)
            } else {
                p.gbc_bit
            };
            PatchPlan {
                final_bit,
                ..p.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tenths() -> EntropyStats {
        EntropyStats::from_values((1..=10).map(|i| i as f64 / 10.0).collect()).unwrap()
    }

    fn thr(cutoffs: &[f64]) -> CalibratedThresholds {
        CalibratedThresholds {
            fractions: vec![0.5; cutoffs.len()],
            cutoffs: cutoffs.to_vec(),
            bit_codes: vec![BitCode(4), BitCode(5), BitCode(8)],
            gamma: 0.9997,
            iterations: 0,
            source_digest: String::new(),
        }
    }

    fn plan(id: usize, gbc: u8, entropy: f64) -> PatchPlan {
        PatchPlan::forced(id, (0, 0), entropy, BitCode(gbc))
    }

    #[test]
    fn resolves_quantile_cutoffs() {
        let t = resolve_thresholds(&tenths(), &E2BConfig::default()).unwrap();
        assert_eq!(t.cutoffs, vec![0.5, 0.9]);
        let two = EntropyStats::from_values(vec![0.3, 0.8]).unwrap();
        let cfg = E2BConfig {
            thresholds: vec![0.5],
            bit_codes: vec![BitCode(4), BitCode(8)],
            ..E2BConfig::default()
        };
        assert_eq!(resolve_thresholds(&two, &cfg).unwrap().cutoffs, vec![0.3]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = E2BConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.thresholds = vec![0.9, 0.5];
        assert!(cfg.validate().is_err());
        cfg.thresholds = vec![0.5];
        assert!(cfg.validate().is_err());
        cfg = E2BConfig {
            bit_codes: vec![BitCode(8), BitCode(5), BitCode(4)],
            ..E2BConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn assigns_by_interval() {
        let t = thr(&[0.5, 0.9]);
        assert_eq!(assign_bit(0.0, &t), BitCode(4));
        assert_eq!(assign_bit(0.7, &t), BitCode(5));
        assert_eq!(assign_bit(0.5, &t), BitCode(4));
        assert_eq!(assign_bit(0.9, &t), BitCode(5));
        assert_eq!(assign_bit(0.95, &t), BitCode(8));
        assert_eq!(assign_bit(100.0, &t), BitCode(8));
    }

    #[test]
    fn atc_examples() {
        // Norm(E) = 0.8 with batch [0, 1].
        let t = atc_update(0.5, &[0.0, 1.0], 0.8, 0.9997).unwrap();
        assert!((t - 0.50009).abs() < 1e-12);
        let fixed = atc_update(0.25, &[0.0, 1.0], 0.25, 0.9997).unwrap();
        assert!((fixed - 0.25).abs() < 1e-15);
        // flat batch normalises to 0.5
        assert_eq!(normalized_entropy(0.3, &[0.3, 0.3]), 0.5);
        assert!(atc_update(0.5, &[], 0.1, 0.9).is_err());
    }

    #[test]
    fn atc_geometric_closed_form() {
        let (t0, n, gamma) = (0.9, 0.2, 0.9997f64);
        let mut t = t0;
        for _ in 0..1000 {
            t = atc_update(t, &[0.0, 1.0], n, gamma).unwrap();
        }
        let closed = n + (t0 - n) * gamma.powi(1000);
        assert!((t - closed).abs() < 1e-12);
    }

    #[test]
    fn refine_only_touches_high_bit() {
        let t = thr(&[0.5, 0.9]);
        let plans = vec![plan(0, 4, 0.95), plan(1, 6, 0.95), plan(2, 8, 0.7)];
        let out = refine_plan(&plans, &t, BitCode(8));
        let bits: Vec<u8> = out.iter().map(|p| p.final_bit.0).collect();
        assert_eq!(bits, vec![4, 6, 5]);
        assert_eq!(out[2].gbc_bit, BitCode(8));

        let low = vec![plan(0, 4, 0.1), plan(1, 6, 2.0)];
        assert_eq!(refine_plan(&low, &t, BitCode(8)), low);

        let high = vec![plan(0, 8, 1.0), plan(1, 8, 3.0)];
        assert!(refine_plan(&high, &t, BitCode(8))
            .iter()
            .all(|p| p.final_bit == BitCode(8)));
    }

    #[test]
    fn calibration_pass() {
        let stats = tenths();
        let cfg = E2BConfig {
            gamma: 1.0,
            ..E2BConfig::default()
        };
        let c = calibrate(&stats, &cfg, &AtcConfig::default()).unwrap();
        assert_eq!(c.thresholds.fractions, vec![0.5, 0.9]);
        assert_eq!(c.thresholds.iterations, 1);
        assert_eq!(c.trajectory.len(), 2);

        let atc = AtcConfig {
            batch_size: 3,
            ..AtcConfig::default()
        };
        let c = calibrate(&stats, &E2BConfig::default(), &atc).unwrap();
        assert_eq!(c.thresholds.iterations, 4);
        for w in c.trajectory.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!((a - b).abs() <= 3e-4);
            }
        }
        let again = calibrate(&stats, &E2BConfig::default(), &atc).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn thresholds_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = resolve_thresholds(&tenths(), &E2BConfig::default()).unwrap();
        let p = dir.path().join("thr.json");
        t.write(&p).unwrap();
        assert_eq!(CalibratedThresholds::read(&p).unwrap(), t);
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        for key in ["fractions", "cutoffs", "gamma", "source_digest"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn assign_monotone(a in -1.0f64..3.0, b in -1.0f64..3.0, c1 in 0.0f64..1.0, c2 in 0.0f64..1.0) {
            let t = thr(&[c1.min(c2), c1.max(c2)]);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(assign_bit(lo, &t) <= assign_bit(hi, &t));
        }

        #[test]
        fn atc_stays_in_unit_interval(t0 in 0.0001f64..0.9999, es in prop::collection::vec(-5.0f64..5.0, 1..40), gamma in 0.0001f64..1.0) {
            let mut t = t0;
            for &e in &es {
                t = atc_update(t, &es, e, gamma).unwrap();
                prop_assert!(t > 0.0 && t < 1.0);
            }
        }

        #[test]
        fn refinement_never_raises_fab(gbc in prop::collection::vec(prop::sample::select(vec![4u8, 6, 8]), 1..30),
                                       es in prop::collection::vec(0.0f64..2.0, 30)) {
            let t = thr(&[0.5, 0.9]);
            let plans: Vec<_> = gbc.iter().zip(&es).enumerate().map(|(i, (&b, &e))| plan(i, b, e)).collect();
            let out = refine_plan(&plans, &t, BitCode(8));
            let before: u32 = plans.iter().map(|p| u32::from(p.final_bit.0)).sum();
            let after: u32 = out.iter().map(|p| u32::from(p.final_bit.0)).sum();
            prop_assert!(after <= before);
            for (p, q) in plans.iter().zip(&out) {
                if p.gbc_bit != BitCode(8) {
                    prop_assert_eq!(p.final_bit, q.final_bit);
                }
            }
        }
    }
}
