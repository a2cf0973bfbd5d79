//! Reconstruction and efficiency metrics.
//!
//! PSNR and SSIM are computed on BT.601 luma without border cropping.
//! BitOPs count one multiply-accumulate as one operation weighted by
//! `b_act * b_w`; layers that run in full precision count as `32 * 32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{BitCode, PatchPlan};
use crate::quant::WEIGHT_BITS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FULL_BITS: u64 = 32;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::shape("empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// PSNR in dB over all elements; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// PSNR of the luma channels.
pub fn psnr_luma<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b)?;
    psnr(&a.luma()?, &b.luma()?, 1.0)
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::shape("empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM on luma (peak 1) with an 11x11 Gaussian window, sigma 1.5, averaged
/// over all valid window positions. Images smaller than the window use a
/// single global window with uniform weights.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b)?;
    let d = a.dims();
    if d.batch != 1 {
        return Err(Error::contract(format!("ssim expects batch 1, got {d}")));
    }
    let x: Vec<f64> = a.luma()?.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.luma()?.data().iter().map(|v| v.as_f64()).collect();
    let (h, w) = (d.height, d.width);
    if h == 0 || w == 0 {
        return Err(Error::shape("empty image"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
        return Ok(ssim_term(mx, my, vx, vy, cov));
    }
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, h, w, &k);
    let mu_y = filter_valid(&y, h, w, &k);
    let e_xx = filter_valid(&xx, h, w, &k);
    let e_yy = filter_valid(&yy, h, w, &k);
    let e_xy = filter_valid(&xy, h, w, &k);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            ssim_term(mx, my, e_xx[i] - mx * mx, e_yy[i] - my * my, e_xy[i] - mx * my)
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Mean of the final bit over all patches.
pub fn fab(plans: &[PatchPlan]) -> Result<f64> {
    if plans.is_empty() {
        return Err(Error::contract("FAB of an empty plan list"));
    }
    Ok(plans.iter().map(|p| f64::from(p.final_bit.bits())).sum::<f64>() / plans.len() as f64)
}

/// One convolution as seen by the cost model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub out_h: usize,
    pub out_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// Whether the layer runs at the patch bit-width.
    pub quantized: bool,
}

impl LayerSpec {
    pub fn macs(&self) -> u64 {
        (self.out_h * self.out_w * self.c_out * self.c_in * self.kernel * self.kernel) as u64
    }

    pub fn weight_count(&self) -> u64 {
        (self.c_out * self.c_in * self.kernel * self.kernel) as u64
    }

    pub fn bias_count(&self) -> u64 {
        self.c_out as u64
    }

    /// `(b_act, b_w)` for a patch running at `bit`.
    pub fn bit_pair(&self, bit: BitCode) -> (u64, u64) {
        if self.quantized && !bit.is_full_precision() {
            (u64::from(bit.bits()), u64::from(WEIGHT_BITS))
        } else {
            (FULL_BITS, FULL_BITS)
        }
    }
}

/// BitOPs of one forward pass at a single activation bit-width.
pub fn bitops_at(layers: &[LayerSpec], bit: BitCode) -> u128 {
    layers
        .iter()
        .map(|l| {
            let (ba, bw) = l.bit_pair(bit);
            u128::from(l.macs()) * u128::from(ba * bw)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitOpsReport {
    /// Mean BitOPs per patch under the plan.
    pub mean: f64,
    /// BitOPs per patch with every layer at 32 bits.
    pub full_precision: f64,
    pub ratio: f64,
}

/// Mean BitOPs over the planned patches, and its ratio to the all-32-bit
/// network. Every patch is assumed to have the geometry the layers describe.
pub fn bitops(layers: &[LayerSpec], plans: &[PatchPlan]) -> Result<BitOpsReport> {
    if plans.is_empty() {
        return Err(Error::contract("BitOPs of an empty plan list"));
    }
    let total: u128 = plans.iter().map(|p| bitops_at(layers, p.final_bit)).sum();
    let mean = total as f64 / plans.len() as f64;
    let full_precision = bitops_at(layers, BitCode::FULL) as f64;
    let ratio = if full_precision > 0.0 { mean / full_precision } else { 1.0 };
    Ok(BitOpsReport {
        mean,
        full_precision,
        ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub count: u64,
    /// Storage in bits: quantized-layer weights at the weight bit-width,
    /// everything else at 32 bits.
    pub bits: u64,
    /// `bits / (32 * count)`.
    pub ratio: f64,
}

pub fn params(layers: &[LayerSpec]) -> ParamsReport {
    let mut count = 0;
    let mut bits = 0;
    for l in layers {
        let wb = if l.quantized { u64::from(WEIGHT_BITS) } else { FULL_BITS };
        count += l.weight_count() + l.bias_count();
        bits += l.weight_count() * wb + l.bias_count() * FULL_BITS;
    }
    let ratio = if count > 0 { bits as f64 / (FULL_BITS * count) as f64 } else { 1.0 };
    ParamsReport { count, bits, ratio }
}

/// Scale a count with a K/M/G/T suffix, one decimal.
pub fn format_count(value: f64) -> String {
    const UNITS: [(f64, &str); 4] = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (scale, suffix) in UNITS {
        if value.abs() >= scale {
            return format!("{:.1}{suffix}", value / scale);
        }
    }
    format!("{value:.1}")
}

/// `"73.6T (↓ 86.0%)"`: the value and its reduction relative to the
/// full-precision baseline.
pub fn format_reduction(value: f64, ratio: f64) -> String {
    format!("{} (↓ {:.1}%)", format_count(value), (1.0 - ratio) * 100.0)
}

/// Per-patch row of the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: usize,
    pub origin: (usize, usize),
    pub entropy: f64,
    pub gbc_bit: BitCode,
    pub final_bit: BitCode,
    pub p: f64,
}

impl From<&PatchPlan> for PatchRecord {
    fn from(p: &PatchPlan) -> Self {
        PatchRecord {
            id: p.id,
            origin: p.origin,
            entropy: p.entropy,
            gbc_bit: p.gbc_bit,
            final_bit: p.final_bit,
            p: p.p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    /// `None` when the reconstruction is exact (infinite PSNR).
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub l1: f64,
    pub fab: f64,
    pub bitops: f64,
    pub bitops_ratio: f64,
    pub bitops_display: String,
    pub params: u64,
    pub params_ratio: f64,
    pub params_display: String,
    pub per_patch: Vec<PatchRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

impl MetricsBundle {
    /// Assemble the bundle from an output/reference pair and the plan.
    pub fn compute<T: Scalar>(
        output: &Tensor<T>,
        reference: &Tensor<T>,
        plans: &[PatchPlan],
        layers: &[LayerSpec],
    ) -> Result<Self> {
        let p = psnr_luma(output, reference)?;
        let ops = bitops(layers, plans)?;
        let par = params(layers);
        Ok(MetricsBundle {
            psnr_db: p.is_finite().then_some(p),
            psnr_infinite: p.is_infinite(),
            ssim: ssim(output, reference)?,
            l1: l1_loss(output, reference)?,
            fab: fab(plans)?,
            bitops: ops.mean,
            bitops_ratio: ops.ratio,
            bitops_display: format_reduction(ops.mean, ops.ratio),
            params: par.count,
            params_ratio: par.ratio,
            params_display: format_reduction(par.bits as f64 / FULL_BITS as f64, par.ratio),
            per_patch: plans.iter().map(PatchRecord::from).collect(),
            runtime_ms: None,
        })
    }

    /// PSNR with the infinite flag folded back into `f64::INFINITY`.
    pub fn psnr(&self) -> f64 {
        self.psnr_db.unwrap_or(f64::INFINITY)
    }
}

/// The JSON document written by an inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub metrics: MetricsBundle,
    pub audit: crate::srnet::AuditSummary,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
