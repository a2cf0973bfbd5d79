//! Symmetric uniform fake quantization.
//!
//! A tensor is clipped to `[-a, a]` (or `[0, a]` for non-negative inputs),
//! divided by the step `r_b`, rounded half away from zero and scaled back.
//! The step is `a / (2^(b-1) - 1)` for signed data and `a / (2^b - 1)` for
//! unsigned data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
/// Bit-width used for every weight tensor.
pub const WEIGHT_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    #[default]
    StaticMax,
    MovingAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bit: u8,
    /// Clip bound; `None` until calibrated.
    pub a: Option<f64>,
    pub signed: bool,
    #[serde(default)]
    pub mode: ClipMode,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    /// Set when a weight tensor was all zeros and `a` fell back to 1.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

fn default_decay() -> f64 {
    0.9
}

/// Outcome of [`calibrate_clip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipUpdate {
    Updated,
    /// The batch was empty; parameters are unchanged.
    SkippedEmpty,
}

impl QuantParams {
    pub fn new(bit: u8, signed: bool) -> Self {
        QuantParams {
            bit,
            a: None,
            signed,
            mode: ClipMode::StaticMax,
            ema_decay: default_decay(),
            degenerate: false,
        }
    }

    pub fn with_clip(mut self, a: f64) -> Self {
        self.a = Some(a);
        self
    }

    pub fn with_mode(mut self, mode: ClipMode, ema_decay: f64) -> Self {
        self.mode = mode;
        self.ema_decay = ema_decay;
        self
    }

    /// Same clip bound and sign, different bit-width.
    pub fn at_bits(&self, bit: u8) -> Self {
        QuantParams {
            bit,
            ..self.clone()
        }
    }

    /// Largest integer code, `2^(b-1) - 1` or `2^b - 1`.
    pub fn levels(&self) -> u32 {
        if self.signed {
            (1u32 << (self.bit - 1)) - 1
        } else {
            (1u32 << self.bit) - 1
        }
    }

    /// Quantization step `r_b`.
    pub fn step(&self) -> Option<f64> {
        self.a.map(|a| a / f64::from(self.levels()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bit) {
            return Err(Error::contract(format!(
                "bit-width {} outside [{MIN_BITS}, {MAX_BITS}]",
                self.bit
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::contract(format!(
                "ema decay {} outside (0, 1)",
                self.ema_decay
            )));
        }
        match self.a {
            Some(a) if a.is_finite() && a > 0.0 => Ok(()),
            Some(a) => Err(Error::contract(format!("clip bound {a} must be finite and > 0"))),
            None => Ok(()),
        }
    }

    fn calibrated_clip(&self) -> Result<f64> {
        self.validate()?;
        self.a
            .ok_or_else(|| Error::contract("quantizer used before its clip bound was calibrated"))
    }
}

#[inline]
fn fake_quant<T: Scalar>(v: T, lo: T, hi: T, levels: T, a: T) -> T {
    let clipped = v.max(lo).min(hi);
    let k = (clipped * levels / a).round_half_away();
    k * a / levels
}

/// Fake-quantize an activation tensor.
pub fn quantize_activation<T: Scalar>(x: &Tensor<T>, qp: &QuantParams) -> Result<Tensor<T>> {
    let a = qp.calibrated_clip()?;
    let (a, levels) = (T::of(a), T::of(f64::from(qp.levels())));
    let lo = if qp.signed { -a } else { T::zero() };
    Ok(x.map(|v| fake_quant(v, lo, a, levels, a)))
}

/// Fake-quantize a weight tensor with a per-tensor max-abs clip bound.
///
/// An all-zero tensor gets `a = 1` and the `degenerate` flag.
pub fn quantize_weights<T: Scalar>(w: &Tensor<T>, bit: u8) -> Result<(Tensor<T>, QuantParams)> {
    if w.is_empty() {
        return Err(Error::contract("cannot quantize an empty weight tensor"));
    }
    let max_abs = w.max_abs().as_f64();
    let mut qp = QuantParams::new(bit, true);
    if max_abs == 0.0 {
        qp.a = Some(1.0);
        qp.degenerate = true;
    } else {
        qp.a = Some(max_abs);
    }
    let out = quantize_activation(w, &qp)?;
    Ok((out, qp))
}

/// Update the clip bound from one batch of observations.
pub fn calibrate_clip<T: Scalar>(qp: &QuantParams, x: &Tensor<T>) -> (QuantParams, ClipUpdate) {
    if x.is_empty() {
        log::warn!("calibrate_clip called with an empty batch; keeping a = {:?}", qp.a);
        return (qp.clone(), ClipUpdate::SkippedEmpty);
    }
    let observed = if qp.signed {
        x.max_abs().as_f64()
    } else {
        x.max().as_f64().max(0.0)
    };
    let a = match (qp.mode, qp.a) {
        (ClipMode::MovingAverage, Some(prev)) => {
            qp.ema_decay * prev + (1.0 - qp.ema_decay) * observed
        }
        _ => observed,
    };
    (
        QuantParams {
            a: Some(a),
            ..qp.clone()
        },
        ClipUpdate::Updated,
    )
}

/// Straight-through gradient mask: 1 inside the clip range (bounds
/// inclusive), 0 where the input was clipped.
pub fn ste_passthrough_jacobian<T: Scalar>(x: &Tensor<T>, qp: &QuantParams) -> Result<Tensor<T>> {
    let a = T::of(qp.calibrated_clip()?);
    let lo = if qp.signed { -a } else { T::zero() };
    Ok(x.map(|v| {
        if v >= lo && v <= a {
            T::one()
        } else {
            T::zero()
        }
    }))
}
