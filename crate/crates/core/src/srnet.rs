//! Reference SR network and the per-patch quantized inference pipeline.
//!
//! ```text
//! x ─ head conv (fp) ─┬─ [Q conv ─ ReLU ─ Q conv] ─ + ─ ... ─ tail conv (fp) ─ depth_to_space ─ + ─ clamp
//!                     └──────────────────────────────┘                                         │
//! x ─ bicubic ─────────────────────────────────────────────────────────────────────────────────┘
//! ```
//!
//! Every `Q conv` fake-quantizes its input at the patch bit-width and uses
//! 8-bit weights; the first conv of a block sees signed input, the second
//! sees post-ReLU (unsigned) input. Skips run in full precision.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::conv::{conv2d, depth_to_space, relu, upsample_bicubic, Padding};
use crate::e2b::{refine_plan, CalibratedThresholds};
use crate::entropy::{patch_entropy, EntropyConfig};
use crate::error::{Error, Result};
use crate::gbc::{allocate_bits, from_f32, push, to_f32, GbcModel};
use crate::metrics::{LayerSpec, MetricsBundle};
use crate::patch::{extract_patches, stitch_patches, PatchGrid};
use crate::plan::{BitCode, PatchPlan};
use crate::quant::{calibrate_clip, quantize_activation, quantize_weights, ClipMode, QuantParams, MAX_BITS, MIN_BITS, WEIGHT_BITS};
use crate::scalar::Scalar;
use crate::synth::textured_image;
use crate::tensor::{Dims, Tensor};

const PADDING: Padding = Padding::Reflect;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub blocks: usize,
    pub scale: usize,
    #[serde(default = "default_weight_bits")]
    pub weight_bits: u8,
}

fn default_weight_bits() -> u8 {
    WEIGHT_BITS
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            in_channels: 3,
            feat_channels: 16,
            blocks: 4,
            scale: 2,
            weight_bits: WEIGHT_BITS,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.feat_channels == 0 {
            return Err(Error::contract("channel counts must be > 0"));
        }
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::contract(format!("scale {} not in {{2, 4}}", self.scale)));
        }
        if self.weight_bits != WEIGHT_BITS {
            return Err(Error::contract(format!(
                "weights are quantized at {WEIGHT_BITS} bits, manifest says {}",
                self.weight_bits
            )));
        }
        Ok(())
    }

    pub fn tail_channels(&self) -> usize {
        self.in_channels * self.scale * self.scale
    }

    pub fn quantized_layers(&self) -> usize {
        2 * self.blocks
    }
}

/// Full-precision convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Convolution with fake-quantized input and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    /// `weight` after 8-bit quantization, cached at construction.
    pub weight_q: Tensor<T>,
    pub weight_qp: QuantParams,
    /// Activation clip for the layer input; `bit` is overridden per patch.
    pub act_qp: QuantParams,
}

impl<T: Scalar> QConv<T> {
    fn new(weight: Tensor<T>, bias: Vec<T>, act_qp: QuantParams) -> Result<Self> {
        let (weight_q, weight_qp) = quantize_weights(&weight, WEIGHT_BITS)?;
        Ok(QConv {
            weight,
            bias,
            weight_q,
            weight_qp,
            act_qp,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: QConv<T>,
    pub conv2: QConv<T>,
}

/// Receives one call per quantized layer per patch.
pub trait LayerObserver: Sync {
    fn observe(&self, patch: usize, layer: usize, act_bit: BitCode, weight_bit: u8);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PatchAudit {
    bit: BitCode,
    layers: usize,
}

/// Records the activation bit seen by every quantized layer and counts
/// patches whose layers disagree.
#[derive(Debug, Default)]
pub struct BitAudit {
    observations: AtomicUsize,
    violations: AtomicUsize,
    per_patch: Mutex<HashMap<usize, PatchAudit>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub patches: usize,
    pub observations: usize,
    /// Layer observations whose bit differed from the patch's first layer.
    pub violations: usize,
    /// Patches whose observed bit differs from the planned final bit.
    pub plan_mismatches: usize,
    /// Patches where not every quantized layer reported.
    pub incomplete: usize,
}

impl AuditSummary {
    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.plan_mismatches == 0 && self.incomplete == 0
    }
}

impl LayerObserver for BitAudit {
    fn observe(&self, patch: usize, _layer: usize, act_bit: BitCode, _weight_bit: u8) {
        self.observations.fetch_add(1, Ordering::Relaxed);
        let mut map = self.per_patch.lock().expect("audit lock poisoned");
        let entry = map.entry(patch).or_insert(PatchAudit {
            bit: act_bit,
            layers: 0,
        });
        entry.layers += 1;
        if entry.bit != act_bit {
            self.violations.fetch_add(1, Ordering::Relaxed);
        }
    }
}

impl BitAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_of(&self, patch: usize) -> Option<BitCode> {
        self.per_patch
            .lock()
            .expect("audit lock poisoned")
            .get(&patch)
            .map(|a| a.bit)
    }

    /// Check the observations against a plan. Full-precision patches are
    /// not observed and are skipped.
    pub fn summary(&self, plans: &[PatchPlan], layers_per_patch: usize) -> AuditSummary {
        let map = self.per_patch.lock().expect("audit lock poisoned");
        let mut plan_mismatches = 0;
        let mut incomplete = 0;
        for p in plans.iter().filter(|p| !p.final_bit.is_full_precision()) {
            match map.get(&p.id) {
                Some(a) => {
                    if a.bit != p.final_bit {
                        plan_mismatches += 1;
                    }
                    if a.layers != layers_per_patch {
                        incomplete += 1;
                    }
                }
                None if layers_per_patch > 0 => incomplete += 1,
                None => {}
            }
        }
        AuditSummary {
            patches: map.len(),
            observations: self.observations.load(Ordering::Relaxed),
            violations: self.violations.load(Ordering::Relaxed),
            plan_mismatches,
            incomplete,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel<T> {
    pub config: SrConfig,
    pub head: Conv<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub tail: Conv<T>,
}

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, dims: Dims, bound: f64) -> Tensor<T> {
    let v = (0..dims.len())
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(dims, v).expect("dims match")
}

fn uniform_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
}

pub fn check_bit(bit: BitCode) -> Result<()> {
    if bit.is_full_precision() || (MIN_BITS..=MAX_BITS).contains(&bit.bits()) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "unsupported activation bit-width {bit} (need {MIN_BITS}..={MAX_BITS} or 32)"
        )))
    }
}

/// Number of synthetic patches used to calibrate activation clips.
pub const CALIBRATION_PATCHES: usize = 16;

impl<T: Scalar> QuantModel<T> {
    /// Seeded random weights, then activation clips calibrated on seeded
    /// synthetic patches.
    pub fn random(config: SrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (config.in_channels, config.feat_channels);
        let kb = |cin: usize| (6.0 / (cin * 9) as f64).sqrt();
        let head = Conv {
            weight: uniform_tensor(&mut rng, Dims::new(f, c, 3, 3), kb(c)),
            bias: uniform_vec(&mut rng, f, 0.05),
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let mk = |rng: &mut ChaCha8Rng, signed: bool| -> Result<QConv<T>> {
                QConv::new(
                    uniform_tensor(rng, Dims::new(f, f, 3, 3), 0.5 * kb(f)),
                    uniform_vec(rng, f, 0.05),
                    QuantParams::new(MAX_BITS, signed),
                )
            };
            let conv1 = mk(&mut rng, true)?;
            let conv2 = mk(&mut rng, false)?;
            blocks.push(ResBlock { conv1, conv2 });
        }
        let tail = Conv {
            weight: uniform_tensor(&mut rng, Dims::new(config.tail_channels(), f, 3, 3), 0.25 * kb(f)),
            bias: uniform_vec(&mut rng, config.tail_channels(), 0.01),
        };
        let mut model = QuantModel {
            config,
            head,
            blocks,
            tail,
        };
        let calib: Vec<Tensor<T>> = (0..CALIBRATION_PATCHES)
            .map(|i| {
                textured_image(
                    seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                    c,
                    32,
                    32,
                    i as f64 / (CALIBRATION_PATCHES - 1) as f64,
                )
            })
            .collect();
        model.calibrate_activations(&calib, ClipMode::StaticMax)?;
        Ok(model)
    }

    /// Model whose body and tail are all zeros: the output is the bicubic skip.
    pub fn zero(config: SrConfig) -> Result<Self> {
        let mut m = Self::random(config, 0)?;
        for b in &mut m.blocks {
            for q in [&mut b.conv1, &mut b.conv2] {
                *q = QConv::new(Tensor::zeros(q.weight.dims()), vec![T::zero(); q.bias.len()], q.act_qp.clone())?;
            }
        }
        m.tail.weight = Tensor::zeros(m.tail.weight.dims());
        m.tail.bias.iter_mut().for_each(|b| *b = T::zero());
        Ok(m)
    }

    fn qconvs(&self) -> impl Iterator<Item = &QConv<T>> {
        self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2])
    }

    fn qconvs_mut(&mut self) -> impl Iterator<Item = &mut QConv<T>> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.conv1, &mut b.conv2])
    }

    /// Set each quantized layer's clip bound from float forwards over
    /// `patches`: the running maximum for `StaticMax`, an EMA for
    /// `MovingAverage`.
    pub fn calibrate_activations(&mut self, patches: &[Tensor<T>], mode: ClipMode) -> Result<()> {
        for q in self.qconvs_mut() {
            q.act_qp.a = None;
            q.act_qp.mode = mode;
        }
        for p in patches {
            let mut inputs: Vec<Tensor<T>> = Vec::with_capacity(self.config.quantized_layers());
            self.run(p, BitCode::FULL, None, &mut |_, x| inputs.push(x.clone()))?;
            for (q, x) in self.qconvs_mut().zip(&inputs) {
                let prev = q.act_qp.a;
                let (next, _) = calibrate_clip(&q.act_qp, x);
                q.act_qp = next;
                if mode == ClipMode::StaticMax {
                    if let (Some(p), Some(n)) = (prev, q.act_qp.a) {
                        q.act_qp.a = Some(p.max(n));
                    }
                }
            }
        }
        for q in self.qconvs_mut() {
            // an input that never left zero still needs a usable bound
            if q.act_qp.a.is_none_or(|a| a <= 0.0) {
                q.act_qp.a = Some(1.0);
            }
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor<T>,
        bit: BitCode,
        probe: Option<(&dyn LayerObserver, usize)>,
        on_input: &mut dyn FnMut(usize, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        check_bit(bit)?;
        let d = x.dims();
        if d.channels != self.config.in_channels || d.batch != 1 {
            return Err(Error::shape(format!(
                "model expects (1, {}, H, W), got {d}",
                self.config.in_channels
            )));
        }
        let mut layer = 0;
        let mut qconv = |q: &QConv<T>, input: &Tensor<T>| -> Result<Tensor<T>> {
            on_input(layer, input);
            let out = if bit.is_full_precision() {
                conv2d(input, &q.weight, Some(&q.bias), 1, 1, PADDING)?
            } else {
                if let Some((obs, patch)) = probe {
                    obs.observe(patch, layer, bit, q.weight_qp.bit);
                }
                let xq = quantize_activation(input, &q.act_qp.at_bits(bit.bits()))?;
                conv2d(&xq, &q.weight_q, Some(&q.bias), 1, 1, PADDING)?
            };
            layer += 1;
            Ok(out)
        };
        let mut feat = conv2d(x, &self.head.weight, Some(&self.head.bias), 1, 1, PADDING)?;
        for b in &self.blocks {
            let y = relu(&qconv(&b.conv1, &feat)?);
            let y = qconv(&b.conv2, &y)?;
            feat = feat.add(&y)?;
        }
        let tail = conv2d(&feat, &self.tail.weight, Some(&self.tail.bias), 1, 1, PADDING)?;
        let up = depth_to_space(&tail, self.config.scale)?;
        let skip = upsample_bicubic(x, self.config.scale)?;
        Ok(up.add(&skip)?.clamp(T::zero(), T::one()))
    }

    /// Forward one patch at activation bit-width `bit`; 32 bypasses
    /// quantization entirely (float weights, float activations).
    pub fn forward(&self, x: &Tensor<T>, bit: BitCode, probe: Option<(&dyn LayerObserver, usize)>) -> Result<Tensor<T>> {
        self.run(x, bit, probe, &mut |_, _| {})
    }

    pub fn forward_float(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, BitCode::FULL, None)
    }

    /// Cost-model description of the network on an `h x w` input.
    pub fn layer_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let cfg = &self.config;
        let spec = |name: String, cin, cout, quantized| LayerSpec {
            name,
            out_h: h,
            out_w: w,
            c_in: cin,
            c_out: cout,
            kernel: 3,
            quantized,
        };
        let mut out = vec![spec("head".into(), cfg.in_channels, cfg.feat_channels, false)];
        for i in 0..cfg.blocks {
            out.push(spec(format!("block{i}.conv1"), cfg.feat_channels, cfg.feat_channels, true));
            out.push(spec(format!("block{i}.conv2"), cfg.feat_channels, cfg.feat_channels, true));
        }
        out.push(spec("tail".into(), cfg.feat_channels, cfg.tail_channels(), false));
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let acts: Vec<&QuantParams> = self.qconvs().map(|q| &q.act_qp).collect();
        let weights: Vec<&QuantParams> = self.qconvs().map(|q| &q.weight_qp).collect();
        let meta = serde_json::json!({
            "config": self.config,
            "activations": acts,
            "weights": weights,
        });
        let mut c = Container::new("srnet", meta);
        push(&mut c, "head.weight", &self.head.weight);
        c.push("head.bias", vec![self.head.bias.len()], to_f32(&self.head.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, q) in [(1, &b.conv1), (2, &b.conv2)] {
                push(&mut c, &format!("block{i}.conv{j}.weight"), &q.weight);
                c.push(format!("block{i}.conv{j}.bias"), vec![q.bias.len()], to_f32(&q.bias));
            }
        }
        push(&mut c, "tail.weight", &self.tail.weight);
        c.push("tail.bias", vec![self.tail.bias.len()], to_f32(&self.tail.bias));
        Ok(c)
    }

    /// Rebuild from a container, checking every tensor shape against the
    /// architecture. Weight quantization is recomputed eagerly.
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "srnet" {
            return Err(Error::load("<manifest>", format!("expected kind srnet, got {}", c.kind)));
        }
        let bad = |e: String| Error::load("<manifest>", e);
        let config: SrConfig = serde_json::from_value(c.meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
        config.validate().map_err(|e| bad(e.to_string()))?;
        let acts: Vec<QuantParams> =
            serde_json::from_value(c.meta["activations"].clone()).map_err(|e| bad(e.to_string()))?;
        if acts.len() != config.quantized_layers() {
            return Err(bad(format!(
                "{} activation records for {} quantized layers",
                acts.len(),
                config.quantized_layers()
            )));
        }
        for qp in &acts {
            qp.validate().map_err(|e| bad(e.to_string()))?;
            if qp.a.is_none() {
                return Err(bad("activation clip bound missing".into()));
            }
        }
        let (ci, f) = (config.in_channels, config.feat_channels);
        let conv = |name: &str, cout: usize, cin: usize| -> Result<(Tensor<T>, Vec<T>)> {
            let w = c.expect(&format!("{name}.weight"), &[cout, cin, 3, 3])?;
            let b = c.expect(&format!("{name}.bias"), &[cout])?;
            Ok((Tensor::from_vec(Dims::new(cout, cin, 3, 3), from_f32(&w.data))?, from_f32(&b.data)))
        };
        let (hw, hb) = conv("head", f, ci)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut acts = acts.into_iter();
        for i in 0..config.blocks {
            let (w1, b1) = conv(&format!("block{i}.conv1"), f, f)?;
            let (w2, b2) = conv(&format!("block{i}.conv2"), f, f)?;
            blocks.push(ResBlock {
                conv1: QConv::new(w1, b1, acts.next().expect("length checked"))?,
                conv2: QConv::new(w2, b2, acts.next().expect("length checked"))?,
            });
        }
        let (tw, tb) = conv("tail", config.tail_channels(), f)?;
        Ok(QuantModel {
            config,
            head: Conv { weight: hw, bias: hb },
            blocks,
            tail: Conv { weight: tw, bias: tb },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Forward one patch at a single, layer-invariant bit-width.
pub fn forward_quantized<T: Scalar>(model: &QuantModel<T>, patch: &Tensor<T>, bit: BitCode) -> Result<Tensor<T>> {
    model.forward(patch, bit, None)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<QuantModel<T>> {
    QuantModel::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub patch_size: usize,
    pub overlap: usize,
    pub entropy: EntropyConfig,
    pub deterministic: bool,
    pub seed: u64,
    /// Uniform bit for every patch, bypassing the controller and refinement.
    pub force_bit: Option<BitCode>,
    /// Record wall-clock runtime in the metrics bundle.
    pub timing: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            patch_size: 96,
            overlap: 0,
            entropy: EntropyConfig::default(),
            deterministic: false,
            seed: 0,
            force_bit: None,
            timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub sr: Tensor<T>,
    pub plans: Vec<PatchPlan>,
    pub metrics: MetricsBundle,
    pub audit: AuditSummary,
    pub grid: PatchGrid,
}

/// Patch, allocate, refine, run and stitch one LR image.
///
/// Metrics compare against `hr` when given, otherwise against the stitched
/// full-precision output of the same model.
pub fn run_pipeline<T: Scalar>(
    model: &QuantModel<T>,
    gbc: Option<&GbcModel<T>>,
    thresholds: Option<&CalibratedThresholds>,
    image: &Tensor<T>,
    hr: Option<&Tensor<T>>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput<T>> {
    let start = Instant::now();
    let image = match image.dims().channels {
        1 if model.config.in_channels == 3 => image.to_rgb()?,
        _ => image.clone(),
    };
    let (grid, patches) = extract_patches(&image, opts.patch_size, opts.overlap)?;
    let entropies = patches
        .par_iter()
        .map(|p| patch_entropy(p, &opts.entropy))
        .collect::<Result<Vec<f64>>>()?;

    let plans = match opts.force_bit {
        Some(bit) => {
            check_bit(bit)?;
            (0..patches.len())
                .map(|i| PatchPlan::forced(i, grid.origins[i], entropies[i], bit))
                .collect()
        }
        None => {
            let gbc = gbc.ok_or_else(|| Error::contract("controller model required unless a bit is forced"))?;
            let thr = thresholds.ok_or_else(|| Error::contract("thresholds required unless a bit is forced"))?;
            thr.validate()?;
            let mut plans = allocate_bits(&patches, gbc, opts.deterministic, opts.seed)?;
            for (p, (&origin, &e)) in plans.iter_mut().zip(grid.origins.iter().zip(&entropies)) {
                p.origin = origin;
                p.entropy = e;
            }
            refine_plan(&plans, thr, gbc.config.high_bit())
        }
    };
    for p in &plans {
        check_bit(p.final_bit)?;
    }

    let audit = BitAudit::new();
    let outputs = patches
        .par_iter()
        .zip(&plans)
        .map(|(patch, plan)| model.forward(patch, plan.final_bit, Some((&audit, plan.id))))
        .collect::<Result<Vec<_>>>()?;
    let sr = stitch_patches(&grid, &outputs, model.config.scale)?;

    let reference = match hr {
        Some(h) => {
            let h = match h.dims().channels {
                1 if sr.dims().channels == 3 => h.to_rgb()?,
                _ => h.clone(),
            };
            sr.expect_same_dims(&h)?;
            h
        }
        None => {
            let float = patches
                .par_iter()
                .map(|p| model.forward_float(p))
                .collect::<Result<Vec<_>>>()?;
            stitch_patches(&grid, &float, model.config.scale)?
        }
    };
    let (ph, pw) = grid.patch_extent();
    let mut metrics = MetricsBundle::compute(&sr, &reference, &plans, &model.layer_specs(ph, pw))?;
    if opts.timing {
        metrics.runtime_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    let audit = audit.summary(&plans, model.config.quantized_layers());
    Ok(PipelineOutput {
        sr,
        plans,
        metrics,
        audit,
        grid,
    })
}
