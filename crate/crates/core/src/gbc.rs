//! Granularity-bit controller.
//!
//! Each patch is encoded into `D` feature maps of halving resolution
//! (`[3x3 conv, ReLU]` per level, 2x2 average pooling between levels).
//! Every level is group-normalised, pooled down to the coarsest resolution,
//! concatenated along channels and globally averaged into a vector `S` of
//! length `C * D`. A linear gate maps `S` to one logit per candidate bit;
//! the chosen candidate is the argmax of the logits, optionally perturbed
//! by Gumbel noise, and its softmax probability is kept as the gate score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::conv::{avg_pool, conv2d, global_avg_pool, group_norm, relu, Padding};
use crate::error::{Error, Result};
use crate::plan::{BitCode, PatchPlan};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbcConfig {
    pub depth: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub groups: usize,
    pub candidate_bits: Vec<BitCode>,
    pub tau: f64,
    #[serde(default = "default_gn_eps")]
    pub gn_eps: f64,
    #[serde(default)]
    pub gate_bias: bool,
}

fn default_gn_eps() -> f64 {
    1e-5
}

impl Default for GbcConfig {
    fn default() -> Self {
        GbcConfig {
            depth: 4,
            channels: 16,
            in_channels: 3,
            groups: 4,
            candidate_bits: vec![BitCode(4), BitCode(6), BitCode(8)],
            tau: 1.0,
            gn_eps: default_gn_eps(),
            gate_bias: false,
        }
    }
}

impl GbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::contract("controller depth must be >= 2"));
        }
        if self.channels == 0 || self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::contract(format!(
                "{} channels cannot be split into {} groups",
                self.channels, self.groups
            )));
        }
        if self.candidate_bits.is_empty() {
            return Err(Error::contract("no candidate bits"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!("temperature {} must be > 0", self.tau)));
        }
        Ok(())
    }

    /// Input side length must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn squeeze_len(&self) -> usize {
        self.channels * self.depth
    }

    /// The highest candidate; patches on it are eligible for entropy refinement.
    pub fn high_bit(&self) -> BitCode {
        *self.candidate_bits.iter().max().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbcLevel<T> {
    /// (C, C_in, 3, 3)
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub gn_gamma: Vec<T>,
    pub gn_beta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbcModel<T> {
    pub config: GbcConfig,
    pub levels: Vec<GbcLevel<T>>,
    /// Row-major `(C * D) x N`.
    pub gate_weight: Vec<T>,
    pub gate_bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub logits: Vec<f64>,
    pub noise: Vec<f64>,
    pub theta: usize,
    pub p: f64,
    pub bit: BitCode,
}

impl<T: Scalar> GbcModel<T> {
    /// Seeded random initialization (there is no training in this crate).
    pub fn random(config: GbcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let levels = (0..config.depth)
            .map(|k| {
                let cin = if k == 0 { config.in_channels } else { c };
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let dims = Dims::new(c, cin, 3, 3);
                let weight = Tensor::from_vec(
                    dims,
                    (0..dims.len())
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect(),
                )
                .expect("dims match");
                GbcLevel {
                    weight,
                    bias: (0..c).map(|_| T::of(rng.random_range(-0.1..0.1))).collect(),
                    gn_gamma: vec![T::one(); c],
                    gn_beta: vec![T::zero(); c],
                }
            })
            .collect();
        let n = config.candidate_bits.len();
        let gb = 3.0 / (config.squeeze_len() as f64).sqrt();
        let gate_weight = (0..config.squeeze_len() * n)
            .map(|_| T::of(rng.random_range(-gb..gb)))
            .collect();
        let gate_bias = config.gate_bias.then(|| vec![T::zero(); n]);
        Ok(GbcModel {
            config,
            levels,
            gate_weight,
            gate_bias,
        })
    }

    /// Encoder whose conv kernels pass the first input channel through the
    /// center tap, with zero gate weights.
    pub fn identity(config: GbcConfig) -> Result<Self> {
        config.validate()?;
        let mut m = Self::random(config, 0)?;
        for (k, level) in m.levels.iter_mut().enumerate() {
            let d = level.weight.dims();
            level.weight = Tensor::zeros(d);
            for co in 0..d.batch {
                let ci = if k == 0 { 0 } else { co };
                level.weight.set(co, ci, 1, 1, T::one());
            }
            level.bias = vec![T::zero(); d.batch];
        }
        m.gate_weight.iter_mut().for_each(|w| *w = T::zero());
        Ok(m)
    }

    pub fn candidates(&self) -> &[BitCode] {
        &self.config.candidate_bits
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("gbc", serde_json::to_value(&self.config)?);
        for (k, l) in self.levels.iter().enumerate() {
            push(&mut c, &format!("level{k}.weight"), &l.weight);
            c.push(format!("level{k}.bias"), vec![l.bias.len()], to_f32(&l.bias));
            c.push(format!("level{k}.gn_gamma"), vec![l.gn_gamma.len()], to_f32(&l.gn_gamma));
            c.push(format!("level{k}.gn_beta"), vec![l.gn_beta.len()], to_f32(&l.gn_beta));
        }
        let n = self.config.candidate_bits.len();
        c.push(
            "gate.weight",
            vec![self.config.squeeze_len(), n],
            to_f32(&self.gate_weight),
        );
        if let Some(b) = &self.gate_bias {
            c.push("gate.bias", vec![n], to_f32(b));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "gbc" {
            return Err(Error::load("<manifest>", format!("expected kind gbc, got {}", c.kind)));
        }
        let config: GbcConfig = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::load("<manifest>", e.to_string()))?;
        config
            .validate()
            .map_err(|e| Error::load("<manifest>", e.to_string()))?;
        let ch = config.channels;
        let mut levels = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let cin = if k == 0 { config.in_channels } else { ch };
            let w = c.expect(&format!("level{k}.weight"), &[ch, cin, 3, 3])?;
            levels.push(GbcLevel {
                weight: Tensor::from_vec(Dims::new(ch, cin, 3, 3), from_f32(&w.data))?,
                bias: from_f32(&c.expect(&format!("level{k}.bias"), &[ch])?.data),
                gn_gamma: from_f32(&c.expect(&format!("level{k}.gn_gamma"), &[ch])?.data),
                gn_beta: from_f32(&c.expect(&format!("level{k}.gn_beta"), &[ch])?.data),
            });
        }
        let n = config.candidate_bits.len();
        let gate_weight = from_f32(&c.expect("gate.weight", &[config.squeeze_len(), n])?.data);
        let gate_bias = if config.gate_bias {
            Some(from_f32(&c.expect("gate.bias", &[n])?.data))
        } else {
            None
        };
        Ok(GbcModel {
            config,
            levels,
            gate_weight,
            gate_bias,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

pub(crate) fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

pub(crate) fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of(f64::from(x))).collect()
}

pub(crate) fn push<T: Scalar>(c: &mut Container, name: &str, t: &Tensor<T>) {
    c.push(name, t.dims().as_array().to_vec(), to_f32(t.data()));
}

/// Multi-granularity features `Z_1` (finest) .. `Z_D` (coarsest).
pub fn encode_granularities<T: Scalar>(patch: &Tensor<T>, model: &GbcModel<T>) -> Result<Vec<Tensor<T>>> {
    let cfg = &model.config;
    let d = patch.dims();
    let m = cfg.spatial_multiple();
    if !d.height.is_multiple_of(m) || !d.width.is_multiple_of(m) || d.height == 0 || d.width == 0 {
        return Err(Error::contract(format!(
            "controller input {}x{} must be a non-zero multiple of {m} (depth {})",
            d.height, d.width, cfg.depth
        )));
    }
    if d.channels != cfg.in_channels {
        return Err(Error::shape(format!(
            "controller expects {} input channels, got {}",
            cfg.in_channels, d.channels
        )));
    }
    let mut feats = Vec::with_capacity(cfg.depth);
    let mut x = patch.clone();
    for (k, level) in model.levels.iter().enumerate() {
        if k > 0 {
            x = avg_pool(&x, 2)?;
        }
        x = relu(&conv2d(&x, &level.weight, Some(&level.bias), 1, 1, Padding::Reflect)?);
        feats.push(x.clone());
    }
    Ok(feats)
}

/// Channel statistics `S` of length `C * D`.
pub fn pool_and_squeeze<T: Scalar>(z: &[Tensor<T>], model: &GbcModel<T>) -> Result<Vec<T>> {
    let cfg = &model.config;
    if z.len() != cfg.depth {
        return Err(Error::shape(format!("{} feature levels for depth {}", z.len(), cfg.depth)));
    }
    let coarse = z[cfg.depth - 1].dims();
    let eps = T::of(cfg.gn_eps);
    let mut pooled = Vec::with_capacity(z.len());
    for (zk, level) in z.iter().zip(&model.levels) {
        let normed = group_norm(zk, cfg.groups, &level.gn_gamma, &level.gn_beta, eps)?;
        let factor = zk.dims().height / coarse.height;
        pooled.push(avg_pool(&normed, factor)?);
    }
    let cat = Tensor::concat_channels(&pooled)?;
    Ok(global_avg_pool(&cat))
}

/// `g = W_g^T S` (+ bias).
pub fn gate_logits<T: Scalar>(s: &[T], model: &GbcModel<T>) -> Result<Vec<T>> {
    let rows = model.config.squeeze_len();
    let n = model.config.candidate_bits.len();
    if s.len() != rows {
        return Err(Error::shape(format!("squeeze vector has {} entries, gate expects {rows}", s.len())));
    }
    let mut g: Vec<T> = match &model.gate_bias {
        Some(b) => b.clone(),
        None => vec![T::zero(); n],
    };
    for (i, &si) in s.iter().enumerate() {
        for (gn, &w) in g.iter_mut().zip(&model.gate_weight[i * n..(i + 1) * n]) {
            *gn += si * w;
        }
    }
    Ok(g)
}

/// Softmax of `values / tau`, computed stably in f64.
pub fn softmax(values: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = values.iter().map(|v| v / tau).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel sample `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

/// Pick a candidate from logits. `noise_rng = None` is the deterministic
/// argmax decision; otherwise Gumbel noise is added before the argmax.
pub fn decide<R: Rng + ?Sized>(
    logits: &[f64],
    candidates: &[BitCode],
    tau: f64,
    noise_rng: Option<&mut R>,
) -> Result<GateDecision> {
    if logits.len() != candidates.len() || logits.is_empty() {
        return Err(Error::shape(format!(
            "{} logits for {} candidates",
            logits.len(),
            candidates.len()
        )));
    }
    let noise: Vec<f64> = match noise_rng {
        Some(rng) => logits.iter().map(|_| gumbel(rng)).collect(),
        None => vec![0.0; logits.len()],
    };
    let perturbed: Vec<f64> = logits.iter().zip(&noise).map(|(g, s)| g + s).collect();
    let theta = argmax(&perturbed);
    let p = softmax(&perturbed, tau)[theta];
    Ok(GateDecision {
        logits: logits.to_vec(),
        noise,
        theta,
        p,
        bit: candidates[theta],
    })
}

/// Per-patch random stream: the seed selects the generator, the patch index
/// selects an independent ChaCha stream.
pub fn patch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_gate<T: Scalar>(
    g: &[T],
    model: &GbcModel<T>,
    rng_seed: u64,
    deterministic: bool,
) -> Result<GateDecision> {
    sample_gate_stream(g, model, rng_seed, 0, deterministic)
}

pub fn sample_gate_stream<T: Scalar>(
    g: &[T],
    model: &GbcModel<T>,
    rng_seed: u64,
    stream: u64,
    deterministic: bool,
) -> Result<GateDecision> {
    let logits: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
    let cands = model.candidates();
    if deterministic {
        decide::<ChaCha8Rng>(&logits, cands, model.config.tau, None)
    } else {
        let mut rng = patch_rng(rng_seed, stream);
        decide(&logits, cands, model.config.tau, Some(&mut rng))
    }
}

/// Crop (centered) or edge-extend a patch so both sides are multiples of the
/// encoder's required size, and expand grayscale to the expected channels.
pub fn fit_for_encoder<T: Scalar>(patch: &Tensor<T>, cfg: &GbcConfig) -> Result<Tensor<T>> {
    let mut x = if patch.dims().channels == 1 && cfg.in_channels == 3 {
        patch.to_rgb()?
    } else {
        patch.clone()
    };
    let m = cfg.spatial_multiple();
    let d = x.dims();
    let fit = |n: usize| if n >= m { n - n % m } else { m };
    let (th, tw) = (fit(d.height), fit(d.width));
    if (th, tw) == (d.height, d.width) {
        return Ok(x);
    }
    if th <= d.height && tw <= d.width {
        return x.crop(0, (d.height - th) / 2, (d.width - tw) / 2, th, tw);
    }
    // smaller than one encoder cell: replicate edges, then crop
    let (h, w) = (th.max(d.height), tw.max(d.width));
    let mut out = Tensor::zeros(Dims::new(1, d.channels, h, w));
    for c in 0..d.channels {
        for y in 0..h {
            for xx in 0..w {
                let v = x.at(0, c, y.min(d.height - 1), xx.min(d.width - 1));
                out.set(0, c, y, xx, v);
            }
        }
    }
    x = out;
    let d = x.dims();
    x.crop(0, (d.height - th) / 2, (d.width - tw) / 2, th, tw)
}

/// Full controller forward for one patch.
pub fn decide_patch<T: Scalar>(
    patch: &Tensor<T>,
    model: &GbcModel<T>,
    deterministic: bool,
    seed: u64,
    stream: u64,
) -> Result<GateDecision> {
    let x = fit_for_encoder(patch, &model.config)?;
    let z = encode_granularities(&x, model)?;
    let s = pool_and_squeeze(&z, model)?;
    let g = gate_logits(&s, model)?;
    sample_gate_stream(&g, model, seed, stream, deterministic)
}

/// Controller decision for every patch, in parallel. Plans carry the patch
/// index as id; origin and entropy are left for the caller to fill in.
pub fn allocate_bits<T: Scalar>(
    patches: &[Tensor<T>],
    model: &GbcModel<T>,
    deterministic: bool,
    seed: u64,
) -> Result<Vec<PatchPlan>> {
    patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let d = decide_patch(p, model, deterministic, seed, i as u64)?;
            Ok(PatchPlan {
                id: i,
                origin: (0, 0),
                entropy: 0.0,
                gbc_bit: d.bit,
                final_bit: d.bit,
                p: d.p,
                theta: d.theta,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::textured_image;

    fn small_cfg(depth: usize, channels: usize) -> GbcConfig {
        GbcConfig {
            depth,
            channels,
            groups: 1,
            ..GbcConfig::default()
        }
    }

    #[test]
    fn granularity_dims_halve() {
        let m = GbcModel::<f32>::random(GbcConfig::default(), 1).unwrap();
        let z = encode_granularities(&textured_image(1, 3, 48, 48, 0.5), &m).unwrap();
        let sides: Vec<usize> = z.iter().map(|t| t.dims().height).collect();
        assert_eq!(sides, vec![48, 24, 12, 6]);
        assert!(z.iter().all(|t| t.dims().channels == 16));

        let m2 = GbcModel::<f32>::random(small_cfg(2, 4), 1).unwrap();
        let z = encode_granularities(&textured_image(1, 3, 8, 8, 0.5), &m2).unwrap();
        assert_eq!(z.iter().map(|t| t.dims().height).collect::<Vec<_>>(), vec![8, 4]);
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let m = GbcModel::<f32>::random(GbcConfig::default(), 1).unwrap();
        let err = encode_granularities(&textured_image(1, 3, 20, 20, 0.5), &m)
            .unwrap_err()
            .to_string();
        assert!(err.contains("multiple of 8"), "{err}");
    }

    #[test]
    fn identity_encoder_keeps_constants() {
        let m = GbcModel::<f64>::identity(small_cfg(3, 4)).unwrap();
        let x = Tensor::full(Dims::new(1, 3, 16, 16), 0.4);
        for z in encode_granularities(&x, &m).unwrap() {
            assert!(z.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn squeeze_of_constant_features_is_gn_shift() {
        let mut m = GbcModel::<f64>::identity(small_cfg(2, 4)).unwrap();
        for l in &mut m.levels {
            l.gn_beta = vec![0.1, 0.2, 0.3, 0.4];
        }
        let z = vec![
            Tensor::full(Dims::new(1, 4, 4, 4), 2.0),
            Tensor::full(Dims::new(1, 4, 2, 2), 7.0),
        ];
        let s = pool_and_squeeze(&z, &m).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn squeeze_scalars_and_permutation() {
        // C = 1, D = 2 with an identity group norm (gamma 0, beta = value)
        let mut m = GbcModel::<f64>::identity(GbcConfig {
            depth: 2,
            channels: 1,
            groups: 1,
            ..GbcConfig::default()
        })
        .unwrap();
        m.levels[0].gn_beta = vec![2.0];
        m.levels[1].gn_beta = vec![4.0];
        let z = vec![Tensor::full(Dims::new(1, 1, 2, 2), 0.0), Tensor::full(Dims::new(1, 1, 1, 1), 0.0)];
        assert_eq!(pool_and_squeeze(&z, &m).unwrap(), vec![2.0, 4.0]);

        let m = GbcModel::<f64>::random(small_cfg(2, 4), 5).unwrap();
        let a = Tensor::<f64>::from_vec(Dims::new(1, 4, 2, 2), (0..16).map(|i| (i * 7 % 5) as f64).collect()).unwrap();
        let coarse = Tensor::<f64>::from_vec(Dims::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // swap two spatial positions in every channel
        let mut b = a.clone();
        for c in 0..4 {
            let (p, q) = (a.at(0, c, 0, 0), a.at(0, c, 1, 1));
            b.set(0, c, 0, 0, q);
            b.set(0, c, 1, 1, p);
        }
        let sa = pool_and_squeeze(&[a, coarse.clone()], &m).unwrap();
        let sb = pool_and_squeeze(&[b, coarse], &m).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_is_a_matmul() {
        let mut m = GbcModel::<f64>::random(small_cfg(3, 1), 2).unwrap();
        assert_eq!(m.config.squeeze_len(), 3);
        m.gate_weight.iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(gate_logits(&[1.0, 2.0, 3.0], &m).unwrap(), vec![0.0; 3]);
        for i in 0..3 {
            m.gate_weight[i * 3 + i] = 1.0;
        }
        assert_eq!(gate_logits(&[1.0, 2.0, 3.0], &m).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(gate_logits(&[1.0], &m).is_err());
    }

    #[test]
    fn deterministic_decisions() {
        let m = GbcModel::<f64>::random(GbcConfig::default(), 0).unwrap();
        let d = sample_gate(&[10.0, 0.0, 0.0], &m, 0, true).unwrap();
        assert_eq!((d.theta, d.bit), (0, BitCode(4)));
        assert!(d.p >= 0.9999);

        let d = sample_gate(&[1.0, 2.0, 3.0], &m, 0, true).unwrap();
        let e = std::f64::consts::E;
        let expect = e.powi(3) / (e + e * e + e.powi(3));
        assert_eq!((d.theta, d.bit), (2, BitCode(8)));
        assert!((d.p - expect).abs() < 1e-12);
        assert!((d.p - 0.6652).abs() < 1e-4);

        let tie = sample_gate(&[0.0, 0.0, 0.0], &m, 0, true).unwrap();
        assert_eq!(tie.theta, 0);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let m = GbcModel::<f64>::random(GbcConfig::default(), 0).unwrap();
        let a = sample_gate(&[0.3, 0.1, 0.2], &m, 42, false).unwrap();
        let b = sample_gate(&[0.3, 0.1, 0.2], &m, 42, false).unwrap();
        assert_eq!(a, b);
        assert!(a.noise.iter().any(|&n| n != 0.0));
    }

    #[test]
    fn zero_gate_allocates_lowest_candidate() {
        let mut m = GbcModel::<f32>::random(GbcConfig::default(), 3).unwrap();
        m.gate_weight.iter_mut().for_each(|w| *w = 0.0);
        let plans = allocate_bits(&[textured_image(2, 3, 96, 96, 0.3)], &m, true, 0).unwrap();
        assert_eq!(plans[0].gbc_bit, BitCode(4));
    }

    #[test]
    fn allocation_is_stable_and_in_candidates() {
        let m = GbcModel::<f32>::random(GbcConfig::default(), 9).unwrap();
        let patches: Vec<_> = (0..6).map(|i| textured_image(i, 3, 48, 48, i as f64 / 5.0)).collect();
        let a = allocate_bits(&patches, &m, true, 0).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|p| [4, 6, 8].contains(&p.gbc_bit.0)));
        assert_eq!(a, allocate_bits(&patches, &m, true, 0).unwrap());
        let s1 = allocate_bits(&patches, &m, false, 7).unwrap();
        assert_eq!(s1, allocate_bits(&patches, &m, false, 7).unwrap());
    }

    #[test]
    fn fit_handles_odd_and_tiny_inputs() {
        let cfg = GbcConfig::default();
        let x = textured_image::<f32>(1, 1, 21, 5, 0.5);
        let y = fit_for_encoder(&x, &cfg).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 3, 16, 8));
    }

    #[test]
    fn container_round_trip() {
        let m = GbcModel::<f32>::random(GbcConfig { gate_bias: true, ..GbcConfig::default() }, 4).unwrap();
        let back = GbcModel::<f32>::from_container(&Container::from_bytes(&m.to_container().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
