//! Noise predictor interface and an analytic stand-in.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{FeatureMap, ScalarField};

/// Activation taps of one prediction, keyed by layer index.
pub type LayerActivations = BTreeMap<u32, FeatureMap>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// The text prompt `y`.
    Prompt,
    /// The empty prompt `∅`.
    Null,
}

/// Noise level of a prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub level: usize,
    pub alpha_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: FeatureMap,
    pub activations: LayerActivations,
}

/// An ε-predictor conditioned on a prompt and a depth map.
///
/// Implementations must be deterministic: identical inputs give
/// bit-identical outputs.
pub trait Denoiser {
    /// Layers whose activations are exposed by [`Denoiser::predict`].
    fn layers(&self) -> Vec<u32>;

    fn predict(&self, x: &FeatureMap, noise: NoiseLevel, cond: Conditioning, depth: &ScalarField) -> Result<Prediction>;

    /// Gradient with respect to `x` of `Σ_i <cotangent_i, Ψ_i(x)>`.
    fn activation_vjp(
        &self,
        _x: &FeatureMap,
        _noise: NoiseLevel,
        _cond: Conditioning,
        _depth: &ScalarField,
        _cotangents: &LayerActivations,
    ) -> Result<FeatureMap> {
        Err(Error::Capability("activation vector-Jacobian products"))
    }
}

/// Shape of one tapped layer of the mock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockLayer {
    pub id: u32,
    /// Average-pooling factor applied to the clean estimate.
    pub pool: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    /// Weight of the smoothed input in the clean estimate, in `[0, 1)`.
    pub gamma: f64,
    pub layers: Vec<MockLayer>,
    pub seed: u64,
    /// Scale of the depth-dependent part of the layer projections.
    pub depth_sensitivity: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            layers: vec![
                MockLayer { id: 2, pool: 2, channels: 8 },
                MockLayer { id: 3, pool: 1, channels: 4 },
            ],
            seed: 0,
            depth_sensitivity: 0.05,
        }
    }
}

/// Analytic denoiser with clean estimate `x̂_0 = (1 - γ) x* + γ S(x_t)`,
/// where `x*` is a per-conditioning target and `S` a fixed `[1, 6, 1] / 8`
/// separable blur. Layer `i` exposes `Ψ_i = M_i pool_i(x̂_0)` with a seeded
/// channel-mixing matrix `M_i` that is perturbed by a hash of the depth map.
#[derive(Debug, Clone)]
pub struct MockDenoiser {
    target_prompt: FeatureMap,
    target_null: FeatureMap,
    config: MockConfig,
}

impl MockDenoiser {
    pub fn new(target_prompt: FeatureMap, target_null: FeatureMap, config: MockConfig) -> Result<Self> {
        if !target_prompt.same_shape(&target_null) {
            return Err(Error::ShapeMismatch("mock targets differ in shape".into()));
        }
        if !(0.0..1.0).contains(&config.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", config.gamma)));
        }
        let (_, w, h) = target_prompt.shape();
        for l in &config.layers {
            if l.pool == 0 || w % l.pool != 0 || h % l.pool != 0 || l.channels == 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {} pooling {} does not divide {}x{}",
                    l.id, l.pool, w, h
                )));
            }
        }
        Ok(Self {
            target_prompt,
            target_null,
            config,
        })
    }

    /// Null target defaults to the per-channel mean of the prompt target.
    pub fn with_mean_null(target_prompt: FeatureMap, config: MockConfig) -> Result<Self> {
        let (c, w, h) = target_prompt.shape();
        let means: Vec<f64> = (0..c)
            .map(|ch| target_prompt.plane(ch).iter().map(|&v| v as f64).sum::<f64>() / (w * h) as f64)
            .collect();
        let null = FeatureMap::from_fn(c, w, h, |ch, _, _| means[ch] as f32)?;
        Self::new(target_prompt, null, config)
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn target(&self, cond: Conditioning) -> &FeatureMap {
        match cond {
            Conditioning::Prompt => &self.target_prompt,
            Conditioning::Null => &self.target_null,
        }
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if !x.same_shape(&self.target_prompt) {
            return Err(Error::ShapeMismatch(format!(
                "sample {:?} vs denoiser {:?}",
                x.shape(),
                self.target_prompt.shape()
            )));
        }
        Ok(())
    }

    /// `x̂_0(x_t)`.
    pub fn clean_estimate(&self, x: &FeatureMap, cond: Conditioning) -> Result<FeatureMap> {
        self.check_input(x)?;
        let g = self.config.gamma;
        let blurred = blur(x);
        self.target(cond)
            .zip_map(&blurred, |t, b| ((1.0 - g) * t as f64 + g * b as f64) as f32)
    }

    /// Channel-mixing matrix of a layer, `channels x input_channels`, row-major.
    fn mixing(&self, layer: &MockLayer, depth: &ScalarField) -> Vec<f64> {
        let cin = self.target_prompt.channels();
        let scale = 1.0 / (cin as f64).sqrt();
        let base_seed = self.config.seed ^ (layer.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut base = ChaCha8Rng::seed_from_u64(base_seed);
        let mut pert = ChaCha8Rng::seed_from_u64(base_seed ^ depth_hash(depth));
        (0..layer.channels * cin)
            .map(|_| {
                let b: f64 = base.random_range(-1.0..1.0);
                let p: f64 = pert.random_range(-1.0..1.0);
                (b + self.config.depth_sensitivity * p) * scale
            })
            .collect()
    }

    fn activations_of(&self, x0: &FeatureMap, depth: &ScalarField) -> LayerActivations {
        self.config
            .layers
            .iter()
            .map(|l| {
                let pooled = avg_pool(x0, l.pool);
                (l.id, mix_channels(&pooled, &self.mixing(l, depth), l.channels))
            })
            .collect()
    }
}

/// FNV-1a over the bit patterns of the depth values.
fn depth_hash(depth: &ScalarField) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in depth.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Denoiser for MockDenoiser {
    fn layers(&self) -> Vec<u32> {
        self.config.layers.iter().map(|l| l.id).collect()
    }

    fn predict(&self, x: &FeatureMap, noise: NoiseLevel, cond: Conditioning, depth: &ScalarField) -> Result<Prediction> {
        let x0 = self.clean_estimate(x, cond)?;
        let a = noise.alpha_bar;
        let eps = if a >= 1.0 {
            FeatureMap::zeros(x.channels(), x.width(), x.height())
        } else {
            let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
            x.zip_map(&x0, |xt, c| ((xt as f64 - s * c as f64) / n) as f32)?
        };
        Ok(Prediction {
            eps,
            activations: self.activations_of(&x0, depth),
        })
    }

    fn activation_vjp(
        &self,
        x: &FeatureMap,
        _noise: NoiseLevel,
        _cond: Conditioning,
        depth: &ScalarField,
        cotangents: &LayerActivations,
    ) -> Result<FeatureMap> {
        self.check_input(x)?;
        let (c, w, h) = x.shape();
        let mut acc = vec![0.0f64; c * w * h];
        for l in &self.config.layers {
            let Some(cot) = cotangents.get(&l.id) else {
                continue;
            };
            if cot.shape() != (l.channels, w / l.pool, h / l.pool) {
                return Err(Error::ShapeMismatch(format!(
                    "cotangent for layer {} has shape {:?}",
                    l.id,
                    cot.shape()
                )));
            }
            let back = mix_channels_adjoint(cot, &self.mixing(l, depth), c);
            let up = avg_pool_adjoint(&back, l.pool);
            for (a, v) in acc.iter_mut().zip(up.data()) {
                *a += *v as f64;
            }
        }
        let g = self.config.gamma;
        let scaled = FeatureMap::new(c, w, h, acc.into_iter().map(|v| (g * v) as f32).collect())?;
        Ok(blur_adjoint(&scaled))
    }
}

const BLUR: [f64; 3] = [0.125, 0.75, 0.125];

fn blur_pass(x: &FeatureMap, horizontal: bool, adjoint: bool) -> FeatureMap {
    let (c, w, h) = x.shape();
    let mut out = vec![0.0f64; c * w * h];
    for ch in 0..c {
        let plane = x.plane(ch);
        let dst = &mut out[ch * w * h..(ch + 1) * w * h];
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                for (k, &wt) in BLUR.iter().enumerate() {
                    let (sx, sy) = if horizontal {
                        ((xx as isize + k as isize - 1).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (xx, (y as isize + k as isize - 1).clamp(0, h as isize - 1) as usize)
                    };
                    let j = sy * w + sx;
                    if adjoint {
                        dst[j] += wt * plane[i] as f64;
                    } else {
                        dst[i] += wt * plane[j] as f64;
                    }
                }
            }
        }
    }
    FeatureMap::from_raw(c, w, h, out.into_iter().map(|v| v as f32).collect())
}

/// Separable `[1, 6, 1] / 8` blur with clamp-to-edge. Its frequency
/// response stays positive, so the clean estimate is invertible in `x_t`.
pub fn blur(x: &FeatureMap) -> FeatureMap {
    blur_pass(&blur_pass(x, true, false), false, false)
}

pub fn blur_adjoint(x: &FeatureMap) -> FeatureMap {
    blur_pass(&blur_pass(x, false, true), true, true)
}

fn avg_pool(x: &FeatureMap, p: usize) -> FeatureMap {
    if p == 1 {
        return x.clone();
    }
    let (c, w, h) = x.shape();
    let (ow, oh) = (w / p, h / p);
    let norm = 1.0 / (p * p) as f64;
    let mut out = Vec::with_capacity(c * ow * oh);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0f64;
                for dy in 0..p {
                    for dx in 0..p {
                        s += x.get(ch, xx * p + dx, y * p + dy) as f64;
                    }
                }
                out.push((s * norm) as f32);
            }
        }
    }
    FeatureMap::from_raw(c, ow, oh, out)
}

fn avg_pool_adjoint(g: &FeatureMap, p: usize) -> FeatureMap {
    if p == 1 {
        return g.clone();
    }
    let (c, ow, oh) = g.shape();
    let norm = 1.0 / (p * p) as f32;
    let (w, h) = (ow * p, oh * p);
    let mut out = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.push(g.get(ch, xx / p, y / p) * norm);
            }
        }
    }
    FeatureMap::from_raw(c, w, h, out)
}

fn mix_channels(x: &FeatureMap, m: &[f64], cout: usize) -> FeatureMap {
    let (cin, w, h) = x.shape();
    let n = w * h;
    let mut out = vec![0.0f64; cout * n];
    for o in 0..cout {
        for i in 0..cin {
            let wt = m[o * cin + i];
            let src = x.plane(i);
            for (d, &s) in out[o * n..(o + 1) * n].iter_mut().zip(src) {
                *d += wt * s as f64;
            }
        }
    }
    FeatureMap::from_raw(cout, w, h, out.into_iter().map(|v| v as f32).collect())
}

fn mix_channels_adjoint(g: &FeatureMap, m: &[f64], cin: usize) -> FeatureMap {
    let (cout, w, h) = g.shape();
    let n = w * h;
    let mut out = vec![0.0f64; cin * n];
    for o in 0..cout {
        let src = g.plane(o);
        for i in 0..cin {
            let wt = m[o * cin + i];
            for (d, &s) in out[i * n..(i + 1) * n].iter_mut().zip(src) {
                *d += wt * s as f64;
            }
        }
    }
    FeatureMap::from_raw(cin, w, h, out.into_iter().map(|v| v as f32).collect())
}
