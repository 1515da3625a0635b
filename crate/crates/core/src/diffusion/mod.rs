//! Noise schedule, DDIM sampling and inversion, and guided sampling.

mod denoiser;
mod schedule;

pub use denoiser::{
    blur, blur_adjoint, Conditioning, Denoiser, LayerActivations, MockConfig, MockDenoiser, MockLayer, NoiseLevel,
    Prediction,
};
pub use schedule::{ddim_invert_step, ddim_step, ddim_update, forward_noise, predicted_x0, NoiseSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{ActivationRecord, Energy, GuidanceContext};
use crate::raster::{FeatureMap, ScalarField};

fn noise_level(sched: &NoiseSchedule, level: usize) -> NoiseLevel {
    NoiseLevel {
        level,
        alpha_bar: sched.alpha_bar(level),
    }
}

fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// Barzilai-Borwein step length `<s, s> / <s, y>` for the residual iteration,
/// with `s` the change in the iterate and `y` the matching decrease of the residual.
fn bb_step(prev_x: &[f64], prev_r: &[f64], x: &[f64], r: &[f64]) -> f64 {
    let (mut ss, mut sy) = (0.0, 0.0);
    for i in 0..x.len() {
        let s = x[i] - prev_x[i];
        let y = prev_r[i] - r[i];
        ss += s * s;
        sy += s * y;
    }
    if sy > 0.0 && ss > 0.0 {
        ss / sy
    } else {
        1.0
    }
}

/// Controls the fixed-point refinement of each inversion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionOptions {
    /// Maximum refinement iterations per step; 0 gives plain DDIM inversion.
    pub refine_iters: usize,
    /// Stop refining once the step reproduces its input to this max-abs error.
    pub tolerance: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            refine_iters: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inversion {
    /// Noisiest latent `x_T`.
    pub latent: FeatureMap,
    /// Activations of the reconstruction pass, keyed by `(layer, step)`.
    pub record: ActivationRecord,
    /// `x_0` regenerated from `latent`.
    pub reconstruction: FeatureMap,
}

/// One sampling step: the ε used for the update from `level` to `level - 1`.
fn prompt_eps(denoiser: &dyn Denoiser, x: &FeatureMap, sched: &NoiseSchedule, level: usize, depth: &ScalarField) -> Result<Prediction> {
    denoiser.predict(x, noise_level(sched, level), Conditioning::Prompt, depth)
}

/// Inverts `x_0` to `x_T`, then reconstructs from `x_T` while recording the
/// activations of every step.
///
/// Each inversion step starts from the usual DDIM estimate and then corrects
/// `x_{k+1} += ω (x_k - step(x_{k+1}))`, with Barzilai-Borwein step lengths `ω`,
/// until the forward step reproduces `x_k`.
pub fn ddim_invert(
    x0: &FeatureMap,
    denoiser: &dyn Denoiser,
    depth: &ScalarField,
    sched: &NoiseSchedule,
    options: InversionOptions,
) -> Result<Inversion> {
    let mut x = x0.clone();
    for k in 0..sched.steps() {
        let eps = prompt_eps(denoiser, &x, sched, k + 1, depth)?.eps;
        let mut next = ddim_invert_step(&x, &eps, k, k + 1, sched)?;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for _ in 0..options.refine_iters {
            let eps = prompt_eps(denoiser, &next, sched, k + 1, depth)?.eps;
            let back = ddim_step(&next, &eps, k + 1, k, sched)?;
            if max_abs_diff(&back, &x) <= options.tolerance {
                break;
            }
            let cur: Vec<f64> = next.data().iter().map(|&v| v as f64).collect();
            let resid: Vec<f64> = x.data().iter().zip(back.data()).map(|(&t, &b)| t as f64 - b as f64).collect();
            let omega = prev.as_ref().map_or(1.0, |(px, pr)| bb_step(px, pr, &cur, &resid));
            let data = cur.iter().zip(&resid).map(|(&c, &r)| (c + omega * r) as f32).collect();
            next = FeatureMap::new(next.channels(), next.width(), next.height(), data)?;
            prev = Some((cur, resid));
        }
        if !next.is_finite() {
            return Err(Error::TrajectoryNaN { step: sched.steps() - k - 1 });
        }
        x = next;
    }
    let latent = x;
    let (reconstruction, record) = reconstruct(&latent, denoiser, depth, sched)?;
    Ok(Inversion {
        latent,
        record,
        reconstruction,
    })
}

/// Unguided deterministic sampling from `x_T`, recording every activation.
pub fn reconstruct(
    latent: &FeatureMap,
    denoiser: &dyn Denoiser,
    depth: &ScalarField,
    sched: &NoiseSchedule,
) -> Result<(FeatureMap, ActivationRecord)> {
    let mut record = ActivationRecord::new();
    let mut x = latent.clone();
    for step in 0..sched.steps() {
        let level = sched.level_of_step(step);
        let pred = prompt_eps(denoiser, &x, sched, level, depth)?;
        for (layer, map) in pred.activations {
            record.insert(layer, step as u32, map)?;
        }
        x = ddim_step(&x, &pred.eps, level, level - 1, sched)?;
        if !x.is_finite() {
            return Err(Error::TrajectoryNaN { step });
        }
    }
    Ok((x, record))
}

/// Where the energy gradient enters the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Gradient-descent nudges on `x_t` before the DDIM update.
    #[default]
    Nudge,
    /// `λ ∇G` is added to the combined ε.
    Epsilon,
}

/// Classifier-free combination `(1 + μ) ε(y) - μ ε(∅)`.
fn cfg_eps(
    x: &FeatureMap,
    denoiser: &dyn Denoiser,
    noise: NoiseLevel,
    depth: &ScalarField,
    mu: f64,
) -> Result<Prediction> {
    let pred = denoiser.predict(x, noise, Conditioning::Prompt, depth)?;
    if mu == 0.0 {
        return Ok(pred);
    }
    let null = denoiser.predict(x, noise, Conditioning::Null, depth)?;
    let eps = pred
        .eps
        .zip_map(&null.eps, |y, n| ((1.0 + mu) * y as f64 - mu * n as f64) as f32)?;
    Ok(Prediction {
        eps,
        activations: pred.activations,
    })
}

/// `ε^G = (1 + μ) ε(y) - μ ε(∅) + λ ∇G` at sampling step `step`.
pub fn guided_epsilon(
    x: &FeatureMap,
    step: usize,
    denoiser: &dyn Denoiser,
    depth: &ScalarField,
    ctx: &GuidanceContext,
    sched: &NoiseSchedule,
) -> Result<FeatureMap> {
    let s = ctx.schedule();
    let noise = noise_level(sched, sched.level_of_step(step));
    let eps = cfg_eps(x, denoiser, noise, depth, s.cfg_scale)?.eps;
    if s.step_size == 0.0 || !s.is_guided(step) {
        return Ok(eps);
    }
    let (grad, _) = ctx.energy_gradient(x, denoiser, noise, depth, step)?;
    let lambda = s.step_size;
    eps.zip_map(&grad, |e, g| (e as f64 + lambda * g as f64) as f32)
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub mode: GuidanceMode,
    /// Keep `x_t` after every step and the activations seen at every step.
    pub keep_trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub x0: FeatureMap,
    /// Energy at the start of each step (zero on unguided steps).
    pub energies: Vec<Energy>,
    /// `x_t` after each step when requested.
    pub trajectory: Vec<FeatureMap>,
    /// Activations of the sample at each step when requested.
    pub record: ActivationRecord,
}

/// Deterministic DDIM sampling from `x_T`, optionally guided by `ctx`.
///
/// Without a context, or with `μ = 0` and no guided steps, this is the same
/// computation as [`reconstruct`].
pub fn sample_guided(
    latent: &FeatureMap,
    denoiser: &dyn Denoiser,
    depth: &ScalarField,
    ctx: Option<&GuidanceContext>,
    sched: &NoiseSchedule,
    options: &SampleOptions,
) -> Result<SampleOutput> {
    if let Some(ctx) = ctx {
        if ctx.schedule().total_steps != sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "guidance schedule has {} steps, noise schedule {}",
                ctx.schedule().total_steps,
                sched.steps()
            )));
        }
    }
    let mu = ctx.map_or(0.0, |c| c.schedule().cfg_scale);
    let mut x = latent.clone();
    let mut energies = Vec::with_capacity(sched.steps());
    let mut trajectory = Vec::new();
    let mut record = ActivationRecord::new();
    for step in 0..sched.steps() {
        let level = sched.level_of_step(step);
        let noise = noise_level(sched, level);
        let pred = cfg_eps(&x, denoiser, noise, depth, mu)?;
        let mut eps = pred.eps;
        if options.keep_trajectory {
            for (layer, map) in pred.activations {
                record.insert(layer, step as u32, map)?;
            }
        }
        let mut energy = Energy::default();
        if let Some(ctx) = ctx.filter(|c| c.schedule().is_guided(step) && c.schedule().step_size > 0.0) {
            let s = ctx.schedule();
            let lambda = s.step_size;
            match options.mode {
                GuidanceMode::Nudge => {
                    for i in 0..s.grad_descent_steps {
                        let (grad, e) = ctx.energy_gradient(&x, denoiser, noise, depth, step)?;
                        if i == 0 {
                            energy = e;
                        }
                        x = x.zip_map(&grad, |v, g| (v as f64 - lambda * g as f64) as f32)?;
                    }
                }
                GuidanceMode::Epsilon => {
                    let (grad, e) = ctx.energy_gradient(&x, denoiser, noise, depth, step)?;
                    energy = e;
                    eps = eps.zip_map(&grad, |v, g| (v as f64 + lambda * g as f64) as f32)?;
                }
            }
        }
        energies.push(energy);
        x = ddim_step(&x, &eps, level, level - 1, sched)?;
        if !x.is_finite() {
            return Err(Error::TrajectoryNaN { step });
        }
        if options.keep_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(SampleOutput {
        x0: x,
        energies,
        trajectory,
        record,
    })
}
