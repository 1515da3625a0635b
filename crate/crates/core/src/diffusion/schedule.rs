use crate::error::{Error, Result};
use crate::raster::FeatureMap;

/// Cumulative signal fractions `ᾱ` per sampling level.
///
/// Level `0` is the clean image (`ᾱ = 1`); level `T` is the noisiest. Level
/// `k >= 1` corresponds to training timestep `(k - 1) * (N / T) + 1` of an
/// `N`-step scaled-linear β schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub const BETA_START: f64 = 8.5e-4;
    pub const BETA_END: f64 = 1.2e-2;
    pub const TRAIN_STEPS: usize = 1000;

    /// Default schedule subsampled to `steps` DDIM levels.
    pub fn new(steps: usize) -> Result<Self> {
        Self::scaled_linear(steps, Self::BETA_START, Self::BETA_END, Self::TRAIN_STEPS)
    }

    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64, train_steps: usize) -> Result<Self> {
        if steps == 0 || train_steps < steps {
            return Err(Error::InvalidArgument(format!(
                "cannot subsample {} training steps to {}",
                train_steps, steps
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument("betas must satisfy 0 < start <= end < 1".into()));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let denom = (train_steps.max(2) - 1) as f64;
        let mut cumulative = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for i in 0..train_steps {
            let b = s0 + (s1 - s0) * i as f64 / denom;
            acc *= 1.0 - b * b;
            cumulative.push(acc);
        }
        let ratio = train_steps / steps;
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for k in 1..=steps {
            alpha_bar.push(cumulative[(k - 1) * ratio + 1]);
        }
        Ok(Self { alpha_bar })
    }

    /// Explicit levels; `alpha_bar[0]` must be 1 and the sequence strictly decreasing.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::InvalidArgument("alpha_bar must start at 1 and have >= 2 levels".into()));
        }
        if alpha_bar.windows(2).any(|p| !(p[1] < p[0] && p[1] > 0.0)) {
            return Err(Error::InvalidArgument("alpha_bar must decrease strictly and stay positive".into()));
        }
        Ok(Self { alpha_bar })
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bar[level]
    }

    pub fn levels(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Noise level consumed by sampling step `step` (step 0 is the noisiest).
    pub fn level_of_step(&self, step: usize) -> usize {
        self.steps() - step
    }
}

fn affine(a: &FeatureMap, b: &FeatureMap, ca: f64, cb: f64) -> Result<FeatureMap> {
    a.zip_map(b, |x, y| (ca * x as f64 + cb * y as f64) as f32)
}

/// `x̃ = √ᾱ_t x + √(1 - ᾱ_t) ε`.
pub fn forward_noise(x: &FeatureMap, level: usize, eps: &FeatureMap, sched: &NoiseSchedule) -> Result<FeatureMap> {
    let a = sched.alpha_bar(level);
    affine(x, eps, a.sqrt(), (1.0 - a).sqrt())
}

/// Deterministic DDIM update between two `ᾱ` values.
pub fn ddim_update(x_t: &FeatureMap, eps: &FeatureMap, alpha_t: f64, alpha_prev: f64) -> Result<FeatureMap> {
    let (st, nt) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    let (sp, np) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());
    x_t.zip_map(eps, |x, e| {
        let (x, e) = (x as f64, e as f64);
        let x0 = (x - nt * e) / st;
        (sp * x0 + np * e) as f32
    })
}

/// DDIM step from level `t` to the less noisy level `t_prev`.
pub fn ddim_step(x_t: &FeatureMap, eps: &FeatureMap, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<FeatureMap> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!("ddim step needs t > t_prev, got {} -> {}", t, t_prev)));
    }
    ddim_update(x_t, eps, sched.alpha_bar(t), sched.alpha_bar(t_prev))
}

/// Algebraic inverse of [`ddim_step`] for a fixed `ε̂`: from `t_prev` up to `t`.
pub fn ddim_invert_step(
    x_prev: &FeatureMap,
    eps: &FeatureMap,
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<FeatureMap> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!("inversion step needs t > t_prev, got {} -> {}", t_prev, t)));
    }
    ddim_update(x_prev, eps, sched.alpha_bar(t_prev), sched.alpha_bar(t))
}

/// Predicted clean sample `x̂_0 = (x_t - √(1-ᾱ) ε) / √ᾱ`.
pub fn predicted_x0(x_t: &FeatureMap, eps: &FeatureMap, alpha_t: f64) -> Result<FeatureMap> {
    let (st, nt) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    x_t.zip_map(eps, |x, e| ((x as f64 - nt * e as f64) / st) as f32)
}
