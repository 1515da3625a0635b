//! Activation records, edited activations and the guidance energies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, Denoiser, LayerActivations, NoiseLevel};
use crate::error::{Error, Result};
use crate::flow::{resample_flow, warp, FlowField};
use crate::raster::{
    resample_bilinear, resample_bilinear_adjoint, resample_field, resample_mask, FeatureMap, Mask, MaskResample,
    ScalarField,
};

/// Activations keyed by `(layer, step)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationRecord {
    entries: BTreeMap<(u32, u32), FeatureMap>,
}

impl ActivationRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in `(layer, step)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), &FeatureMap)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn get(&self, layer: u32, step: u32) -> Option<&FeatureMap> {
        self.entries.get(&(layer, step))
    }

    /// Distinct layer indices present.
    pub fn layers(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.entries.keys().map(|&(l, _)| l).collect();
        out.dedup();
        out
    }

    /// Adds an entry. Keys must be new and every map of a layer must share
    /// the same resolution.
    pub fn insert(&mut self, layer: u32, step: u32, map: FeatureMap) -> Result<()> {
        if self.entries.contains_key(&(layer, step)) {
            return Err(Error::DuplicateKey { layer, step });
        }
        if let Some((_, other)) = self.entries.range((layer, 0)..=(layer, u32::MAX)).next() {
            if (other.width(), other.height()) != (map.width(), map.height()) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} holds {}x{} maps, got {}x{}",
                    layer,
                    other.width(),
                    other.height(),
                    map.width(),
                    map.height()
                )));
            }
        }
        self.entries.insert((layer, step), map);
        Ok(())
    }
}

/// When and how strongly each layer is guided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSchedule {
    pub total_steps: usize,
    /// Steps `0..cutoff_step` are guided.
    pub cutoff_step: usize,
    /// Layers guided at step `t` are `layer_cycle[t % len]`.
    pub layer_cycle: Vec<Vec<u32>>,
    pub w_obj: f64,
    pub w_bg: f64,
    pub grad_descent_steps: usize,
    /// Energy step size λ.
    #[serde(rename = "lambda")]
    pub step_size: f64,
    /// Classifier-free guidance scale μ.
    #[serde(rename = "mu")]
    pub cfg_scale: f64,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self {
            total_steps: 50,
            cutoff_step: 38,
            layer_cycle: vec![vec![3], vec![2], vec![2, 3]],
            w_obj: 1.0,
            w_bg: 1.0,
            grad_descent_steps: 3,
            step_size: 1.0,
            cfg_scale: 0.0,
        }
    }
}

impl GuidanceSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff_step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "cutoff step {} exceeds total steps {}",
                self.cutoff_step, self.total_steps
            )));
        }
        for (name, v) in [("w_obj", self.w_obj), ("w_bg", self.w_bg), ("lambda", self.step_size)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::InvalidArgument("mu must be finite".into()));
        }
        if self.layer_cycle.is_empty() {
            return Err(Error::InvalidArgument("layer_cycle must not be empty".into()));
        }
        Ok(())
    }

    /// Layers guided at `step` (empty at and after the cutoff).
    pub fn active_layers(&self, step: usize) -> &[u32] {
        if step >= self.cutoff_step || self.layer_cycle.is_empty() {
            return &[];
        }
        &self.layer_cycle[step % self.layer_cycle.len()]
    }

    /// `(w^o, w^b)` of a layer at a step.
    pub fn weights(&self, layer: u32, step: usize) -> (f64, f64) {
        if self.active_layers(step).contains(&layer) {
            (self.w_obj, self.w_bg)
        } else {
            (0.0, 0.0)
        }
    }

    /// True when the step contributes any energy.
    pub fn is_guided(&self, step: usize) -> bool {
        !self.active_layers(step).is_empty() && (self.w_obj > 0.0 || self.w_bg > 0.0)
    }

    /// Every `(layer, step)` pair the schedule can read.
    pub fn required_keys(&self) -> Vec<(u32, u32)> {
        let mut keys: Vec<(u32, u32)> = (0..self.cutoff_step)
            .flat_map(|t| self.active_layers(t).iter().map(move |&l| (l, t as u32)))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }
}

/// How the background term compares masked channel sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundEnergy {
    /// `Σ_c (S_e,c - S'_c)² / N`.
    #[default]
    PerChannel,
    /// `(‖S_e‖ - ‖S'‖)² / N` over the channel vectors of masked sums.
    VectorNorm,
}

/// `Ψ'_{i,t} = W[ρ(Ψ_{i,t}), F]` for every layer in `layers` and step below `steps`.
pub fn edit_activations(
    record: &ActivationRecord,
    flow: &FlowField,
    canonical: usize,
    layers: &[u32],
    steps: usize,
) -> Result<ActivationRecord> {
    let missing: Vec<(u32, u32)> = layers
        .iter()
        .flat_map(|&l| (0..steps as u32).map(move |t| (l, t)))
        .filter(|&(l, t)| record.get(l, t).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingActivations(missing));
    }
    let flow_c = resample_flow(flow, canonical, canonical)?;
    let mut out = ActivationRecord::new();
    for &l in layers {
        for t in 0..steps as u32 {
            let src = record.get(l, t).expect("checked above");
            if src.width() > canonical || src.height() > canonical {
                return Err(Error::InvalidArgument(format!(
                    "layer {} resolution {}x{} exceeds canonical {}",
                    l,
                    src.width(),
                    src.height(),
                    canonical
                )));
            }
            out.insert(l, t, warp(&resample_bilinear(src, canonical, canonical)?, &flow_c)?)?;
        }
    }
    Ok(out)
}

/// Everything the energies need: targets, masks at the canonical
/// resolution and the schedule.
#[derive(Debug, Clone)]
pub struct GuidanceContext {
    edited: ActivationRecord,
    object: Mask,
    background: Mask,
    schedule: GuidanceSchedule,
    bg_energy: BackgroundEnergy,
    canonical: usize,
}

/// Energy split into its two terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Energy {
    pub object: f64,
    pub background: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.object + self.background
    }
}

impl GuidanceContext {
    /// Builds a context from image-resolution masks. `object` is the edited
    /// object mask `M'_o`, `valid` the flow validity `M_v`; both are brought to
    /// the canonical resolution and the guided regions are restricted to `M_v`.
    pub fn new(
        edited: ActivationRecord,
        object: &Mask,
        valid: &Mask,
        schedule: GuidanceSchedule,
        bg_energy: BackgroundEnergy,
        canonical: usize,
    ) -> Result<Self> {
        if !object.same_size(valid) {
            return Err(Error::ShapeMismatch("object and validity masks differ in size".into()));
        }
        let obj = Mask::threshold(&resample_field(&object.to_field(), canonical, canonical)?, 0.5);
        let valid = resample_mask(&valid.not(), canonical, canonical, MaskResample::Conservative)?.not();
        let object_c = obj.and(&valid)?;
        let background_c = obj.not().and(&valid)?;
        Self::from_masks(edited, object_c, background_c, schedule, bg_energy)
    }

    /// Builds a context from masks already at the canonical resolution.
    pub fn from_masks(
        edited: ActivationRecord,
        object: Mask,
        background: Mask,
        schedule: GuidanceSchedule,
        bg_energy: BackgroundEnergy,
    ) -> Result<Self> {
        schedule.validate()?;
        if !object.same_size(&background) || object.width() != object.height() {
            return Err(Error::ShapeMismatch("guidance masks must be square and equal in size".into()));
        }
        let canonical = object.width();
        for ((l, t), m) in edited.iter() {
            if m.width() != canonical || m.height() != canonical {
                return Err(Error::ShapeMismatch(format!(
                    "edited activation ({}, {}) is {}x{}, masks are {}x{}",
                    l,
                    t,
                    m.width(),
                    m.height(),
                    canonical,
                    canonical
                )));
            }
        }
        let missing: Vec<(u32, u32)> = schedule
            .required_keys()
            .into_iter()
            .filter(|&(l, t)| edited.get(l, t).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingActivations(missing));
        }
        if background.is_empty() {
            log::warn!("background guidance mask is empty; the background term is skipped");
        }
        Ok(Self {
            edited,
            object,
            background,
            schedule,
            bg_energy,
            canonical,
        })
    }

    pub fn schedule(&self) -> &GuidanceSchedule {
        &self.schedule
    }

    pub fn object_mask(&self) -> &Mask {
        &self.object
    }

    pub fn background_mask(&self) -> &Mask {
        &self.background
    }

    pub fn edited(&self) -> &ActivationRecord {
        &self.edited
    }

    pub fn canonical(&self) -> usize {
        self.canonical
    }

    pub fn bg_energy(&self) -> BackgroundEnergy {
        self.bg_energy
    }

    /// Copy with a different schedule.
    pub fn with_schedule(&self, schedule: GuidanceSchedule) -> Result<Self> {
        Self::from_masks(
            self.edited.clone(),
            self.object.clone(),
            self.background.clone(),
            schedule,
            self.bg_energy,
        )
    }

    /// ρ(Ψ^e) and target Ψ' for one guided layer.
    fn pair(&self, psi_e: &LayerActivations, layer: u32, step: usize) -> Result<(FeatureMap, &FeatureMap)> {
        let native = psi_e
            .get(&layer)
            .ok_or_else(|| Error::MissingActivations(vec![(layer, step as u32)]))?;
        let target = self
            .edited
            .get(layer, step as u32)
            .ok_or_else(|| Error::MissingActivations(vec![(layer, step as u32)]))?;
        let resampled = resample_bilinear(native, self.canonical, self.canonical)?;
        if resampled.channels() != target.channels() {
            return Err(Error::ShapeMismatch(format!(
                "layer {} has {} channels, target has {}",
                layer,
                resampled.channels(),
                target.channels()
            )));
        }
        Ok((resampled, target))
    }

    fn masked_sums(&self, map: &FeatureMap) -> Vec<f64> {
        (0..map.channels())
            .map(|c| {
                map.plane(c)
                    .iter()
                    .zip(self.background.data())
                    .filter(|(_, &m)| m != 0)
                    .map(|(&v, _)| v as f64)
                    .sum()
            })
            .collect()
    }

    /// Background term of one layer and its gradient coefficients per channel:
    /// `∂G_b / ∂ρΨ^e_c(u) = coef_c · M'_b(u)`.
    fn background_layer(&self, e: &FeatureMap, target: &FeatureMap, w: f64) -> (f64, Vec<f64>) {
        let n = self.background.count() as f64;
        let channels = e.channels();
        if n == 0.0 || w == 0.0 {
            return (0.0, vec![0.0; channels]);
        }
        let se = self.masked_sums(e);
        let st = self.masked_sums(target);
        match self.bg_energy {
            BackgroundEnergy::PerChannel => {
                let energy = se.iter().zip(&st).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
                let coef = se.iter().zip(&st).map(|(a, b)| 2.0 * w * (a - b) / n).collect();
                (w * energy, coef)
            }
            BackgroundEnergy::VectorNorm => {
                let ne = se.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nt = st.iter().map(|v| v * v).sum::<f64>().sqrt();
                let energy = (ne - nt) * (ne - nt) / n;
                let coef = if ne > 0.0 {
                    se.iter().map(|v| 2.0 * w * (ne - nt) / n * v / ne).collect()
                } else {
                    vec![0.0; channels]
                };
                (w * energy, coef)
            }
        }
    }

    fn object_layer(&self, e: &FeatureMap, target: &FeatureMap) -> f64 {
        let mut s = 0.0;
        for c in 0..e.channels() {
            for ((&a, &b), &m) in e.plane(c).iter().zip(target.plane(c)).zip(self.object.data()) {
                if m != 0 {
                    let d = a as f64 - b as f64;
                    s += d * d;
                }
            }
        }
        s
    }

    /// `G_o` at step `step` for activations `psi_e` of the current sample.
    pub fn energy_object(&self, psi_e: &LayerActivations, step: usize) -> Result<f64> {
        let mut total = 0.0;
        for &l in self.schedule.active_layers(step) {
            let (w, _) = self.schedule.weights(l, step);
            if w == 0.0 {
                continue;
            }
            let (e, target) = self.pair(psi_e, l, step)?;
            total += w * self.object_layer(&e, target);
        }
        Ok(total)
    }

    /// `G_b` at step `step`.
    pub fn energy_background(&self, psi_e: &LayerActivations, step: usize) -> Result<f64> {
        let mut total = 0.0;
        for &l in self.schedule.active_layers(step) {
            let (_, w) = self.schedule.weights(l, step);
            if w == 0.0 {
                continue;
            }
            let (e, target) = self.pair(psi_e, l, step)?;
            total += self.background_layer(&e, target, w).0;
        }
        Ok(total)
    }

    pub fn energy(&self, psi_e: &LayerActivations, step: usize) -> Result<Energy> {
        Ok(Energy {
            object: self.energy_object(psi_e, step)?,
            background: self.energy_background(psi_e, step)?,
        })
    }

    /// `G = G_o + G_b`.
    pub fn energy_total(&self, psi_e: &LayerActivations, step: usize) -> Result<f64> {
        Ok(self.energy(psi_e, step)?.total())
    }

    /// Gradients of `G` with respect to the native-resolution activations.
    pub fn activation_gradient(&self, psi_e: &LayerActivations, step: usize) -> Result<(LayerActivations, Energy)> {
        let mut grads = LayerActivations::new();
        let mut energy = Energy::default();
        for &l in self.schedule.active_layers(step) {
            let (wo, wb) = self.schedule.weights(l, step);
            if wo == 0.0 && wb == 0.0 {
                continue;
            }
            let (e, target) = self.pair(psi_e, l, step)?;
            let (eb, coef) = self.background_layer(&e, target, wb);
            energy.object += wo * self.object_layer(&e, target);
            energy.background += eb;
            let (c, w, h) = e.shape();
            let mut g = Vec::with_capacity(c * w * h);
            for ch in 0..c {
                for ((&a, &b), (&mo, &mb)) in e
                    .plane(ch)
                    .iter()
                    .zip(target.plane(ch))
                    .zip(self.object.data().iter().zip(self.background.data()))
                {
                    let mut v = 0.0;
                    if mo != 0 {
                        v += 2.0 * wo * (a as f64 - b as f64);
                    }
                    if mb != 0 {
                        v += coef[ch];
                    }
                    g.push(v as f32);
                }
            }
            let native = &psi_e[&l];
            let g = FeatureMap::new(c, w, h, g)?;
            grads.insert(l, resample_bilinear_adjoint(&g, native.width(), native.height())?);
        }
        Ok((grads, energy))
    }

    /// `∇_{x_t} G` through the denoiser's activation taps, plus the energy at `x`.
    pub fn energy_gradient(
        &self,
        x: &FeatureMap,
        denoiser: &dyn Denoiser,
        noise: NoiseLevel,
        depth: &ScalarField,
        step: usize,
    ) -> Result<(FeatureMap, Energy)> {
        if !self.schedule.is_guided(step) {
            return Ok((FeatureMap::zeros(x.channels(), x.width(), x.height()), Energy::default()));
        }
        let pred = denoiser.predict(x, noise, Conditioning::Prompt, depth)?;
        let (cot, energy) = self.activation_gradient(&pred.activations, step)?;
        let grad = denoiser.activation_vjp(x, noise, Conditioning::Prompt, depth, &cot)?;
        Ok((grad, energy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: [f32; 4]) -> FeatureMap {
        FeatureMap::new(1, 2, 2, values.to_vec()).unwrap()
    }

    fn ctx_2x2(target: FeatureMap, object: Mask, background: Mask) -> GuidanceContext {
        let mut rec = ActivationRecord::new();
        rec.insert(3, 0, target).unwrap();
        let schedule = GuidanceSchedule {
            total_steps: 1,
            cutoff_step: 1,
            layer_cycle: vec![vec![3]],
            ..Default::default()
        };
        GuidanceContext::from_masks(rec, object, background, schedule, BackgroundEnergy::PerChannel).unwrap()
    }

    fn acts(map: FeatureMap) -> LayerActivations {
        LayerActivations::from([(3, map)])
    }

    #[test]
    fn object_energy_hand_sum() {
        let target = single([0.0; 4]);
        let ctx = ctx_2x2(target, Mask::filled(2, 2, true), Mask::filled(2, 2, false));
        let e = ctx.energy_object(&acts(single([1.0, -1.0, 0.0, 2.0])), 0).unwrap();
        assert_eq!(e, 6.0);
    }

    #[test]
    fn background_energy_hand_eval() {
        let target = single([0.5; 4]);
        let ctx = ctx_2x2(target, Mask::filled(2, 2, false), Mask::filled(2, 2, true));
        let e = ctx.energy_background(&acts(single([1.0, 1.0, 1.5, 0.5])), 0).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn empty_masks_give_zero() {
        let target = single([0.0; 4]);
        let ctx = ctx_2x2(target, Mask::filled(2, 2, false), Mask::filled(2, 2, false));
        let e = ctx.energy(&acts(single([3.0, 1.0, 2.0, 7.0])), 0).unwrap();
        assert_eq!(e, Energy::default());
    }

    #[test]
    fn gated_after_cutoff() {
        let target = single([0.0; 4]);
        let ctx = ctx_2x2(target, Mask::filled(2, 2, true), Mask::filled(2, 2, false));
        assert_eq!(ctx.energy_total(&acts(single([1.0; 4])), 1).unwrap(), 0.0);
    }

    #[test]
    fn schedule_cycle_and_keys() {
        let s = GuidanceSchedule::default();
        assert_eq!(s.active_layers(0), &[3]);
        assert_eq!(s.active_layers(1), &[2]);
        assert_eq!(s.active_layers(2), &[2, 3]);
        assert_eq!(s.active_layers(3), &[3]);
        assert!(s.active_layers(38).is_empty());
        assert_eq!(s.weights(2, 0), (0.0, 0.0));
        assert_eq!(s.weights(3, 0), (1.0, 1.0));
        let keys = s.required_keys();
        assert!(keys.contains(&(3, 37)) == (37 % 3 != 1));
        assert!(!keys.iter().any(|&(_, t)| t >= 38));
    }

    #[test]
    fn schedule_validation() {
        let bad = GuidanceSchedule {
            cutoff_step: 51,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = GuidanceSchedule {
            w_bg: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn record_rejects_mixed_resolution() {
        let mut r = ActivationRecord::new();
        r.insert(2, 0, FeatureMap::zeros(1, 4, 4)).unwrap();
        assert!(r.insert(2, 1, FeatureMap::zeros(1, 8, 8)).is_err());
        assert!(matches!(
            r.insert(2, 0, FeatureMap::zeros(1, 4, 4)),
            Err(Error::DuplicateKey { layer: 2, step: 0 })
        ));
        r.insert(3, 0, FeatureMap::zeros(1, 8, 8)).unwrap();
        assert_eq!(r.layers(), vec![2, 3]);
    }

    #[test]
    fn edit_identity_flow_resamples_only() {
        let mut r = ActivationRecord::new();
        let m = FeatureMap::from_fn(2, 4, 4, |c, x, y| (c + x * 3 + y) as f32).unwrap();
        r.insert(2, 0, m.clone()).unwrap();
        let out = edit_activations(&r, &FlowField::zero(16, 16), 8, &[2], 1).unwrap();
        assert_eq!(out.get(2, 0).unwrap(), &resample_bilinear(&m, 8, 8).unwrap());
    }

    #[test]
    fn edit_reports_missing() {
        let r = ActivationRecord::new();
        match edit_activations(&r, &FlowField::zero(8, 8), 8, &[2], 2) {
            Err(Error::MissingActivations(keys)) => assert_eq!(keys, vec![(2, 0), (2, 1)]),
            other => panic!("unexpected {:?}", other),
        }
    }
}
