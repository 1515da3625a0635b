//! Raster primitives: scalar fields, multi-channel feature maps and binary
//! masks, all on a row-major pixel grid.
//!
//! Pixel `(x, y)` has its center at normalized coordinate
//! `((x + 0.5) / W, (y + 0.5) / H)`. Continuous lookups convert a normalized
//! coordinate `u` to a fractional pixel index via `u * W - 0.5` and clamp at
//! the borders.

use crate::error::{Error, Result};

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Single-channel float raster (depth maps, soft masks).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidSize(format!(
                "{}x{} field needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(value.is_finite());
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            channels: 1,
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }
}

/// Channel-major stack of rasters: `data[(c * H + y) * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * width * height {
            return Err(Error::InvalidSize(format!(
                "{}x{}x{} map needs {} values, got {}",
                channels,
                width,
                height,
                channels * width * height,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn from_fn(
        channels: usize,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * width * height);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self::new(channels, width, height, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.width == other.width && self.height == other.height
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single-channel view as a scalar field. Fails for multi-channel maps.
    pub fn to_scalar_field(&self) -> Result<ScalarField> {
        if self.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected 1 channel, found {}",
                self.channels
            )));
        }
        ScalarField::new(self.width, self.height, self.data.clone())
    }

    /// Elementwise map that keeps the shape. The closure must return finite
    /// values.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> FeatureMap {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        FeatureMap { data, ..*self }
    }

    /// Elementwise combination of two maps of equal shape.
    pub fn zip_map(&self, other: &FeatureMap, f: impl Fn(f32, f32) -> f32) -> Result<FeatureMap> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(FeatureMap { data, ..*self })
    }

    pub(crate) fn from_raw(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * width * height);
        Self {
            channels,
            width,
            height,
            data,
        }
    }
}

/// Binary mask stored as bytes in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidSize(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {} at index {} is not binary",
                data[i], i
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value as u8; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Binarize a soft field: `1` where `value >= threshold`.
    pub fn threshold(field: &ScalarField, threshold: f32) -> Self {
        Self {
            width: field.width(),
            height: field.height(),
            data: field.data().iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn at(&self, index: usize) -> bool {
        self.data[index] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_size<T: HasSize>(&self, other: &T) -> bool {
        self.width == other.size().0 && self.height == other.size().1
    }

    pub fn to_field(&self) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..*self
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |a, b| a | b)
    }

    fn combine(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(Mask {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Morphological dilation with a Euclidean disk of the given radius.
    pub fn dilate(&self, radius: usize) -> Mask {
        self.morph(radius, true)
    }

    /// Morphological erosion with a Euclidean disk; pixels outside the image
    /// count as set, so erosion does not eat in from the border.
    pub fn erode(&self, radius: usize) -> Mask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let (w, h) = (self.width as isize, self.height as isize);
        Mask::from_fn(self.width, self.height, |x, y| {
            let hit = |want: bool| {
                offsets.iter().any(|&(dx, dy)| {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    sx >= 0 && sy >= 0 && sx < w && sy < h && self.get(sx as usize, sy as usize) == want
                })
            };
            if dilate {
                hit(true)
            } else {
                !hit(false)
            }
        })
    }
}

pub trait HasSize {
    fn size(&self) -> (usize, usize);
}

impl HasSize for Mask {
    fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl HasSize for ScalarField {
    fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl HasSize for FeatureMap {
    fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Bilinear weights for a fractional pixel coordinate with clamp-to-edge.
/// Returns `(x0, x1, y0, y1, fx, fy)`.
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> (usize, usize, usize, usize, f64, f64) {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, x1, y0, y1, xc - x0 as f64, yc - y0 as f64)
}

/// Bilinear lookup into one plane at a fractional pixel coordinate
/// (pixel centers at integer positions).
#[inline]
pub fn sample_plane(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let (x0, x1, y0, y1, fx, fy) = bilinear_taps(x, y, w, h);
    if fx == 0.0 && fy == 0.0 {
        return plane[y0 * w + x0];
    }
    let a = plane[y0 * w + x0] as f64;
    let b = plane[y0 * w + x1] as f64;
    let c = plane[y1 * w + x0] as f64;
    let d = plane[y1 * w + x1] as f64;
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    (top + (bot - top) * fy) as f32
}

fn resample_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5
}

/// Center-aligned bilinear resampling with clamp-to-edge.
pub fn resample_bilinear(src: &FeatureMap, out_w: usize, out_h: usize) -> Result<FeatureMap> {
    if src.width == 0 || src.height == 0 || src.channels == 0 {
        return Err(Error::InvalidSize("cannot resample an empty map".into()));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidSize(format!("output size {}x{}", out_w, out_h)));
    }
    if out_w == src.width && out_h == src.height {
        return Ok(src.clone());
    }
    let mut data = Vec::with_capacity(src.channels * out_w * out_h);
    for c in 0..src.channels {
        let plane = src.plane(c);
        for y in 0..out_h {
            let sy = resample_coord(y, src.height, out_h);
            for x in 0..out_w {
                let sx = resample_coord(x, src.width, out_w);
                data.push(sample_plane(plane, src.width, src.height, sx, sy));
            }
        }
    }
    Ok(FeatureMap::from_raw(src.channels, out_w, out_h, data))
}

/// Adjoint of [`resample_bilinear`]: scatters a cotangent defined on the
/// output grid back onto a `src_w x src_h` grid.
pub fn resample_bilinear_adjoint(cotangent: &FeatureMap, src_w: usize, src_h: usize) -> Result<FeatureMap> {
    if src_w == 0 || src_h == 0 {
        return Err(Error::InvalidSize("cannot scatter onto an empty grid".into()));
    }
    let (out_w, out_h) = (cotangent.width, cotangent.height);
    if out_w == src_w && out_h == src_h {
        return Ok(cotangent.clone());
    }
    let n = src_w * src_h;
    let mut acc = vec![0.0f64; cotangent.channels * n];
    for c in 0..cotangent.channels {
        let plane = cotangent.plane(c);
        let dst = &mut acc[c * n..(c + 1) * n];
        for y in 0..out_h {
            let sy = resample_coord(y, src_h, out_h);
            for x in 0..out_w {
                let sx = resample_coord(x, src_w, out_w);
                let g = plane[y * out_w + x] as f64;
                let (x0, x1, y0, y1, fx, fy) = bilinear_taps(sx, sy, src_w, src_h);
                dst[y0 * src_w + x0] += g * (1.0 - fx) * (1.0 - fy);
                dst[y0 * src_w + x1] += g * fx * (1.0 - fy);
                dst[y1 * src_w + x0] += g * (1.0 - fx) * fy;
                dst[y1 * src_w + x1] += g * fx * fy;
            }
        }
    }
    Ok(FeatureMap::from_raw(
        cotangent.channels,
        src_w,
        src_h,
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

pub fn resample_field(src: &ScalarField, out_w: usize, out_h: usize) -> Result<ScalarField> {
    resample_bilinear(&src.to_feature_map(), out_w, out_h)?.to_scalar_field()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskResample {
    /// Take the source pixel containing the output pixel center.
    Nearest,
    /// Set an output pixel when any source pixel it overlaps is set.
    Conservative,
}

pub fn resample_mask(src: &Mask, out_w: usize, out_h: usize, mode: MaskResample) -> Result<Mask> {
    if src.width == 0 || src.height == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::InvalidSize(format!(
            "mask resample {}x{} -> {}x{}",
            src.width, src.height, out_w, out_h
        )));
    }
    let (sw, sh) = (src.width, src.height);
    let mask = match mode {
        MaskResample::Nearest => Mask::from_fn(out_w, out_h, |x, y| {
            let sx = ((2 * x + 1) * sw / (2 * out_w)).min(sw - 1);
            let sy = ((2 * y + 1) * sh / (2 * out_h)).min(sh - 1);
            src.get(sx, sy)
        }),
        MaskResample::Conservative => {
            let span = |i: usize, s: usize, d: usize| {
                let lo = i * s / d;
                let hi = ((i + 1) * s).div_ceil(d).max(lo + 1);
                lo..hi.min(s)
            };
            Mask::from_fn(out_w, out_h, |x, y| {
                span(y, sh, out_h).any(|sy| span(x, sw, out_w).any(|sx| src.get(sx, sy)))
            })
        }
    };
    Ok(mask)
}
