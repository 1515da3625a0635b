//! Maps RGB images to the denoiser's sample grid and back.

use handles_core::raster::resample_bilinear;
use handles_core::{FeatureMap, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCodec {
    pub resolution: usize,
    /// 3 for RGB, 4 appends luminance.
    pub channels: usize,
}

fn box_down(image: &FeatureMap, res: usize) -> Result<FeatureMap> {
    let (c, w, h) = image.shape();
    if w % res != 0 || h % res != 0 {
        return resample_bilinear(image, res, res);
    }
    let (fx, fy) = (w / res, h / res);
    let norm = 1.0 / (fx * fy) as f64;
    FeatureMap::from_fn(c, res, res, |ch, x, y| {
        let mut s = 0.0f64;
        for dy in 0..fy {
            for dx in 0..fx {
                s += image.get(ch, x * fx + dx, y * fy + dy) as f64;
            }
        }
        (s * norm) as f32
    })
}

impl PixelCodec {
    /// Area-averages `image` (3 channels) onto the grid.
    pub fn encode(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let small = box_down(image, self.resolution)?;
        let n = self.resolution;
        FeatureMap::from_fn(self.channels, n, n, |c, x, y| {
            if c < 3 {
                small.get(c, x, y)
            } else {
                (0..3).map(|k| LUMA[k] * small.get(k, x, y)).sum()
            }
        })
    }

    /// RGB image at the size of `reference`: the reference plus the
    /// upsampled change of `latent` relative to the encoded reference,
    /// clamped to `[0, 1]`. Detail finer than the grid is carried over from
    /// the reference.
    pub fn decode(&self, latent: &FeatureMap, reference: &FeatureMap) -> Result<FeatureMap> {
        let base = self.encode(reference)?;
        let delta = latent.zip_map(&base, |a, b| a - b)?;
        let rgb = FeatureMap::from_fn(3, self.resolution, self.resolution, |c, x, y| delta.get(c, x, y))?;
        let up = resample_bilinear(&rgb, reference.width(), reference.height())?;
        let rgb_ref = FeatureMap::from_fn(3, reference.width(), reference.height(), |c, x, y| reference.get(c, x, y))?;
        rgb_ref.zip_map(&up, |r, d| (r + d).clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize) -> FeatureMap {
        FeatureMap::from_fn(3, w, h, |c, x, y| ((x * 7 + y * 3 + c * 11) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn encode_averages_blocks_and_adds_luma() {
        let img = image(8, 8);
        let codec = PixelCodec { resolution: 4, channels: 4 };
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), (4, 4, 4));
        let want: f32 = [(2, 2), (3, 2), (2, 3), (3, 3)].iter().map(|&(x, y)| img.get(1, x, y)).sum::<f32>() / 4.0;
        assert!((z.get(1, 1, 1) - want).abs() < 1e-6);
        let luma = 0.299 * z.get(0, 2, 3) + 0.587 * z.get(1, 2, 3) + 0.114 * z.get(2, 2, 3);
        assert!((z.get(3, 2, 3) - luma).abs() < 1e-6);
    }

    #[test]
    fn decoding_the_encoded_reference_returns_it() {
        let img = image(12, 12);
        let codec = PixelCodec { resolution: 6, channels: 4 };
        let z = codec.encode(&img).unwrap();
        assert_eq!(codec.decode(&z, &img).unwrap(), img);
    }

    #[test]
    fn uniform_shift_decodes_to_uniform_shift() {
        let img = FeatureMap::from_fn(3, 8, 8, |_, _, _| 0.5).unwrap();
        let codec = PixelCodec { resolution: 4, channels: 3 };
        let z = codec.encode(&img).unwrap().map(|v| v + 0.1);
        let out = codec.decode(&z, &img).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }
}
