use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stft::bilinear;
use crate::error::{Error, Result};

/// Frame sequence `[frames, height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if frames * height * width * channels != data.len() || data.is_empty() {
            return Err(Error::invalid("clip dimensions do not match data length"));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Spatial and intensity augmentation applied identically to every frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub flip: bool,
    /// Region cropped and resized back to the full frame.
    pub crop: Option<CropBox>,
    pub brightness: f64,
    pub contrast: f64,
}

impl SpatialParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            crop: None,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    /// Random flip, a crop keeping at least `min_scale` of each side,
    /// brightness in `±0.1` and contrast in `[0.8, 1.2]`.
    pub fn sample(rng: &mut impl Rng, height: usize, width: usize, min_scale: f64) -> Self {
        let scale: f64 = rng.gen_range(min_scale..=1.0);
        let ch = ((height as f64 * scale).round() as usize).clamp(1, height);
        let cw = ((width as f64 * scale).round() as usize).clamp(1, width);
        Self {
            flip: rng.gen_bool(0.5),
            crop: Some(CropBox {
                top: rng.gen_range(0..=height - ch),
                left: rng.gen_range(0..=width - cw),
                height: ch,
                width: cw,
            }),
            brightness: rng.gen_range(-0.1..=0.1),
            contrast: rng.gen_range(0.8..=1.2),
        }
    }
}

/// Applies spatial augmentation. Values are clamped to `[0, 1]`.
pub fn spatial_augment(clip: &VideoClip, params: &SpatialParams) -> Result<VideoClip> {
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let mut out = clip.clone();
    if let Some(b) = params.crop {
        if b.height == 0 || b.width == 0 || b.top + b.height > h || b.left + b.width > w {
            return Err(Error::invalid(format!("crop {b:?} outside a {h}x{w} frame")));
        }
        if (b.height, b.width) != (h, w) {
            for (f, frame) in out.data.chunks_mut(clip.frame_len()).enumerate() {
                let src = &clip.data[f * clip.frame_len()..(f + 1) * clip.frame_len()];
                for ch in 0..c {
                    let region: Vec<f64> = (0..b.height)
                        .flat_map(|y| (0..b.width).map(move |x| (y, x)))
                        .map(|(y, x)| src[((b.top + y) * w + b.left + x) * c + ch])
                        .collect();
                    let resized = bilinear(&region, b.height, b.width, h, w);
                    for (i, v) in resized.into_iter().enumerate() {
                        frame[i * c + ch] = v;
                    }
                }
            }
        }
    }
    if params.flip {
        for frame in out.data.chunks_mut(clip.frame_len()) {
            for row in frame.chunks_mut(w * c) {
                for x in 0..w / 2 {
                    for ch in 0..c {
                        row.swap(x * c + ch, (w - 1 - x) * c + ch);
                    }
                }
            }
        }
    }
    if params.contrast != 1.0 {
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        out.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * params.contrast + mean).clamp(0.0, 1.0));
    }
    if params.brightness != 0.0 {
        out.data
            .iter_mut()
            .for_each(|v| *v = (*v + params.brightness).clamp(0.0, 1.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn clip() -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..2 * 5 * 6 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        VideoClip::new(2, 5, 6, 2, data).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let c = clip();
        let p = SpatialParams {
            flip: true,
            ..SpatialParams::identity()
        };
        let once = spatial_augment(&c, &p).unwrap();
        assert_ne!(once, c);
        assert_eq!(spatial_augment(&once, &p).unwrap(), c);
    }

    #[test]
    fn neutral_intensity_is_identity() {
        let c = clip();
        assert_eq!(spatial_augment(&c, &SpatialParams::identity()).unwrap(), c);
    }

    #[test]
    fn full_crop_is_identity() {
        let c = clip();
        let p = SpatialParams {
            crop: Some(CropBox {
                top: 0,
                left: 0,
                height: 5,
                width: 6,
            }),
            ..SpatialParams::identity()
        };
        assert_eq!(spatial_augment(&c, &p).unwrap(), c);
    }

    #[test]
    fn crop_out_of_bounds() {
        let p = SpatialParams {
            crop: Some(CropBox {
                top: 2,
                left: 0,
                height: 4,
                width: 6,
            }),
            ..SpatialParams::identity()
        };
        assert!(spatial_augment(&clip(), &p).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = SpatialParams::sample(&mut ChaCha8Rng::seed_from_u64(9), 16, 16, 0.8);
        let b = SpatialParams::sample(&mut ChaCha8Rng::seed_from_u64(9), 16, 16, 0.8);
        assert_eq!(a, b);
    }
}
