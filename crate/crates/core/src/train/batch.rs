//! Host-side clip extraction and training batch assembly.

use rand::Rng;

use super::config::{AudioSpeedMode, RunConfig};
use crate::augment::{
    map_to_audio, spatial_augment, spectrogram_speed_variant, temporal_transform, SpatialParams, Spectrogram, StftConfig,
    TemporalParams, VideoClip,
};
use crate::data::AvSample;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::tasks::{make_ordering_instance, sample_temporal_params, OrderLabel};
use crate::tensor::Tensor;

/// Clip `[T, H, W, C]` of a sample under `params`.
pub fn video_clip(sample: &AvSample, params: &TemporalParams) -> Result<Vec<f64>> {
    Ok(temporal_transform(&sample.video, sample.frame_len(), params)?
        .into_iter()
        .map(f64::from)
        .collect())
}

/// Spectrogram `[S, S]` of the audio covering the same instants as the
/// video window `params`.
pub fn audio_spec(sample: &AvSample, params: &TemporalParams, cfg: &RunConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let spf = sample.waveform.len() as f64 / sample.meta.frames as f64;
    let a = map_to_audio(params, spf, sample.waveform.len())?;
    let stft = cfg.audio.stft();
    let hop = if cfg.audio.randomize_hop {
        let lo = ((0.75 * stft.hop as f64).round() as usize).max(1);
        let hi = ((1.25 * stft.hop as f64).round() as usize).max(lo);
        rng.gen_range(lo..=hi)
    } else {
        stft.hop
    };
    let spec = match cfg.audio.speed_mode {
        AudioSpeedMode::Subsample => {
            let wave: Vec<f64> = temporal_transform(&sample.waveform, 1, &a)?
                .into_iter()
                .map(f64::from)
                .collect();
            Spectrogram::magnitude(&wave, stft.n_fft, hop)?
                .log1p()
                .resize(stft.size, stft.size)?
        }
        AudioSpeedMode::Resize => {
            let window: Vec<f64> = sample.waveform[a.crop_start..a.crop_start + a.span()]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let fixed = StftConfig { hop, ..stft };
            spectrogram_speed_variant(&window, a.speed, a.direction, false, rng, &fixed)?
        }
    };
    Ok(spec.values)
}

/// Encoder inputs and task labels for one step.
///
/// `video` and `audio` stack `6B` clips: the two augmented views (`B`
/// each), then the ordering clips in the order first/second of the
/// same-modality pair, then the clip this modality contributes to the
/// cross-modal pairs (video-first, then audio-first).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub instance_ids: Vec<usize>,
    pub video: Tensor,
    pub audio: Tensor,
    /// Speed class per view, shared by both modalities.
    pub speed: [Vec<usize>; 2],
    pub direction: [Vec<usize>; 2],
    /// Order class per pairing: video-video, audio-audio, video-audio,
    /// audio-video.
    pub order: [Vec<usize>; 4],
}

/// Builds the batch for `samples`; `stream` seeds every random choice.
pub fn make_batch(samples: &[&AvSample], cfg: &RunConfig, stream: &[u64]) -> Result<Batch> {
    let b = samples.len();
    if b < 2 {
        return Err(Error::invalid("a batch needs at least 2 samples"));
    }
    let clip = cfg.data.clip_frames;
    let mut views_v: [Vec<Vec<f64>>; 2] = Default::default();
    let mut views_a: [Vec<Vec<f64>>; 2] = Default::default();
    let mut order_v: [Vec<Vec<f64>>; 4] = Default::default();
    let mut order_a: [Vec<Vec<f64>>; 4] = Default::default();
    let mut speed: [Vec<usize>; 2] = Default::default();
    let mut direction: [Vec<usize>; 2] = Default::default();
    let mut order: [Vec<usize>; 4] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        let mut path = stream.to_vec();
        path.push(i as u64);
        let mut rng = rng_for(cfg.seed, &path);
        let frames = s.meta.frames;
        for view in 0..2 {
            let p = sample_temporal_params(&mut rng, clip, frames)?;
            speed[view].push(p.speed.class());
            direction[view].push(p.direction.class());
            let mut v = video_clip(s, &p)?;
            if cfg.train.spatial_augment {
                let (h, w, c) = (cfg.data.height, cfg.data.width, cfg.data.channels);
                let sp = SpatialParams::sample(&mut rng, h, w, cfg.train.crop_scale);
                v = spatial_augment(&VideoClip::new(clip, h, w, c, v)?, &sp)?.data;
            }
            views_v[view].push(v);
            views_a[view].push(audio_spec(s, &p, cfg, &mut rng)?);
        }
        // Ordering clips are forward 1x windows; the relation is the only
        // cue that differs between classes.
        for pairing in 0..4 {
            let label = OrderLabel::from_class(rng.gen_range(0..3))?;
            let inst = make_ordering_instance(frames, clip, label, &mut rng)?;
            order[pairing].push(label.class());
            let first = TemporalParams::forward(inst.first.start, clip);
            let second = TemporalParams::forward(inst.second.start, clip);
            match pairing {
                0 => {
                    order_v[0].push(video_clip(s, &first)?);
                    order_v[1].push(video_clip(s, &second)?);
                }
                1 => {
                    order_a[0].push(audio_spec(s, &first, cfg, &mut rng)?);
                    order_a[1].push(audio_spec(s, &second, cfg, &mut rng)?);
                }
                2 => {
                    order_v[2].push(video_clip(s, &first)?);
                    order_a[2].push(audio_spec(s, &second, cfg, &mut rng)?);
                }
                _ => {
                    order_a[3].push(audio_spec(s, &first, cfg, &mut rng)?);
                    order_v[3].push(video_clip(s, &second)?);
                }
            }
        }
    }
    let dims = cfg.input_dims();
    let stack = |groups: Vec<&Vec<Vec<f64>>>, item: &[usize]| -> Result<Tensor> {
        let rows: Vec<f64> = groups.into_iter().flatten().flatten().copied().collect();
        let mut shape = vec![rows.len() / item.iter().product::<usize>()];
        shape.extend_from_slice(item);
        Tensor::new(shape, rows)
    };
    let vshape = [dims.frames, dims.height, dims.width, dims.channels];
    let ashape = [dims.spec_size, dims.spec_size];
    let video = stack(
        vec![&views_v[0], &views_v[1], &order_v[0], &order_v[1], &order_v[2], &order_v[3]],
        &vshape,
    )?;
    let audio = stack(
        vec![&views_a[0], &views_a[1], &order_a[0], &order_a[1], &order_a[2], &order_a[3]],
        &ashape,
    )?;
    Ok(Batch {
        size: b,
        instance_ids: samples.iter().map(|s| s.meta.instance_id).collect(),
        video,
        audio,
        speed,
        direction,
        order,
    })
}

/// Stream path for the batch of `step` in `epoch`.
pub fn step_stream(epoch: usize, step: usize) -> [u64; 3] {
    [tag::STEP, epoch as u64, step as u64]
}

/// Evenly spaced forward 1x windows of `clip` frames over `frames`.
pub fn eval_crops(frames: usize, clip: usize, crops: usize) -> Result<Vec<TemporalParams>> {
    if frames < clip {
        return Err(Error::invalid(format!("{frames} frames cannot hold a clip of {clip}")));
    }
    let last = frames - clip;
    Ok((0..crops)
        .map(|c| {
            let start = if crops == 1 {
                last / 2
            } else {
                (c as f64 * last as f64 / (crops - 1) as f64).round() as usize
            };
            TemporalParams::forward(start, clip)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_instance;

    fn cfg() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn batch_layout() {
        let c = cfg();
        let s: Vec<AvSample> = (0..3).map(|i| generate_instance(&c.data, 1, i)).collect();
        let refs: Vec<&AvSample> = s.iter().collect();
        let b = make_batch(&refs, &c, &step_stream(0, 0)).unwrap();
        assert_eq!(b.video.shape(), &[18, 16, 16, 16, 1]);
        assert_eq!(b.audio.shape(), &[18, 64, 64]);
        assert_eq!(b.order[3].len(), 3);
        assert_eq!(make_batch(&refs, &c, &step_stream(0, 0)).unwrap(), b);
        assert_ne!(make_batch(&refs, &c, &step_stream(0, 1)).unwrap(), b);
    }

    #[test]
    fn crops_span_timeline() {
        let c = eval_crops(128, 16, 4).unwrap();
        assert_eq!(c.iter().map(|p| p.crop_start).collect::<Vec<_>>(), vec![0, 37, 75, 112]);
        assert_eq!(eval_crops(20, 16, 1).unwrap()[0].crop_start, 2);
        assert!(eval_crops(10, 16, 2).is_err());
    }
}
