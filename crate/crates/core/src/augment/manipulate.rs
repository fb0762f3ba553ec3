//! Content manipulation suites for fingerprint robustness evaluation.
//!
//! * `IP` (in place): additive noise, per-frame blur, audio clicks.
//! * `S` (spatial): crop-and-pad, small rotation, band attenuation, pitch resampling.
//! * `T` (time): speed-up by 2 or 4 with a temporal crop, aligned in both modalities.
//! * `C` (combined): one primitive drawn from each of IP, S and T, applied in that order.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{AvSample, Dataset, Derivation, GenConfig, TimelineMap};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Suite {
    Ip,
    S,
    T,
    C,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ip, Suite::S, Suite::T, Suite::C];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ip => "ip",
            Suite::S => "s",
            Suite::T => "t",
            Suite::C => "c",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ip" => Ok(Suite::Ip),
            "s" => Ok(Suite::S),
            "t" => Ok(Suite::T),
            "c" => Ok(Suite::C),
            other => Err(Error::invalid(format!("unknown suite `{other}` (expected ip|s|t|c)"))),
        }
    }
}

/// A paired audio-video manipulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// Gaussian noise on frames and waveform.
    Noise,
    /// Per-frame box blur and audio click impulses.
    BlurClicks,
    /// Crop-and-pad of frames and attenuation of a random octave.
    CropPadBand,
    /// Small frame rotation and pitch-ratio resampling.
    RotatePitch,
    /// Speed-up with a temporal crop.
    SpeedCrop,
}

impl Primitive {
    pub fn suite(self) -> Suite {
        match self {
            Primitive::Noise | Primitive::BlurClicks => Suite::Ip,
            Primitive::CropPadBand | Primitive::RotatePitch => Suite::S,
            Primitive::SpeedCrop => Suite::T,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Noise => "ip:noise",
            Primitive::BlurClicks => "ip:blur+clicks",
            Primitive::CropPadBand => "s:croppad+band",
            Primitive::RotatePitch => "s:rotate+pitch",
            Primitive::SpeedCrop => "t:speed+crop",
        }
    }

    fn of(suite: Suite) -> &'static [Primitive] {
        match suite {
            Suite::Ip => &[Primitive::Noise, Primitive::BlurClicks],
            Suite::S => &[Primitive::CropPadBand, Primitive::RotatePitch],
            Suite::T => &[Primitive::SpeedCrop],
            Suite::C => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulationConfig {
    /// Noise standard deviation as a fraction of each modality's value range.
    pub noise_sigma: f64,
    /// Mixing weight of the blurred frame.
    pub blur: f64,
    pub clicks: usize,
    pub click_amplitude: f64,
    /// Minimum fraction of frame area kept by crop-and-pad.
    pub crop_min_area: f64,
    pub max_rotation_deg: f64,
    /// Gain of the attenuated octave in dB (negative attenuates).
    pub band_gain_db: f64,
    /// Pitch ratio is drawn from `1 ± pitch_range`.
    pub pitch_range: f64,
    pub speeds: Vec<usize>,
    /// Minimum fraction of the timeline kept by the temporal crop.
    pub time_crop_min: f64,
}

impl Default for ManipulationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            blur: 0.6,
            clicks: 8,
            click_amplitude: 0.8,
            crop_min_area: 0.7,
            max_rotation_deg: 10.0,
            band_gain_db: -20.0,
            pitch_range: 0.06,
            speeds: vec![2, 4],
            time_crop_min: 0.6,
        }
    }
}

impl ManipulationConfig {
    /// Every magnitude set to its neutral value.
    pub fn neutral() -> Self {
        Self {
            noise_sigma: 0.0,
            blur: 0.0,
            clicks: 0,
            click_amplitude: 0.0,
            crop_min_area: 1.0,
            max_rotation_deg: 0.0,
            band_gain_db: 0.0,
            pitch_range: 0.0,
            speeds: vec![1],
            time_crop_min: 1.0,
        }
    }
}

/// Primitives applied by a suite, drawn with `rng` for the combined suite.
pub fn plan(suite: Suite, rng: &mut impl Rng) -> Vec<Primitive> {
    match suite {
        Suite::C => [Suite::Ip, Suite::S, Suite::T]
            .iter()
            .map(|&s| *Primitive::of(s).choose(rng).expect("non-empty category"))
            .collect(),
        s => Primitive::of(s).to_vec(),
    }
}

/// Applies `suite` to a sample generated under `gen`, deterministically in
/// `(seed, instance_id)`. The temporal crop keeps at least `gen.clip_frames`
/// frames.
pub fn manipulate(sample: &AvSample, gen: &GenConfig, suite: Suite, seed: u64, cfg: &ManipulationConfig) -> Result<AvSample> {
    if sample.frame_len() != gen.height * gen.width * gen.channels {
        return Err(Error::invalid("sample frames do not match the generator config"));
    }
    let min_frames = gen.clip_frames;
    let mut rng = rng_for(seed, &[tag::MANIPULATE, sample.meta.instance_id as u64]);
    let steps = plan(suite, &mut rng);
    let mut s = Working::from(sample, gen);
    for p in steps {
        match p {
            Primitive::Noise => s.noise(cfg, &mut rng),
            Primitive::BlurClicks => s.blur_clicks(cfg, &mut rng),
            Primitive::CropPadBand => s.crop_pad_band(cfg, &mut rng),
            Primitive::RotatePitch => s.rotate_pitch(cfg, &mut rng),
            Primitive::SpeedCrop => s.speed_crop(cfg, min_frames, &mut rng)?,
        }
        s.applied.push(p.name().to_string());
    }
    Ok(s.into_sample(sample))
}

struct Working {
    video: Vec<f64>,
    audio: Vec<f64>,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    sample_rate: f64,
    timeline: TimelineMap,
    applied: Vec<String>,
}

impl Working {
    fn from(s: &AvSample, gen: &GenConfig) -> Self {
        let (height, width, channels) = (gen.height, gen.width, gen.channels);
        Self {
            video: s.video.iter().map(|&v| v as f64).collect(),
            audio: s.waveform.iter().map(|&v| v as f64).collect(),
            frames: s.meta.frames,
            height,
            width,
            channels,
            sample_rate: s.meta.sample_rate as f64,
            timeline: s.meta.timeline.clone(),
            applied: s.meta.manipulations.clone(),
        }
    }

    fn into_sample(self, orig: &AvSample) -> AvSample {
        let mut meta = orig.meta.clone();
        meta.frames = self.frames;
        meta.samples = self.audio.len();
        meta.timeline = self.timeline;
        meta.manipulations = self.applied;
        AvSample {
            meta,
            video: self.video.iter().map(|&v| v as f32).collect(),
            waveform: self.audio.iter().map(|&v| v as f32).collect(),
        }
    }

    fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn noise(&mut self, cfg: &ManipulationConfig, rng: &mut ChaCha8Rng) {
        if cfg.noise_sigma <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, 1.0).unwrap();
        for v in &mut self.video {
            *v = (*v + cfg.noise_sigma * n.sample(rng)).clamp(0.0, 1.0);
        }
        // waveform range is 2
        for v in &mut self.audio {
            *v = (*v + 2.0 * cfg.noise_sigma * n.sample(rng)).clamp(-1.0, 1.0);
        }
    }

    fn blur_clicks(&mut self, cfg: &ManipulationConfig, rng: &mut ChaCha8Rng) {
        let (h, w, c) = (self.height, self.width, self.channels);
        if cfg.blur > 0.0 {
            let fl = self.frame_len();
            for frame in self.video.chunks_mut(fl) {
                let src = frame.to_vec();
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            let mut cnt = 0.0;
                            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                                    acc += src[(yy * w + xx) * c + ch];
                                    cnt += 1.0;
                                }
                            }
                            let i = (y * w + x) * c + ch;
                            frame[i] = (1.0 - cfg.blur) * src[i] + cfg.blur * acc / cnt;
                        }
                    }
                }
            }
        }
        if cfg.click_amplitude > 0.0 {
            for _ in 0..cfg.clicks {
                let at = rng.gen_range(0..self.audio.len());
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                for (k, decay) in [1.0, 0.5, 0.25].iter().enumerate() {
                    if let Some(v) = self.audio.get_mut(at + k) {
                        *v = (*v + sign * cfg.click_amplitude * decay).clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }

    fn crop_pad_band(&mut self, cfg: &ManipulationConfig, rng: &mut ChaCha8Rng) {
        let (h, w, c) = (self.height, self.width, self.channels);
        if cfg.crop_min_area < 1.0 {
            let area: f64 = rng.gen_range(cfg.crop_min_area.max(0.01)..=1.0);
            let ch = ((h as f64 * area.sqrt()).round() as usize).clamp(1, h);
            let cw = ((w as f64 * area.sqrt()).round() as usize).clamp(1, w);
            let (sy, sx) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
            let (dy, dx) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
            let fl = self.frame_len();
            for frame in self.video.chunks_mut(fl) {
                let src = frame.to_vec();
                frame.iter_mut().for_each(|v| *v = 0.0);
                for y in 0..ch {
                    for x in 0..cw {
                        for k in 0..c {
                            frame[((dy + y) * w + dx + x) * c + k] = src[((sy + y) * w + sx + x) * c + k];
                        }
                    }
                }
            }
        }
        if cfg.band_gain_db != 0.0 {
            let lo: f64 = rng.gen_range(50.0..self.sample_rate / 4.0);
            let gain = 10f64.powf(cfg.band_gain_db / 20.0);
            scale_band(&mut self.audio, self.sample_rate, lo, 2.0 * lo, gain);
        }
    }

    fn rotate_pitch(&mut self, cfg: &ManipulationConfig, rng: &mut ChaCha8Rng) {
        let (h, w, c) = (self.height, self.width, self.channels);
        if cfg.max_rotation_deg > 0.0 {
            let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg) * PI / 180.0;
            let (sin, cos) = angle.sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let fl = self.frame_len();
            for frame in self.video.chunks_mut(fl) {
                let src = frame.to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                        let sy = cos * ry - sin * rx + cy;
                        let sx = sin * ry + cos * rx + cx;
                        for k in 0..c {
                            frame[(y * w + x) * c + k] = sample_bilinear(&src, h, w, c, k, sy, sx);
                        }
                    }
                }
            }
        }
        if cfg.pitch_range > 0.0 {
            let ratio = rng.gen_range(1.0 - cfg.pitch_range..=1.0 + cfg.pitch_range);
            let src = self.audio.clone();
            for (n, v) in self.audio.iter_mut().enumerate() {
                let pos = n as f64 * ratio;
                let i = pos.floor() as usize;
                let f = pos - i as f64;
                let a = src.get(i).copied().unwrap_or(0.0);
                let b = src.get(i + 1).copied().unwrap_or(0.0);
                *v = a * (1.0 - f) + b * f;
            }
        }
    }

    fn speed_crop(&mut self, cfg: &ManipulationConfig, min_frames: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let speed = *cfg.speeds.choose(rng).ok_or_else(|| Error::invalid("no speeds configured"))?;
        let t = self.frames;
        if speed == 0 || speed * min_frames.max(1) > t {
            return Err(Error::invalid(format!(
                "{t} frames cannot be sped up {speed}x and keep {min_frames} frames"
            )));
        }
        let keep: f64 = rng.gen_range(cfg.time_crop_min.min(1.0)..=1.0);
        let window = ((keep * t as f64).round() as usize).clamp(speed * min_frames.max(1), t);
        let start = rng.gen_range(0..=t - window);
        let out_frames = window / speed;
        let fl = self.frame_len();
        let mut video = Vec::with_capacity(out_frames * fl);
        for j in 0..out_frames {
            let f = start + speed * j;
            video.extend_from_slice(&self.video[f * fl..(f + 1) * fl]);
        }
        let r = self.audio.len() as f64 / t as f64;
        let a_len = (out_frames as f64 * r).round() as usize;
        let a_start = ((start as f64 * r).round() as usize).min(self.audio.len() - speed * a_len);
        let audio = (0..a_len).map(|m| self.audio[a_start + speed * m]).collect();
        self.timeline = TimelineMap {
            frame_start: self.timeline.frame_start + self.timeline.stride * start,
            sample_start: self.timeline.sample_start + self.timeline.stride * a_start,
            stride: self.timeline.stride * speed,
            reversed: self.timeline.reversed,
        };
        self.video = video;
        self.audio = audio;
        self.frames = out_frames;
        Ok(())
    }
}

fn sample_bilinear(src: &[f64], h: usize, w: usize, c: usize, k: usize, y: f64, x: f64) -> f64 {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + k];
    (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy) + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy
}

/// Multiplies the spectrum between `lo` and `hi` Hz by `gain`.
fn scale_band(audio: &mut [f64], sample_rate: f64, lo: f64, hi: f64, gain: f64) {
    let n = audio.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = audio.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * sample_rate / n as f64;
        if (lo..=hi).contains(&freq) {
            *b *= gain;
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, b) in audio.iter_mut().zip(&buf) {
        *v = (b.re / n as f64).clamp(-1.0, 1.0);
    }
}

/// Manipulated copy of every split of a clean dataset.
pub fn manipulate_dataset(clean: &Dataset, suite: Suite, seed: u64, cfg: &ManipulationConfig) -> Result<Dataset> {
    if clean.manifest.derived.is_some() {
        return Err(Error::invalid("dataset is already manipulated"));
    }
    let gen = &clean.manifest.config;
    let mut splits = std::collections::BTreeMap::new();
    for (split, samples) in &clean.splits {
        let out = samples
            .iter()
            .map(|s| manipulate(s, gen, suite, seed, cfg))
            .collect::<Result<Vec<_>>>()?;
        splits.insert(*split, out);
    }
    let mut manifest = clean.manifest.clone();
    manifest.derived = Some(Derivation {
        suite: suite.name().to_string(),
        seed,
    });
    Ok(Dataset { manifest, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_instance;

    fn sample() -> AvSample {
        generate_instance(&GenConfig::default(), 11, 3)
    }

    #[test]
    fn combined_suite_draws_one_per_category() {
        for seed in 0..20 {
            let mut rng = rng_for(seed, &[]);
            let p = plan(Suite::C, &mut rng);
            let cats: Vec<Suite> = p.iter().map(|x| x.suite()).collect();
            assert_eq!(cats, vec![Suite::Ip, Suite::S, Suite::T]);
        }
        let out = manipulate(&sample(), &GenConfig::default(), Suite::C, 5, &ManipulationConfig::default()).unwrap();
        assert_eq!(out.meta.manipulations.len(), 3);
    }

    #[test]
    fn neutral_in_place_suite_is_identity() {
        let s = sample();
        let out = manipulate(&s, &GenConfig::default(), Suite::Ip, 1, &ManipulationConfig::neutral()).unwrap();
        assert_eq!(out.video, s.video);
        assert_eq!(out.waveform, s.waveform);
    }

    #[test]
    fn time_suite_keeps_modalities_aligned() {
        let s = sample();
        for seed in 0..10 {
            let out = manipulate(&s, &GenConfig::default(), Suite::T, seed, &ManipulationConfig::default()).unwrap();
            let m = &out.meta;
            assert!(m.frames >= 16);
            assert!(m.timeline.stride == 2 || m.timeline.stride == 4);
            let r = s.meta.samples as f64 / s.meta.frames as f64;
            assert_eq!(m.samples as f64 / m.frames as f64, r);
            for j in [0, m.frames / 2, m.frames - 1] {
                let f = m.timeline.source_frame(j, m.frames);
                let a = m.timeline.source_sample((j as f64 * r).round() as usize, m.samples);
                assert_eq!(a as f64, f as f64 * r, "frame {j} of seed {seed}");
                let want = &s.video[f * s.frame_len()..(f + 1) * s.frame_len()];
                assert_eq!(&out.video[j * s.frame_len()..(j + 1) * s.frame_len()], want);
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_instance() {
        let s = sample();
        let a = manipulate(&s, &GenConfig::default(), Suite::S, 3, &ManipulationConfig::default()).unwrap();
        let b = manipulate(&s, &GenConfig::default(), Suite::S, 3, &ManipulationConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = manipulate(&s, &GenConfig::default(), Suite::S, 4, &ManipulationConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("x".parse::<Suite>().is_err());
    }
}
