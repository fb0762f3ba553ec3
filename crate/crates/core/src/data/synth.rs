//! Procedural paired audio-video corpus.
//!
//! Every class has a prototype: a Gaussian blob drifting across the frame in
//! a class-specific direction (on top of a shared downward fall) with a
//! sawtooth brightness envelope, and a repeating upward chirp with a
//! class-specific base frequency, sweep period and harmonic mix. Every
//! instance adds a static grating texture, a faint tone, jittered phases and
//! additive noise. Video frame `t` and waveform sample `round(t * L / T)`
//! describe the same instant.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AvSample, SampleMeta, TimelineMap};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub instances_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: u32,
    /// Frames per training clip; the timeline must hold 8 such clips.
    pub clip_frames: usize,
    pub test_fraction: f64,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            instances_per_class: 32,
            frames: 128,
            height: 16,
            width: 16,
            channels: 1,
            samples: 16384,
            sample_rate: 8000,
            clip_frames: 16,
            test_fraction: 0.25,
            noise: 0.02,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.instances_per_class < 2 {
            return Err(Error::invalid("need at least 2 instances per class"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.sample_rate == 0 {
            return Err(Error::invalid("zero-sized frame or sample rate"));
        }
        if self.clip_frames == 0 || self.frames < 8 * self.clip_frames {
            return Err(Error::invalid(format!(
                "{} frames cannot hold an 8x-subsampled clip of {} frames",
                self.frames, self.clip_frames
            )));
        }
        if self.samples < self.frames {
            return Err(Error::invalid("fewer audio samples than video frames"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn num_instances(&self) -> usize {
        self.classes * self.instances_per_class
    }

    /// Waveform samples per video frame.
    pub fn samples_per_frame(&self) -> f64 {
        self.samples as f64 / self.frames as f64
    }

    /// Instances per class held out for the test split.
    pub fn test_per_class(&self) -> usize {
        let t = (self.instances_per_class as f64 * self.test_fraction).round() as usize;
        t.min(self.instances_per_class - 1)
    }

    /// Instance ids are `class * instances_per_class + k`; the last
    /// `test_per_class` instances of each class form the test split.
    pub fn is_test(&self, instance_id: usize) -> bool {
        instance_id % self.instances_per_class >= self.instances_per_class - self.test_per_class()
    }
}

/// Generator parameters shared by all instances of a class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub drift_angle: f64,
    pub blob_radius: f64,
    pub flash_period: f64,
    pub base_freq: f64,
    pub sweep_hz: f64,
    pub sweep_period: usize,
    pub harmonic: f64,
}

impl ClassPrototype {
    pub fn new(cfg: &GenConfig, class_id: usize) -> Self {
        let c = class_id as f64;
        let span = (cfg.classes - 1).max(1) as f64;
        // Chirp bands at 1x stay below the 2x band of the lowest class.
        let nyq = cfg.sample_rate as f64 / 2.0;
        let band_lo = 0.05 * nyq;
        Self {
            drift_angle: 2.0 * PI * c / cfg.classes as f64,
            blob_radius: 1.2 + 1.6 * ((class_id * 3) % cfg.classes) as f64 / span,
            flash_period: 12.0 + 2.0 * ((class_id * 5) % cfg.classes) as f64,
            base_freq: band_lo * (1.0 + 0.5 * c / span),
            sweep_hz: 0.4 * band_lo,
            sweep_period: (cfg.samples / 16).max(8) * (4 + (class_id * 3) % cfg.classes) / 4,
            harmonic: 0.6 * ((class_id % 3) as f64) / 2.0,
        }
    }

    /// Sweep rate of the chirp in Hz per second (always positive).
    pub fn chirp_slope(&self, sample_rate: u32) -> f64 {
        self.sweep_hz / (self.sweep_period as f64 / sample_rate as f64)
    }
}

/// Rise of the video background over the whole timeline; audio gain
/// rises from `1 - 1.5 * TIMELINE_RAMP` to 1 alongside it.
const TIMELINE_RAMP: f64 = 0.4;

fn wrap(d: f64, n: f64) -> f64 {
    (d + n / 2.0).rem_euclid(n) - n / 2.0
}

/// Deterministically synthesizes one instance.
pub fn generate_instance(cfg: &GenConfig, seed: u64, instance_id: usize) -> AvSample {
    let class_id = instance_id / cfg.instances_per_class;
    let proto = ClassPrototype::new(cfg, class_id);
    let mut rng = rng_for(seed, &[tag::INSTANCE, instance_id as u64]);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let (t_full, h, w, ch) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let (hf, wf) = (h as f64, w as f64);

    // video: static instance grating + drifting flashing blob, on a
    // background that brightens steadily over the timeline so absolute
    // position (and hence clip order) is recoverable
    let theta: f64 = rng.gen_range(0.0..PI);
    let cycles: f64 = rng.gen_range(1.5..3.5);
    let tex_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let (ky, kx) = (2.0 * PI * cycles * theta.sin() / hf, 2.0 * PI * cycles * theta.cos() / wf);
    let speed_jitter: f64 = rng.gen_range(0.9..1.1);
    let vy = 0.25 * speed_jitter + 0.2 * proto.drift_angle.sin();
    let vx = 0.2 * proto.drift_angle.cos() * speed_jitter;
    let (y0, x0): (f64, f64) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
    let flash_phase: f64 = rng.gen_range(0.0..1.0);
    let channel_gain: Vec<f64> = (0..ch).map(|_| rng.gen_range(0.8..1.2)).collect();

    let mut video = Vec::with_capacity(t_full * h * w * ch);
    for t in 0..t_full {
        let tf = t as f64;
        let (cy, cx) = ((y0 + vy * tf).rem_euclid(hf), (x0 + vx * tf).rem_euclid(wf));
        let saw = (tf / proto.flash_period + flash_phase).fract();
        let brightness = 0.15 + 0.45 * saw;
        let background = 0.15 + TIMELINE_RAMP * tf / t_full as f64;
        let r2 = 2.0 * proto.blob_radius * proto.blob_radius;
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let tex = 0.15 * (ky * yf + kx * xf + tex_phase).sin();
                let (dy, dx) = (wrap(yf - cy, hf), wrap(xf - cx, wf));
                let blob = brightness * (-(dy * dy + dx * dx) / r2).exp();
                for &gain in &channel_gain {
                    let v = background + tex + gain * blob + cfg.noise * normal.sample(&mut rng);
                    video.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }

    // audio: repeating upward chirp + instance tone, fading in over the
    // timeline
    let sr = cfg.sample_rate as f64;
    let freq_jitter: f64 = rng.gen_range(-0.01..0.01) * proto.base_freq;
    let sweep_offset: usize = rng.gen_range(0..proto.sweep_period);
    let tone_freq: f64 = rng.gen_range(0.15..0.25) * sr / 2.0;
    let tone_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut waveform = Vec::with_capacity(cfg.samples);
    for n in 0..cfg.samples {
        let pos = ((n + sweep_offset) % proto.sweep_period) as f64 / proto.sweep_period as f64;
        let f = proto.base_freq + freq_jitter + proto.sweep_hz * pos;
        phase = (phase + 2.0 * PI * f / sr).rem_euclid(2.0 * PI);
        let tone = 0.12 * (2.0 * PI * tone_freq * n as f64 / sr + tone_phase).sin();
        let gain = 1.0 - TIMELINE_RAMP * (1.0 - n as f64 / cfg.samples as f64) * 1.5;
        let v = gain * (0.5 * phase.sin() + 0.5 * proto.harmonic * (2.0 * phase).sin() + tone)
            + cfg.noise * normal.sample(&mut rng);
        waveform.push(v.clamp(-1.0, 1.0) as f32);
    }

    AvSample {
        meta: SampleMeta {
            instance_id,
            class_id,
            frames: t_full,
            samples: cfg.samples,
            sample_rate: cfg.sample_rate,
            base_freq: proto.base_freq + freq_jitter,
            chirp_slope: proto.chirp_slope(cfg.sample_rate),
            sweep_period: proto.sweep_period,
            sweep_offset,
            timeline: TimelineMap::identity(),
            manipulations: Vec::new(),
        },
        video,
        waveform,
    }
}
