use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Playback speed classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speed {
    X1,
    X2,
    X4,
    X8,
}

impl Speed {
    pub const ALL: [Speed; 4] = [Speed::X1, Speed::X2, Speed::X4, Speed::X8];

    /// Subsampling stride.
    pub fn factor(self) -> usize {
        1 << self.class()
    }

    pub fn class(self) -> usize {
        match self {
            Speed::X1 => 0,
            Speed::X2 => 1,
            Speed::X4 => 2,
            Speed::X8 => 3,
        }
    }

    pub fn from_class(class: usize) -> Result<Self> {
        Self::ALL
            .get(class)
            .copied()
            .ok_or_else(|| Error::invalid(format!("speed class {class} out of range")))
    }

    pub fn from_factor(factor: usize) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|s| s.factor() == factor)
            .ok_or_else(|| Error::invalid(format!("unsupported speed factor {factor}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn class(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }

    pub fn from_class(class: usize) -> Result<Self> {
        match class {
            0 => Ok(Direction::Forward),
            1 => Ok(Direction::Backward),
            _ => Err(Error::invalid(format!("direction class {class} out of range"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

/// A temporal view: subsample every `speed` steps from `crop_start`, take
/// `out_len` items, and reverse them when playing backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalParams {
    pub speed: Speed,
    pub direction: Direction,
    pub crop_start: usize,
    pub out_len: usize,
}

impl TemporalParams {
    pub fn forward(crop_start: usize, out_len: usize) -> Self {
        Self {
            speed: Speed::X1,
            direction: Direction::Forward,
            crop_start,
            out_len,
        }
    }

    /// Source items covered by the window.
    pub fn span(&self) -> usize {
        self.speed.factor() * self.out_len
    }

    pub fn check(&self, source_len: usize) -> Result<()> {
        if self.out_len == 0 || self.crop_start + self.span() > source_len {
            return Err(Error::invalid(format!(
                "window start {} span {} exceeds source length {source_len}",
                self.crop_start,
                self.span()
            )));
        }
        Ok(())
    }

    /// Uniformly random crop for the given speed and direction.
    pub fn sample_crop(rng: &mut impl Rng, speed: Speed, direction: Direction, out_len: usize, source_len: usize) -> Result<Self> {
        let span = speed.factor() * out_len;
        if span > source_len || out_len == 0 {
            return Err(Error::invalid(format!(
                "source of {source_len} too short for {out_len} items at {}x",
                speed.factor()
            )));
        }
        Ok(Self {
            speed,
            direction,
            crop_start: rng.gen_range(0..=source_len - span),
            out_len,
        })
    }

    /// Source index of every output position.
    pub fn indices(&self, source_len: usize) -> Result<Vec<usize>> {
        self.check(source_len)?;
        let s = self.speed.factor();
        let mut idx: Vec<usize> = (0..self.out_len).map(|j| self.crop_start + s * j).collect();
        if self.direction == Direction::Backward {
            idx.reverse();
        }
        Ok(idx)
    }
}

/// Applies `params` to a sequence of items, each `item_len` values wide
/// (1 for a waveform, `H * W * C` for a frame sequence).
pub fn temporal_transform<T: Copy>(source: &[T], item_len: usize, params: &TemporalParams) -> Result<Vec<T>> {
    if item_len == 0 || source.len() % item_len != 0 {
        return Err(Error::invalid("source length is not a multiple of the item length"));
    }
    let idx = params.indices(source.len() / item_len)?;
    let mut out = Vec::with_capacity(idx.len() * item_len);
    for i in idx {
        out.extend_from_slice(&source[i * item_len..(i + 1) * item_len]);
    }
    Ok(out)
}

/// Audio window covering the same instants as a video window, for a
/// timeline with `samples_per_frame` audio samples per frame. The audio
/// window keeps the video window's midpoint (to within half a sample) and
/// its speed and direction.
pub fn map_to_audio(video: &TemporalParams, samples_per_frame: f64, audio_len: usize) -> Result<TemporalParams> {
    let s = video.speed.factor() as f64;
    let out_len = (video.out_len as f64 * samples_per_frame).round() as usize;
    let mid = samples_per_frame * (video.crop_start as f64 + s * video.out_len as f64 / 2.0);
    let start = (mid - s * out_len as f64 / 2.0).round().max(0.0) as usize;
    let span = video.speed.factor() * out_len;
    if span > audio_len || out_len == 0 {
        return Err(Error::invalid("mapped audio window longer than the waveform"));
    }
    let crop_start = if start + span > audio_len {
        let overflow = start + span - audio_len;
        if overflow > video.speed.factor() {
            return Err(Error::invalid("mapped audio window out of range"));
        }
        start - overflow
    } else {
        start
    };
    Ok(TemporalParams {
        speed: video.speed,
        direction: video.direction,
        crop_start,
        out_len,
    })
}

/// Applies one temporal view to both modalities of a sample.
/// `video` is `[frames, frame_len]`; returns the video clip, the waveform
/// clip and the audio parameters used.
pub fn aligned_pair_transform(
    video: &[f32],
    frames: usize,
    waveform: &[f32],
    params: &TemporalParams,
) -> Result<(Vec<f32>, Vec<f32>, TemporalParams)> {
    if frames == 0 || video.len() % frames != 0 {
        return Err(Error::invalid("video length is not a multiple of the frame count"));
    }
    let frame_len = video.len() / frames;
    let audio = map_to_audio(params, waveform.len() as f64 / frames as f64, waveform.len())?;
    Ok((
        temporal_transform(video, frame_len, params)?,
        temporal_transform(waveform, 1, &audio)?,
        audio,
    ))
}
