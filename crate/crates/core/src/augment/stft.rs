//! Short-time Fourier transform spectrograms.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::temporal::{Direction, Speed};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// Side of the square spectrogram fed to the audio encoder.
    pub size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 256,
            hop: 64,
            size: 64,
        }
    }
}

/// Row-major `[freq_bins, frames]` time-frequency image.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub freq_bins: usize,
    pub frames: usize,
    pub n_fft: usize,
    pub hop: usize,
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Complex one-sided spectra (`n_fft / 2 + 1` bins) of every Hann-windowed
/// frame.
pub fn stft(wave: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<Complex<f64>>>> {
    if n_fft == 0 || hop == 0 {
        return Err(Error::invalid("n_fft and hop must be positive"));
    }
    if wave.len() < n_fft {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than n_fft {n_fft}",
            wave.len()
        )));
    }
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let frames = 1 + (wave.len() - n_fft) / hop;
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        for (b, (x, w)) in buf.iter_mut().zip(wave[f * hop..f * hop + n_fft].iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].to_vec());
    }
    Ok(out)
}

impl Spectrogram {
    /// Magnitude spectrogram (no compression, no resizing).
    pub fn magnitude(wave: &[f64], n_fft: usize, hop: usize) -> Result<Self> {
        let frames = stft(wave, n_fft, hop)?;
        let bins = n_fft / 2 + 1;
        let mut values = vec![0.0; bins * frames.len()];
        for (t, spec) in frames.iter().enumerate() {
            for (k, c) in spec.iter().enumerate() {
                values[k * frames.len() + t] = c.norm();
            }
        }
        Ok(Self {
            values,
            freq_bins: bins,
            frames: frames.len(),
            n_fft,
            hop,
        })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn log1p(mut self) -> Self {
        self.values.iter_mut().for_each(|v| *v = v.ln_1p());
        self
    }

    /// Frequency bin with the largest value in `frame` (lowest bin on ties).
    pub fn peak_bin(&self, frame: usize) -> usize {
        (0..self.freq_bins).fold(0, |best, k| if self.at(k, frame) > self.at(best, frame) { k } else { best })
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, freq_bins: usize, frames: usize) -> Result<Self> {
        if freq_bins == 0 || frames == 0 {
            return Err(Error::invalid("resize to an empty spectrogram"));
        }
        Ok(Self {
            values: bilinear(&self.values, self.freq_bins, self.frames, freq_bins, frames),
            freq_bins,
            frames,
            n_fft: self.n_fft,
            hop: self.hop,
        })
    }

    /// Stretches the time axis by `1 / speed`, leaving frequencies alone.
    pub fn resize_time(&self, speed: Speed) -> Result<Self> {
        let frames = (self.frames as f64 / speed.factor() as f64).round() as usize;
        if frames < 2 {
            return Err(Error::invalid("time axis shorter than 2 frames after resizing"));
        }
        self.resize(self.freq_bins, frames)
    }
}

pub(crate) fn bilinear(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if in_h == out_h && in_w == out_w {
        return src.to_vec();
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (coords(out_h, in_h), coords(out_w, in_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bot = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Encoder input: log1p-compressed magnitude resized to `size x size`.
pub fn log_spectrogram(wave: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    Spectrogram::magnitude(wave, cfg.n_fft, cfg.hop)?
        .log1p()
        .resize(cfg.size, cfg.size)
}

/// Speed and direction realized on the spectrogram instead of the
/// waveform: `window` is the full-rate source span (`speed * clip` samples).
/// The time axis is shrunk by `1 / speed`, so pitch is unchanged. With
/// `randomize_hop` the STFT hop is drawn from `[0.75, 1.25] * hop` first.
pub fn spectrogram_speed_variant(
    window: &[f64],
    speed: Speed,
    direction: Direction,
    randomize_hop: bool,
    rng: &mut impl Rng,
    cfg: &StftConfig,
) -> Result<Spectrogram> {
    let hop = if randomize_hop {
        let lo = ((0.75 * cfg.hop as f64).round() as usize).max(1);
        let hi = ((1.25 * cfg.hop as f64).round() as usize).max(lo);
        rng.gen_range(lo..=hi)
    } else {
        cfg.hop
    };
    let reversed: Vec<f64>;
    let wave = match direction {
        Direction::Forward => window,
        Direction::Backward => {
            reversed = window.iter().rev().copied().collect();
            &reversed
        }
    };
    Spectrogram::magnitude(wave, cfg.n_fft, hop)?
        .log1p()
        .resize_time(speed)?
        .resize(cfg.size, cfg.size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let s = log_spectrogram(&vec![0.0; 2048], &StftConfig::default()).unwrap();
        assert_eq!((s.freq_bins, s.frames), (64, 64));
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(Spectrogram::magnitude(&[0.0; 100], 256, 64).is_err());
    }

    #[test]
    fn frame_count() {
        let s = Spectrogram::magnitude(&vec![0.1; 2048], 256, 64).unwrap();
        assert_eq!(s.frames, 29);
        assert_eq!(s.freq_bins, 129);
    }

    #[test]
    fn time_resize_shrinks_by_speed() {
        let s = Spectrogram {
            values: vec![1.0; 10 * 64],
            freq_bins: 10,
            frames: 64,
            n_fft: 18,
            hop: 1,
        };
        let r = s.resize_time(Speed::X4).unwrap();
        assert_eq!((r.freq_bins, r.frames), (10, 16));
        let short = Spectrogram { frames: 4, values: vec![1.0; 40], ..s };
        assert!(short.resize_time(Speed::X8).is_err());
    }

    #[test]
    fn identity_resize_is_exact() {
        let v: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        assert_eq!(bilinear(&v, 3, 4, 3, 4), v);
    }
}
