use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{ManipulationConfig, StftConfig};
use crate::contrastive::LossConfig;
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::{InputDims, ModelConfig};

/// How playback speed is realized on audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioSpeedMode {
    /// Subsample the waveform before the STFT (pitch rises with speed).
    Subsample,
    /// STFT at full rate, then shrink the spectrogram's time axis.
    Resize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// Side of the square spectrogram.
    pub size: usize,
    pub speed_mode: AudioSpeedMode,
    pub randomize_hop: bool,
}

impl Default for AudioConfig {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self {
            n_fft: stft.n_fft,
            hop: stft.hop,
            size: stft.size,
            speed_mode: AudioSpeedMode::Subsample,
            randomize_hop: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    /// Weight of the temporal task losses in the total objective.
    pub temporal_weight: f64,
    /// Smallest crop side kept by spatial augmentation, as a fraction.
    pub crop_scale: f64,
    pub spatial_augment: bool,
    pub log_every: usize,
    /// Epochs between checkpoints; the final epoch is always saved.
    pub checkpoint_every: usize,
    /// Epochs between evaluations; 0 disables them.
    pub eval_every: usize,
}

impl AudioConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
            size: self.size,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr_max: 3e-3,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            warmup_epochs: 1,
            temporal_weight: 0.5,
            crop_scale: 0.8,
            spatial_augment: true,
            log_every: 1,
            checkpoint_every: 10,
            eval_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Temporal crops averaged per clip.
    pub crops: usize,
    pub ks: Vec<usize>,
    pub probe_iters: usize,
    pub probe_lr: f64,
    /// Labelled clips drawn per test instance for task accuracy.
    pub task_rounds: usize,
    pub manipulation: ManipulationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            crops: 4,
            ks: vec![1, 5, 20],
            probe_iters: 500,
            probe_lr: 0.1,
            task_rounds: 4,
            manipulation: ManipulationConfig::default(),
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; when absent the corpus is generated in memory
    /// from `[data]` and `seed`. Relative paths resolve against the config
    /// file's directory.
    pub dataset: Option<PathBuf>,
    pub data: GenConfig,
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: None,
            data: GenConfig::default(),
            audio: AudioConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolving `dataset` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(path.parent().unwrap_or(Path::new(".")).join(d));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if !(t.lr_max > 0.0) {
            return Err(Error::Config("train.lr_max must be positive".into()));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if t.epochs == 0 || t.warmup_epochs > t.epochs {
            return Err(Error::Config("train.warmup_epochs must not exceed train.epochs".into()));
        }
        if !(0.0..1.0).contains(&t.betas[0]) || !(0.0..1.0).contains(&t.betas[1]) {
            return Err(Error::Config("train.betas must lie in [0, 1)".into()));
        }
        if !(t.crop_scale > 0.0 && t.crop_scale <= 1.0) {
            return Err(Error::Config("train.crop_scale must lie in (0, 1]".into()));
        }
        if self.eval.crops == 0 || self.eval.ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("eval.crops and eval.ks must be positive".into()));
        }
        let clip_samples = (self.data.clip_frames as f64 * self.data.samples_per_frame()).round() as usize;
        if clip_samples < self.audio.n_fft {
            return Err(Error::Config(format!(
                "a clip of {clip_samples} samples is shorter than audio.n_fft"
            )));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            frames: self.data.clip_frames,
            height: self.data.height,
            width: self.data.width,
            channels: self.data.channels,
            spec_size: self.audio.size,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
