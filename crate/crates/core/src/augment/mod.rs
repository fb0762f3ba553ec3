//! Temporal views, spectrograms, spatial augmentation and manipulation suites.

pub mod manipulate;
pub mod spatial;
pub mod stft;
pub mod temporal;

pub use manipulate::{manipulate, manipulate_dataset, plan, ManipulationConfig, Primitive, Suite};
pub use spatial::{spatial_augment, CropBox, SpatialParams, VideoClip};
pub use stft::{hann, log_spectrogram, spectrogram_speed_variant, stft, Spectrogram, StftConfig};
pub use temporal::{aligned_pair_transform, map_to_audio, temporal_transform, Direction, Speed, TemporalParams};
