//! Paired audio-video samples, the synthetic generator and the on-disk
//! split container.

pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{self, Section, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
pub use synth::{generate_instance, ClassPrototype, GenConfig};

pub const DATASET_VERSION: u32 = 1;

/// Maps a sample's local indices back onto its source timeline:
/// local frame `j` is source frame `frame_start + stride * j` (mirrored
/// within the window when `reversed`), and likewise for audio samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineMap {
    pub frame_start: usize,
    pub sample_start: usize,
    pub stride: usize,
    pub reversed: bool,
}

impl TimelineMap {
    pub fn identity() -> Self {
        Self {
            frame_start: 0,
            sample_start: 0,
            stride: 1,
            reversed: false,
        }
    }

    /// Source frame of local frame `j` in a sample of `len` frames.
    pub fn source_frame(&self, j: usize, len: usize) -> usize {
        let j = if self.reversed { len - 1 - j } else { j };
        self.frame_start + self.stride * j
    }

    pub fn source_sample(&self, m: usize, len: usize) -> usize {
        let m = if self.reversed { len - 1 - m } else { m };
        self.sample_start + self.stride * m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub instance_id: usize,
    pub class_id: usize,
    pub frames: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub base_freq: f64,
    /// Chirp sweep rate in Hz/s of the source timeline.
    pub chirp_slope: f64,
    pub sweep_period: usize,
    pub sweep_offset: usize,
    pub timeline: TimelineMap,
    /// Names of manipulations applied after generation, in order.
    pub manipulations: Vec<String>,
}

/// One paired clip: video `[frames, H, W, C]` in `[0, 1]` and a mono
/// waveform in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AvSample {
    pub meta: SampleMeta,
    pub video: Vec<f32>,
    pub waveform: Vec<f32>,
}

impl AvSample {
    pub fn frame_len(&self) -> usize {
        self.video.len() / self.meta.frames
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn file(self) -> String {
        format!("{}.avc", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: GenConfig,
    /// Instance ids per split present on disk.
    pub splits: BTreeMap<Split, Vec<usize>>,
    /// Manipulation suite and seed when this dataset was derived from a
    /// clean one.
    pub derived: Option<Derivation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub suite: String,
    pub seed: u64,
}

impl DatasetManifest {
    /// Splits are disjoint; an underived dataset covers every instance.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for ids in self.splits.values() {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::Corrupt(format!("instance {id} appears in two splits")));
                }
            }
        }
        if self.derived.is_none() && seen.len() != self.config.num_instances() {
            return Err(Error::Corrupt("splits do not cover every instance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<Split, Vec<AvSample>>,
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    manifest: DatasetManifest,
    split: Split,
    samples: Vec<SampleMeta>,
}

/// Generates the full corpus for `seed`.
pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut splits: BTreeMap<Split, Vec<AvSample>> = BTreeMap::new();
    for id in 0..cfg.num_instances() {
        let split = if cfg.is_test(id) { Split::Test } else { Split::Train };
        splits.entry(split).or_default().push(generate_instance(cfg, seed, id));
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed,
        config: cfg.clone(),
        splits: splits
            .iter()
            .map(|(s, v)| (*s, v.iter().map(|x| x.meta.instance_id).collect()))
            .collect(),
        derived: None,
    };
    manifest.validate()?;
    Ok(Dataset { manifest, splits })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Result<&[AvSample]> {
        self.splits
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("dataset has no {} split", split.name())))
    }

    /// Writes `manifest.json` plus one container file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        for (split, samples) in &self.splits {
            let header = SplitHeader {
                manifest: self.manifest.clone(),
                split: *split,
                samples: samples.iter().map(|s| s.meta.clone()).collect(),
            };
            let mut sections = Vec::with_capacity(2 * samples.len());
            for s in samples {
                sections.push(Section {
                    name: format!("video/{}", s.meta.instance_id),
                    payload: container::f32_bytes(&s.video),
                });
                sections.push(Section {
                    name: format!("audio/{}", s.meta.instance_id),
                    payload: container::f32_bytes(&s.waveform),
                });
            }
            container::write(
                &dir.join(split.file()),
                DATASET_MAGIC,
                DATASET_VERSION,
                &serde_json::to_vec(&header)?,
                &sections,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: DATASET_VERSION,
            });
        }
        manifest.validate()?;
        let mut splits = BTreeMap::new();
        for (&split, ids) in &manifest.splits {
            let (hbytes, sections) = container::read(&dir.join(split.file()), DATASET_MAGIC, DATASET_VERSION)?;
            let header: SplitHeader = serde_json::from_slice(&hbytes)?;
            if header.manifest != manifest || header.split != split {
                return Err(Error::Corrupt(format!("{} header disagrees with manifest", split.name())));
            }
            if sections.len() != 2 * header.samples.len() || header.samples.len() != ids.len() {
                return Err(Error::Corrupt(format!("{} sample count mismatch", split.name())));
            }
            let mut samples = Vec::with_capacity(ids.len());
            for (meta, pair) in header.samples.into_iter().zip(sections.chunks(2)) {
                let video = container::bytes_f32(&pair[0].payload)?;
                let waveform = container::bytes_f32(&pair[1].payload)?;
                if meta.frames == 0
                    || video.len() % meta.frames != 0
                    || waveform.len() != meta.samples
                    || pair[0].name != format!("video/{}", meta.instance_id)
                {
                    return Err(Error::Corrupt(format!("sample {} payload mismatch", meta.instance_id)));
                }
                samples.push(AvSample { meta, video, waveform });
            }
            splits.insert(split, samples);
        }
        Ok(Self { manifest, splits })
    }
}

/// Number of full batches per epoch.
pub fn steps_per_epoch(split_len: usize, batch_size: usize) -> usize {
    if batch_size == 0 {
        0
    } else {
        split_len / batch_size
    }
}

/// Indices into `samples` for batch `step` of `epoch`: each epoch is a
/// seeded permutation consumed in contiguous chunks, so no sample repeats
/// within an epoch.
pub fn sample_batch(samples: &[AvSample], batch_size: usize, seed: u64, epoch: usize, step: usize) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot sample from an empty split"));
    }
    if batch_size == 0 || batch_size > samples.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} for a split of {}",
            samples.len()
        )));
    }
    if step >= steps_per_epoch(samples.len(), batch_size) {
        return Err(Error::invalid(format!("step {step} beyond the end of the epoch")));
    }
    let mut perm: Vec<usize> = (0..samples.len()).collect();
    perm.shuffle(&mut rng_for(seed, &[tag::BATCH, epoch as u64]));
    Ok(perm[step * batch_size..(step + 1) * batch_size].to_vec())
}
