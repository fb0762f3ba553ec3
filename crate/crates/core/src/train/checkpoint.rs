//! Checkpoint files: run config, weights, optimizer moments, batch-norm
//! statistics and memory banks in the checksummed container format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::AdamState;
use crate::container::{self, Section, CHECKPOINT_MAGIC};
use crate::contrastive::{Banks, MemoryBank};
use crate::error::{Error, Result};
use crate::model::{Model, ModelState, RunningStats};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub adam: AdamState,
    pub banks: Banks,
    /// Optimizer updates completed.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    capacity: usize,
    dim: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    step: usize,
    adam_t: u64,
    params: Vec<ParamEntry>,
    norms: Vec<usize>,
    banks: Vec<BankEntry>,
}

fn f64s(name: String, values: &[f64]) -> Section {
    Section {
        name,
        payload: container::f64_bytes(values),
    }
}

pub fn save(path: &Path, config: &RunConfig, model: &Model, state: &TrainState) -> Result<()> {
    model.check_state(&state.model)?;
    let specs = model.specs();
    let header = Header {
        config: config.clone(),
        config_hash: config.hash(),
        step: state.step,
        adam_t: state.adam.t,
        params: specs
            .iter()
            .map(|s| ParamEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
        norms: state.model.running.iter().map(|r| r.mean.len()).collect(),
        banks: state
            .banks
            .queues
            .iter()
            .map(|b| BankEntry {
                capacity: b.capacity(),
                dim: b.dim(),
                len: b.len(),
            })
            .collect(),
    };
    let mut sections = Vec::new();
    for (s, p) in specs.iter().zip(&state.model.params) {
        sections.push(f64s(format!("param/{}", s.name), p.data()));
    }
    for (s, m) in specs.iter().zip(&state.adam.m) {
        sections.push(f64s(format!("adam_m/{}", s.name), m));
    }
    for (s, v) in specs.iter().zip(&state.adam.v) {
        sections.push(f64s(format!("adam_v/{}", s.name), v));
    }
    for (i, r) in state.model.running.iter().enumerate() {
        sections.push(f64s(format!("bn/{i}/mean"), &r.mean));
        sections.push(f64s(format!("bn/{i}/var"), &r.var));
    }
    for (i, b) in state.banks.queues.iter().enumerate() {
        let flat: Vec<f64> = b.iter().flatten().copied().collect();
        sections.push(f64s(format!("bank/{i}"), &flat));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    container::write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &serde_json::to_vec(&header)?, &sections)
}

/// A loaded checkpoint with the model it describes.
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let (hbytes, sections) = container::read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: Header = serde_json::from_slice(&hbytes)?;
    let config = header.config;
    config.validate()?;
    let model = Model::new(&config.model, config.input_dims())?;
    let mut it = sections.into_iter();
    let mut next = |name: String| -> Result<Vec<f64>> {
        let s = it.next().ok_or_else(|| Error::Corrupt(format!("missing section {name}")))?;
        if s.name != name {
            return Err(Error::Corrupt(format!("expected section {name}, found {}", s.name)));
        }
        container::bytes_f64(&s.payload)
    };
    let specs = model.specs();
    if header.params.len() != specs.len() {
        return Err(Error::Corrupt("parameter count disagrees with the config".into()));
    }
    let mut params = Vec::with_capacity(specs.len());
    for s in specs {
        params.push(Tensor::new(s.shape.clone(), next(format!("param/{}", s.name))?)?);
    }
    let mut m = Vec::with_capacity(specs.len());
    for s in specs {
        m.push(next(format!("adam_m/{}", s.name))?);
    }
    let mut v = Vec::with_capacity(specs.len());
    for s in specs {
        v.push(next(format!("adam_v/{}", s.name))?);
    }
    let mut running = Vec::with_capacity(header.norms.len());
    for i in 0..header.norms.len() {
        running.push(RunningStats {
            mean: next(format!("bn/{i}/mean"))?,
            var: next(format!("bn/{i}/var"))?,
        });
    }
    let mut queues = Vec::with_capacity(header.banks.len());
    for (i, b) in header.banks.iter().enumerate() {
        let flat = next(format!("bank/{i}"))?;
        if flat.len() != b.len * b.dim {
            return Err(Error::Corrupt(format!("bank {i} length mismatch")));
        }
        let mut bank = MemoryBank::new(b.capacity, b.dim)?;
        for e in flat.chunks(b.dim) {
            bank.push_value(e)?;
        }
        queues.push(bank);
    }
    let model_state = ModelState { params, running };
    model.check_state(&model_state)?;
    if m.iter().zip(&model_state.params).any(|(x, p)| x.len() != p.len())
        || v.iter().zip(&model_state.params).any(|(x, p)| x.len() != p.len())
    {
        return Err(Error::Corrupt("optimizer moments do not match the parameters".into()));
    }
    Ok(Checkpoint {
        config,
        model,
        state: TrainState {
            model: model_state,
            adam: AdamState { m, v, t: header.adam_t },
            banks: Banks { queues },
            step: header.step,
        },
    })
}
