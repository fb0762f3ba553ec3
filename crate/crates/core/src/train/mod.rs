//! Optimization, the training loop, gradient checking and ablation grids.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod step;

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use batch::{eval_crops, make_batch, step_stream, Batch};
pub use checkpoint::{Checkpoint, TrainState, CHECKPOINT_VERSION};
pub use config::{AudioConfig, AudioSpeedMode, EvalConfig, RunConfig, TrainConfig};
pub use optim::{lr_at, AdamState, AdamW};
pub use step::{ssl_forward, LossValues, SslOutput};

use crate::augment::Suite;
use crate::contrastive::{Banks, Variant};
use crate::data::{generate_dataset, sample_batch, steps_per_epoch, AvSample, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, FeatureKind};
use crate::model::{Forward, Mode, Model};
use crate::rng::{rng_for, tag};
use crate::tensor::{finite_diff_check, Coords, GradCheckReport, Graph, Tensor};

/// The run's corpus: the dataset directory when configured, otherwise
/// generated in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = match &cfg.dataset {
        Some(dir) => Dataset::load(dir)?,
        None => generate_dataset(&cfg.data, cfg.seed)?,
    };
    if data.manifest.config != cfg.data {
        return Err(Error::Config("dataset was generated with a different [data] section".into()));
    }
    Ok(data)
}

impl RunConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.train.betas[0],
            beta2: self.train.betas[1],
            eps: self.train.adam_eps,
            weight_decay: self.train.weight_decay,
        }
    }
}

/// Fresh model state, optimizer moments and empty banks.
pub fn init_state(model: &Model, cfg: &RunConfig) -> Result<TrainState> {
    let params = model.init(cfg.seed);
    Ok(TrainState {
        adam: AdamState::new(&params.params),
        banks: Banks::new(&cfg.loss, cfg.model.embed_dim)?,
        model: params,
        step: 0,
    })
}

fn diverged(step: usize, detail: impl Into<String>) -> Error {
    Error::Diverged {
        step,
        detail: detail.into(),
    }
}

/// One optimizer update on `batch`: forward, backward, AdamW, running
/// statistics, then bank pushes.
pub fn train_step(model: &Model, state: &mut TrainState, batch: &Batch, cfg: &RunConfig, lr: f64) -> Result<LossValues> {
    let step = state.step;
    let g = Graph::new();
    let vars = state.model.bind(&g, true)?;
    let mut f = Forward::new(&g, &vars, &state.model.running, Mode::Train);
    let out = ssl_forward(&mut f, model, batch, &state.banks, cfg).map_err(|e| match e {
        Error::NonFinite { op } => diverged(step, format!("{op} produced a non-finite value in the forward pass")),
        e => e,
    })?;
    let stats = f.take_stats();
    let losses = LossValues::read(&g, &out)?;
    if !losses.total.is_finite() {
        return Err(diverged(step, serde_json::to_string(&losses)?));
    }
    let grads = g.backward(out.total).map_err(|e| match e {
        Error::NonFinite { .. } => diverged(step, format!("non-finite gradient; losses {}", serde_json::to_string(&losses).unwrap_or_default())),
        e => e,
    })?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let embeds = match (out.embed_video, out.embed_audio) {
        (Some(v), Some(a)) => Some((
            [g.value(v[0]).clone(), g.value(v[1]).clone()],
            [g.value(a[0]).clone(), g.value(a[1]).clone()],
        )),
        _ => None,
    };
    drop(g);
    cfg.optimizer().step(&mut state.model.params, &grads, &mut state.adam, lr)?;
    state.model.apply_stats(&stats);
    if let Some((v, a)) = embeds {
        state.banks.update([&v[0], &v[1]], [&a[0], &a[1]])?;
    }
    state.step += 1;
    Ok(losses)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        config_hash: String,
        epoch: usize,
        step: usize,
        lr: f64,
        losses: LossValues,
    },
    Epoch {
        config_hash: String,
        epoch: usize,
        step: usize,
        mean_loss: f64,
    },
    Eval {
        config_hash: String,
        epoch: usize,
        step: usize,
        report: EvalReport,
    },
}

/// Reads every record of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Mean loss of each epoch run in this invocation.
    pub epoch_losses: Vec<f64>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch{epoch:03}.avc")
}

/// Runs the configured training into `out`, writing `config.toml`,
/// `metrics.jsonl`, periodic checkpoints and `final.avc`. `observe` sees
/// every metrics record as it is written.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<&Path>,
    observe: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = data.split(Split::Train)?;
    let t = &cfg.train;
    let spe = steps_per_epoch(samples.len(), t.batch_size);
    if spe == 0 {
        return Err(Error::Config(format!(
            "train split of {} samples cannot fill a batch of {}",
            samples.len(),
            t.batch_size
        )));
    }
    let total = spe * t.epochs;
    let warmup = spe * t.warmup_epochs;
    let hash = cfg.hash();
    let model = Model::new(&cfg.model, cfg.input_dims())?;
    let mut state = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.config.hash() != hash {
                return Err(Error::Config(format!(
                    "checkpoint config {} differs from the run config {hash}",
                    ck.config.hash()
                )));
            }
            ck.state
        }
        None => init_state(&model, cfg)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let metrics_path = out.join("metrics.jsonl");
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let mut emit = |r: MetricsRecord, w: &mut BufWriter<File>| -> Result<()> {
        serde_json::to_writer(&mut *w, &r)?;
        w.write_all(b"\n")?;
        w.flush()?;
        observe(&r);
        Ok(())
    };

    let mut epoch_losses = Vec::new();
    for epoch in state.step / spe..t.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in state.step - epoch * spe..spe {
            let idx = sample_batch(samples, t.batch_size, cfg.seed, epoch, s)?;
            let refs: Vec<&AvSample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = make_batch(&refs, cfg, &step_stream(epoch, s))?;
            let lr = lr_at(state.step, warmup, total, t.lr_max);
            let losses = train_step(&model, &mut state, &batch, cfg, lr)?;
            sum += losses.total;
            count += 1;
            if t.log_every > 0 && state.step % t.log_every == 0 {
                let r = MetricsRecord::Step {
                    config_hash: hash.clone(),
                    epoch,
                    step: state.step,
                    lr,
                    losses,
                };
                emit(r, &mut metrics)?;
            }
        }
        if count > 0 {
            epoch_losses.push(sum / count as f64);
            let r = MetricsRecord::Epoch {
                config_hash: hash.clone(),
                epoch,
                step: state.step,
                mean_loss: sum / count as f64,
            };
            emit(r, &mut metrics)?;
        }
        let done = epoch + 1;
        if t.eval_every > 0 && (done % t.eval_every == 0 || done == t.epochs) {
            let report = evaluate(&model, &state.model, cfg, data, &[])?;
            let r = MetricsRecord::Eval {
                config_hash: hash.clone(),
                epoch,
                step: state.step,
                report,
            };
            emit(r, &mut metrics)?;
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done != t.epochs {
            checkpoint::save(&out.join(checkpoint_name(done)), cfg, &model, &state)?;
        }
    }
    let final_checkpoint = out.join("final.avc");
    checkpoint::save(&final_checkpoint, cfg, &model, &state)?;
    Ok(TrainOutcome {
        model,
        state,
        final_checkpoint,
        metrics: metrics_path,
        epoch_losses,
    })
}

/// Settings for checking the full objective against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step of the central differences. A first-layer weight feeds thousands
    /// of ReLUs, so steps near 1e-5 regularly straddle a kink somewhere.
    pub eps: f64,
    pub batch_size: usize,
    /// Coordinates checked per parameter tensor, taken where the analytic
    /// gradient is largest.
    pub per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 2e-7,
            batch_size: 4,
            per_tensor: 3,
        }
    }
}

/// Checks the gradient of the complete self-supervised loss, with every
/// contrastive term and the temporal tasks enabled and memory banks
/// pre-filled, on a small synthetic batch.
pub fn gradcheck(base: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = base.clone();
    cfg.dataset = None;
    cfg.loss.use_vv = true;
    cfg.loss.use_av_va = true;
    cfg.loss.use_aa = true;
    cfg.loss.bank_size = 64;
    cfg.loss.bank_negatives = 16;
    if cfg.train.temporal_weight == 0.0 {
        cfg.train.temporal_weight = TrainConfig::default().temporal_weight;
    }
    cfg.validate()?;
    let samples: Vec<AvSample> = (0..opts.batch_size)
        .map(|i| {
            let id = (i % cfg.data.classes) * cfg.data.instances_per_class + i / cfg.data.classes;
            crate::data::generate_instance(&cfg.data, cfg.seed, id)
        })
        .collect();
    let refs: Vec<&AvSample> = samples.iter().collect();
    let batch = make_batch(&refs, &cfg, &[tag::GRADCHECK])?;
    let model = Model::new(&cfg.model, cfg.input_dims())?;
    let state = model.init(cfg.seed);
    let mut banks = Banks::new(&cfg.loss, cfg.model.embed_dim)?;
    let mut rng = rng_for(cfg.seed, &[tag::GRADCHECK, 1]);
    for q in &mut banks.queues {
        for _ in 0..q.capacity() {
            let v: Vec<f64> = (0..q.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            q.push_value(&v)?;
        }
    }
    let running = state.running.clone();
    finite_diff_check(
        &state.params,
        opts.eps,
        &Coords::Largest {
            per_tensor: opts.per_tensor,
        },
        |g, vars| {
            let mut f = Forward::new(g, vars, &running, Mode::Train);
            Ok(ssl_forward(&mut f, &model, &batch, &banks, &cfg)?.total)
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Loss designs on the video contrastive term alone.
    Table1,
    /// Objective components and bank/alignment toggles.
    Table3,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Grid::Table1),
            "table3" => Ok(Grid::Table3),
            _ => Err(Error::invalid(format!("unknown grid `{s}` (expected table1|table3)"))),
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Table1 => "table1",
            Grid::Table3 => "table3",
        })
    }
}

/// Named configurations of a grid, derived from `base`.
pub fn grid_configs(grid: Grid, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match grid {
        Grid::Table1 => Variant::ALL
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.loss.variant = v;
                c.loss.use_vv = true;
                c.loss.use_av_va = false;
                c.loss.use_aa = false;
                (v.name().to_string(), c)
            })
            .collect(),
        Grid::Table3 => {
            let toggles: [(&str, fn(&mut RunConfig)); 7] = [
                ("full", |_| {}),
                ("no_av_crl", |c| c.loss.use_av_va = false),
                ("no_vv_crl", |c| c.loss.use_vv = false),
                ("with_aa_crl", |c| c.loss.use_aa = true),
                ("no_temporal", |c| c.train.temporal_weight = 0.0),
                ("unaligned_av", |c| c.loss.aligned = false),
                ("shared_bank", |c| c.loss.shared_bank = true),
            ];
            toggles
                .iter()
                .map(|(name, apply)| {
                    let mut c = base.clone();
                    c.loss.variant = Variant::Ours;
                    apply(&mut c);
                    (name.to_string(), c)
                })
                .collect()
        }
    }
}

/// One comparison row of an ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    pub final_loss: f64,
    pub report: EvalReport,
}

impl AblationRow {
    fn cells(&self) -> Vec<String> {
        let fused = self.report.modality(FeatureKind::Fused);
        let video = self.report.modality(FeatureKind::Video);
        let r1 = |m: Option<&crate::eval::ModalityReport>| {
            m.and_then(|m| m.retrieval.first()).map_or("-".into(), |r| format!("{:.3}", r.value))
        };
        let fp = self
            .report
            .fingerprint(Suite::T, FeatureKind::Fused)
            .and_then(|f| f.recall.first())
            .map_or("-".into(), |r| format!("{:.3}", r.value));
        vec![
            self.name.clone(),
            self.config_hash.clone(),
            format!("{:.4}", self.final_loss),
            r1(video),
            r1(fused),
            fused.map_or("-".into(), |m| format!("{:.3}", m.probe)),
            fp,
        ]
    }
}

/// Plain-text comparison table, one row per variant.
pub fn comparison_table(rows: &[AblationRow]) -> String {
    let header = ["variant", "config", "final_loss", "video_r@1", "fused_r@1", "fused_probe", "fp_t_r@1"];
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join("\t"));
        out.push('\n');
    }
    out
}

/// Trains and evaluates every configuration of `grid`, each in its own
/// subdirectory of `out`, then writes `comparison.tsv` and
/// `comparison.jsonl`.
pub fn ablate(
    base: &RunConfig,
    grid: Grid,
    data: &Dataset,
    out: &Path,
    observe: &mut dyn FnMut(&str, &MetricsRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in grid_configs(grid, base) {
        let run = train(&cfg, data, &out.join(&name), None, &mut |r| observe(&name, r))?;
        let report = evaluate(&run.model, &run.state.model, &cfg, data, &[Suite::T])?;
        rows.push(AblationRow {
            name,
            config_hash: cfg.hash(),
            final_loss: run.epoch_losses.last().copied().unwrap_or(f64::NAN),
            report,
        });
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("comparison.tsv"), comparison_table(&rows))?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    std::fs::write(out.join("comparison.jsonl"), jsonl)?;
    Ok(rows)
}
