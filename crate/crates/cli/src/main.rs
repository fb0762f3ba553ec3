use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avcontrast::augment::{manipulate_dataset, ManipulationConfig, Suite};
use avcontrast::data::{generate_dataset, Dataset, Split};
use avcontrast::eval::{
    fingerprint_eval, knn_retrieval_eval, linear_probe_eval, FeatureKind, Normalizer, SplitFeatures,
};
use avcontrast::train::{self, checkpoint, GradCheckOptions, Grid, MetricsRecord, RunConfig};
use avcontrast::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

/// Audio-visual contrastive self-supervision on synthetic clips.
#[derive(Parser)]
#[command(name = "avcontrast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by a config's [data] section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train and write checkpoints plus metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Derive a manipulated copy of a dataset.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class retrieval of test queries against the train split.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        ks: Vec<usize>,
        #[arg(long, default_value = "fused")]
        modality: FeatureKind,
    },
    /// Instance retrieval of manipulated test clips against clean ones.
    EvalFingerprint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        aug: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        ks: Vec<usize>,
        #[arg(long, default_value = "fused")]
        modality: FeatureKind,
    },
    /// Linear probe on frozen features.
    EvalProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "fused")]
        modality: FeatureKind,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2e-7)]
        eps: f64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Largest acceptable finite difference on a parameter whose
        /// analytic gradient is identically zero.
        #[arg(long, default_value_t = 1e-6)]
        abs_tol: f64,
    },
    /// Train and compare every variant of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_record(r: &MetricsRecord) {
    match r {
        MetricsRecord::Step { .. } => {}
        MetricsRecord::Epoch { epoch, step, mean_loss, .. } => {
            eprintln!("epoch {epoch:>3}  step {step:>5}  loss {mean_loss:.4}")
        }
        MetricsRecord::Eval { epoch, report, .. } => {
            for m in &report.modalities {
                let r1 = m.retrieval.first().map_or(f64::NAN, |r| r.value);
                eprintln!("  eval epoch {epoch}: {:<5} R@1 {r1:.3} probe {:.3}", m.modality.name(), m.probe);
            }
            if let Some(t) = &report.tasks {
                eprintln!(
                    "  eval epoch {epoch}: speed {:.3} direction {:.3} order {:.3}",
                    t.speed(),
                    t.direction(),
                    t.ordering()
                );
            }
        }
    }
}

/// Train and test features of `data` under a checkpoint, with train-split
/// standardization.
fn features(ck: &checkpoint::Checkpoint, data: &Dataset) -> Result<(SplitFeatures, SplitFeatures, Normalizer)> {
    let model = &ck.model;
    let state = &ck.state.model;
    let train = SplitFeatures::extract(model, state, data.split(Split::Train)?, &ck.config)?;
    let test = SplitFeatures::extract(model, state, data.split(Split::Test)?, &ck.config)?;
    let norm = Normalizer::fit(&train)?;
    Ok((train, test, norm))
}

fn load_ckpt(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let ds = generate_dataset(&cfg.data, seed)?;
            ds.save(&out)?;
            let counts: serde_json::Map<String, serde_json::Value> = ds
                .splits
                .iter()
                .map(|(s, v)| (s.name().to_string(), json!(v.len())))
                .collect();
            println!("{}", json!({"out": out, "seed": seed, "config_hash": cfg.hash(), "splits": counts}));
        }
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let data = train::load_data(&cfg)?;
            let run = train::train(&cfg, &data, &out, resume.as_deref(), &mut print_record)?;
            println!(
                "{}",
                json!({
                    "config_hash": cfg.hash(),
                    "steps": run.state.step,
                    "final_checkpoint": run.final_checkpoint,
                    "metrics": run.metrics,
                    "final_loss": run.epoch_losses.last(),
                })
            );
        }
        Command::Augment { data, suite, seed, out } => {
            let clean = Dataset::load(&data)?;
            let aug = manipulate_dataset(&clean, suite, seed, &ManipulationConfig::default())?;
            aug.save(&out)?;
            println!("{}", json!({"out": out, "suite": suite.name(), "seed": seed}));
        }
        Command::EvalRetrieval { ckpt, data, ks, modality } => {
            let ck = load_ckpt(&ckpt)?;
            let data = Dataset::load(&data)?;
            let (train, test, norm) = features(&ck, &data)?;
            let recall = knn_retrieval_eval(&test.table(modality, &norm)?, &train.table(modality, &norm)?, &ks)?;
            println!(
                "{}",
                json!({"config_hash": ck.config.hash(), "modality": modality, "retrieval": recall})
            );
        }
        Command::EvalFingerprint {
            ckpt,
            clean,
            aug,
            ks,
            modality,
        } => {
            let ck = load_ckpt(&ckpt)?;
            let clean = Dataset::load(&clean)?;
            let aug = Dataset::load(&aug)?;
            let (model, state) = (&ck.model, &ck.state.model);
            let index = SplitFeatures::extract(model, state, clean.split(Split::Test)?, &ck.config)?;
            let query = SplitFeatures::extract(model, state, aug.split(Split::Test)?, &ck.config)?;
            let norm = match clean.split(Split::Train) {
                Ok(train) => Normalizer::fit(&SplitFeatures::extract(model, state, train, &ck.config)?)?,
                Err(_) => Normalizer::fit(&index)?,
            };
            let recall = fingerprint_eval(&index.table(modality, &norm)?, &query.table(modality, &norm)?, &ks)?;
            let suite = aug.manifest.derived.as_ref().map(|d| d.suite.clone());
            println!(
                "{}",
                json!({"config_hash": ck.config.hash(), "suite": suite, "modality": modality, "fingerprint": recall})
            );
        }
        Command::EvalProbe { ckpt, data, modality } => {
            let ck = load_ckpt(&ckpt)?;
            let data = Dataset::load(&data)?;
            let (train, test, norm) = features(&ck, &data)?;
            let acc = linear_probe_eval(
                &train.table(modality, &norm)?,
                &test.table(modality, &norm)?,
                ck.config.eval.probe_iters,
                ck.config.eval.probe_lr,
            )?;
            println!("{}", json!({"config_hash": ck.config.hash(), "modality": modality, "probe_accuracy": acc}));
        }
        Command::Gradcheck {
            config,
            eps,
            tol,
            abs_tol,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = train::gradcheck(
                &cfg,
                &GradCheckOptions {
                    eps,
                    ..GradCheckOptions::default()
                },
            )?;
            let pass = report.passes(tol, abs_tol);
            let model = avcontrast::model::Model::new(&cfg.model, cfg.input_dims())?;
            let inert: Vec<&str> = report.inert.iter().map(|&t| model.specs()[t].name.as_str()).collect();
            println!(
                "{}",
                json!({
                    "config_hash": cfg.hash(),
                    "loss": report.loss,
                    "checked": report.checked,
                    "max_rel_error": report.max_rel_error,
                    "worst": report.worst,
                    "inert": inert,
                    "inert_max_abs": report.inert_max_abs,
                    "pass": pass,
                })
            );
            return Ok(pass);
        }
        Command::Ablate { config, grid, out } => {
            let cfg = RunConfig::load(&config)?;
            let data = train::load_data(&cfg)?;
            let rows = train::ablate(&cfg, grid, &data, &out, &mut |name, r| {
                if let MetricsRecord::Epoch { epoch, mean_loss, .. } = r {
                    eprintln!("{name:<14} epoch {epoch:>3}  loss {mean_loss:.4}");
                }
            })?;
            print!("{}", train::comparison_table(&rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
