use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehrformer::cohort::{generate_cohort, read_jsonl, split_chronological, write_jsonl, GeneratorConfig, RawStay};
use ehrformer::harness::{
    config_hash, evaluate, prepare_data, run_experiment_suite, train, write_reports_csv, ExperimentConfig, Featurizer,
    MetricsReport, Model, ModelConfig, ModelKind,
};
use ehrformer::tokenizer::{build_vocabulary, tokenize_stay, write_tokenized, Split};
use ehrformer::Error;
use ehrformer_nn::checkpoint::{read_checkpoint, write_checkpoint};
use ehrformer_nn::ParamStore;
use serde::{Deserialize, Serialize};

mod config;

#[derive(Parser)]
#[command(name = "ehrformer", version, about = "EHR tokenization, sparse-attention encoder and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as JSONL.
    Generate {
        /// Cohort generator settings (TOML, top-level keys).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a cohort, fit the vocabulary on the development part and
    /// tokenize every stay.
    Tokenize {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        vocab_out: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config; `dev_frac` and `[tokenizer]` are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model and evaluate it on the held-out split.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoint, run manifest and reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run directory on a cohort's held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a cohort, then train and evaluate all five models.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Vec<ModelKind>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Nn(#[from] ehrformer_nn::NnError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::UndefinedMetric { .. }) => 2,
            CliError::Core(Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn read_cohort(path: &Path) -> Result<Vec<RawStay>> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

/// Saved next to a checkpoint so that `evaluate` can rebuild the model.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    model: ModelKind,
    model_config: ModelConfig,
    featurizer: Featurizer,
    dev_frac: f64,
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    config_hash: String,
}

fn write_reports(reports: &[MetricsReport], dir: &Path, stem: &str) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = create(&csv_path)?;
    write_reports_csv(reports, &mut w)?;
    w.flush().map_err(io_err(&csv_path))?;
    let json_path = dir.join(format!("{stem}.json"));
    let mut w = create(&json_path)?;
    serde_json::to_writer_pretty(&mut w, reports).map_err(Error::from)?;
    w.flush().map_err(io_err(&json_path))?;
    Ok(())
}

fn print_report(r: &MetricsReport) {
    let tasks: Vec<String> = r.per_task.iter().map(|a| format!("{a:.3}")).collect();
    println!("{:<22} mean {:.3}  [{}]  epochs {}", r.model, r.mean, tasks.join(" "), r.epochs);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config: cfg_path, seed, out } => {
            let mut cfg: GeneratorConfig = config::load(cfg_path.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stays = generate_cohort(&cfg)?;
            let mut w = create(&out)?;
            write_jsonl(&stays, &mut w)?;
            w.flush().map_err(io_err(&out))?;
            eprintln!("wrote {} stays to {}", stays.len(), out.display());
        }
        Command::Tokenize {
            cohort,
            vocab_out,
            out,
            config: cfg_path,
        } => {
            let cfg: ExperimentConfig = config::load(cfg_path.as_deref())?;
            let stays = read_cohort(&cohort)?;
            let (dev, val) = split_chronological(&stays, cfg.dev_frac)?;
            let vocab = build_vocabulary(&dev, cfg.tokenizer)?;
            fs::write(&vocab_out, vocab.to_json()?).map_err(io_err(&vocab_out))?;
            let mut tokenized = Vec::with_capacity(stays.len());
            let mut excluded = 0;
            for (part, split) in [(&dev, Split::Dev), (&val, Split::Val)] {
                for s in part.iter() {
                    match tokenize_stay(s, &vocab) {
                        Ok(mut t) => {
                            t.split = Some(split);
                            tokenized.push(t);
                        }
                        Err(Error::OverLength { .. }) => excluded += 1,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            let mut w = create(&out)?;
            write_tokenized(&tokenized, &mut w)?;
            w.flush().map_err(io_err(&out))?;
            eprintln!(
                "vocabulary {} variables; tokenized {} stays ({} excluded as over-length)",
                vocab.num_variables(),
                tokenized.len(),
                excluded
            );
        }
        Command::Train {
            cohort,
            config: cfg_path,
            model,
            seed,
            out,
        } => {
            let mut cfg: ExperimentConfig = config::load(cfg_path.as_deref())?;
            if let Some(m) = model {
                cfg.train.model = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let stays = read_cohort(&cohort)?;
            let data = prepare_data(&stays, cfg.dev_frac, cfg.train.early_stop_frac, cfg.tokenizer)?;
            let hash = config_hash(&cfg)?;
            let outcome = train(&cfg.train, &cfg.model, &data.featurizer.vocab, &data.dev, &data.internal_val, |r| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  internal-val AUROC {:.4}",
                    r.epoch, r.train_loss, r.internal_val_auroc
                )
            })?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let ckpt = out.join("model.ckpt");
            let mut w = create(&ckpt)?;
            write_checkpoint(&outcome.store, &mut w)?;
            w.flush().map_err(io_err(&ckpt))?;
            let report = evaluate(
                cfg.train.model,
                &outcome.model,
                &outcome.store,
                &data.val,
                outcome.epochs_run,
                cfg.train.seed,
                &hash,
            )?;
            let manifest = RunManifest {
                model: cfg.train.model,
                model_config: cfg.model.clone(),
                featurizer: data.featurizer,
                dev_frac: cfg.dev_frac,
                seed: cfg.train.seed,
                epochs: outcome.epochs_run,
                best_epoch: outcome.best_epoch,
                config_hash: hash,
            };
            let run_path = out.join("run.json");
            let mut w = create(&run_path)?;
            serde_json::to_writer(&mut w, &manifest).map_err(Error::from)?;
            w.flush().map_err(io_err(&run_path))?;
            write_reports(&[report.clone()], &out, "report")?;
            print_report(&report);
        }
        Command::Evaluate { checkpoint, cohort, out } => {
            let run_path = checkpoint.join("run.json");
            let manifest: RunManifest =
                serde_json::from_reader(BufReader::new(File::open(&run_path).map_err(io_err(&run_path))?))
                    .map_err(Error::from)?;
            let ckpt = checkpoint.join("model.ckpt");
            let saved: ParamStore<f32> =
                read_checkpoint(&mut BufReader::new(File::open(&ckpt).map_err(io_err(&ckpt))?))?;
            let mut store = ParamStore::<f32>::new();
            let model = Model::build(
                manifest.model,
                &manifest.model_config,
                &manifest.featurizer.vocab,
                &mut store,
                manifest.seed,
            )?;
            store.load_from(&saved)?;
            let stays = read_cohort(&cohort)?;
            let (_, val_raw) = split_chronological(&stays, manifest.dev_frac)?;
            let (val, _) = manifest.featurizer.samples(&val_raw)?;
            let report = evaluate(
                manifest.model,
                &model,
                &store,
                &val,
                manifest.epochs,
                manifest.seed,
                &manifest.config_hash,
            )?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            write_reports(&[report.clone()], &out, "report")?;
            print_report(&report);
        }
        Command::Suite {
            config: cfg_path,
            seed,
            out,
            model,
        } => {
            let mut cfg: ExperimentConfig = config::load(cfg_path.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.cohort.seed = s;
            }
            if !model.is_empty() {
                cfg.models = model;
            }
            let reports = run_experiment_suite(&cfg, |kind, r| {
                eprintln!(
                    "{kind:<22} epoch {:>3}  loss {:.4}  internal-val AUROC {:.4}",
                    r.epoch, r.train_loss, r.internal_val_auroc
                )
            })?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            write_reports(&reports, &out, "suite")?;
            for r in &reports {
                print_report(r);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
