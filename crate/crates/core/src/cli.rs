//! `mdts` command-line interface.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{analyze_domain, export_forecast_plot, write_json, AlignmentReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{load_corpus, synth_corpus, write_corpus, Corpus, Label};
use crate::error::{Error, Result};
use crate::finetune::{self, evaluate, write_report, TaskSpec};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::training::{derive_seed, split_indices, write_history, Trainer};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(name = "mdts", version, about = "Multi-domain masked pre-training for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Cls,
    Reg,
    Fcst,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (manifest + CSVs).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train on a manifest and write a checkpoint and loss history.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint for a task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
    },
    /// Export forecast plot data for one held-out sample.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
    },
    /// PCA and layout alignment of the learned variate embeddings.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve(common.seed)
}

fn prepare_out(common: &Common, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let path = common.out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

fn corpus_for(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data.manifest {
        Some(m) => load_corpus(m),
        None => Err(Error::Config("no manifest configured: set [data] manifest".into())),
    }
}

fn task_for(
    cfg: &RunConfig,
    corpus: &Corpus,
    task: TaskArg,
    context: Option<usize>,
    horizon: Option<usize>,
) -> Result<TaskSpec> {
    let samples = corpus.samples.iter().filter(|s| cfg.task.domain.as_deref().is_none_or(|d| s.domain.name == d));
    Ok(match task {
        TaskArg::Cls => {
            let n = match cfg.task.num_classes {
                Some(n) => n,
                None => {
                    let classes: BTreeSet<usize> = samples
                        .filter_map(|s| match s.label {
                            Some(Label::Class(c)) => Some(c),
                            _ => None,
                        })
                        .collect();
                    classes.last().map_or(0, |c| c + 1)
                }
            };
            TaskSpec::Classification { num_classes: n }
        }
        TaskArg::Reg => {
            let dim = match cfg.task.target_dim {
                Some(d) => d,
                None => samples
                    .filter_map(|s| match &s.label {
                        Some(Label::Target(t)) => Some(t.len()),
                        _ => None,
                    })
                    .next()
                    .unwrap_or(0),
            };
            TaskSpec::Regression { target_dim: dim }
        }
        TaskArg::Fcst => TaskSpec::Forecasting {
            context: context.unwrap_or(cfg.task.context),
            horizon: horizon.unwrap_or(cfg.task.horizon),
        },
    })
}

fn synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let synth = cfg.synth.as_ref().ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
    let corpus = synth_corpus(synth, cfg.seed())?;
    prepare_out(common, &cfg)?;
    let manifest = write_corpus(&common.out, &corpus)?;
    log::info!("wrote {} samples to {}", corpus.len(), manifest.display());
    Ok(())
}

/// Builds a fresh model with every corpus domain registered.
pub fn initial_model(cfg: &RunConfig, corpus: &Corpus) -> Result<Model> {
    let seed = cfg.seed();
    let mut model = Model::new(cfg.model.resolve()?, derive_seed(seed, &[20]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[21]));
    for d in &corpus.domains {
        model.register_domain((**d).clone(), &mut rng)?;
    }
    Ok(model)
}

fn pretrain(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = corpus_for(&cfg)?.normalized();
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(load_checkpoint(p)?)?,
        None => Trainer::new(initial_model(&cfg, &corpus)?, cfg.pretrain.clone())?,
    };
    prepare_out(common, &cfg)?;
    trainer.run(&corpus, None)?;
    save_checkpoint(&trainer.checkpoint(), &common.out.join(CHECKPOINT_FILE))?;
    write_history(&common.out.join(HISTORY_FILE), &trainer.state.history)
}

fn finetune_cmd(
    common: &Common,
    ckpt: &Path,
    task: TaskArg,
    context: Option<usize>,
    horizon: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = corpus_for(&cfg)?;
    let ckpt = load_checkpoint(ckpt)?;
    let spec = task_for(&cfg, &corpus, task, context, horizon)?;
    prepare_out(common, &cfg)?;
    let out = finetune::finetune(&ckpt, &corpus, cfg.task.domain.as_deref(), &spec, &cfg.finetune)?;
    save_checkpoint(&out.checkpoint, &common.out.join(FINETUNED_FILE))?;
    write_report(&common.out.join(REPORT_FILE), &out.report)
}

fn evaluate_cmd(
    common: &Common,
    ckpt: &Path,
    task: TaskArg,
    context: Option<usize>,
    horizon: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = corpus_for(&cfg)?;
    let ckpt = load_checkpoint(ckpt)?;
    let spec = task_for(&cfg, &corpus, task, context, horizon)?;
    prepare_out(common, &cfg)?;
    let rows = evaluate(&ckpt, &corpus, cfg.task.domain.as_deref(), &spec, cfg.finetune.val_fraction, cfg.seed())?;
    write_report(&common.out.join(METRICS_FILE), &rows)
}

fn forecast_cmd(common: &Common, ckpt: &Path, context: Option<usize>, horizon: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = corpus_for(&cfg)?;
    let ckpt: Checkpoint = load_checkpoint(ckpt)?;
    let (c, h) = (context.unwrap_or(cfg.task.context), horizon.unwrap_or(cfg.task.horizon));
    let samples: Vec<_> = corpus
        .samples
        .iter()
        .filter(|s| cfg.task.domain.as_deref().is_none_or(|d| s.domain.name == d))
        .filter(|s| s.len() >= c + h)
        .collect();
    let (train, val) = split_indices(samples.len(), cfg.finetune.val_fraction, cfg.seed());
    let pick =
        val.first().or(train.first()).ok_or_else(|| Error::Config(format!("no sample holds {c} + {h} time points")))?;
    let s = samples[*pick];
    let mut model = ckpt.model;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed(), &[10]));
    finetune::include_domain(&mut model, &s.domain, &mut rng)?;
    let ctx = Matrix::from_fn(s.num_variates(), c, |r, t| s.values.get(r, t));
    let truth = Matrix::from_fn(s.num_variates(), h, |r, t| s.values.get(r, c + t));
    let pred = finetune::forecast(&model, &ctx, &s.domain.name, &s.variate_subset, h)?;
    prepare_out(common, &cfg)?;
    export_forecast_plot(&ctx, &truth, &pred, &common.out.join(FORECAST_FILE))
}

fn analyze_cmd(common: &Common, ckpt: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ckpt = load_checkpoint(ckpt)?;
    let layouts = match &cfg.data.manifest {
        Some(m) => load_corpus(m)?.layouts,
        None => Default::default(),
    };
    let domains: Vec<String> = match &cfg.analyze.domain {
        Some(d) => vec![d.clone()],
        None => ckpt.model.registry.domains().iter().map(|d| d.name.clone()).collect(),
    };
    let mut reports: Vec<AlignmentReport> = Vec::new();
    for d in &domains {
        let emb = ckpt.model.variate_embeddings(d)?;
        if emb.rows() < 2 {
            log::info!("skipping domain `{d}` with a single variate");
            continue;
        }
        reports.push(analyze_domain(d, emb, layouts.get(d), cfg.analyze.permutations, cfg.seed())?);
    }
    prepare_out(common, &cfg)?;
    write_json(&common.out.join(ANALYSIS_FILE), &reports)
}

/// Executes a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => synth(&common),
        Command::Pretrain { common, checkpoint } => pretrain(&common, checkpoint.as_deref()),
        Command::Finetune { common, checkpoint, task, horizon, context } => {
            finetune_cmd(&common, &checkpoint, task, context, horizon)
        }
        Command::Evaluate { common, checkpoint, task, horizon, context } => {
            evaluate_cmd(&common, &checkpoint, task, context, horizon)
        }
        Command::Forecast { common, checkpoint, horizon, context } => {
            forecast_cmd(&common, &checkpoint, context, horizon)
        }
        Command::Analyze { common, checkpoint } => analyze_cmd(&common, &checkpoint),
    }
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
