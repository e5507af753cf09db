//! Command-line surface: argument parsing and the pipelines behind each
//! subcommand. Every pipeline writes into a run directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use spidernet_core::checkpoint::{
    genotype_dot, load_genotype_file, load_weights_file, RunConfig, RunDirectory, WeightsCheckpoint, FINAL_TAG,
};
use spidernet_core::data::{Augment, DataSource, Dataset, DatasetSpec, SyntheticSpec};
use spidernet_core::graph::SupernetModel;
use spidernet_core::metrics::SelectionConfig;
use spidernet_core::search::{
    evaluate, finalize_report, retrain_genotype, run_random_variant, run_spidernet, RandomVariant, Report, RunLog,
    SearchConfig, MIB,
};
use spidernet_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "spidernet", version, about = "Grow, prune and select cell-structured networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full search followed by final training.
    Search(SearchArgs),
    /// Random baseline replaying the schedule of a finished search.
    Random(RandomArgs),
    /// Train a saved structure from fresh weights.
    Train(TrainArgs),
    /// Test accuracy of a saved full-weights checkpoint.
    Eval(EvalArgs),
    /// Print a saved structure as Graphviz DOT.
    ExportDot(ExportDotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

/// Dataset selection. Without `--dataset` the dataset of the source run is
/// reused, falling back to the synthetic defaults.
#[derive(Clone, Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the CIFAR-10 binary batch files.
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 512)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 256)]
    pub test_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// Cutout side length; defaults to 4 up to 16 px images and 16 above.
    #[arg(long)]
    pub cutout: Option<usize>,
    /// Disable crop, flip and cutout (normalization stays on).
    #[arg(long)]
    pub no_augment: bool,
}

impl DatasetArgs {
    pub fn resolve(&self, fallback: Option<DatasetSpec>) -> Result<DatasetSpec> {
        let mut spec = match (self.dataset, fallback) {
            (None, Some(spec)) => spec,
            (None | Some(DatasetKind::Synthetic), _) => DatasetSpec::synthetic(SyntheticSpec {
                classes: self.classes,
                train_samples: self.train_samples,
                test_samples: self.test_samples,
                image_size: self.image_size,
                separation: self.separation,
            }),
            (Some(DatasetKind::Cifar10), _) => {
                let path = self
                    .data_path
                    .clone()
                    .ok_or_else(|| Error::Config("--dataset cifar10 needs --data-path".into()))?;
                DatasetSpec {
                    source: DataSource::Cifar10 {
                        path,
                        train_limit: self.train_limit,
                        test_limit: self.test_limit,
                    },
                    augment: Augment::default(),
                }
            }
        };
        if let Some(c) = self.cutout {
            spec.augment.cutout = c;
        }
        if self.no_augment {
            spec.augment = Augment {
                normalize: spec.augment.normalize,
                ..Augment::none()
            };
        }
        Ok(spec)
    }
}

/// Training and search schedule. Defaults are desk-scale except where noted.
#[derive(Clone, Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 512)]
    pub vram_budget_mb: usize,
    #[arg(long, default_value_t = 15)]
    pub cycles: usize,
    #[arg(long, default_value_t = 3)]
    pub mutations_per_cycle: usize,
    #[arg(long, default_value_t = 4)]
    pub epochs_per_cycle: usize,
    #[arg(long, default_value_t = 50)]
    pub train_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 5)]
    pub n_good: usize,
    #[arg(long, default_value_t = 8)]
    pub probe_size: usize,
    #[arg(long, default_value_t = 500)]
    pub lrc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScheduleArgs {
    pub fn config(&self, reductions: usize, channels: usize) -> Result<SearchConfig> {
        let mut c = SearchConfig::new(reductions, channels);
        c.vram_budget = self
            .vram_budget_mb
            .checked_mul(MIB)
            .ok_or_else(|| Error::Config("memory budget too large".into()))?;
        c.cycles = self.cycles;
        c.mutations_per_cycle = self.mutations_per_cycle;
        c.epochs_per_cycle = self.epochs_per_cycle;
        c.train_epochs = self.train_epochs;
        c.batch_size = self.batch_size;
        c.base_lr = self.lr;
        c.dropout = self.dropout;
        c.selection = SelectionConfig {
            n_good: self.n_good,
            probe_size: self.probe_size,
            lrc_samples: self.lrc_samples,
        };
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Args)]
pub struct SearchArgs {
    /// Number of reduction cells.
    #[arg(long)]
    pub reductions: usize,
    /// Channels of the normal cell; doubled by each reduction.
    #[arg(long)]
    pub channels: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct RandomArgs {
    /// Baseline number, 1 to 4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub variant: u8,
    /// Run directory of the finished reference search.
    #[arg(long)]
    pub reference: PathBuf,
    /// Seed override; the reference seed by default.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Structure file (genotype JSON).
    pub genotype: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub train_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Seed; the structure's recorded seed by default.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Full-weights checkpoint.
    pub weights: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub data: DatasetArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ExportDotArgs {
    /// Structure file (genotype JSON).
    pub genotype: PathBuf,
}

/// Run one subcommand. Returns the text to print on standard output.
pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Search(args) => search(&args).map(|r| summary(&args.out, &r)),
        Command::Random(args) => random(&args).map(|r| summary(&args.out, &r)),
        Command::Train(args) => train(&args).map(|r| summary(&args.out, &r)),
        Command::Eval(args) => eval(&args),
        Command::ExportDot(args) => export_dot(&args.genotype),
    }
}

fn summary(out: &Path, report: &Report) -> String {
    format!(
        "{}: seed {} test accuracy {:.4} parameters {} peak memory {} bytes -> {}",
        report.run,
        report.seed,
        report.test_accuracy,
        report.parameter_count,
        report.peak_memory_bytes,
        out.display()
    )
}

pub fn search(args: &SearchArgs) -> Result<Report> {
    let config = args.schedule.config(args.reductions, args.channels)?;
    let spec = args.data.resolve(None)?;
    let data = spec.load(config.seed)?;
    let mut run = RunDirectory::create(&args.out)?;
    run.save_config(&RunConfig::new("spidernet", config.clone(), spec.clone(), None))?;
    log::info!("search with seed {} into {}", config.seed, args.out.display());
    let (model, log) = run_spidernet(&config, &data, Some(spec.clone()), &mut run)?;
    finish(&run, &model, &log, spec)
}

pub fn random(args: &RandomArgs) -> Result<Report> {
    let variant = RandomVariant::from_number(args.variant)?;
    let reference = RunDirectory::open(&args.reference)?;
    let ref_config = reference.load_config()?;
    let ref_log = reference.load_runlog()?;
    let mut config = ref_config.search.clone();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let spec = ref_config.dataset;
    let data = spec.load(config.seed)?;
    let mut run = RunDirectory::create(&args.out)?;
    run.save_config(&RunConfig::new(
        format!("random-{}", variant.number()),
        config.clone(),
        spec.clone(),
        Some(args.reference.clone()),
    ))?;
    log::info!("random baseline {} with seed {} into {}", variant.number(), config.seed, args.out.display());
    let (model, log) = run_random_variant(variant, &ref_log, &config, &data, Some(spec.clone()), &mut run)?;
    finish(&run, &model, &log, spec)
}

pub fn train(args: &TrainArgs) -> Result<Report> {
    let genotype = load_genotype_file(&args.genotype)?;
    let source_config = args
        .genotype
        .parent()
        .and_then(|dir| RunDirectory::open(dir).ok())
        .and_then(|dir| dir.load_config().ok());
    let spec = args.data.resolve(source_config.map(|c| c.dataset))?;
    let seed = args.seed.or(genotype.seed).unwrap_or(0);
    let mut config = SearchConfig::new(genotype.config.reductions, genotype.config.init_channels);
    config.train_epochs = args.train_epochs;
    config.batch_size = args.batch_size;
    config.base_lr = args.lr;
    config.dropout = genotype.config.dropout;
    config.pruner_m = genotype.config.pruner_m;
    config.seed = seed;
    config.validate()?;
    let data = spec.load(seed)?;
    let run = RunDirectory::create(&args.out)?;
    run.save_config(&RunConfig::new(
        "retrain",
        config.clone(),
        spec.clone(),
        Some(args.genotype.clone()),
    ))?;
    let (model, log) = retrain_genotype(&genotype, &config, &data, Some(spec.clone()))?;
    finish(&run, &model, &log, spec)
}

fn finish(run: &RunDirectory, model: &SupernetModel, log: &RunLog, spec: DatasetSpec) -> Result<Report> {
    let seed = log.seed;
    run.save_genotype(FINAL_TAG, model, seed)?;
    run.save_weights(&WeightsCheckpoint::new(
        model.clone(),
        seed,
        Some(spec),
        log.config.batch_size,
    ))?;
    run.save_runlog(log)?;
    run.save_dot(model, seed)?;
    let report = finalize_report(log, model, Some(RunDirectory::genotype_name(FINAL_TAG)))?;
    run.save_report(&report)?;
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> Result<String> {
    let ckpt = load_weights_file(&args.weights)?;
    let spec = args.data.resolve(ckpt.dataset.clone())?;
    let data: Dataset = spec.load(ckpt.seed)?;
    let batch = args.batch_size.unwrap_or(ckpt.batch_size);
    let accuracy = evaluate(&ckpt.model, &data.test, batch)?;
    Ok(serde_json::json!({
        "seed": ckpt.seed,
        "test_accuracy": accuracy,
        "test_samples": data.test.len(),
        "parameter_count": ckpt.model.parameter_count(),
    })
    .to_string())
}

pub fn export_dot(path: &Path) -> Result<String> {
    let mut text = genotype_dot(&load_genotype_file(path)?)?;
    if text.ends_with('\n') {
        text.pop();
    }
    Ok(text)
}
