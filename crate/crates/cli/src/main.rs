mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stegflow_core::checkpoint::Checkpoint;
use stegflow_core::colorspace::{LabImage, StorageImage};
use stegflow_core::dataset::{ingest_dataset, write_synthetic_pngs, Dataset};
use stegflow_core::eval::{evaluate_channel, run_capacity_sweep, run_proxies, run_rounds_ablation, Report};
use stegflow_core::flow::{init_model, FlowModel, TrainingStage};
use stegflow_core::pipeline::{hide, reveal_with_stats, EmbeddingSettings};
use stegflow_core::training::{train_stage1, train_stage2, JsonLines, ProgressRecord, TrainError, TrainObserver};

use config::{Overrides, RunConfig};

/// Bad flags, bad config values or missing inputs (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "stegflow", version, about = "Hide data in the colors of gray-scale images with an invertible flow")]
struct Cli {
    /// Root directory for run outputs
    #[arg(long, global = true, env = "STEGFLOW_RUN_DIR", default_value = "runs")]
    run_dir: PathBuf,
    /// Only print warnings and errors
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood training of a fresh model
    TrainStage1 {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Round-based training starting from a stage-1 checkpoint
    TrainStage2 {
        /// Stage-1 checkpoint to start from
        #[arg(long, value_name = "FILE")]
        init_checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Hide a file in a host image
    Hide {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Host image (PNG, color or gray-scale)
        #[arg(long, value_name = "PNG")]
        host: PathBuf,
        /// File to hide
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Container image to write
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Seed for latent sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recover a hidden file from a container image
    Reveal {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Container image (PNG)
        #[arg(long, value_name = "PNG")]
        container: PathBuf,
        /// Where to write the recovered file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Measure revealing accuracy, capacity and proxy statistics
    Eval {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage-2 training with accuracy measured after every round
    AblateRounds {
        /// Stage-1 checkpoint to start from
        #[arg(long, value_name = "FILE")]
        init_checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a folder of synthetic toy images
    SynthData {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let run_dir = cli.run_dir;
    match cli.command {
        Command::TrainStage1 { overrides } => {
            let config = RunConfig::resolve(&overrides)?;
            let path = cmd_train_stage1(&run_dir, &config)?;
            println!("{}", path.display());
        }
        Command::TrainStage2 {
            init_checkpoint,
            overrides,
        } => {
            let config = RunConfig::resolve(&overrides)?;
            let path = cmd_train_stage2(&run_dir, &config, &init_checkpoint)?;
            println!("{}", path.display());
        }
        Command::Hide {
            model,
            host,
            input,
            out,
            seed,
        } => cmd_hide(&model, &host, &input, &out, seed)?,
        Command::Reveal { model, container, out } => cmd_reveal(&model, &container, &out)?,
        Command::Eval { model, overrides } => {
            let config = RunConfig::resolve(&overrides)?;
            cmd_eval(&run_dir, &config, &model)?;
        }
        Command::AblateRounds {
            init_checkpoint,
            overrides,
        } => {
            let config = RunConfig::resolve(&overrides)?;
            cmd_ablate_rounds(&run_dir, &config, &init_checkpoint)?;
        }
        Command::SynthData { out, count, size, seed } => {
            if size == 0 || size % 2 != 0 {
                return Err(UsageError(format!("--size must be positive and even, got {size}")).into());
            }
            let paths = write_synthetic_pngs(&out, count, size, seed)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

/// Creates `<run-dir>/<name>/checkpoints` and echoes the effective config.
fn prepare_run(run_dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    let dir = run_dir.join(&config.name);
    std::fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(dir)
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let dir = config.data_dir()?;
    let data = ingest_dataset(dir, config.data.size, config.data.val_fraction)?;
    log::info!("dataset: {} train, {} val images from {}", data.train.len(), data.val.len(), dir.display());
    Ok(data)
}

fn training_images(data: &Dataset) -> Vec<LabImage> {
    if data.train.is_empty() {
        data.val_images()
    } else {
        data.train_images()
    }
}

fn eval_images(data: &Dataset, max: usize) -> Vec<LabImage> {
    let mut images = if data.val.is_empty() {
        data.train_images()
    } else {
        data.val_images()
    };
    if max > 0 {
        images.truncate(max);
    }
    images
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(UsageError(format!("checkpoint {} does not exist", path.display())).into());
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Progress log plus checkpoints at every epoch and round boundary.
struct RunObserver {
    log: JsonLines<BufWriter<File>>,
    checkpoints: PathBuf,
    settings: EmbeddingSettings,
}

impl RunObserver {
    fn new(dir: &Path, log_name: &str, settings: EmbeddingSettings) -> Result<Self> {
        let file = File::create(dir.join(log_name))?;
        Ok(Self {
            log: JsonLines(BufWriter::new(file)),
            checkpoints: dir.join("checkpoints"),
            settings,
        })
    }

    fn save(&self, name: &str, model: &FlowModel) -> Result<(), TrainError> {
        Checkpoint::new(model.clone(), self.settings.clone())
            .save(self.checkpoints.join(name))
            .map_err(|e| TrainError::Observer(e.to_string()))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.0.flush()?;
        Ok(())
    }
}

impl TrainObserver for RunObserver {
    fn record(&mut self, record: &ProgressRecord) -> Result<(), TrainError> {
        self.log.record(record)
    }

    fn epoch_end(&mut self, _epoch: usize, _mean_nll: f64, model: &FlowModel) -> Result<(), TrainError> {
        self.save("stage1.ckpt", model)
    }

    fn round_end(&mut self, round: usize, model: &FlowModel) -> Result<(), TrainError> {
        self.save(&format!("stage2_round{round}.ckpt"), model)
    }
}

fn cmd_train_stage1(run_dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    let data = load_dataset(config)?;
    let dir = prepare_run(run_dir, config)?;
    let model = init_model(&config.flow(), config.seed)?;
    let mut observer = RunObserver::new(&dir, "train_stage1.jsonl", config.embedding())?;
    let result = train_stage1(&model, &training_images(&data), &config.training, &mut observer);
    observer.flush()?;
    let trained = result.context("stage-1 training failed (last completed epoch kept in checkpoints/stage1.ckpt)")?;
    let path = dir.join("checkpoints").join("stage1.ckpt");
    Checkpoint::new(trained, config.embedding()).save(&path)?;
    Ok(path)
}

fn cmd_train_stage2(run_dir: &Path, config: &RunConfig, init: &Path) -> Result<PathBuf> {
    let start = load_checkpoint(init)?;
    if start.model.stage() == TrainingStage::Initialized {
        return Err(UsageError(format!("{} holds an untrained model", init.display())).into());
    }
    let data = load_dataset(config)?;
    let dir = prepare_run(run_dir, config)?;
    let settings = config.embedding();
    let mut observer = RunObserver::new(&dir, "train_stage2.jsonl", settings.clone())?;
    let result = train_stage2(&start.model, &training_images(&data), &config.training, &settings, &mut observer);
    observer.flush()?;
    let trained = result.context("stage-2 training failed (completed rounds kept in checkpoints/)")?;
    let path = dir.join("checkpoints").join("stage2.ckpt");
    Checkpoint::new(trained, settings).save(&path)?;
    Ok(path)
}

fn read_png(path: &Path, what: &str) -> Result<StorageImage> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} {} does not exist", path.display())).into());
    }
    StorageImage::read_png(path).with_context(|| format!("reading {what} {}", path.display()))
}

fn cmd_hide(model: &Path, host: &Path, input: &Path, out: &Path, seed: u64) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let host = read_png(host, "host")?;
    if !input.is_file() {
        return Err(UsageError(format!("payload file {} does not exist", input.display())).into());
    }
    let payload = std::fs::read(input)?;
    let result = hide(&payload, &host.to_working(), &ck.model, &ck.settings, seed)?;
    result.container.write_png(out)?;
    log::info!(
        "hid {} bytes in {} ({} bits, {:.2}% of pixels gamut-fitted)",
        payload.len(),
        out.display(),
        result.bits_embedded,
        100.0 * result.clip_fraction
    );
    Ok(())
}

fn cmd_reveal(model: &Path, container: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let container = read_png(container, "container")?;
    let revealed = reveal_with_stats(&container, &ck.model, &ck.settings)?;
    std::fs::write(out, &revealed.bytes)?;
    log::info!(
        "revealed {} bytes to {} ({} bits corrected)",
        revealed.bytes.len(),
        out.display(),
        revealed.corrected_bits
    );
    Ok(())
}

fn cmd_eval(run_dir: &Path, config: &RunConfig, model: &Path) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let data = load_dataset(config)?;
    let dir = prepare_run(run_dir, config)?;
    let hosts = eval_images(&data, config.eval.max_images);
    let channel = evaluate_channel(&ck.model, &hosts, &ck.settings, config.seed)?;
    let capacity = run_capacity_sweep(&ck.model, &config.eval.sizes, config.eval.per_size, &ck.settings, config.seed)?;
    let proxies = run_proxies(&ck.model, &hosts, &ck.settings, config.seed)?;
    let report = Report {
        name: config.name.clone(),
        seed: config.seed,
        alpha: ck.settings.alpha,
        ecc_enabled: ck.settings.ecc.enabled,
        channel,
        capacity,
        proxies: Some(proxies),
    };
    report.write(&dir)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_ablate_rounds(run_dir: &Path, config: &RunConfig, init: &Path) -> Result<()> {
    let start = load_checkpoint(init)?;
    if start.model.stage() == TrainingStage::Initialized {
        return Err(UsageError(format!("{} holds an untrained model", init.display())).into());
    }
    let data = load_dataset(config)?;
    let dir = prepare_run(run_dir, config)?;
    let settings = config.embedding();
    let mut observer = RunObserver::new(&dir, "train_stage2.jsonl", settings.clone())?;
    let result = run_rounds_ablation(
        &start.model,
        &training_images(&data),
        &eval_images(&data, config.eval.max_images),
        &config.training,
        &settings,
        config.seed,
        &mut observer,
    );
    observer.flush()?;
    let (channel, model) = result?;
    Checkpoint::new(model, settings.clone()).save(dir.join("checkpoints").join("stage2.ckpt"))?;
    let report = Report {
        name: config.name.clone(),
        seed: config.seed,
        alpha: settings.alpha,
        ecc_enabled: settings.ecc.enabled,
        channel,
        capacity: Vec::new(),
        proxies: None,
    };
    report.write(&dir)?;
    print!("{}", report.to_table());
    Ok(())
}
