use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lorabox::commands::{self, CliError};
use lorabox::config::{self, EvalRunConfig, IngestRunConfig, SynthRunConfig, TrainRunConfig};
use lorabox::scene::ProcessedSample;
use lorabox_core::train::{EpochLog, TrainError};

#[derive(Parser)]
#[command(name = "lorabox", version, about = "Language-guided 3D box regression with LoRA-adapted fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact IoU of two boxes given as x y z l w h yaw.
    Iou {
        #[arg(num_args = 14, allow_negative_numbers = true, value_name = "BOX")]
        values: Vec<f64>,
        /// Also print a Monte-Carlo estimate with this many samples.
        #[arg(long)]
        mc_samples: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate scene records and write processed samples as JSON lines.
    Ingest {
        /// TOML run config; positional arguments override it.
        #[arg(long)]
        config: Option<PathBuf>,
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate synthetic scene records and training samples.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the fusion model under the two-stage loss schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a checkpoint or a predictions file against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render saved results as text tables or overlay CSV.
    Report {
        /// report.json written by `eval`.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// train_log.jsonl written by `train`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Processed samples written by `ingest`.
        #[arg(long, requires = "overlay")]
        processed: Option<PathBuf>,
        /// Destination for the per-corner overlay CSV.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    Ok(match path {
        Some(p) => config::load(p)?,
        None => T::default(),
    })
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Iou { values, mc_samples, seed } => {
            let a: [f64; 7] = values[..7].try_into().expect("7 values");
            let b: [f64; 7] = values[7..].try_into().expect("7 values");
            print!("{}", commands::cmd_iou(a, b, mc_samples.map(|n| (n, seed)))?);
        }
        Command::Ingest { config, scenes, out, workers } => {
            let mut cfg: IngestRunConfig = load_or_default(config.as_deref())?;
            if let Some(s) = scenes {
                cfg.scenes = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if cfg.scenes.as_os_str().is_empty() || cfg.out.as_os_str().is_empty() {
                return Err(CliError::Invalid("ingest needs a scenes file and --out".into()));
            }
            let outcome = commands::cmd_ingest(&cfg)?;
            for d in &outcome.diagnostics {
                eprintln!("rejected: {d}");
            }
            println!("{}", outcome.summary);
            if outcome.summary.rejected > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Synth { config, count, seed, out_dir } => {
            let mut cfg: SynthRunConfig = load_or_default(config.as_deref())?;
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let dir = out_dir.unwrap_or_else(|| commands::default_out_dir("synth"));
            let (records, samples) = commands::cmd_synth(&cfg, &dir)?;
            println!("wrote {records} records and {samples} samples to {}", dir.display());
        }
        Command::Train { config, out_dir } => {
            let cfg: TrainRunConfig = config::load(&config)?;
            let dir = out_dir.unwrap_or_else(|| commands::default_out_dir("train"));
            match commands::cmd_train(&cfg, &dir) {
                Ok(outcome) => {
                    if let Some(last) = outcome.logs.last() {
                        println!(
                            "trained {} epochs on {} samples; final loss {:.6}, val mIoU {:?}",
                            last.epoch, outcome.train_samples, last.loss_total, last.val_miou
                        );
                    }
                }
                Err(CliError::Train(e @ TrainError::Diverged { .. })) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(3));
                }
                Err(e) => return Err(e),
            }
        }
        Command::Eval { config, checkpoint, predictions, data, threshold, out_dir } => {
            let mut cfg: EvalRunConfig = load_or_default(config.as_deref())?;
            if checkpoint.is_some() || predictions.is_some() {
                cfg.checkpoint = checkpoint;
                cfg.predictions = predictions;
            }
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(t) = threshold {
                cfg.iou_threshold = t;
            }
            let dir = out_dir.unwrap_or_else(|| commands::default_out_dir("eval"));
            let report = commands::cmd_eval(&cfg, &dir)?;
            print!("{}", commands::render_report(&report));
        }
        Command::Report { eval, log, processed, overlay } => {
            if eval.is_none() && log.is_none() && processed.is_none() {
                return Err(CliError::Invalid("nothing to report: give --eval, --log or --processed".into()));
            }
            if let Some(path) = eval {
                print!("{}", commands::render_report(&commands::read_report(&path)?));
            }
            if let Some(path) = log {
                let logs: Vec<EpochLog> = commands::read_jsonl(&path)?;
                print!("{}", commands::render_log(&logs));
            }
            if let (Some(path), Some(out)) = (processed, overlay) {
                let samples: Vec<ProcessedSample> = commands::read_jsonl(&path)?;
                commands::write_file(&out, commands::overlay_csv(&samples)?)?;
                println!("wrote overlay for {} samples to {}", samples.len(), out.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Invalid(_) | CliError::Geometry(_) | CliError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
