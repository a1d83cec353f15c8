//! Command-line entry point: dataset generation, training/adaptation,
//! evaluation, and prediction sampling.
//!
//! Exit codes: 0 on success; 1 for usage and configuration errors (bad
//! flags, invalid config, wrong checkpoint for the architecture); 2 for
//! runtime failures (I/O during a run, divergence).

use clap::{Parser, Subcommand};
use probadapt::config::GenerateConfig;
use probadapt::data::Split;
use probadapt::runner::{
    configure_threads_from_env, resolve_train_inputs, run_eval, run_generate, run_predict,
    EvalInvocation, PredictInvocation, TrainInvocation, TrainSession,
};
use probadapt::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "probadapt",
    version,
    about = "Probabilistic self-training for domain-adaptive segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic blob domains to PGM files plus a dataset manifest.
    Generate {
        /// Generator config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the dataset root from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the training cell named by the config (source, or one of the 12
    /// adaptation methods such as fm_j_m).
    Train {
        /// Train config (TOML) or the manifest.json of a previous run.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the manifest, metrics, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Source checkpoint for separate adaptation runs.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Also write loss / validation-dice curves as SVG.
        #[arg(long)]
        plots: bool,
    },
    /// Evaluate a checkpoint on a labeled split.
    Eval {
        /// Train config (TOML) naming the dataset and architecture.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        pretrained: PathBuf,
        /// Domain to evaluate; defaults to the config's target, then source.
        #[arg(long)]
        domain: Option<String>,
        /// One of train, val, test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Prior samples averaged per prediction.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Additionally report instance counts per image.
        #[arg(long)]
        instances: bool,
    },
    /// Sample predictions for a single image and write them as PGM files.
    Predict {
        /// Checkpoint to predict with.
        #[arg(long)]
        pretrained: PathBuf,
        /// Input image (8-bit PGM).
        image: PathBuf,
        /// Output directory for sample, mean, and consensus images.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Confidence threshold for the consensus map.
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
    },
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::InvalidInput(_) | Error::CheckpointMismatch { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout and usage errors on stderr
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads_from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate { config, out } => cmd_generate(&config, out),
        Command::Train {
            config,
            out,
            seed,
            pretrained,
            plots,
        } => cmd_train(&config, out, seed, pretrained, plots),
        Command::Eval {
            config,
            pretrained,
            domain,
            split,
            samples,
            seed,
            out,
            instances,
        } => cmd_eval(&config, pretrained, domain, &split, samples, seed, out, instances),
        Command::Predict {
            pretrained,
            image,
            out,
            samples,
            seed,
            theta,
        } => cmd_predict(pretrained, image, out, samples, seed, theta),
    }
}

fn cmd_generate(config_path: &PathBuf, out: Option<PathBuf>) -> Result<(), Error> {
    let text = std::fs::read_to_string(config_path)?;
    let mut cfg = GenerateConfig::from_toml(&text)?;
    if let Some(root) = out {
        cfg.root = root.display().to_string();
    }
    for domain in &cfg.domains {
        domain.validate()?;
    }
    let manifest = run_generate(&cfg)?;
    println!("dataset written to {}", cfg.root);
    for d in &manifest.domains {
        println!(
            "  {}: {} images (train {}..{}, val {}..{}, test {}..{})",
            d.spec.name, d.count, d.train.0, d.train.1, d.val.0, d.val.1, d.test.0, d.test.1
        );
    }
    Ok(())
}

fn cmd_train(
    config_path: &PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    pretrained: Option<PathBuf>,
    plots: bool,
) -> Result<(), Error> {
    let (config, pretrained) = resolve_train_inputs(config_path, seed, pretrained)?;
    let run = config.run.clone();
    let session = TrainSession::prepare(TrainInvocation {
        config,
        out_dir: out,
        pretrained,
        plots,
    })?;
    let summary = session.execute()?;
    println!("run {run} finished");
    if let Some(d) = summary.best_val_dice {
        println!(
            "  best validation dice {d:.2} at iteration {}",
            summary.best_iteration
        );
    }
    println!("  manifest   {}", summary.manifest_path.display());
    println!("  metrics    {}", summary.metrics_csv.display());
    println!("  checkpoint {}", summary.best_checkpoint.display());
    for plot in &summary.plot_files {
        println!("  plot       {}", plot.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config_path: &PathBuf,
    checkpoint: PathBuf,
    domain: Option<String>,
    split: &str,
    samples: usize,
    seed: u64,
    out: Option<PathBuf>,
    instances: bool,
) -> Result<(), Error> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    };
    let text = std::fs::read_to_string(config_path)?;
    let config = probadapt::config::TrainConfig::from_toml(&text)?;
    let outcome = run_eval(&EvalInvocation {
        checkpoint,
        config,
        domain,
        split,
        n_samples: samples,
        seed,
        out_dir: out,
        instances,
    })?;
    let report = &outcome.report;
    println!(
        "mean dice {:.2} on {}/{} ({} images)",
        report.mean_dice, report.domain, report.split, report.n_images
    );
    for (i, dice) in report.per_image_dice.iter().enumerate() {
        match &outcome.instance_counts {
            Some(counts) => println!("  image {i:3}: dice {dice:.4}  instances {}", counts[i]),
            None => println!("  image {i:3}: dice {dice:.4}"),
        }
    }
    if let Some(path) = &outcome.report_path {
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_predict(
    checkpoint: PathBuf,
    image: PathBuf,
    out: PathBuf,
    samples: usize,
    seed: u64,
    theta: f64,
) -> Result<(), Error> {
    let files = run_predict(&PredictInvocation {
        checkpoint,
        image,
        out_dir: out,
        n_samples: samples,
        seed,
        theta,
    })?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}
