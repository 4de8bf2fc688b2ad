use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use listener_diffusion::pipeline::{self, RunConfig};
use listener_diffusion::Error;

/// Listener head-motion generation: synthesize data, train, generate, evaluate.
#[derive(Parser)]
#[command(name = "listener", version)]
struct Cli {
    /// JSON run configuration (missing fields take preset defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Defaults used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Full, global = true)]
    preset: Preset,
    /// Print the full default configuration and exit.
    #[arg(long)]
    emit_default_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size widths (K = 256, d_z = 512, width-512 denoiser).
    Full,
    /// Small widths for CPU runs in minutes.
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and test corpora.
    Synth,
    /// Train the motion quantizer on the training corpus.
    TrainVqvae {
        #[arg(long)]
        resume: bool,
    },
    /// Train the conditional diffusion model.
    TrainDiffusion {
        #[arg(long)]
        resume: bool,
    },
    /// Sample listeners for every speaker record of a corpus.
    Generate {
        /// Speaker records (defaults to the test corpus).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Samples per input; overrides the config.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Score generated listeners, or run a sweep.
    Evaluate {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Retrain and score every configured modality variant.
        #[arg(long, conflicts_with = "codebook_sweep")]
        ablation: bool,
        /// Retrain and score every configured codebook size.
        #[arg(long)]
        codebook_sweep: bool,
    },
    /// Summarize a checkpoint.
    Inspect { checkpoint: PathBuf },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), Error> {
    pipeline::init_threads()?;
    let preset = match cli.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    if cli.emit_default_config {
        println!("{}", preset.to_json());
        return Ok(());
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load_over(path, &preset)?,
        None => preset,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    let Some(command) = cli.command else {
        return Err(Error::config("no command given; see --help"));
    };
    match command {
        Command::Synth => print_json(&pipeline::cmd_synth(&config)?),
        Command::TrainVqvae { resume } => print_json(&pipeline::cmd_train_vqvae(&config, resume)?),
        Command::TrainDiffusion { resume } => {
            print_json(&pipeline::cmd_train_diffusion(&config, resume)?)
        }
        Command::Generate { input, samples } => {
            if let Some(k) = samples {
                config.samples_per_input = k;
            }
            print_json(&pipeline::cmd_generate(&config, input.as_deref())?)
        }
        Command::Evaluate {
            generated,
            reference,
            ablation,
            codebook_sweep,
        } => {
            let reports = if ablation {
                let r = pipeline::run_ablation(&config, &config.ablation)?;
                pipeline::write_reports(&config, "ablation", &r)?;
                r
            } else if codebook_sweep {
                let r = pipeline::run_codebook_sweep(&config, &config.codebook_sizes)?;
                pipeline::write_reports(&config, "sweep_k", &r)?;
                r
            } else {
                vec![pipeline::cmd_evaluate(&config, generated.as_deref(), reference.as_deref())?]
            };
            print!("{}", listener_diffusion::metrics::table(&reports));
        }
        Command::Inspect { checkpoint } => print_json(&pipeline::cmd_inspect(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
