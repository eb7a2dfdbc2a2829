use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ifcorrnet::pipeline::{self, EvalSource, RunConfig};
use ifcorrnet::synth::read_manifest;
use ifcorrnet::Result;

#[derive(Parser, Debug)]
#[command(name = "ifcorrnet", version, about = "Speech dereverberation with inter-frame correlation filters")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set model.channels=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets both `seed` and `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a reverberant dataset and its manifest.
    SynthData,
    /// Train on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one WAV file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "to")]
        output: PathBuf,
    },
    /// Score estimates against manifest targets.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Enhance mixtures with this checkpoint.
        #[arg(long, conflicts_with = "estimates")]
        checkpoint: Option<PathBuf>,
        /// Directory of `{id}.wav` estimates. Without either flag the
        /// unprocessed mixtures are scored.
        #[arg(long)]
        estimates: Option<PathBuf>,
    },
    /// Train and score the four input/output variants.
    Ablate {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
    },
    /// Train and score across tap counts (`sweep.taps`).
    TapSweep {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        /// Overrides `sweep.taps`, e.g. `--taps 0,1,3`.
        #[arg(long, value_delimiter = ',')]
        taps: Option<Vec<usize>>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg: RunConfig = pipeline::load_config(g.config.as_deref(), &g.overrides, g.seed)?;
    let out = g.out.as_path();
    match cli.command {
        Command::SynthData => {
            let m = pipeline::synth_data(&cfg, out)?;
            println!("wrote {} utterances to {}", m.len(), out.display());
        }
        Command::Train { manifest, resume } => {
            let o = pipeline::train(&cfg, &manifest, out, resume.as_deref())?;
            println!(
                "trained to step {} (epoch {}); best {}; last {}",
                o.state.step,
                o.state.epoch,
                o.best.display(),
                o.last.display()
            );
        }
        Command::Infer {
            checkpoint,
            input,
            output,
        } => {
            let y = pipeline::infer(&cfg, &checkpoint, &input, &output)?;
            println!("wrote {} samples to {}", y.len(), output.display());
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            estimates,
        } => {
            let m = read_manifest(&manifest)?;
            let source = match (checkpoint, estimates) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(d)) => EvalSource::Estimates(d),
                (None, None) => EvalSource::Unprocessed,
            };
            let (_, s) = pipeline::evaluate(&cfg, &m, &source, out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Ablate {
            train_manifest,
            eval_manifest,
        } => {
            let rows = pipeline::ablate(&cfg, out, train_manifest.as_deref(), eval_manifest.as_deref())?;
            println!("{} variants written to {}", rows.len(), out.join(pipeline::ABLATION_CSV).display());
        }
        Command::TapSweep {
            train_manifest,
            eval_manifest,
            taps,
        } => {
            if let Some(t) = taps {
                cfg.sweep.taps = t;
            }
            let rows = pipeline::tap_sweep(&cfg, out, train_manifest.as_deref(), eval_manifest.as_deref())?;
            println!("{} rows written to {}", rows.len(), out.join(pipeline::TAP_SWEEP_CSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

