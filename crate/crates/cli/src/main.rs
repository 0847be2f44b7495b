//! `sigssl`: synthetic data, SSL pretraining, downstream evaluation and
//! analysis from one binary.
//!
//! Failures print a single line to stderr of the form
//! `error category=<config|data|numerical|io> code=<n>: <message>` and exit
//! with that code (2 config, 3 data, 4 numerical, 5 I/O).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigssl::{Error, ErrorCategory};

/// Default output root when `--out` is omitted.
pub const OUT_ROOT_ENV: &str = "SIGSSL_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "sigssl", version, about = "Self-supervised pretraining and evaluation for physiological signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus and its manifest.
    SynthData {
        /// TOML file with synthetic corpus settings.
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Pretrain a fresh encoder with the configured objective.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Manifest of unlabelled recordings.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Continue SSL from a checkpoint on target-domain data.
    Continual {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Adapt a checkpoint to a labelled task and report test metrics.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled manifest, split into folds by subject.
        #[arg(long)]
        task: PathBuf,
        /// finetune, frozen or linear; defaults to `eval.mode`.
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate on nested fractions of the labelled training set.
    LabelEff {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated fractions; defaults to `eval.fractions`.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Post-hoc analysis of run artifacts.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
}

#[derive(Debug, Subcommand)]
enum AnalyzeKind {
    /// Layer-by-layer CKA for one input, or inter-model CKA at `--stage`
    /// for several. Inputs are activation dumps or checkpoints (with `--probe`).
    Cka {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// Manifest of probe recordings, needed for checkpoint inputs.
        #[arg(long)]
        probe: Option<PathBuf>,
        /// early, mid or late; defaults to `analysis.stage`.
        #[arg(long)]
        stage: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Power-law fits of loss or error against data size.
    /// CSV columns: `n,value` or `series,n,value`.
    Scaling {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// Fit `C N^-a + L0` instead of `C N^-a`.
        #[arg(long)]
        floor: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Bootstrap ranking of evaluation reports on the same test set.
    Rank {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Spearman correlation of a `label,x,y` CSV.
    Spearman {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in", required = true)]
        input: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Error-vs-labels curves with power-law-with-floor fits, one per
    /// `label-eff` table.
    LabelEfficiency {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory; defaults to `$SIGSSL_OUT_ROOT/<subcommand>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report(&Error::Config(first_line(&e.to_string())));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    line.trim_start_matches("error: ").to_string()
}

fn report(e: &Error) -> ExitCode {
    let cat: ErrorCategory = e.category();
    let msg = e.to_string().replace(['\n', '\r'], " ");
    eprintln!("error category={} code={}: {msg}", cat.as_str(), cat.exit_code());
    ExitCode::from(cat.exit_code() as u8)
}

fn out_dir(arg: OutArg, subcommand: &str) -> sigssl::Result<PathBuf> {
    if let Some(p) = arg.out {
        return Ok(p);
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(subcommand)),
        _ => Err(Error::Config(format!("--out not given and {OUT_ROOT_ENV} is not set"))),
    }
}

fn run(command: Command) -> sigssl::Result<()> {
    use commands as c;
    match command {
        Command::SynthData { spec, out } => c::synth_data(&spec, &out_dir(out, "synth-data")?),
        Command::Pretrain { config, data, out } => {
            c::pretrain(&c::load_config(config.config.as_deref())?, &data, &out_dir(out, "pretrain")?)
        }
        Command::Continual {
            config,
            checkpoint,
            data,
            out,
        } => c::continual(config.config.as_deref(), &checkpoint, &data, &out_dir(out, "continual")?),
        Command::Evaluate {
            config,
            checkpoint,
            task,
            mode,
            out,
        } => c::evaluate(
            &c::load_config(config.config.as_deref())?,
            &checkpoint,
            &task,
            mode.as_deref(),
            &out_dir(out, "evaluate")?,
        ),
        Command::LabelEff {
            config,
            checkpoint,
            task,
            mode,
            fractions,
            out,
        } => c::label_eff(
            &c::load_config(config.config.as_deref())?,
            &checkpoint,
            &task,
            mode.as_deref(),
            fractions,
            &out_dir(out, "label-eff")?,
        ),
        Command::Analyze { kind } => match kind {
            AnalyzeKind::Cka {
                config,
                inputs,
                probe,
                stage,
                out,
            } => c::analyze_cka(
                &c::load_config(config.config.as_deref())?,
                &inputs,
                probe.as_deref(),
                stage.as_deref(),
                &out_dir(out, "analyze-cka")?,
            ),
            AnalyzeKind::Scaling {
                config,
                inputs,
                floor,
                out,
            } => c::analyze_scaling(
                &c::load_config(config.config.as_deref())?,
                &inputs,
                floor,
                &out_dir(out, "analyze-scaling")?,
            ),
            AnalyzeKind::Rank { config, inputs, out } => {
                c::analyze_rank(&c::load_config(config.config.as_deref())?, &inputs, &out_dir(out, "analyze-rank")?)
            }
            AnalyzeKind::Spearman { config, input, out } => c::analyze_spearman(
                &c::load_config(config.config.as_deref())?,
                &input,
                &out_dir(out, "analyze-spearman")?,
            ),
            AnalyzeKind::LabelEfficiency { config, inputs, out } => c::analyze_label_efficiency(
                &c::load_config(config.config.as_deref())?,
                &inputs,
                &out_dir(out, "analyze-label-efficiency")?,
            ),
        },
    }
}
