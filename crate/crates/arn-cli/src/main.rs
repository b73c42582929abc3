//! `arn`: train, ablate, and evaluate a shared/private feature-decomposition
//! re-identification model on synthetic or directory-based datasets.

use arn::config::AblationVariant;
use arn::evaluator::Protocol;
use arn_cli::{cmd_ablate, cmd_check_grads, cmd_eval, cmd_gen_data, cmd_train, exit_code};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Plain,
    CrossCamera,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Plain => Protocol::Plain,
            ProtocolArg::CrossCamera => Protocol::CrossCamera,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoSupervised,
    NoPrivate,
    RecOnly,
}

impl From<AblationArg> for AblationVariant {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => AblationVariant::Full,
            AblationArg::NoSupervised => AblationVariant::NoSupervised,
            AblationArg::NoPrivate => AblationVariant::NoPrivate,
            AblationArg::RecOnly => AblationVariant::RecOnly,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "arn",
    version,
    about = "Cross-domain re-identification with shared/private feature decomposition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-domain dataset in directory format.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<i64>,
    },
    /// Train a model; writes log, checkpoints, metrics, and CMC curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<i64>,
        /// Override the config's ablation flags with a named variant.
        #[arg(long)]
        ablation: Option<AblationArg>,
        #[arg(long, value_enum, default_value_t = ProtocolArg::CrossCamera)]
        protocol: ProtocolArg,
        /// Also render the CMC curve as a PNG.
        #[arg(long)]
        plot: bool,
    },
    /// Train and evaluate all four model variants from one seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<i64>,
        #[arg(long, value_enum, default_value_t = ProtocolArg::CrossCamera)]
        protocol: ProtocolArg,
    },
    /// Evaluate a checkpoint on a dataset's query/gallery split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::CrossCamera)]
        protocol: ProtocolArg,
        #[arg(long)]
        plot: bool,
    },
    /// Finite-difference self-check of the four loss gradients.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: i64,
        /// Test hook: corrupt the named loss's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<ExitCode, arn::ArnError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            cmd_gen_data(&config, &out, seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            out,
            seed,
            ablation,
            protocol,
            plot,
        } => {
            cmd_train(
                &config,
                &out,
                seed,
                ablation.map(Into::into),
                protocol.into(),
                plot,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            config,
            out,
            seed,
            protocol,
        } => {
            cmd_ablate(&config, &out, seed, protocol.into())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            protocol,
            plot,
        } => {
            cmd_eval(&checkpoint, &config, &out, protocol.into(), plot)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckGrads { seed, corrupt } => {
            match cmd_check_grads(seed, corrupt.as_deref())? {
                None => Ok(ExitCode::SUCCESS),
                Some(loss) => {
                    eprintln!("error: gradient check failed for loss '{loss}'");
                    Ok(ExitCode::from(5))
                }
            }
        }
    }
}

fn main() -> ExitCode {
    // Data-prep parallelism knob; the training loop itself is sequential.
    if let Ok(workers) = std::env::var("ARN_NUM_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
