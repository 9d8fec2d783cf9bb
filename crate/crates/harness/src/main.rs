use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use asc_core::channel::ChannelKind;
use asc_core::Result;
use asc_harness::cli::{
    adapt_command, evaluate_command, plot_command, train_command, transmit_command, TransmitArgs,
};
use asc_harness::config::{ExperimentConfig, Scheme};

#[derive(Parser)]
#[command(name = "asc", version, about = "Adaptive semantic communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Baseline,
    TxModel,
    TxCode,
    TxrxFull,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Awgn,
    BlockFading,
    SelectiveFading,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline transceiver.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every configured scheme and write RD reports.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Send one PNG image over a simulated channel.
    Transmit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, value_enum, default_value = "baseline")]
        scheme: SchemeArg,
        #[arg(long, value_enum, default_value = "awgn")]
        channel: ChannelArg,
        #[arg(long)]
        eta_y: Option<f64>,
        /// Adaptation steps for adaptive schemes.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the reconstruction.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute BD-rate tables from a report directory.
    Evaluate {
        #[arg(long)]
        reports: PathBuf,
    },
    /// Draw RD and trajectory figures from a report directory.
    Plot {
        #[arg(long)]
        reports: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBaseline { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = train_command(&cfg)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Adapt { config, checkpoint } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (dir, report) = adapt_command(&cfg, &checkpoint)?;
            println!(
                "{} records written to {} ({} failed points)",
                report.records.len(),
                dir.display(),
                report.errors
            );
        }
        Command::Transmit {
            checkpoint,
            image,
            snr_db,
            scheme,
            channel,
            eta_y,
            steps,
            seed,
            output,
        } => {
            let scheme = match scheme {
                SchemeArg::Baseline => Scheme::Baseline,
                SchemeArg::TxModel => Scheme::TxModel,
                SchemeArg::TxCode => Scheme::TxCode,
                SchemeArg::TxrxFull => Scheme::TxrxFull,
            };
            let channel = match channel {
                ChannelArg::Awgn => ChannelKind::Awgn,
                ChannelArg::BlockFading => ChannelKind::BlockFading,
                ChannelArg::SelectiveFading => ChannelKind::SelectiveFading,
            };
            let out = transmit_command(&TransmitArgs {
                checkpoint,
                image,
                snr_db,
                scheme,
                channel,
                eta_y,
                steps,
                seed,
                output,
            })?;
            println!(
                "scheme={} R={:.6} M={:.6} mse={:.6} psnr={:.3}",
                scheme.name(),
                out.r,
                out.m,
                out.mse,
                out.psnr
            );
        }
        Command::Evaluate { reports } => {
            for r in evaluate_command(&reports)? {
                println!(
                    "{} vs {} [{} @ {} dB]: BD-rate {:.2}%  BD-PSNR {:.3} dB  {}",
                    r.scheme, r.reference, r.scope, r.snr_db, r.bd_rate_pct, r.bd_psnr_db, r.status
                );
            }
        }
        Command::Plot { reports } => {
            for p in plot_command(&reports)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
