use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dynamicdps::cli::{self, Command, Options, Partition};
use dynamicdps::solver::Mode;

#[derive(Parser)]
#[command(name = "dynamicdps", version, about = "Warm-started diffusion posterior sampling on synthetic phantoms")]
struct Args {
    #[command(subcommand)]
    command: Cmd,

    /// Flat key=value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Dynamic)]
    mode: ModeArg,

    #[arg(long, global = true, value_enum)]
    partition: Option<PartitionArg>,

    /// Overwrite existing datasets.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate templates and reference/test datasets.
    PhantomGen,
    /// Fit the ridge conditional model on in-distribution references.
    FitConditional,
    /// Build the start-time memory bank for a partition.
    BankBuild,
    /// Reconstruct every test sample of a partition.
    Solve,
    /// Score solve outputs and write the metrics CSV and montages.
    Evaluate,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Dynamic,
    Vanilla,
}

#[derive(ValueEnum, Clone, Copy)]
enum PartitionArg {
    Ind,
    OodContrast,
    OodRes,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let Some(config) = args.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    let command = match args.command {
        Cmd::PhantomGen => Command::PhantomGen,
        Cmd::FitConditional => Command::FitConditional,
        Cmd::BankBuild => Command::BankBuild,
        Cmd::Solve => Command::Solve,
        Cmd::Evaluate => Command::Evaluate,
    };
    let opts = Options {
        config,
        mode: match args.mode {
            ModeArg::Dynamic => Mode::Dynamic,
            ModeArg::Vanilla => Mode::Vanilla,
        },
        partition: args.partition.map(|p| match p {
            PartitionArg::Ind => Partition::Ind,
            PartitionArg::OodContrast => Partition::OodContrast,
            PartitionArg::OodRes => Partition::OodRes,
        }),
        force: args.force,
    };
    match cli::run(command, &opts) {
        Ok(lines) => {
            lines.iter().for_each(|l| println!("{l}"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
