mod commands;
mod config;
mod failure;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "l2tkt",
    version,
    about = "Teacher/student training with knowledge transfer and a dynamic quiz pool"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// JSON config merged over the defaults; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct DataArgs {
    /// Directory written by `synth-data` (uses its labeled.csv and aux.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    #[arg(long)]
    pub aux: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Student learning rate.
    #[arg(long)]
    pub lambda_s: Option<f64>,
    /// Teacher learning rate.
    #[arg(long)]
    pub lambda_t: Option<f64>,
    /// Check stage isolation and pool disjointness at every stage.
    #[arg(long)]
    pub check_isolation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PoolArg {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled set and a mask-annotated auxiliary set.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of labeled images.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        /// Number of auxiliary images.
        #[arg(long)]
        n_aux: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        label_noise: Option<f64>,
    },
    /// Supervised baseline on the labeled training split.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Teacher/student training with a static or dynamic quiz pool.
    TrainL2tkt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum)]
        pool: Option<PoolArg>,
        /// Baseline student checkpoint (stem or .json/.bin path).
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        /// Finite-difference meta-gradient instead of the exact one.
        #[arg(long)]
        first_order: bool,
        /// Continue from the run directory's saved state.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a student checkpoint on a labeled manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Summarize the per-epoch quiz-pool composition of a dynamic run.
    InspectPool {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
    },
    /// Paired-seed baseline / static / dynamic comparison on synthetic data.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::SynthData {
            common,
            n,
            n_aux,
            image_size,
            label_noise,
        } => commands::synth_data(&common, n, n_aux, image_size, label_noise),
        Command::TrainBaseline {
            common,
            data,
            train,
        } => commands::train_baseline(&common, &data, &train),
        Command::TrainL2tkt {
            common,
            data,
            train,
            pool,
            baseline_ckpt,
            first_order,
            resume,
        } => commands::train_l2tkt(
            &common,
            &data,
            &train,
            pool,
            baseline_ckpt,
            first_order,
            resume,
        ),
        Command::Eval {
            common,
            data,
            ckpt,
            split,
        } => commands::eval(&common, &data, &ckpt, split),
        Command::InspectPool { common, run } => commands::inspect_pool(&common, &run),
        Command::Compare { common, seeds } => commands::compare(&common, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::FAILURE
        }
    }
}
