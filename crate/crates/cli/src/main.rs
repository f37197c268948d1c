mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Masked cross-view feature prediction: pretraining, evaluation and verification tools.
#[derive(Debug, Parser)]
#[command(name = "sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain on `data.train`, writing checkpoints and a JSON-lines log to `out.dir`.
    Pretrain(Common),
    /// kNN accuracy of a checkpoint's frozen backbone features.
    EvalKnn(Common),
    /// Linear-probe accuracy of a checkpoint's frozen backbone features.
    EvalLinear(Common),
    /// Print view-b positions in view a's token frame as CSV (`--set crop_a=t,l,h,w crop_b=.. grid=N`).
    InspectGeometry(Common),
    /// Finite-difference check of every autodiff op and of the full online loss path.
    GradCheck(Common),
    /// Write the procedural shapes dataset (`--out DIR`, `--set train=N test=N classes=N size=N seed=N`).
    GenSynthetic(Common),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, and several `k=v` may follow one flag.
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
    pub set: Vec<String>,
    /// Checkpoint to evaluate, or to resume pretraining from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Destination of the command's machine-readable output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SIM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SIM_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot size worker pool: {e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::EvalKnn(c) => commands::eval(&c, "knn"),
        Command::EvalLinear(c) => commands::eval(&c, "linear"),
        Command::InspectGeometry(c) => commands::inspect_geometry(&c),
        Command::GradCheck(c) => commands::grad_check(&c),
        Command::GenSynthetic(c) => commands::gen_synthetic(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
