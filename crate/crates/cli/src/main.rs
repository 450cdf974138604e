use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaussocc::fusion::FusionStrategy;
use gaussocc::pipeline::AnchorInit;

mod commands;
mod report;

#[derive(Parser)]
#[command(name = "gaussocc", version, about = "Semantic occupancy from 3D Gaussians")]
struct Cli {
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// JSON file of option defaults; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic room and a camera trajectory.
    Gen(GenArgs),
    /// Fit Gaussians to a ground-truth grid.
    Fit(FitArgs),
    /// Predict local occupancy for one posed frame.
    Predict(PredictArgs),
    /// Fuse local predictions over a whole trajectory.
    Explore(ExploreArgs),
    /// Compare two grids.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size as XxYxZ.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: Option<u64>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_image)]
    pub image: Option<(usize, usize)>,
    /// Also write scene.csv as x,y,z,label.
    #[arg(long)]
    pub export_csv: bool,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gaussians: Option<u64>,
    #[arg(long)]
    pub smax: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub free_mass: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write pred.csv as x,y,z,label.
    #[arg(long)]
    pub export_csv: bool,
}

/// Options shared by predict and explore.
#[derive(Args)]
pub struct EncoderArgs {
    /// "zero", "random", or a weight file.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub init: Option<AnchorInit>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gaussians: Option<u64>,
    #[arg(long)]
    pub smax: Option<f64>,
    #[arg(long)]
    pub feat_dim: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub free_mass: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub frame: usize,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write pred.csv as x,y,z,label.
    #[arg(long)]
    pub export_csv: bool,
}

#[derive(Args)]
pub struct ExploreArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub strategy: Option<FusionStrategy>,
    /// Use only the first N frames of the trajectory.
    #[arg(long)]
    pub frames: Option<usize>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write global.csv as x,y,z,label.
    #[arg(long)]
    pub export_csv: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Grid whose occupied voxels select what is scored.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Where to write the metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err(format!("expected three positive sizes like 60x60x36, got {s:?}")),
    }
}

fn parse_image(s: &str) -> Result<(usize, usize), String> {
    match s.split('x').map(str::parse::<usize>).collect::<Result<Vec<_>, _>>() {
        Ok(v) if v.len() == 2 && v[0] > 0 && v[1] > 0 => Ok((v[0], v[1])),
        _ => Err(format!("expected HxW like 60x80, got {s:?}")),
    }
}

/// 2 usage, 3 validation, 4 numerical failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<gaussocc::Error>() {
        Some(gaussocc::Error::Numerical(_)) | Some(gaussocc::Error::DegenerateRotation(_)) => 4,
        Some(gaussocc::Error::Io(_)) | None => 1,
        Some(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::load_config(cli.config.as_deref()).and_then(|cfg| {
        gaussocc::exec::with_threads(cli.threads, || match cli.command {
            Command::Gen(a) => commands::gen(a, &cfg),
            Command::Fit(a) => commands::fit(a, &cfg),
            Command::Predict(a) => commands::predict(a, &cfg),
            Command::Explore(a) => commands::explore(a, &cfg),
            Command::Eval(a) => commands::eval(a),
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
