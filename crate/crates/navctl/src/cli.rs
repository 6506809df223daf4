use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goalnav::policy::{InputMode, Strategy};
use goalnav::trainer::Precision;
use goalnav::Granularity;

#[derive(Debug, Parser)]
#[command(name = "navctl", version, about = "Grid-world object-goal navigation pipeline")]
pub struct Cli {
    /// Taxonomy JSON file; the built-in desk taxonomy when omitted.
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scene generation.
    Scene {
        #[command(subcommand)]
        action: SceneCmd,
    },
    /// Expert demonstrations.
    Demos {
        #[command(subcommand)]
        action: DemosCmd,
    },
    /// Behavior-cloning training.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline agent.
    Eval(EvalArgs),
    /// Compare OS and RGB checkpoints under instance-color resampling.
    ShiftReport(ShiftArgs),
    /// Replay trajectories and check them against the simulator.
    Replay(ReplayArgs),
    /// Run the teleoperation service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum SceneCmd {
    /// Write `count` scenes with seeds `seed..seed+count`.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Generator parameters as JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DemosCmd {
    /// Roll the expert on every scene of a directory into one JSONL file.
    Gen {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_scene: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep episodes whose final frame misses the goal instead of
        /// resampling them.
        #[arg(long)]
        allow_unseen_goal: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub demos: PathBuf,
    /// Scene directory; needed when frames must be re-rendered (color or
    /// fine labels).
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<InputMode>,
    #[arg(long)]
    pub granularity: Option<GranularityArg>,
    /// Training configuration JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss log (JSONL). Contains wall-clock times.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Coarse,
    Fine,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Granularity {
        match g {
            GranularityArg::Coarse => Granularity::Coarse,
            GranularityArg::Fine => Granularity::Fine,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineAgent {
    Expert,
    Random,
    Stop,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "agent", required_unless_present = "agent")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub agent: Option<BaselineAgent>,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Episodes per scene.
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sample")]
    pub strategy: Strategy,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub ckpt_os: PathBuf,
    #[arg(long)]
    pub ckpt_rgb: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 99)]
    pub color_seed: u64,
    #[arg(long, default_value = "sample")]
    pub strategy: Strategy,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Compare every stored frame against a fresh render and require success.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Saved trajectories are written below this directory.
    #[arg(long, default_value = ".")]
    pub record_dir: PathBuf,
}
