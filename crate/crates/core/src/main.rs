use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use demoguide::harness::{
    collect_demos, evaluate_run, evaluate_scripted, metric_bench, train, RunConfig,
};
use demoguide::Result;

#[derive(Parser)]
#[command(
    name = "demoguide",
    about = "Demonstration-guided reinforcement learning from pixels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat dotted-key JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the scripted demonstrator and write the demo directory.
    CollectDemos {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to the config's demos.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an agent, writing config snapshot, metrics, and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the guaranteed demo fraction in batches.
        #[arg(long)]
        flag_is: Option<bool>,
        /// Override TD-target value clipping.
        #[arg(long)]
        flag_vc: Option<bool>,
        /// Override the demonstration-matching exploration bonus.
        #[arg(long)]
        flag_shaping: Option<bool>,
        /// Override random-crop augmentation.
        #[arg(long)]
        flag_augment: Option<bool>,
    },
    /// Evaluate a checkpoint (or replay the scripted demonstrator).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to load; required unless --scripted.
        #[arg(long, required_unless_present = "scripted")]
        checkpoint: Option<PathBuf>,
        /// Episode count; defaults to the config's run.eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Replay the scripted demonstrator instead of a learned policy.
        #[arg(long)]
        scripted: bool,
    },
    /// Compare distance metrics on the probe states and write a CSV.
    MetricBench {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::CollectDemos { common, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.demos.dir));
            collect_demos(&cfg, &out)?;
        }
        Command::Train { common, out, flag_is, flag_vc, flag_shaping, flag_augment } => {
            let mut cfg = common.load()?;
            if let Some(v) = flag_is {
                cfg.flags.is = v;
            }
            if let Some(v) = flag_vc {
                cfg.flags.vc = v;
            }
            if let Some(v) = flag_shaping {
                cfg.flags.shaping = v;
            }
            if let Some(v) = flag_augment {
                cfg.flags.augment = v;
            }
            train(&cfg, &out)?;
        }
        Command::Eval { common, checkpoint, episodes, scripted } => {
            let cfg = common.load()?;
            let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
            let report = if scripted {
                evaluate_scripted(&cfg, episodes, cfg.run.seed)?
            } else {
                let checkpoint = checkpoint.expect("clap enforces --checkpoint");
                evaluate_run(&cfg, &checkpoint, episodes, cfg.run.seed)?
            };
            println!(
                "episodes {}  success_rate {}  mean_return {}",
                report.episodes, report.success_rate, report.mean_return
            );
        }
        Command::MetricBench { common, out } => {
            let cfg = common.load()?;
            metric_bench(&cfg, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
