//! Demo collection: runs the scripted demonstrator once per requested
//! trajectory and writes the on-disk demo directory.

use std::path::Path;

use rand::Rng;

use crate::demostore::{load_demos, save_demo_dir, DemoSet};
use crate::envsim::scripted_demonstrator;
use crate::rng;
use crate::Result;

use super::RunConfig;

#[derive(Clone, Debug)]
pub struct CollectSummary {
    pub lengths: Vec<usize>,
    pub total_steps: usize,
}

/// Collects `demos.count` demonstrations and writes them to `out_dir`,
/// printing one line per demo and a total. Each demo gets its own seed drawn
/// from the master seed, so re-running with the same config is byte-identical
/// while the demos still differ from each other.
pub fn collect_demos(cfg: &RunConfig, out_dir: &Path) -> Result<CollectSummary> {
    cfg.validate()?;
    let maze = cfg.maze()?;
    let mut seeds = rng::stream(cfg.run.seed, "demo-seeds");

    let mut trajectories = Vec::with_capacity(cfg.demos.count);
    for index in 0..cfg.demos.count {
        let demo_seed: u64 = seeds.gen();
        let traj = scripted_demonstrator(&maze, index, demo_seed)?;
        println!("demo {index}: {} steps", traj.len());
        trajectories.push(traj);
    }

    let demos: DemoSet = load_demos(trajectories)?;
    if demos.is_empty() {
        eprintln!("warning: no demonstrations requested; writing an empty demo set");
    }
    save_demo_dir(out_dir, &demos)?;

    let lengths: Vec<usize> = demos.trajectories().iter().map(|t| t.len()).collect();
    let total_steps = demos.total_steps();
    println!("{} demos, {total_steps} steps total -> {}", lengths.len(), out_dir.display());
    Ok(CollectSummary { lengths, total_steps })
}
