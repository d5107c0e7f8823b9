//! The distance-metric benchmark: trains the full latent model and a plain
//! VAE on the same offline dataset, then compares pixel distance, VAE
//! embedding distance, and the augmentation-invariant metric against ground
//! truth on three probe states (a reference, a near state, and a state that
//! is close in pixels but far in the maze).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::demostore::Transition;
use crate::envsim::{ground_truth_distance, render_at, Env, EnvState, MazeConfig, Observation};
use crate::latentmodel::{LatentModel, ModelTrainer};
use crate::rng;
use crate::{Error, Result};

use super::config::ACTION_DIM;
use super::RunConfig;

pub const BENCH_FILE: &str = "metric_bench.csv";

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub metric: String,
    pub d_ab: f64,
    pub d_ac: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, metric: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn ratio(&self, metric: &str) -> Option<f64> {
        self.row(metric).map(|r| r.ratio)
    }
}

fn probe_state(p: [f64; 2]) -> EnvState {
    EnvState { pos: (p[0], p[1]), steps: 0, done: false }
}

fn pixel_distance(a: &Observation, b: &Observation) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(x, y)| {
            let d = f64::from(x - y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Uniform random-policy transitions with uniformly placed starts, covering
/// the maze far better than on-policy rollouts would.
fn collect_dataset(
    maze: &MazeConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Transition>> {
    let mut env = Env::new(maze.clone())?;
    let mut dataset = Vec::with_capacity(count);
    for _ in 0..count {
        let pos = maze.random_free_position(rng);
        let obs = env.place(pos)?;
        let action: Vec<f64> = (0..ACTION_DIM).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let out = env.step([action[0], action[1]])?;
        dataset.push(Transition {
            obs,
            action,
            next_obs: out.obs,
            reward: out.reward,
            done: out.success,
            demo: false,
            demo_coords: None,
        });
    }
    Ok(dataset)
}

const PROGRESS_EVERY: usize = 500;

fn train_offline(
    trainer: &mut ModelTrainer<f32>,
    dataset: &[Transition],
    updates: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut last = f64::NAN;
    for u in 0..updates {
        let picks: Vec<&Transition> =
            (0..batch).map(|_| &dataset[rng.gen_range(0..dataset.len())]).collect();
        let parts = trainer.update(&picks, rng)?;
        last = parts.total(trainer.lambda);
        if (u + 1) % PROGRESS_EVERY == 0 {
            println!(
                "  update {}: loss {last:.4} (rec {:.4}, prior {:.4}, dyn {:.4})",
                u + 1,
                parts.reconstruction,
                parts.prior_kl,
                parts.dynamics_kl
            );
        }
    }
    Ok(last)
}

/// Runs the full benchmark and writes `metric_bench.csv` to `out_dir`.
pub fn metric_bench(cfg: &RunConfig, out_dir: &Path) -> Result<BenchReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join(super::train::CONFIG_SNAPSHOT))?;
    let maze = cfg.maze()?;
    let seed = cfg.run.seed;

    let mut data_rng = rng::stream(seed, "bench-dataset");
    let dataset = collect_dataset(&maze, cfg.bench.dataset_transitions, &mut data_rng)?;
    if dataset.is_empty() {
        return Err(Error::Config("bench.dataset_transitions must be positive".to_string()));
    }

    let arch = cfg.model_arch();
    let mut full_init = rng::stream(seed, "bench-model-init");
    let mut full = ModelTrainer::new(
        LatentModel::new(arch.clone(), &mut full_init)?,
        cfg.model.lr,
        cfg.model.lambda,
        cfg.model.crop_pad,
    );
    full.kl_hold = cfg.model.kl_hold;
    full.kl_warmup = cfg.model.kl_warmup;
    let mut full_rng = rng::stream(seed, "bench-model");
    let full_loss =
        train_offline(&mut full, &dataset, cfg.bench.model_updates, cfg.model.batch, &mut full_rng)?;
    println!("full model: {} updates, final loss {full_loss:.4}", cfg.bench.model_updates);

    // The plain-VAE baseline drops the dynamics term and the crop
    // augmentation; everything else matches the full model.
    let mut vae_init = rng::stream(seed, "bench-vae-init");
    let mut vae = ModelTrainer::new(
        LatentModel::new(arch, &mut vae_init)?,
        cfg.model.lr,
        0.0,
        0,
    );
    vae.kl_hold = cfg.model.kl_hold;
    vae.kl_warmup = cfg.model.kl_warmup;
    let mut vae_rng = rng::stream(seed, "bench-vae");
    let vae_loss =
        train_offline(&mut vae, &dataset, cfg.bench.model_updates, cfg.model.batch, &mut vae_rng)?;
    println!("plain vae: {} updates, final loss {vae_loss:.4}", cfg.bench.model_updates);

    let [a, b, c] = [cfg.bench.probe_a, cfg.bench.probe_b, cfg.bench.probe_c];
    let obs_a = render_at(&maze, (a[0], a[1]));
    let obs_b = render_at(&maze, (b[0], b[1]));
    let obs_c = render_at(&maze, (c[0], c[1]));

    let make_row = |metric: &str, d_ab: f64, d_ac: f64| -> Result<BenchRow> {
        if !(d_ab.is_finite() && d_ac.is_finite()) || d_ac == 0.0 {
            return Err(Error::Training(format!(
                "{metric} produced degenerate probe distances {d_ab} and {d_ac}"
            )));
        }
        Ok(BenchRow { metric: metric.to_string(), d_ab, d_ac, ratio: d_ab / d_ac })
    };

    let rows = vec![
        make_row(
            "ground_truth",
            ground_truth_distance(&probe_state(a), &probe_state(b)),
            ground_truth_distance(&probe_state(a), &probe_state(c)),
        )?,
        make_row("pixel_l2", pixel_distance(&obs_a, &obs_b), pixel_distance(&obs_a, &obs_c))?,
        make_row(
            "vae_l2",
            vae.model.adm_distance(&obs_a, &obs_b)?,
            vae.model.adm_distance(&obs_a, &obs_c)?,
        )?,
        make_row(
            "adm",
            full.model.adm_distance(&obs_a, &obs_b)?,
            full.model.adm_distance(&obs_a, &obs_c)?,
        )?,
    ];

    let mut csv = String::from("metric,d_ab,d_ac,ratio\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{},{}\n", row.metric, row.d_ab, row.d_ac, row.ratio));
        println!(
            "{:<12} d(a,b) {:>10.4}  d(a,c) {:>10.4}  ratio {:>7.4}",
            row.metric, row.d_ab, row.d_ac, row.ratio
        );
    }
    fs::write(out_dir.join(BENCH_FILE), csv)?;
    Ok(BenchReport { rows })
}
