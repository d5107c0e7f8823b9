//! The training loop: alternating latent-model phases and per-step
//! actor-critic updates on shaped, augmented, importance-sampled batches,
//! with periodic evaluation, checkpoints, and a metrics stream.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::demostore::{load_demo_dir, DemoSet, ReplayBuffer, Transition};
use crate::envsim::{scripted_demonstrator, Env, MazeConfig, Observation};
use crate::latentmodel::{observation_pixels, Augmenter, LatentModel, ModelTrainer};
use crate::learner::{augment_batch, ActorStats, CriticStats, Learner, RlBatchItem};
use crate::rng;
use crate::shaping::{
    compute_epsilon, embed_batch, rebuild_index, shape_reward, DemoEmbeddingIndex, ShapingConfig,
    ShapingStats, Threshold,
};
use crate::{Error, Result};

use super::checkpoint::{save_run_checkpoint, CHECKPOINT_DIR, DIAGNOSTIC_DIR};
use super::config::ACTION_DIM;
use super::metrics::{MetricsRow, MetricsWriter, METRICS_FILE};
use super::{load_run_checkpoint, RunConfig};

pub const CONFIG_SNAPSHOT: &str = "config.json";

/// End-of-run summary, also derivable from the metrics CSV.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub steps: usize,
    pub episodes: usize,
    pub train_successes: usize,
    pub first_train_success_step: Option<usize>,
    pub best_eval_success: f64,
    pub best_eval_step: Option<usize>,
    pub final_eval_success: Option<f64>,
    pub model_phases: usize,
    pub model_updates: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Every random stream in a run, fanned out from the master seed so the
/// subsystems cannot perturb each other's sequences.
struct Streams {
    episodes: ChaCha8Rng,
    actions: ChaCha8Rng,
    replay: ChaCha8Rng,
    augment: ChaCha8Rng,
    update: ChaCha8Rng,
    model: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            episodes: rng::stream(seed, "episode-seeds"),
            actions: rng::stream(seed, "actions"),
            replay: rng::stream(seed, "replay"),
            augment: rng::stream(seed, "augment"),
            update: rng::stream(seed, "updates"),
            model: rng::stream(seed, "model-batches"),
            eval: rng::stream(seed, "eval-episodes"),
        }
    }
}

/// Averages update diagnostics between metric rows.
#[derive(Default)]
struct WindowStats {
    updates: usize,
    critic_loss: f64,
    actor_loss: f64,
    mean_q: f64,
    mean_target: f64,
    clip_rate: f64,
    temperature: f64,
    entropy: f64,
    shaping: ShapingStats,
}

impl WindowStats {
    fn add(&mut self, c: CriticStats, a: ActorStats) {
        self.updates += 1;
        self.critic_loss += c.loss;
        self.mean_q += c.mean_q;
        self.mean_target += c.mean_target;
        self.clip_rate += c.clip_rate;
        self.actor_loss += a.loss;
        self.temperature += a.temperature;
        self.entropy += a.entropy;
    }

    fn fill(&self, row: &mut MetricsRow) {
        let n = self.updates as f64;
        row.critic_loss = Some(self.critic_loss / n);
        row.actor_loss = Some(self.actor_loss / n);
        row.mean_q = Some(self.mean_q / n);
        row.mean_target = Some(self.mean_target / n);
        row.clip_rate = Some(self.clip_rate / n);
        row.temperature = Some(self.temperature / n);
        row.entropy = Some(self.entropy / n);
        if self.shaping.total > 0 {
            row.match_rate = Some(self.shaping.match_rate());
            row.mean_bonus = Some(self.shaping.mean_bonus());
        }
    }
}

struct TrainDriver<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    maze: MazeConfig,
    env: Env,
    demos: DemoSet,
    buffer: ReplayBuffer,
    trainer: ModelTrainer<f32>,
    learner: Learner<f32>,
    augmenter: Augmenter,
    shaping_cfg: ShapingConfig,
    index: Option<DemoEmbeddingIndex>,
    threshold: Option<Threshold>,
    model_version: u64,
    shaping_active: bool,
    streams: Streams,
    writer: MetricsWriter,
    episode: usize,
    total_model_updates: usize,
    model_phases: usize,
}

/// Runs a full training session in `out_dir`: config snapshot, metrics CSV,
/// periodic and final checkpoints. A training divergence saves a diagnostic
/// checkpoint before the error propagates.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join(CONFIG_SNAPSHOT))?;

    let mut driver = TrainDriver::new(cfg, out_dir)?;
    match driver.run() {
        Ok(outcome) => Ok(outcome),
        Err(err) => {
            if matches!(err, Error::Training(_)) {
                let diag = out_dir.join(DIAGNOSTIC_DIR);
                if save_run_checkpoint(&diag, &driver.trainer.model, &driver.learner).is_ok() {
                    eprintln!("training diverged; diagnostic checkpoint at {}", diag.display());
                }
            }
            Err(err)
        }
    }
}

impl<'a> TrainDriver<'a> {
    fn new(cfg: &'a RunConfig, out: &'a Path) -> Result<Self> {
        let maze = cfg.maze()?;
        let env = Env::new(maze.clone())?;

        let demo_dir = PathBuf::from(&cfg.demos.dir);
        let need_demos = cfg.flags.shaping || (cfg.flags.is && cfg.learner.p_d > 0.0);
        let demos = if demo_dir.join("manifest.json").exists() {
            load_demo_dir(&demo_dir)?
        } else if need_demos {
            return Err(Error::Config(format!(
                "no demonstrations at {} but shaping or importance sampling is enabled; \
                 run collect-demos first",
                demo_dir.display()
            )));
        } else {
            DemoSet::default()
        };
        if need_demos && demos.is_empty() {
            return Err(Error::Config(format!(
                "the demo set at {} is empty but shaping or importance sampling is enabled",
                demo_dir.display()
            )));
        }

        let seed = cfg.run.seed;
        let mut model_init = rng::stream(seed, "model-init");
        let model = LatentModel::new(cfg.model_arch(), &mut model_init)?;
        let mut trainer =
            ModelTrainer::new(model, cfg.model.lr, cfg.model.lambda, cfg.model.crop_pad);
        trainer.kl_hold = cfg.model.kl_hold;
        trainer.kl_warmup = cfg.model.kl_warmup;
        let mut agent_init = rng::stream(seed, "agent-init");
        let learner_cfg = cfg.learner_config()?;
        let augmenter = Augmenter::new(learner_cfg.crop_pad);
        let learner = Learner::new(learner_cfg, &mut agent_init)?;

        let mut buffer = ReplayBuffer::new(cfg.run.replay_capacity)?;
        buffer.load_demos(&demos, maze.r_done, maze.r_live)?;

        let writer = MetricsWriter::create(&out.join(METRICS_FILE))?;
        let shaping_active = cfg.flags.shaping && !demos.is_empty();

        Ok(TrainDriver {
            cfg,
            out,
            maze,
            env,
            demos,
            buffer,
            trainer,
            learner,
            augmenter,
            shaping_cfg: cfg.shaping_config(),
            index: None,
            threshold: None,
            model_version: 0,
            shaping_active,
            streams: Streams::new(seed),
            writer,
            episode: 0,
            total_model_updates: 0,
            model_phases: 0,
        })
    }

    /// Trains the latent model until its moving-average loss stops improving,
    /// then refreshes the demo index and threshold. Returns the update count
    /// and the final moving-average loss.
    fn model_phase(&mut self) -> Result<(usize, f64)> {
        let mc = &self.cfg.model;
        let mut losses: Vec<f64> = Vec::with_capacity(mc.max_updates);
        let mut last_check_ma: Option<f64> = None;
        while losses.len() < mc.max_updates {
            let batch = self.buffer.sample_batch(mc.batch, 0.0, &mut self.streams.model)?;
            let parts = self.trainer.update(&batch, &mut self.streams.model)?;
            losses.push(parts.total(mc.lambda));
            // While the KL ramp is active the loss trajectory is not
            // comparable across checks, so convergence waits it out.
            if self.trainer.updates() < mc.kl_hold + mc.kl_warmup {
                continue;
            }
            if losses.len() >= mc.ma_window && losses.len() % mc.converge_window == 0 {
                let ma = mean(&losses[losses.len() - mc.ma_window..]);
                if let Some(prev) = last_check_ma {
                    if (prev - ma) / prev.abs().max(1e-12) < mc.converge_tol {
                        break;
                    }
                }
                last_check_ma = Some(ma);
            }
        }
        let tail = losses.len().min(mc.ma_window);
        let final_ma = mean(&losses[losses.len() - tail..]);

        self.model_phases += 1;
        self.total_model_updates += losses.len();
        self.model_version += 1;
        let idx = rebuild_index(&self.demos, &self.trainer.model, self.model_version)?;
        match compute_epsilon(&idx) {
            Some(t) => {
                self.threshold = Some(t);
                self.index = Some(idx);
            }
            None => {
                eprintln!(
                    "warning: demonstrations are too short for a distance threshold; \
                     disabling shaping"
                );
                self.shaping_active = false;
                self.threshold = None;
                self.index = None;
            }
        }
        Ok((losses.len(), final_ma))
    }

    /// One actor-critic update on a freshly sampled batch: importance-sample,
    /// shape rewards with the current model, augment, step, track targets.
    fn do_update(&mut self, window: &mut WindowStats) -> Result<()> {
        let p_d = if self.cfg.flags.is { self.cfg.learner.p_d } else { 0.0 };
        let batch =
            self.buffer.sample_batch(self.cfg.learner.batch, p_d, &mut self.streams.replay)?;

        let mut rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        if self.shaping_active {
            if let (Some(index), Some(threshold)) = (&self.index, &self.threshold) {
                let next_obs: Vec<&Observation> = batch.iter().map(|t| &t.next_obs).collect();
                let embeddings = embed_batch(&self.trainer.model, &next_obs)?;
                for (i, t) in batch.iter().enumerate() {
                    let outcome = shape_reward(
                        t.reward,
                        &embeddings[i],
                        t.done,
                        index,
                        threshold,
                        &self.shaping_cfg,
                    )?;
                    window.shaping.record(&outcome);
                    rewards[i] = outcome.reward;
                }
            }
        }

        let mut items: Vec<RlBatchItem<f32>> = batch
            .iter()
            .zip(&rewards)
            .map(|(t, &reward)| RlBatchItem {
                obs: observation_pixels(&t.obs),
                action: t.action.clone(),
                reward,
                next_obs: observation_pixels(&t.next_obs),
                done: t.done,
            })
            .collect();
        drop(batch);
        augment_batch(
            &mut items,
            &self.augmenter,
            self.cfg.env.image_side,
            &mut self.streams.augment,
        );

        let (critic, actor) = self.learner.update_step(&items, &mut self.streams.update)?;
        self.learner.update_targets();
        window.add(critic, actor);
        Ok(())
    }

    /// Deterministic evaluation episodes on a fresh environment instance.
    fn eval(&mut self) -> Result<(f64, f64)> {
        let episodes = self.cfg.run.eval_episodes;
        let mut env = Env::new(self.maze.clone())?;
        let mut successes = 0usize;
        let mut return_sum = 0.0;
        for _ in 0..episodes {
            let seed: u64 = self.streams.eval.gen();
            let (ep_return, success) = run_policy_episode(&mut env, seed, &self.learner)?;
            if success {
                successes += 1;
            }
            return_sum += ep_return;
        }
        Ok((successes as f64 / episodes as f64, return_sum / episodes as f64))
    }

    fn save_checkpoint(&self) -> Result<()> {
        save_run_checkpoint(&self.out.join(CHECKPOINT_DIR), &self.trainer.model, &self.learner)
    }

    fn run(&mut self) -> Result<TrainOutcome> {
        let mut outcome = TrainOutcome::default();
        let rc = &self.cfg.run;

        if self.shaping_active {
            let (updates, loss_ma) = self.model_phase()?;
            let mut row = MetricsRow::default();
            row.model_loss = Some(loss_ma);
            row.model_updates = Some(self.total_model_updates);
            row.epsilon = self.threshold.map(|t| t.epsilon);
            row.buffer_size = Some(self.buffer.len());
            self.writer.emit(0, &row)?;
            println!(
                "step 0: model phase 1: {updates} updates, loss {loss_ma:.4}, epsilon {}",
                self.threshold.map(|t| format!("{:.4}", t.epsilon)).unwrap_or_default()
            );
        }

        let mut obs = self.env.reset(self.streams.episodes.gen());
        let mut ep_return = 0.0;
        let mut ep_length = 0usize;
        let mut window = WindowStats::default();

        for step in 1..=rc.max_env_steps {
            let mut row = MetricsRow::default();

            let action: Vec<f64> = if step <= rc.warmup_steps {
                (0..ACTION_DIM).map(|_| self.streams.actions.gen::<f64>() * 2.0 - 1.0).collect()
            } else {
                self.learner.act(&obs, false, &mut self.streams.actions)?
            };
            let out = self.env.step([action[0], action[1]])?;
            ep_return += out.reward;
            ep_length += 1;
            self.buffer.push(Transition {
                obs: obs.clone(),
                action,
                next_obs: out.obs.clone(),
                reward: out.reward,
                done: out.success,
                demo: false,
                demo_coords: None,
            });
            obs = out.obs;

            if out.success {
                outcome.train_successes += 1;
                outcome.first_train_success_step.get_or_insert(step);
            }
            if out.done {
                row.episode = Some(self.episode);
                row.episode_return = Some(ep_return);
                row.episode_length = Some(ep_length);
                row.episode_success = Some(out.success);
                self.episode += 1;
                ep_return = 0.0;
                ep_length = 0;
                obs = self.env.reset(self.streams.episodes.gen());
            }

            if step > rc.warmup_steps && self.buffer.len() >= self.cfg.learner.batch {
                self.do_update(&mut window)?;
            }

            if step % rc.log_period == 0 && window.updates > 0 {
                window.fill(&mut row);
                window = WindowStats::default();
            }

            if self.shaping_active && step % self.cfg.model.refresh_period == 0 {
                let (updates, loss_ma) = self.model_phase()?;
                row.model_loss = Some(loss_ma);
                row.model_updates = Some(self.total_model_updates);
                row.epsilon = self.threshold.map(|t| t.epsilon);
                println!(
                    "step {step}: model phase {}: {updates} updates, loss {loss_ma:.4}",
                    self.model_phases
                );
            }

            if step % rc.eval_period == 0 {
                let (success_rate, mean_return) = self.eval()?;
                row.eval_success = Some(success_rate);
                row.eval_return = Some(mean_return);
                if success_rate > outcome.best_eval_success {
                    outcome.best_eval_success = success_rate;
                    outcome.best_eval_step = Some(step);
                }
                outcome.final_eval_success = Some(success_rate);
                println!(
                    "step {step}: eval success {success_rate:.2}, mean return {mean_return:.1}"
                );
            }

            if step % rc.checkpoint_period == 0 {
                self.save_checkpoint()?;
            }

            if !row.is_blank() {
                row.buffer_size = Some(self.buffer.len());
                self.writer.emit(step, &row)?;
            }
        }

        self.save_checkpoint()?;
        outcome.steps = rc.max_env_steps;
        outcome.episodes = self.episode;
        outcome.model_phases = self.model_phases;
        outcome.model_updates = self.total_model_updates;
        println!(
            "done: {} steps, {} episodes, {} training successes, best eval success {:.2}",
            outcome.steps, outcome.episodes, outcome.train_successes, outcome.best_eval_success
        );
        Ok(outcome)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One deterministic-policy episode; returns (undiscounted return, success).
fn run_policy_episode(env: &mut Env, seed: u64, learner: &Learner<f32>) -> Result<(f64, bool)> {
    let mut obs = env.reset(seed);
    let mut ep_return = 0.0;
    let mut success = false;
    let mut noop = rng::stream(seed, "eval-act");
    loop {
        let action = learner.act(&obs, true, &mut noop)?;
        let out = env.step([action[0], action[1]])?;
        ep_return += out.reward;
        obs = out.obs;
        if out.success {
            success = true;
        }
        if out.done {
            return Ok((ep_return, success));
        }
    }
}

/// Loads a checkpoint and runs deterministic evaluation episodes.
pub fn evaluate_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".to_string()));
    }
    let maze = cfg.maze()?;
    let mut init = rng::stream(seed, "eval-init");
    let mut model = LatentModel::new(cfg.model_arch(), &mut init)?;
    let mut learner = Learner::new(cfg.learner_config()?, &mut init)?;
    load_run_checkpoint(checkpoint, &mut model, &mut learner)?;

    let mut env = Env::new(maze)?;
    let mut seeds = rng::stream(seed, "eval-episodes");
    let mut successes = 0usize;
    let mut return_sum = 0.0;
    for _ in 0..episodes {
        let (ep_return, success) = run_policy_episode(&mut env, seeds.gen(), &learner)?;
        if success {
            successes += 1;
        }
        return_sum += ep_return;
    }
    Ok(EvalReport {
        episodes,
        success_rate: successes as f64 / episodes as f64,
        mean_return: return_sum / episodes as f64,
    })
}

/// Replays freshly scripted demonstrations through the evaluation loop, as a
/// harness self-check: the demonstrator's recorded actions must reproduce its
/// successes step for step.
pub fn evaluate_scripted(cfg: &RunConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".to_string()));
    }
    let maze = cfg.maze()?;
    let mut seeds = rng::stream(seed, "demo-seeds");
    let mut successes = 0usize;
    let mut return_sum = 0.0;
    for index in 0..episodes {
        let demo_seed: u64 = seeds.gen();
        let traj = scripted_demonstrator(&maze, index, demo_seed)?;
        let mut env = Env::new(maze.clone())?;
        env.reset(demo_seed);
        let mut ep_return = 0.0;
        let mut success = false;
        for action in &traj.actions {
            let out = env.step([action[0], action[1]])?;
            ep_return += out.reward;
            if out.success {
                success = true;
            }
            if out.done {
                break;
            }
        }
        if success {
            successes += 1;
        }
        return_sum += ep_return;
    }
    Ok(EvalReport {
        episodes,
        success_rate: successes as f64 / episodes as f64,
        mean_return: return_sum / episodes as f64,
    })
}
