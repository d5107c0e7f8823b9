//! Run configuration: one flat JSON object with dotted keys, every knob
//! present with a desk-scale default. Unknown keys and wrong types are
//! rejected so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::envsim::MazeConfig;
use crate::latentmodel::ModelArch;
use crate::learner::{LearnerConfig, ValueBounds};
use crate::shaping::ShapingConfig;
use crate::{Error, Result};

/// The point maze exposes a planar velocity command.
pub const ACTION_DIM: usize = 2;

/// Maze geometry and reward constants.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSection {
    pub rows: Vec<String>,
    pub image_side: usize,
    pub episode_cap: usize,
    pub max_step_size: f64,
    pub start_jitter: f64,
    pub goal_radius: f64,
    pub r_done: f64,
    pub r_live: f64,
}

/// Where demonstrations live and how many to collect.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSection {
    pub dir: String,
    pub count: usize,
}

/// Latent model architecture and its training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub enc_channels: usize,
    pub enc_fc: usize,
    pub dec_hidden: usize,
    pub dyn_hidden: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch: usize,
    pub crop_pad: usize,
    /// Updates with both KL gradients held at zero at the start of training,
    /// giving reconstruction time to couple to the latent code.
    pub kl_hold: usize,
    /// Updates over which the KL gradients then ramp from zero to full
    /// strength.
    pub kl_warmup: usize,
    /// Environment steps between model-training phases.
    pub refresh_period: usize,
    /// Moving-average window for the convergence test.
    pub ma_window: usize,
    /// Updates between convergence checks.
    pub converge_window: usize,
    /// Relative moving-average improvement below which training stops.
    pub converge_tol: f64,
    /// Hard cap on updates per phase.
    pub max_updates: usize,
}

/// Actor-critic sizes and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerSection {
    pub enc_channels: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub init_temperature: f64,
    pub target_entropy: f64,
    pub batch: usize,
    /// Minimum demonstration fraction per batch when importance sampling is on.
    pub p_d: f64,
    pub crop_pad: usize,
    /// Use the literal `(1 - gamma) * r_live` floor instead of the
    /// geometric-series value of living forever.
    pub printed_value_floor: bool,
}

/// Exploration-bonus constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapingSection {
    pub r_e: f64,
    pub alpha: f64,
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlagSection {
    /// Guarantee a demo fraction in every batch.
    pub is: bool,
    /// Clip TD targets to the attainable value range.
    pub vc: bool,
    /// Add the demonstration-matching exploration bonus.
    pub shaping: bool,
    /// Random-crop observations in learner batches.
    pub augment: bool,
}

/// Training-loop schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub max_env_steps: usize,
    pub warmup_steps: usize,
    pub eval_period: usize,
    pub eval_episodes: usize,
    pub checkpoint_period: usize,
    pub replay_capacity: usize,
    /// Environment steps between aggregated metric rows.
    pub log_period: usize,
}

/// Distance-metric benchmark: offline dataset size, training budget, and the
/// three probe positions (reference, near, far).
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSection {
    pub dataset_transitions: usize,
    pub model_updates: usize,
    pub probe_a: [f64; 2],
    pub probe_b: [f64; 2],
    pub probe_c: [f64; 2],
}

/// Everything a run needs, grouped by subsystem.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvSection,
    pub demos: DemoSection,
    pub model: ModelSection,
    pub learner: LearnerSection,
    pub shaping: ShapingSection,
    pub flags: FlagSection,
    pub run: RunSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSection {
                rows: vec!["S#G".to_string(), "...".to_string(), "...".to_string()],
                image_side: 32,
                episode_cap: 60,
                max_step_size: 0.15,
                start_jitter: 0.1,
                goal_radius: 0.25,
                r_done: 100.0,
                r_live: -1.0,
            },
            demos: DemoSection { dir: "demos".to_string(), count: 5 },
            model: ModelSection {
                latent_dim: 8,
                enc_channels: 16,
                enc_fc: 128,
                dec_hidden: 256,
                dyn_hidden: 64,
                lr: 4e-3,
                lambda: 1.0,
                batch: 32,
                crop_pad: 2,
                kl_hold: 1200,
                kl_warmup: 800,
                refresh_period: 1000,
                ma_window: 20,
                converge_window: 50,
                converge_tol: 0.01,
                max_updates: 2000,
            },
            learner: LearnerSection {
                enc_channels: 16,
                feature_dim: 32,
                hidden_dim: 64,
                gamma: 0.99,
                tau: 0.005,
                actor_lr: 1e-3,
                critic_lr: 1e-3,
                temperature_lr: 1e-3,
                init_temperature: 0.1,
                target_entropy: -(ACTION_DIM as f64),
                batch: 16,
                p_d: 0.15,
                crop_pad: 2,
                printed_value_floor: false,
            },
            shaping: ShapingSection { r_e: 1.0, alpha: 0.98 },
            flags: FlagSection { is: true, vc: true, shaping: true, augment: true },
            run: RunSection {
                seed: 1,
                max_env_steps: 30_000,
                warmup_steps: 500,
                eval_period: 2000,
                eval_episodes: 10,
                checkpoint_period: 10_000,
                replay_capacity: 100_000,
                log_period: 250,
            },
            bench: BenchSection {
                dataset_transitions: 3000,
                model_updates: 2500,
                probe_a: [0.8, 0.8],
                probe_b: [0.8, 1.3],
                probe_c: [2.8, 0.8],
            },
        }
    }
}

fn expect_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::Config(format!("{key} must be a number, got {v}")))
}

fn expect_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer, got {v}")))
}

fn expect_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer, got {v}")))
}

fn expect_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("{key} must be a boolean, got {v}")))
}

fn expect_string(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("{key} must be a string, got {v}")))
}

fn expect_rows(key: &str, v: &Value) -> Result<Vec<String>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{key} must be an array of strings, got {v}")))?;
    arr.iter().map(|e| expect_string(key, e)).collect()
}

fn expect_point(key: &str, v: &Value) -> Result<[f64; 2]> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{key} must be a [x, y] array, got {v}")))?;
    if arr.len() != 2 {
        return Err(Error::Config(format!("{key} must have exactly two entries, got {v}")));
    }
    Ok([expect_f64(key, &arr[0])?, expect_f64(key, &arr[1])?])
}

fn rows_value(rows: &[String]) -> Value {
    Value::Array(rows.iter().map(|r| Value::String(r.clone())).collect())
}

fn point_value(p: [f64; 2]) -> Value {
    Value::Array(vec![p[0].into(), p[1].into()])
}

impl RunConfig {
    /// Parses a flat dotted-key JSON object, starting from defaults. Every
    /// key is optional; unknown keys are errors.
    pub fn from_value(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("config root must be a JSON object".to_string()))?;
        let mut cfg = RunConfig::default();
        for (key, value) in obj {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("invalid JSON: {e}")))?;
        Self::from_value(&v)
    }

    /// Writes the complete flat-key snapshot, defaults included.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(&self.to_flat_map())?;
        json.push(b'\n');
        fs::write(path, json)?;
        Ok(())
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "env.rows" => self.env.rows = expect_rows(key, v)?,
            "env.image_side" => self.env.image_side = expect_usize(key, v)?,
            "env.episode_cap" => self.env.episode_cap = expect_usize(key, v)?,
            "env.max_step_size" => self.env.max_step_size = expect_f64(key, v)?,
            "env.start_jitter" => self.env.start_jitter = expect_f64(key, v)?,
            "env.goal_radius" => self.env.goal_radius = expect_f64(key, v)?,
            "env.r_done" => self.env.r_done = expect_f64(key, v)?,
            "env.r_live" => self.env.r_live = expect_f64(key, v)?,
            "demos.dir" => self.demos.dir = expect_string(key, v)?,
            "demos.count" => self.demos.count = expect_usize(key, v)?,
            "model.latent_dim" => self.model.latent_dim = expect_usize(key, v)?,
            "model.enc_channels" => self.model.enc_channels = expect_usize(key, v)?,
            "model.enc_fc" => self.model.enc_fc = expect_usize(key, v)?,
            "model.dec_hidden" => self.model.dec_hidden = expect_usize(key, v)?,
            "model.dyn_hidden" => self.model.dyn_hidden = expect_usize(key, v)?,
            "model.lr" => self.model.lr = expect_f64(key, v)?,
            "model.lambda" => self.model.lambda = expect_f64(key, v)?,
            "model.batch" => self.model.batch = expect_usize(key, v)?,
            "model.crop_pad" => self.model.crop_pad = expect_usize(key, v)?,
            "model.refresh_period" => self.model.refresh_period = expect_usize(key, v)?,
            "model.ma_window" => self.model.ma_window = expect_usize(key, v)?,
            "model.converge_window" => self.model.converge_window = expect_usize(key, v)?,
            "model.converge_tol" => self.model.converge_tol = expect_f64(key, v)?,
            "model.kl_hold" => self.model.kl_hold = expect_usize(key, v)?,
            "model.kl_warmup" => self.model.kl_warmup = expect_usize(key, v)?,
            "model.max_updates" => self.model.max_updates = expect_usize(key, v)?,
            "learner.enc_channels" => self.learner.enc_channels = expect_usize(key, v)?,
            "learner.feature_dim" => self.learner.feature_dim = expect_usize(key, v)?,
            "learner.hidden_dim" => self.learner.hidden_dim = expect_usize(key, v)?,
            "learner.gamma" => self.learner.gamma = expect_f64(key, v)?,
            "learner.tau" => self.learner.tau = expect_f64(key, v)?,
            "learner.actor_lr" => self.learner.actor_lr = expect_f64(key, v)?,
            "learner.critic_lr" => self.learner.critic_lr = expect_f64(key, v)?,
            "learner.temperature_lr" => self.learner.temperature_lr = expect_f64(key, v)?,
            "learner.init_temperature" => self.learner.init_temperature = expect_f64(key, v)?,
            "learner.target_entropy" => self.learner.target_entropy = expect_f64(key, v)?,
            "learner.batch" => self.learner.batch = expect_usize(key, v)?,
            "learner.p_d" => self.learner.p_d = expect_f64(key, v)?,
            "learner.crop_pad" => self.learner.crop_pad = expect_usize(key, v)?,
            "learner.printed_value_floor" => {
                self.learner.printed_value_floor = expect_bool(key, v)?
            }
            "shaping.r_e" => self.shaping.r_e = expect_f64(key, v)?,
            "shaping.alpha" => self.shaping.alpha = expect_f64(key, v)?,
            "flags.is" => self.flags.is = expect_bool(key, v)?,
            "flags.vc" => self.flags.vc = expect_bool(key, v)?,
            "flags.shaping" => self.flags.shaping = expect_bool(key, v)?,
            "flags.augment" => self.flags.augment = expect_bool(key, v)?,
            "run.seed" => self.run.seed = expect_u64(key, v)?,
            "run.max_env_steps" => self.run.max_env_steps = expect_usize(key, v)?,
            "run.warmup_steps" => self.run.warmup_steps = expect_usize(key, v)?,
            "run.eval_period" => self.run.eval_period = expect_usize(key, v)?,
            "run.eval_episodes" => self.run.eval_episodes = expect_usize(key, v)?,
            "run.checkpoint_period" => self.run.checkpoint_period = expect_usize(key, v)?,
            "run.replay_capacity" => self.run.replay_capacity = expect_usize(key, v)?,
            "run.log_period" => self.run.log_period = expect_usize(key, v)?,
            "bench.dataset_transitions" => {
                self.bench.dataset_transitions = expect_usize(key, v)?
            }
            "bench.model_updates" => self.bench.model_updates = expect_usize(key, v)?,
            "bench.probe_a" => self.bench.probe_a = expect_point(key, v)?,
            "bench.probe_b" => self.bench.probe_b = expect_point(key, v)?,
            "bench.probe_c" => self.bench.probe_c = expect_point(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_flat_map(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("env.rows", rows_value(&self.env.rows));
        put("env.image_side", self.env.image_side.into());
        put("env.episode_cap", self.env.episode_cap.into());
        put("env.max_step_size", self.env.max_step_size.into());
        put("env.start_jitter", self.env.start_jitter.into());
        put("env.goal_radius", self.env.goal_radius.into());
        put("env.r_done", self.env.r_done.into());
        put("env.r_live", self.env.r_live.into());
        put("demos.dir", self.demos.dir.clone().into());
        put("demos.count", self.demos.count.into());
        put("model.latent_dim", self.model.latent_dim.into());
        put("model.enc_channels", self.model.enc_channels.into());
        put("model.enc_fc", self.model.enc_fc.into());
        put("model.dec_hidden", self.model.dec_hidden.into());
        put("model.dyn_hidden", self.model.dyn_hidden.into());
        put("model.lr", self.model.lr.into());
        put("model.lambda", self.model.lambda.into());
        put("model.batch", self.model.batch.into());
        put("model.crop_pad", self.model.crop_pad.into());
        put("model.refresh_period", self.model.refresh_period.into());
        put("model.ma_window", self.model.ma_window.into());
        put("model.converge_window", self.model.converge_window.into());
        put("model.converge_tol", self.model.converge_tol.into());
        put("model.kl_hold", self.model.kl_hold.into());
        put("model.kl_warmup", self.model.kl_warmup.into());
        put("model.max_updates", self.model.max_updates.into());
        put("learner.enc_channels", self.learner.enc_channels.into());
        put("learner.feature_dim", self.learner.feature_dim.into());
        put("learner.hidden_dim", self.learner.hidden_dim.into());
        put("learner.gamma", self.learner.gamma.into());
        put("learner.tau", self.learner.tau.into());
        put("learner.actor_lr", self.learner.actor_lr.into());
        put("learner.critic_lr", self.learner.critic_lr.into());
        put("learner.temperature_lr", self.learner.temperature_lr.into());
        put("learner.init_temperature", self.learner.init_temperature.into());
        put("learner.target_entropy", self.learner.target_entropy.into());
        put("learner.batch", self.learner.batch.into());
        put("learner.p_d", self.learner.p_d.into());
        put("learner.crop_pad", self.learner.crop_pad.into());
        put("learner.printed_value_floor", self.learner.printed_value_floor.into());
        put("shaping.r_e", self.shaping.r_e.into());
        put("shaping.alpha", self.shaping.alpha.into());
        put("flags.is", self.flags.is.into());
        put("flags.vc", self.flags.vc.into());
        put("flags.shaping", self.flags.shaping.into());
        put("flags.augment", self.flags.augment.into());
        put("run.seed", self.run.seed.into());
        put("run.max_env_steps", self.run.max_env_steps.into());
        put("run.warmup_steps", self.run.warmup_steps.into());
        put("run.eval_period", self.run.eval_period.into());
        put("run.eval_episodes", self.run.eval_episodes.into());
        put("run.checkpoint_period", self.run.checkpoint_period.into());
        put("run.replay_capacity", self.run.replay_capacity.into());
        put("run.log_period", self.run.log_period.into());
        put("bench.dataset_transitions", self.bench.dataset_transitions.into());
        put("bench.model_updates", self.bench.model_updates.into());
        put("bench.probe_a", point_value(self.bench.probe_a));
        put("bench.probe_b", point_value(self.bench.probe_b));
        put("bench.probe_c", point_value(self.bench.probe_c));
        m
    }

    /// Builds the maze description, applying every `env.*` override.
    pub fn maze(&self) -> Result<MazeConfig> {
        let rows: Vec<&str> = self.env.rows.iter().map(String::as_str).collect();
        let mut maze = MazeConfig::from_rows(&rows)?;
        maze.image_side = self.env.image_side;
        maze.max_steps = self.env.episode_cap;
        maze.max_step_size = self.env.max_step_size;
        maze.start_jitter = self.env.start_jitter;
        maze.goal_radius = self.env.goal_radius;
        maze.r_done = self.env.r_done;
        maze.r_live = self.env.r_live;
        maze.validate()?;
        Ok(maze)
    }

    pub fn model_arch(&self) -> ModelArch {
        ModelArch {
            image_side: self.env.image_side,
            latent_dim: self.model.latent_dim,
            action_dim: ACTION_DIM,
            enc_channels: self.model.enc_channels,
            enc_fc: self.model.enc_fc,
            dec_hidden: self.model.dec_hidden,
            dyn_hidden: self.model.dyn_hidden,
        }
    }

    /// Assembles the learner configuration. Value clipping and augmentation
    /// follow the ablation flags.
    pub fn learner_config(&self) -> Result<LearnerConfig> {
        Ok(LearnerConfig {
            image_side: self.env.image_side,
            action_dim: ACTION_DIM,
            enc_channels: self.learner.enc_channels,
            feature_dim: self.learner.feature_dim,
            hidden_dim: self.learner.hidden_dim,
            gamma: self.learner.gamma,
            tau: self.learner.tau,
            actor_lr: self.learner.actor_lr,
            critic_lr: self.learner.critic_lr,
            temperature_lr: self.learner.temperature_lr,
            init_temperature: self.learner.init_temperature,
            target_entropy: self.learner.target_entropy,
            crop_pad: if self.flags.augment { self.learner.crop_pad } else { 0 },
            value_clip: self.flags.vc,
            bounds: ValueBounds::from_rewards(
                self.env.r_live,
                self.env.r_done,
                self.learner.gamma,
                self.learner.printed_value_floor,
            )?,
        })
    }

    pub fn shaping_config(&self) -> ShapingConfig {
        ShapingConfig {
            r_e: self.shaping.r_e,
            alpha: self.shaping.alpha,
            enabled: self.flags.shaping,
        }
    }

    /// Checks every cross-field invariant that the section types cannot see
    /// on their own.
    pub fn validate(&self) -> Result<()> {
        self.maze()?;
        self.model_arch().validate()?;
        self.learner_config()?.validate()?;
        if self.flags.shaping {
            self.shaping_config().validate(self.env.r_live)?;
        }
        if !(0.0..=1.0).contains(&self.learner.p_d) {
            return Err(Error::Config(format!(
                "learner.p_d must lie in [0, 1], got {}",
                self.learner.p_d
            )));
        }
        if self.learner.batch == 0 || self.model.batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".to_string()));
        }
        if self.model.ma_window == 0 || self.model.converge_window == 0 {
            return Err(Error::Config(
                "model convergence windows must be at least 1".to_string(),
            ));
        }
        if self.model.refresh_period == 0 {
            return Err(Error::Config("model.refresh_period must be at least 1".to_string()));
        }
        if self.run.eval_period == 0 || self.run.checkpoint_period == 0 || self.run.log_period == 0
        {
            return Err(Error::Config(
                "run periods (eval, checkpoint, log) must be at least 1".to_string(),
            ));
        }
        if self.run.replay_capacity == 0 {
            return Err(Error::Config("run.replay_capacity must be at least 1".to_string()));
        }
        if self.run.eval_episodes == 0 {
            return Err(Error::Config("run.eval_episodes must be at least 1".to_string()));
        }
        let maze = self.maze()?;
        for (name, p) in [
            ("bench.probe_a", self.bench.probe_a),
            ("bench.probe_b", self.bench.probe_b),
            ("bench.probe_c", self.bench.probe_c),
        ] {
            if !maze.in_free_space((p[0], p[1])) {
                return Err(Error::Config(format!("{name} {p:?} is not in free space")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg, loaded);

        // The snapshot is complete: every key survives a re-save.
        let again = dir.path().join("again.json");
        loaded.save(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let v: Value = serde_json::json!({
            "learner.gamma": 0.95,
            "flags.shaping": false,
            "env.rows": ["S.", ".G"],
            "bench.probe_a": [0.5, 0.5],
        });
        let cfg = RunConfig::from_value(&v).unwrap();
        assert_eq!(cfg.learner.gamma, 0.95);
        assert!(!cfg.flags.shaping);
        assert_eq!(cfg.env.rows, vec!["S.", ".G"]);
        assert_eq!(cfg.bench.probe_a, [0.5, 0.5]);

        let bad: Value = serde_json::json!({"learner.gama": 0.95});
        let err = RunConfig::from_value(&bad).unwrap_err();
        assert!(err.to_string().contains("learner.gama"), "{err}");
    }

    #[test]
    fn wrong_types_are_rejected() {
        for (key, value) in [
            ("learner.gamma", serde_json::json!("high")),
            ("flags.is", serde_json::json!(1)),
            ("env.rows", serde_json::json!("S#G")),
            ("bench.probe_a", serde_json::json!([1.0])),
            ("run.seed", serde_json::json!(-3)),
        ] {
            let v = Value::Object([(key.to_string(), value)].into_iter().collect());
            assert!(RunConfig::from_value(&v).is_err(), "{key} accepted a bad value");
        }
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.learner.gamma = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.learner.p_d = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.learner.batch = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.shaping.alpha = 1.0;
        assert!(cfg.validate().is_err());
        cfg.flags.shaping = false;
        cfg.validate().unwrap();

        let mut cfg = RunConfig::default();
        cfg.bench.probe_b = [1.5, 0.5];
        assert!(cfg.validate().is_err(), "probe inside the wall must be rejected");
    }

    #[test]
    fn disabling_augmentation_zeroes_the_learner_crop() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.learner_config().unwrap().crop_pad, cfg.learner.crop_pad);
        cfg.flags.augment = false;
        assert_eq!(cfg.learner_config().unwrap().crop_pad, 0);
    }

    #[test]
    fn default_probes_match_the_published_geometry() {
        let cfg = RunConfig::default();
        let a = cfg.bench.probe_a;
        let b = cfg.bench.probe_b;
        let c = cfg.bench.probe_c;
        let d = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]);
        assert!((d(a, b) - 0.5).abs() < 1e-12);
        assert!((d(a, c) - 2.0).abs() < 1e-12);
    }
}
