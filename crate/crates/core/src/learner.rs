//! Off-policy actor-critic on shaped rewards.
//!
//! A convolutional feature encoder feeds a squashed-Gaussian actor and twin
//! Q critics; target critics trail by Polyak averaging and the entropy
//! temperature auto-tunes toward a target entropy of minus the action
//! dimension. TD targets are computed in `f64`, optionally clipped into
//! [`ValueBounds`], and only critic gradients update the encoder. Random-crop
//! augmentation happens on the assembled batch before the updates. With
//! shaping disabled, no demo quota, and clipping off, the same learner is the
//! augmentation-only baseline the ablations compare against.

use rand::Rng;

use crate::diffnet::{Adam, GradStore, LayerSpec, Network, NetworkSpec, Real, Tensor};
use crate::envsim::Observation;
use crate::latentmodel::{observation_pixels, Augmenter};
use crate::{Error, Result};

/// Actor log-std range; raw outputs are mapped into it with a tanh band,
/// which stays differentiable everywhere.
pub const ACTOR_LOG_STD_MIN: f64 = -5.0;
pub const ACTOR_LOG_STD_MAX: f64 = 2.0;

/// Numerical guard inside the tanh-squash log-density.
const SQUASH_EPS: f64 = 1e-6;

/// Clipping range for TD targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueBounds {
    pub q_min: f64,
    pub q_max: f64,
}

impl ValueBounds {
    /// Bounds from the reward scheme: the ceiling is the success reward, the
    /// floor the value of acting forever at the step penalty,
    /// `r_live / (1 - gamma)`. `printed_floor` switches to the literal
    /// `(1 - gamma) * r_live` variant instead.
    pub fn from_rewards(r_live: f64, r_done: f64, gamma: f64, printed_floor: bool) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma {gamma} must lie strictly in (0, 1)")));
        }
        let q_min = if printed_floor { (1.0 - gamma) * r_live } else { r_live / (1.0 - gamma) };
        let q_max = r_done;
        if q_min > q_max {
            return Err(Error::Config(format!(
                "value floor {q_min} exceeds ceiling {q_max}"
            )));
        }
        Ok(ValueBounds { q_min, q_max })
    }

    /// Clamps a target into the bounds; the flag reports whether it moved.
    pub fn clip(&self, y: f64) -> (f64, bool) {
        let c = y.clamp(self.q_min, self.q_max);
        (c, c != y)
    }
}

/// Learner hyperparameters.
#[derive(Clone, Debug)]
pub struct LearnerConfig {
    pub image_side: usize,
    pub action_dim: usize,
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
    /// Random-crop padding applied by [`augment_batch`].
    pub crop_pad: usize,
    /// Clip TD targets into the value bounds (the VC ablation switch).
    pub value_clip: bool,
    pub bounds: ValueBounds,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::Config(format!("image side {} is too small", self.image_side)));
        }
        for (name, v) in [
            ("action_dim", self.action_dim),
            ("enc_channels", self.enc_channels),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} must lie strictly in (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} must lie in (0, 1]", self.tau)));
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.temperature_lr < 0.0 {
            return Err(Error::Config(format!(
                "temperature_lr must be non-negative, got {}",
                self.temperature_lr
            )));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config(format!(
                "init_temperature must be positive, got {}",
                self.init_temperature
            )));
        }
        if self.bounds.q_min > self.bounds.q_max {
            return Err(Error::Config("value bounds are inverted".to_string()));
        }
        Ok(())
    }
}

/// One transition ready for an update: pixels as network scalars, shaped
/// reward in `f64`, `done` true only for success terminals.
#[derive(Clone, Debug)]
pub struct RlBatchItem<T> {
    pub obs: Vec<T>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<T>,
    pub done: bool,
}

/// Independently random-crops every observation and next-observation in the
/// batch. With pad 0 this is the identity.
pub fn augment_batch<T: Real, R: Rng + ?Sized>(
    items: &mut [RlBatchItem<T>],
    augmenter: &Augmenter,
    side: usize,
    rng: &mut R,
) {
    for it in items.iter_mut() {
        let off = augmenter.sample_offset(rng);
        it.obs = augmenter.apply(&it.obs, 3, side, off);
        let off = augmenter.sample_offset(rng);
        it.next_obs = augmenter.apply(&it.next_obs, 3, side, off);
    }
}

/// Log-density of `a = tanh(pre)` where `pre ~ N(mean, exp(log_std)²)`,
/// evaluated at the pre-squash point.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], pre: &[f64]) -> f64 {
    let mut lp = 0.0;
    for k in 0..mean.len() {
        let std = log_std[k].exp();
        let n = (pre[k] - mean[k]) / std;
        let a = pre[k].tanh();
        lp += -0.5 * n * n
            - log_std[k]
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - (1.0 - a * a + SQUASH_EPS).ln();
    }
    lp
}

/// Maps a raw actor output into the log-std band.
fn log_std_band(raw: f64) -> f64 {
    ACTOR_LOG_STD_MIN + 0.5 * (ACTOR_LOG_STD_MAX - ACTOR_LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn log_std_band_grad(raw: f64) -> f64 {
    let t = raw.tanh();
    0.5 * (ACTOR_LOG_STD_MAX - ACTOR_LOG_STD_MIN) * (1.0 - t * t)
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn polyak_update<T: Real>(online: &Network<T>, target: &mut Network<T>, tau: f64) {
    let t = T::from_f64(tau);
    let keep = T::from_f64(1.0 - tau);
    for (o, tgt) in online.params().iter().zip(target.params_mut()) {
        for (ov, tv) in o.values.iter().zip(tgt.values.iter_mut()) {
            *tv = keep * *tv + t * *ov;
        }
    }
}

/// The policy-side networks: shared feature encoder, actor, twin critics and
/// their Polyak targets.
#[derive(Clone, Debug)]
pub struct AgentNets<T> {
    pub encoder: Network<T>,
    pub actor: Network<T>,
    pub q1: Network<T>,
    pub q2: Network<T>,
    pub target_q1: Network<T>,
    pub target_q2: Network<T>,
}

impl<T: Real> AgentNets<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &LearnerConfig, rng: &mut R) -> Result<Self> {
        let enc_spec = NetworkSpec::new(&[3, cfg.image_side, cfg.image_side])
            .layer(LayerSpec::conv(cfg.enc_channels, 3, 2, 0).norm().relu())
            .layer(LayerSpec::conv(cfg.enc_channels, 3, 2, 0).norm().relu())
            .layer(LayerSpec::flatten())
            .layer(LayerSpec::dense(cfg.feature_dim).norm());
        let actor_spec = NetworkSpec::new(&[cfg.feature_dim])
            .layer(LayerSpec::dense(cfg.hidden_dim).relu())
            .layer(LayerSpec::dense(cfg.hidden_dim).relu())
            .layer(LayerSpec::dense(2 * cfg.action_dim));
        let critic_spec = || {
            NetworkSpec::new(&[cfg.feature_dim + cfg.action_dim])
                .layer(LayerSpec::dense(cfg.hidden_dim).relu())
                .layer(LayerSpec::dense(cfg.hidden_dim).relu())
                .layer(LayerSpec::dense(1))
        };
        let encoder = Network::new(enc_spec, rng)?;
        let actor = Network::new(actor_spec, rng)?;
        let q1 = Network::new(critic_spec(), rng)?;
        let q2 = Network::new(critic_spec(), rng)?;
        let target_q1 = q1.clone();
        let target_q2 = q2.clone();
        Ok(AgentNets { encoder, actor, q1, q2, target_q1, target_q2 })
    }
}

/// Critic-update diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct CriticStats {
    pub loss: f64,
    pub mean_q: f64,
    pub mean_target: f64,
    /// Fraction of targets moved by clipping.
    pub clip_rate: f64,
}

/// Actor-update diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct ActorStats {
    pub loss: f64,
    /// Estimated policy entropy, minus the mean log-probability.
    pub entropy: f64,
    pub temperature: f64,
}

/// Scalar Adam state for the log-temperature.
#[derive(Clone, Copy, Debug, Default)]
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, x: &mut f64, grad: f64, lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * grad;
        self.v = 0.999 * self.v + 0.001 * grad * grad;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        *x -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

/// The actor-critic learner.
pub struct Learner<T: Real> {
    pub nets: AgentNets<T>,
    cfg: LearnerConfig,
    enc_opt: Adam<T>,
    actor_opt: Adam<T>,
    q1_opt: Adam<T>,
    q2_opt: Adam<T>,
    log_alpha: f64,
    alpha_opt: ScalarAdam,
}

impl<T: Real> Learner<T> {
    pub fn new<R: Rng + ?Sized>(cfg: LearnerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let nets = AgentNets::new(&cfg, rng)?;
        Ok(Learner {
            enc_opt: Adam::new(cfg.critic_lr),
            actor_opt: Adam::new(cfg.actor_lr),
            q1_opt: Adam::new(cfg.critic_lr),
            q2_opt: Adam::new(cfg.critic_lr),
            log_alpha: cfg.init_temperature.ln(),
            alpha_opt: ScalarAdam::default(),
            nets,
            cfg,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.log_alpha = v;
    }

    fn frame_len(&self) -> usize {
        3 * self.cfg.image_side * self.cfg.image_side
    }

    fn features(&self, frames: &[&[T]]) -> Result<(Tensor<T>, crate::diffnet::Tape<T>)> {
        let side = self.cfg.image_side;
        let mut data = Vec::with_capacity(frames.len() * self.frame_len());
        for f in frames {
            data.extend_from_slice(f);
        }
        let x = Tensor::from_vec(&[frames.len(), 3, side, side], data)?;
        self.nets.encoder.forward_tape(&x)
    }

    fn features_no_grad(&self, frames: &[&[T]]) -> Result<Tensor<T>> {
        let side = self.cfg.image_side;
        let mut data = Vec::with_capacity(frames.len() * self.frame_len());
        for f in frames {
            data.extend_from_slice(f);
        }
        let x = Tensor::from_vec(&[frames.len(), 3, side, side], data)?;
        self.nets.encoder.forward(&x)
    }

    /// Splits an actor output row into the action mean and banded log-stds,
    /// in `f64`.
    fn policy_params(&self, row: &[T]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ad = self.cfg.action_dim;
        let mean: Vec<f64> = row[..ad].iter().map(|v| Real::to_f64(*v)).collect();
        let raw: Vec<f64> = row[ad..].iter().map(|v| Real::to_f64(*v)).collect();
        let log_std: Vec<f64> = raw.iter().map(|r| log_std_band(*r)).collect();
        (mean, raw, log_std)
    }

    /// Chooses an action for one observation. Deterministic mode squashes the
    /// mean; stochastic mode samples the squashed Gaussian.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let frame = observation_pixels::<T>(obs);
        if frame.len() != self.frame_len() {
            return Err(Error::Config(format!(
                "observation side {} does not match the learner's {}",
                obs.side(),
                self.cfg.image_side
            )));
        }
        let feats = self.features_no_grad(&[&frame])?;
        let out = self.nets.actor.forward(&feats)?;
        let (mean, _, log_std) = self.policy_params(out.item(0));
        let action = if deterministic {
            mean.iter().map(|m| m.tanh()).collect()
        } else {
            mean.iter()
                .zip(&log_std)
                .map(|(m, l)| {
                    let eta: f64 = Real::to_f64(T::standard_normal(rng));
                    (m + l.exp() * eta).tanh()
                })
                .collect()
        };
        Ok(action)
    }

    /// One gradient step on both critics (and the encoder) toward clipped TD
    /// targets. Targets use the minimum of the target critics on a fresh
    /// next action, minus the entropy term.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        batch: &[RlBatchItem<T>],
        rng: &mut R,
    ) -> Result<CriticStats> {
        if batch.is_empty() {
            return Err(Error::Usage("critic update on an empty batch".to_string()));
        }
        self.check_batch(batch)?;
        let obs_frames: Vec<&[T]> = batch.iter().map(|b| b.obs.as_slice()).collect();
        let (feats, enc_tape) = self.features(&obs_frames)?;
        self.critic_core(batch, &feats, &enc_tape, rng)
    }

    /// One gradient step on the actor toward higher soft value, plus the
    /// temperature step toward the target entropy. The encoder is treated as
    /// fixed here.
    pub fn actor_update<R: Rng + ?Sized>(
        &mut self,
        batch: &[RlBatchItem<T>],
        rng: &mut R,
    ) -> Result<ActorStats> {
        if batch.is_empty() {
            return Err(Error::Usage("actor update on an empty batch".to_string()));
        }
        self.check_batch(batch)?;
        let obs_frames: Vec<&[T]> = batch.iter().map(|b| b.obs.as_slice()).collect();
        let feats = self.features_no_grad(&obs_frames)?;
        self.actor_core(&feats, rng)
    }

    /// One combined actor-critic step sharing a single encoding of the batch
    /// observations. The actor moves first, against the pre-update critics.
    pub fn update_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[RlBatchItem<T>],
        rng: &mut R,
    ) -> Result<(CriticStats, ActorStats)> {
        if batch.is_empty() {
            return Err(Error::Usage("update on an empty batch".to_string()));
        }
        self.check_batch(batch)?;
        let obs_frames: Vec<&[T]> = batch.iter().map(|b| b.obs.as_slice()).collect();
        let (feats, enc_tape) = self.features(&obs_frames)?;
        let actor_stats = self.actor_core(&feats, rng)?;
        let critic_stats = self.critic_core(batch, &feats, &enc_tape, rng)?;
        Ok((critic_stats, actor_stats))
    }

    fn critic_core<R: Rng + ?Sized>(
        &mut self,
        batch: &[RlBatchItem<T>],
        feats: &Tensor<T>,
        enc_tape: &crate::diffnet::Tape<T>,
        rng: &mut R,
    ) -> Result<CriticStats> {
        let n = batch.len();
        let fd = self.cfg.feature_dim;
        let temp = self.temperature();

        // Target values, entirely without gradients.
        let next_frames: Vec<&[T]> = batch.iter().map(|b| b.next_obs.as_slice()).collect();
        let next_feats = self.features_no_grad(&next_frames)?;
        let next_pi = self.nets.actor.forward(&next_feats)?;
        let mut next_actions = Vec::with_capacity(n);
        let mut next_log_probs = Vec::with_capacity(n);
        for i in 0..n {
            let (mean, _, log_std) = self.policy_params(next_pi.item(i));
            let pre: Vec<f64> = mean
                .iter()
                .zip(&log_std)
                .map(|(m, l)| m + l.exp() * Real::to_f64(T::standard_normal(rng)))
                .collect();
            next_log_probs.push(squashed_log_prob(&mean, &log_std, &pre));
            next_actions.push(pre.iter().map(|p| p.tanh()).collect::<Vec<f64>>());
        }
        let tq_in = self.critic_input(&next_feats, &next_actions)?;
        let tq1 = self.nets.target_q1.forward(&tq_in)?;
        let tq2 = self.nets.target_q2.forward(&tq_in)?;

        let mut targets = Vec::with_capacity(n);
        let mut clipped = 0usize;
        for i in 0..n {
            let q_next = Real::to_f64(tq1.item(i)[0]).min(Real::to_f64(tq2.item(i)[0]));
            let soft = q_next - temp * next_log_probs[i];
            let not_done = if batch[i].done { 0.0 } else { 1.0 };
            let mut y = batch[i].reward + self.cfg.gamma * not_done * soft;
            if !y.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite TD target {y} for reward {}",
                    batch[i].reward
                )));
            }
            if self.cfg.value_clip {
                let (c, moved) = self.cfg.bounds.clip(y);
                y = c;
                if moved {
                    clipped += 1;
                }
            }
            targets.push(y);
        }

        // Online critics with gradients through the encoder.
        let actions: Vec<Vec<f64>> = batch.iter().map(|b| b.action.clone()).collect();
        let q_in = self.critic_input(feats, &actions)?;
        let (q1_out, q1_tape) = self.nets.q1.forward_tape(&q_in)?;
        let (q2_out, q2_tape) = self.nets.q2.forward_tape(&q_in)?;

        let mut loss = 0.0;
        let mut mean_q = 0.0;
        let mut dq1 = Tensor::zeros(&[n, 1]);
        let mut dq2 = Tensor::zeros(&[n, 1]);
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let y = targets[i];
            let e1 = Real::to_f64(q1_out.item(i)[0]) - y;
            let e2 = Real::to_f64(q2_out.item(i)[0]) - y;
            loss += 0.5 * (e1 * e1 + e2 * e2) * inv_n;
            mean_q += 0.5 * (Real::to_f64(q1_out.item(i)[0]) + Real::to_f64(q2_out.item(i)[0]))
                * inv_n;
            dq1.data_mut()[i] = T::from_f64(e1 * inv_n);
            dq2.data_mut()[i] = T::from_f64(e2 * inv_n);
        }

        let mut q1_grads = GradStore::zeros_of(&self.nets.q1);
        let mut q2_grads = GradStore::zeros_of(&self.nets.q2);
        let dx1 = self.nets.q1.backward(&q1_tape, &dq1, &mut q1_grads)?;
        let dx2 = self.nets.q2.backward(&q2_tape, &dq2, &mut q2_grads)?;

        let mut d_feats = Tensor::zeros(&[n, fd]);
        for i in 0..n {
            for k in 0..fd {
                d_feats.data_mut()[i * fd + k] =
                    dx1.item(i)[k] + dx2.item(i)[k];
            }
        }
        let mut enc_grads = GradStore::zeros_of(&self.nets.encoder);
        self.nets.encoder.backward(enc_tape, &d_feats, &mut enc_grads)?;

        self.nets.q1.apply_grads(&q1_grads);
        self.nets.q2.apply_grads(&q2_grads);
        self.nets.encoder.apply_grads(&enc_grads);
        self.q1_opt.step(&mut self.nets.q1)?;
        self.q2_opt.step(&mut self.nets.q2)?;
        self.enc_opt.step(&mut self.nets.encoder)?;

        Ok(CriticStats {
            loss,
            mean_q,
            mean_target: targets.iter().sum::<f64>() * inv_n,
            clip_rate: clipped as f64 * inv_n,
        })
    }

    fn actor_core<R: Rng + ?Sized>(
        &mut self,
        feats: &Tensor<T>,
        rng: &mut R,
    ) -> Result<ActorStats> {
        let n = feats.shape()[0];
        let ad = self.cfg.action_dim;
        let fd = self.cfg.feature_dim;
        let temp = self.temperature();
        let inv_n = 1.0 / n as f64;

        let (pi_out, pi_tape) = self.nets.actor.forward_tape(feats)?;

        struct PolicyDraw {
            mean: Vec<f64>,
            raw: Vec<f64>,
            pre: Vec<f64>,
            action: Vec<f64>,
            log_prob: f64,
        }
        let mut draws = Vec::with_capacity(n);
        for i in 0..n {
            let (mean, raw, log_std) = self.policy_params(pi_out.item(i));
            let pre: Vec<f64> = mean
                .iter()
                .zip(&log_std)
                .map(|(m, l)| m + l.exp() * Real::to_f64(T::standard_normal(rng)))
                .collect();
            let action: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
            let log_prob = squashed_log_prob(&mean, &log_std, &pre);
            draws.push(PolicyDraw { mean, raw, pre, action, log_prob });
        }

        let actions: Vec<Vec<f64>> = draws.iter().map(|d| d.action.clone()).collect();
        let q_in = self.critic_input(feats, &actions)?;
        let (q1_out, q1_tape) = self.nets.q1.forward_tape(&q_in)?;
        let (q2_out, q2_tape) = self.nets.q2.forward_tape(&q_in)?;

        // Route -dQmin/da through whichever critic is the minimum per item.
        let mut dq1 = Tensor::zeros(&[n, 1]);
        let mut dq2 = Tensor::zeros(&[n, 1]);
        let mut loss = 0.0;
        for i in 0..n {
            let v1 = Real::to_f64(q1_out.item(i)[0]);
            let v2 = Real::to_f64(q2_out.item(i)[0]);
            loss += (temp * draws[i].log_prob - v1.min(v2)) * inv_n;
            let g = T::from_f64(-inv_n);
            if v1 <= v2 {
                dq1.data_mut()[i] = g;
            } else {
                dq2.data_mut()[i] = g;
            }
        }
        let mut scratch1 = GradStore::zeros_of(&self.nets.q1);
        let mut scratch2 = GradStore::zeros_of(&self.nets.q2);
        let dx1 = self.nets.q1.backward(&q1_tape, &dq1, &mut scratch1)?;
        let dx2 = self.nets.q2.backward(&q2_tape, &dq2, &mut scratch2)?;

        let mut d_pi = Tensor::zeros(pi_out.shape());
        for i in 0..n {
            let d = &draws[i];
            let row = d_pi.data_mut();
            let base = i * 2 * ad;
            for k in 0..ad {
                // d loss / d action, from the critic input gradients.
                let dl_da = Real::to_f64(dx1.item(i)[fd + k]) + Real::to_f64(dx2.item(i)[fd + k]);
                let a = d.action[k];
                let sech2 = 1.0 - a * a;
                // With the reparameterisation noise held fixed, the Gaussian
                // part of the log-prob is constant; only the squash
                // correction and the explicit -log_std term vary.
                let squash = 2.0 * a * sech2 / (1.0 - a * a + SQUASH_EPS);
                let g_pre = temp * inv_n * squash + dl_da * sech2;
                row[base + k] = T::from_f64(g_pre);
                let sigma_eta = d.pre[k] - d.mean[k];
                let g_log_std = g_pre * sigma_eta - temp * inv_n;
                row[base + ad + k] = T::from_f64(g_log_std * log_std_band_grad(d.raw[k]));
            }
        }

        let mut actor_grads = GradStore::zeros_of(&self.nets.actor);
        self.nets.actor.backward(&pi_tape, &d_pi, &mut actor_grads)?;
        self.nets.actor.apply_grads(&actor_grads);
        self.actor_opt.step(&mut self.nets.actor)?;

        // Temperature step toward the target entropy.
        let mean_lp = draws.iter().map(|d| d.log_prob).sum::<f64>() * inv_n;
        let alpha_grad = -(mean_lp + self.cfg.target_entropy);
        self.alpha_opt.step(&mut self.log_alpha, alpha_grad, self.cfg.temperature_lr);

        Ok(ActorStats { loss, entropy: -mean_lp, temperature: self.temperature() })
    }

    /// Polyak step on both target critics.
    pub fn update_targets(&mut self) {
        polyak_update(&self.nets.q1, &mut self.nets.target_q1, self.cfg.tau);
        polyak_update(&self.nets.q2, &mut self.nets.target_q2, self.cfg.tau);
    }

    fn critic_input(&self, feats: &Tensor<T>, actions: &[Vec<f64>]) -> Result<Tensor<T>> {
        let n = actions.len();
        let fd = self.cfg.feature_dim;
        let ad = self.cfg.action_dim;
        let mut data = Vec::with_capacity(n * (fd + ad));
        for i in 0..n {
            if actions[i].len() != ad {
                return Err(Error::Usage(format!(
                    "action {i} has dimension {}, expected {ad}",
                    actions[i].len()
                )));
            }
            data.extend_from_slice(feats.item(i));
            data.extend(actions[i].iter().map(|a| T::from_f64(*a)));
        }
        Tensor::from_vec(&[n, fd + ad], data)
    }

    fn check_batch(&self, batch: &[RlBatchItem<T>]) -> Result<()> {
        let fl = self.frame_len();
        for (i, b) in batch.iter().enumerate() {
            if b.obs.len() != fl || b.next_obs.len() != fl {
                return Err(Error::Usage(format!("batch item {i} has a wrong frame length")));
            }
            if b.action.len() != self.cfg.action_dim {
                return Err(Error::Usage(format!("batch item {i} has a wrong action dimension")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{render_at, MazeConfig};
    use crate::rng;

    fn test_config(side: usize) -> LearnerConfig {
        LearnerConfig {
            image_side: side,
            action_dim: 2,
            enc_channels: 2,
            feature_dim: 16,
            hidden_dim: 32,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            temperature_lr: 1e-3,
            init_temperature: 0.1,
            target_entropy: -2.0,
            crop_pad: 2,
            value_clip: true,
            bounds: ValueBounds::from_rewards(-1.0, 100.0, 0.99, false).unwrap(),
        }
    }

    fn frame(side: usize, pos: (f64, f64)) -> Observation {
        let mut cfg = MazeConfig::from_rows(&["S...G"]).unwrap();
        cfg.image_side = side;
        render_at(&cfg, pos)
    }

    fn batch_from_pool<T: Real>(
        _learner: &Learner<T>,
        pool: &[(Observation, Vec<f64>, f64, Observation, bool)],
        picks: &[usize],
    ) -> Vec<RlBatchItem<T>> {
        picks
            .iter()
            .map(|&i| {
                let (o, a, r, o2, d) = &pool[i];
                RlBatchItem {
                    obs: observation_pixels::<T>(o),
                    action: a.clone(),
                    reward: *r,
                    next_obs: observation_pixels::<T>(o2),
                    done: *d,
                }
            })
            .collect()
    }

    #[test]
    fn combined_step_matches_separate_actor_then_critic_updates() {
        let side = 16;
        let cfg = test_config(side);
        let mut init = rng::stream(31, "combined-init");
        let mut a: Learner<f32> = Learner::new(cfg.clone(), &mut init).unwrap();
        let mut init = rng::stream(31, "combined-init");
        let mut b: Learner<f32> = Learner::new(cfg, &mut init).unwrap();

        let mut pool_rng = rng::stream(32, "combined-pool");
        let pool: Vec<(Observation, Vec<f64>, f64, Observation, bool)> = (0..8)
            .map(|_| {
                let p = (pool_rng.gen_range(0.2..4.8), pool_rng.gen_range(0.2..0.8));
                let q = (pool_rng.gen_range(0.2..4.8), pool_rng.gen_range(0.2..0.8));
                let act = vec![pool_rng.gen_range(-1.0..1.0), pool_rng.gen_range(-1.0..1.0)];
                (frame(side, p), act, -1.0, frame(side, q), false)
            })
            .collect();
        let batch = batch_from_pool(&a, &pool, &[0, 1, 2, 3, 4, 5, 6, 7]);

        let mut rng_a = rng::stream(33, "combined-step");
        let mut rng_b = rng::stream(33, "combined-step");
        for _ in 0..3 {
            let (cs_a, as_a) = a.update_step(&batch, &mut rng_a).unwrap();
            let as_b = b.actor_update(&batch, &mut rng_b).unwrap();
            let cs_b = b.critic_update(&batch, &mut rng_b).unwrap();
            assert_eq!(cs_a.loss, cs_b.loss);
            assert_eq!(cs_a.mean_target, cs_b.mean_target);
            assert_eq!(as_a.loss, as_b.loss);
            assert_eq!(as_a.entropy, as_b.entropy);
            a.update_targets();
            b.update_targets();
        }

        assert_eq!(a.log_alpha(), b.log_alpha());
        let nets = [
            (a.nets.encoder.params(), b.nets.encoder.params()),
            (a.nets.actor.params(), b.nets.actor.params()),
            (a.nets.q1.params(), b.nets.q1.params()),
            (a.nets.q2.params(), b.nets.q2.params()),
            (a.nets.target_q1.params(), b.nets.target_q1.params()),
            (a.nets.target_q2.params(), b.nets.target_q2.params()),
        ];
        for (pa, pb) in nets {
            assert_eq!(pa.len(), pb.len());
            for (ta, tb) in pa.iter().zip(pb.iter()) {
                assert_eq!(ta.values, tb.values);
            }
        }
    }

    #[test]
    fn value_bounds_follow_both_rules() {
        let geo = ValueBounds::from_rewards(-1.0, 100.0, 0.99, false).unwrap();
        assert!((geo.q_min - -100.0).abs() < 1e-12);
        assert_eq!(geo.q_max, 100.0);
        let printed = ValueBounds::from_rewards(-1.0, 100.0, 0.99, true).unwrap();
        assert!((printed.q_min - -0.01).abs() < 1e-15);
        assert!(ValueBounds::from_rewards(-1.0, 100.0, 1.0, false).is_err());
        assert!(ValueBounds::from_rewards(1.0, -1.0, 0.5, true).is_err());

        let (c, moved) = geo.clip(-250.0);
        assert_eq!(c, geo.q_min);
        assert!(moved);
        let (c, moved) = geo.clip(3.0);
        assert_eq!(c, 3.0);
        assert!(!moved);
    }

    #[test]
    fn act_is_bounded_squashed_and_reproducible() {
        let cfg = test_config(12);
        let mut learner: Learner<f32> =
            Learner::new(cfg, &mut rng::stream(1, "learner-init")).unwrap();
        let obs = frame(12, (0.5, 0.5));

        for _ in 0..10 {
            let a = learner.act(&obs, false, &mut rng::stream(2, "act")).unwrap();
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        let a = learner.act(&obs, false, &mut rng::stream(3, "act")).unwrap();
        let b = learner.act(&obs, false, &mut rng::stream(3, "act")).unwrap();
        assert_eq!(a, b);

        // Zeroing the actor head makes the deterministic action exactly zero.
        let n = learner.nets.actor.params().len();
        for p in &mut learner.nets.actor.params_mut()[n - 2..] {
            for v in p.values.iter_mut() {
                *v = 0.0;
            }
        }
        let a = learner.act(&obs, true, &mut rng::stream(4, "act")).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn augmentation_preserves_shape_and_varies_with_seed() {
        let cfg = test_config(12);
        let learner: Learner<f32> =
            Learner::new(cfg, &mut rng::stream(5, "learner-init")).unwrap();
        let obs = frame(12, (1.5, 0.5));
        let pool = vec![(obs.clone(), vec![0.0, 0.0], -1.0, obs, false)];
        let base = batch_from_pool(&learner, &pool, &[0]);

        let mut id_batch = base.clone();
        augment_batch(&mut id_batch, &Augmenter::new(0), 12, &mut rng::stream(6, "aug"));
        assert_eq!(id_batch[0].obs, base[0].obs);

        let aug = Augmenter::new(2);
        let mut b1 = base.clone();
        let mut b2 = base.clone();
        augment_batch(&mut b1, &aug, 12, &mut rng::stream(7, "aug"));
        augment_batch(&mut b2, &aug, 12, &mut rng::stream(8, "aug"));
        assert_eq!(b1[0].obs.len(), base[0].obs.len());
        assert_ne!(b1[0].obs, b2[0].obs);
    }

    #[test]
    fn polyak_boundaries_and_composition_match_the_recurrence() {
        let cfg = test_config(12);
        let mut r = rng::stream(9, "polyak");
        let nets: AgentNets<f32> = AgentNets::new(&cfg, &mut r).unwrap();
        let online = nets.q1.clone();

        let mut t1 = nets.q2.clone();
        polyak_update(&online, &mut t1, 1.0);
        for (a, b) in online.params().iter().zip(t1.params()) {
            assert_eq!(a.values, b.values);
        }

        let mut t0 = nets.q2.clone();
        polyak_update(&online, &mut t0, 0.0);
        for (a, b) in nets.q2.params().iter().zip(t0.params()) {
            assert_eq!(a.values, b.values);
        }

        // Two tau steps equal one affine step with the composed coefficient.
        let tau = 0.01f64;
        let mut twice = nets.q2.clone();
        polyak_update(&online, &mut twice, tau);
        polyak_update(&online, &mut twice, tau);
        let keep = (1.0 - tau) * (1.0 - tau);
        for (p_on, (p_start, p_twice)) in
            online.params().iter().zip(nets.q2.params().iter().zip(twice.params()))
        {
            for ((o, s), t) in p_on.values.iter().zip(&p_start.values).zip(&p_twice.values) {
                let oracle = keep as f32 * s + (1.0 - keep as f32) * o;
                assert!((oracle - t).abs() <= 2e-6, "{oracle} vs {t}");
            }
        }
    }

    #[test]
    fn critic_targets_stay_inside_the_bounds() {
        let mut cfg = test_config(12);
        cfg.bounds = ValueBounds { q_min: -2.0, q_max: 2.0 };
        let mut learner: Learner<f32> =
            Learner::new(cfg, &mut rng::stream(10, "learner-init")).unwrap();
        let mut r = rng::stream(11, "critic-batch");
        let pool: Vec<_> = (0..8)
            .map(|i| {
                let o = frame(12, (0.3 + 0.5 * i as f64, 0.5));
                let o2 = frame(12, (0.5 + 0.5 * i as f64, 0.5));
                let reward = r.gen_range(-30.0..30.0);
                (o, vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)], reward, o2, i % 3 == 0)
            })
            .collect();
        let batch = batch_from_pool(&learner, &pool, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let stats = learner.critic_update(&batch, &mut r).unwrap();
        assert!(stats.mean_target >= -2.0 && stats.mean_target <= 2.0);
        assert!(stats.clip_rate > 0.0, "rewards beyond the bounds must clip");

        // A terminal success lands exactly on the ceiling.
        let o = frame(12, (4.5, 0.5));
        let done_batch = vec![RlBatchItem {
            obs: observation_pixels::<f32>(&o),
            action: vec![0.0, 0.0],
            reward: 2.0,
            next_obs: observation_pixels::<f32>(&o),
            done: true,
        }];
        let stats = learner.critic_update(&done_batch, &mut r).unwrap();
        assert_eq!(stats.mean_target, 2.0);
        assert_eq!(stats.clip_rate, 0.0);
    }

    #[test]
    fn squashed_log_prob_matches_a_histogram_estimate() {
        let mean = [0.3f64];
        let log_std = [-0.4f64];
        let mut r = rng::stream(12, "density");
        let n = 200_000;
        let a0 = 0.55f64;
        let delta = 0.02;
        let mut hits = 0usize;
        for _ in 0..n {
            let eta: f64 = Real::to_f64(f64::standard_normal(&mut r));
            let a = (mean[0] + log_std[0].exp() * eta).tanh();
            if (a - a0).abs() <= delta / 2.0 {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let se = (p_hat * (1.0 - p_hat) / n as f64).sqrt();
        let pre0 = a0.atanh();
        let density = squashed_log_prob(&mean, &log_std, &[pre0]).exp();
        let p_model = density * delta;
        assert!(
            (p_model - p_hat).abs() < 3.0 * se + 1e-4,
            "model {p_model} vs MC {p_hat} (se {se})"
        );
    }

    #[test]
    fn frozen_zero_critics_leave_only_the_entropy_gradient() {
        let mut cfg = test_config(12);
        cfg.temperature_lr = 0.0;
        cfg.init_temperature = 0.5;
        let mut learner: Learner<f32> =
            Learner::new(cfg, &mut rng::stream(13, "learner-init")).unwrap();
        for net in [&mut learner.nets.q1, &mut learner.nets.q2] {
            for p in net.params_mut() {
                for v in p.values.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let obs = frame(12, (2.5, 0.5));
        let pool = vec![(obs.clone(), vec![0.0, 0.0], -1.0, obs, false)];
        let batch = batch_from_pool(&learner, &pool, &[0; 16]);

        let before = learner.actor_update(&batch, &mut rng::stream(14, "a")).unwrap();
        for i in 0..60 {
            learner
                .actor_update(&batch, &mut rng::stream(15 + i, "actor-entropy"))
                .unwrap();
        }
        let after = learner.actor_update(&batch, &mut rng::stream(99, "a")).unwrap();
        assert!(
            after.entropy > before.entropy,
            "entropy should rise when value is constant: {} vs {}",
            after.entropy,
            before.entropy
        );
        assert_eq!(after.temperature, 0.5);
    }

    #[test]
    fn learner_solves_a_one_step_bandit() {
        let mut cfg = test_config(12);
        cfg.action_dim = 1;
        cfg.target_entropy = -1.0;
        cfg.init_temperature = 0.05;
        cfg.actor_lr = 3e-3;
        cfg.critic_lr = 3e-3;
        cfg.bounds = ValueBounds { q_min: -4.0, q_max: 0.0 };
        let mut learner: Learner<f32> =
            Learner::new(cfg, &mut rng::stream(16, "bandit-init")).unwrap();
        let obs = frame(12, (1.0, 0.5));
        let best = 0.6f64;

        let mut r = rng::stream(17, "bandit");
        for _ in 0..500 {
            let batch: Vec<RlBatchItem<f32>> = (0..32)
                .map(|_| {
                    let a = r.gen_range(-1.0..1.0);
                    RlBatchItem {
                        obs: observation_pixels::<f32>(&obs),
                        action: vec![a],
                        reward: -(a - best) * (a - best),
                        next_obs: observation_pixels::<f32>(&obs),
                        done: true,
                    }
                })
                .collect();
            learner.critic_update(&batch, &mut r).unwrap();
            learner.actor_update(&batch, &mut r).unwrap();
            learner.update_targets();
        }
        let a = learner.act(&obs, true, &mut r).unwrap();
        assert!(
            (a[0] - best).abs() < 0.1,
            "deterministic action {} should approach {best}",
            a[0]
        );
    }

    #[test]
    fn config_validation_rejects_nonsense()
    {
        let mut cfg = test_config(12);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        cfg = test_config(12);
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg = test_config(12);
        cfg.init_temperature = 0.0;
        assert!(cfg.validate().is_err());
        cfg = test_config(12);
        cfg.bounds = ValueBounds { q_min: 1.0, q_max: -1.0 };
        assert!(cfg.validate().is_err());
        assert!(test_config(12).validate().is_ok());
    }
}
