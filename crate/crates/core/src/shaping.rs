//! Demonstration-guided exploration reward.
//!
//! Demo observations are embedded with the current encoder into a
//! [`DemoEmbeddingIndex`]. The dynamic threshold ε is the mean embedded
//! distance between consecutive demo observations, so "near a demonstration"
//! adapts as the metric sharpens during training. A transition whose next
//! observation lands within ε of its nearest demo observation `(i*, t*)`,
//! and is not a goal state, earns
//!
//! ```text
//! r_dense = r + α^(T_{i*} - t*) · r_e
//! ```
//!
//! so states near the end of a demonstration earn almost the full bonus and
//! earlier ones exponentially less. Raw sparse rewards stay in the replay
//! buffer untouched; shaping is recomputed at batch-assembly time against the
//! newest encoder, with version stamps guarding against stale lookups.

use std::collections::BTreeMap;

use crate::demostore::DemoSet;
use crate::diffnet::Real;
use crate::envsim::Observation;
use crate::latentmodel::{observation_pixels, LatentModel};
use crate::{par, Error, Result};

/// One embedded demo observation.
#[derive(Clone, Debug)]
pub struct IndexEntry {
    /// Demo trajectory identifier.
    pub demo: usize,
    /// Step within the trajectory, `0..=T_i`.
    pub t: usize,
    /// Embedded mean, in `f64` for distance arithmetic.
    pub mean: Vec<f64>,
}

/// Embedded demo observations plus the encoder version they were built with.
#[derive(Clone, Debug)]
pub struct DemoEmbeddingIndex {
    entries: Vec<IndexEntry>,
    lengths: BTreeMap<usize, usize>,
    version: u64,
}

impl DemoEmbeddingIndex {
    /// Builds an index from per-demo embedding sequences. Each inner vector
    /// holds the means for steps `0..=T_i` of one trajectory.
    pub fn from_embeddings(demos: Vec<(usize, Vec<Vec<f64>>)>, version: u64) -> Result<Self> {
        let mut entries = Vec::new();
        let mut lengths = BTreeMap::new();
        let mut dim = None;
        for (id, means) in demos {
            if means.is_empty() {
                return Err(Error::Usage(format!("demo {id} has no embeddings")));
            }
            if lengths.insert(id, means.len() - 1).is_some() {
                return Err(Error::Usage(format!("duplicate demo id {id}")));
            }
            for (t, mean) in means.into_iter().enumerate() {
                match dim {
                    None => dim = Some(mean.len()),
                    Some(d) if d != mean.len() => {
                        return Err(Error::Usage(format!(
                            "demo {id} step {t} has embedding dimension {}, expected {d}",
                            mean.len()
                        )))
                    }
                    _ => {}
                }
                entries.push(IndexEntry { demo: id, t, mean });
            }
        }
        Ok(DemoEmbeddingIndex { entries, lengths, version })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of actions `T_i` in the given demo, if present.
    pub fn demo_length(&self, demo: usize) -> Option<usize> {
        self.lengths.get(&demo).copied()
    }

    /// Exact nearest entry by L2 distance over every `(demo, t)`. Ties go to
    /// the larger `t`, then the smaller demo id.
    pub fn nearest(&self, query: &[f64]) -> Result<NearestDemo> {
        if self.entries.is_empty() {
            return Err(Error::Usage("nearest-demo query on an empty index".to_string()));
        }
        let mut best: Option<(f64, &IndexEntry)> = None;
        for e in &self.entries {
            if e.mean.len() != query.len() {
                return Err(Error::Usage(format!(
                    "query dimension {} does not match index dimension {}",
                    query.len(),
                    e.mean.len()
                )));
            }
            let d = l2(query, &e.mean);
            let better = match best {
                None => true,
                Some((bd, be)) => {
                    d < bd || (d == bd && (e.t > be.t || (e.t == be.t && e.demo < be.demo)))
                }
            };
            if better {
                best = Some((d, e));
            }
        }
        let (distance, entry) = best.expect("non-empty index yields a nearest entry");
        Ok(NearestDemo {
            demo: entry.demo,
            t: entry.t,
            demo_length: self.lengths[&entry.demo],
            distance,
        })
    }
}

/// Result of a nearest-demo lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestDemo {
    pub demo: usize,
    pub t: usize,
    /// `T_i` of the matched demo, so the bonus exponent is `demo_length - t`.
    pub demo_length: usize,
    pub distance: f64,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Embeds one observation with the identity augmentation.
pub fn embed_observation<T: Real>(
    model: &LatentModel<T>,
    obs: &Observation,
) -> Result<Vec<f64>> {
    Ok(embed_batch(model, &[obs])?.pop().expect("one observation in, one embedding out"))
}

/// Embeds a batch of observations; ordering is preserved.
pub fn embed_batch<T: Real>(
    model: &LatentModel<T>,
    obs: &[&Observation],
) -> Result<Vec<Vec<f64>>> {
    let frames: Vec<Vec<T>> = par::map_items(obs, |o| observation_pixels::<T>(o));
    let gaussians = model.encode(&frames)?;
    Ok(par::map_items(&gaussians, |g| g.mean.iter().map(|m| Real::to_f64(*m)).collect()))
}

/// Re-encodes every demo observation (including each terminal one) with the
/// current encoder and stamps the result with `version`.
pub fn rebuild_index<T: Real>(
    demos: &DemoSet,
    model: &LatentModel<T>,
    version: u64,
) -> Result<DemoEmbeddingIndex> {
    let mut refs: Vec<&Observation> = Vec::new();
    for traj in demos.trajectories() {
        refs.extend(traj.observations.iter());
    }
    let mut grouped = Vec::with_capacity(demos.trajectories().len());
    if refs.is_empty() {
        return DemoEmbeddingIndex::from_embeddings(grouped, version);
    }
    let mut means = embed_batch(model, &refs)?.into_iter();
    for traj in demos.trajectories() {
        let seq: Vec<Vec<f64>> = (&mut means).take(traj.observations.len()).collect();
        grouped.push((traj.index, seq));
    }
    DemoEmbeddingIndex::from_embeddings(grouped, version)
}

/// Dynamic threshold with the index version it was computed from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub epsilon: f64,
    pub version: u64,
}

/// Mean embedded distance between consecutive observations, over all demos.
/// `None` when the index holds no consecutive pair, in which case shaping
/// must be disabled.
pub fn compute_epsilon(index: &DemoEmbeddingIndex) -> Option<Threshold> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let entries = index.entries();
    for w in entries.windows(2) {
        if w[0].demo == w[1].demo && w[1].t == w[0].t + 1 {
            sum += l2(&w[0].mean, &w[1].mean);
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    Some(Threshold { epsilon: sum / count as f64, version: index.version() })
}

/// Exploration-bonus configuration.
#[derive(Clone, Copy, Debug)]
pub struct ShapingConfig {
    pub r_e: f64,
    pub alpha: f64,
    pub enabled: bool,
}

impl ShapingConfig {
    /// `r_e` must be a positive bonus no larger than the step penalty, and
    /// `alpha` a strict discount, so dense rewards of non-goal steps stay
    /// non-positive.
    pub fn validate(&self, r_live: f64) -> Result<()> {
        if !(self.r_e > 0.0) {
            return Err(Error::Config(format!("exploration reward {} must be positive", self.r_e)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie strictly in (0, 1)", self.alpha)));
        }
        if self.r_e.abs() > r_live.abs() {
            return Err(Error::Config(format!(
                "exploration reward {} exceeds the step penalty magnitude {}",
                self.r_e,
                r_live.abs()
            )));
        }
        Ok(())
    }
}

/// A shaped reward plus diagnostics for the metrics stream.
#[derive(Clone, Copy, Debug)]
pub struct ShapeOutcome {
    pub reward: f64,
    /// The bonus actually added, when the transition matched a demo.
    pub bonus: Option<f64>,
    pub nearest: Option<NearestDemo>,
}

/// Applies the dense-reward rule to one transition's raw sparse reward.
///
/// `next_embedding` is the embedded next observation and `goal_hit` the
/// environment's goal test for it. The threshold must carry the index's
/// version; a mismatch means ε or the index is stale.
pub fn shape_reward(
    raw_reward: f64,
    next_embedding: &[f64],
    goal_hit: bool,
    index: &DemoEmbeddingIndex,
    threshold: &Threshold,
    cfg: &ShapingConfig,
) -> Result<ShapeOutcome> {
    if !cfg.enabled {
        return Ok(ShapeOutcome { reward: raw_reward, bonus: None, nearest: None });
    }
    if threshold.version != index.version() {
        return Err(Error::Usage(format!(
            "threshold built for encoder version {} but index has version {}",
            threshold.version,
            index.version()
        )));
    }
    let nearest = index.nearest(next_embedding)?;
    if !goal_hit && nearest.distance <= threshold.epsilon {
        let exponent = (nearest.demo_length - nearest.t) as i32;
        let bonus = cfg.alpha.powi(exponent) * cfg.r_e;
        Ok(ShapeOutcome { reward: raw_reward + bonus, bonus: Some(bonus), nearest: Some(nearest) })
    } else {
        Ok(ShapeOutcome { reward: raw_reward, bonus: None, nearest: Some(nearest) })
    }
}

/// Accumulates shaping diagnostics over an epoch for the metrics stream.
#[derive(Clone, Copy, Debug, Default)]
pub struct ShapingStats {
    pub shaped: usize,
    pub total: usize,
    pub bonus_sum: f64,
}

impl ShapingStats {
    pub fn record(&mut self, outcome: &ShapeOutcome) {
        self.total += 1;
        if let Some(b) = outcome.bonus {
            self.shaped += 1;
            self.bonus_sum += b;
        }
    }

    /// Fraction of transitions that received a bonus.
    pub fn match_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.shaped as f64 / self.total as f64
        }
    }

    /// Mean bonus over transitions that received one.
    pub fn mean_bonus(&self) -> f64 {
        if self.shaped == 0 {
            0.0
        } else {
            self.bonus_sum / self.shaped as f64
        }
    }

    pub fn reset(&mut self) {
        *self = ShapingStats::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demostore::load_demos;
    use crate::envsim::{scripted_demonstrator, MazeConfig};
    use crate::latentmodel::{LatentModel, ModelArch, ModelTrainer};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn line_index(means: &[f64], version: u64) -> DemoEmbeddingIndex {
        let seq: Vec<Vec<f64>> = means.iter().map(|m| vec![*m]).collect();
        DemoEmbeddingIndex::from_embeddings(vec![(0, seq)], version).unwrap()
    }

    fn default_cfg() -> ShapingConfig {
        ShapingConfig { r_e: 1.0, alpha: 0.98, enabled: true }
    }

    fn tiny_model(seed: u64) -> LatentModel<f32> {
        let arch = ModelArch {
            image_side: 16,
            latent_dim: 3,
            action_dim: 2,
            enc_channels: 2,
            enc_fc: 8,
            dec_hidden: 16,
            dyn_hidden: 8,
        };
        LatentModel::new(arch, &mut rng::stream(seed, "shaping-model")).unwrap()
    }

    fn demo_set(side: usize, count: usize) -> DemoSet {
        let mut cfg = MazeConfig::from_rows(&["S...G"]).unwrap();
        cfg.image_side = side;
        cfg.max_steps = 200;
        let trajs = (0..count)
            .map(|i| scripted_demonstrator(&cfg, i, 40 + i as u64).unwrap())
            .collect();
        load_demos(trajs).unwrap()
    }

    #[test]
    fn index_counts_every_observation() {
        let demos = demo_set(16, 2);
        let expected: usize = demos.trajectories().iter().map(|t| t.len() + 1).sum();
        let model = tiny_model(1);
        let index = rebuild_index(&demos, &model, 7).unwrap();
        assert_eq!(index.len(), expected);
        assert_eq!(index.version(), 7);
        for traj in demos.trajectories() {
            assert_eq!(index.demo_length(traj.index), Some(traj.len()));
        }
    }

    #[test]
    fn rebuild_is_deterministic_until_the_encoder_moves() {
        let demos = demo_set(16, 1);
        let model = tiny_model(2);
        let a = rebuild_index(&demos, &model, 0).unwrap();
        let b = rebuild_index(&demos, &model, 0).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.mean, y.mean);
        }

        let mut trainer = ModelTrainer::new(model, 1e-3, 1.0, 2);
        let transitions = demos.transitions(100.0, -1.0);
        let batch: Vec<_> = transitions.iter().take(4).collect();
        trainer.update(&batch, &mut rng::stream(3, "shaping-update")).unwrap();
        let c = rebuild_index(&demos, &trainer.model, 1).unwrap();
        let moved = a
            .entries()
            .iter()
            .zip(c.entries())
            .any(|(x, y)| x.mean.iter().zip(&y.mean).any(|(p, q)| (p - q).abs() > 1e-9));
        assert!(moved, "encoder step left every demo embedding unchanged");
    }

    #[test]
    fn epsilon_averages_consecutive_distances() {
        let index = line_index(&[0.0, 1.0, 3.0], 0);
        let thr = compute_epsilon(&index).unwrap();
        assert_eq!(thr.epsilon, 1.5);
        assert_eq!(thr.version, 0);

        let degenerate = line_index(&[2.0, 2.0, 2.0], 0);
        assert_eq!(compute_epsilon(&degenerate).unwrap().epsilon, 0.0);

        let empty = DemoEmbeddingIndex::from_embeddings(vec![], 0).unwrap();
        assert!(compute_epsilon(&empty).is_none());
    }

    #[test]
    fn epsilon_matches_brute_force_oracle() {
        let mut r = rng::stream(5, "epsilon-oracle");
        for _ in 0..20 {
            let demos: Vec<(usize, Vec<Vec<f64>>)> = (0..3)
                .map(|i| {
                    let len = r.gen_range(2..8);
                    let means =
                        (0..len).map(|_| (0..4).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
                    (i * 10, means)
                })
                .collect();
            let oracle = {
                let mut sum = 0.0;
                let mut n = 0;
                for (_, means) in &demos {
                    for t in 0..means.len() - 1 {
                        let d: f64 = means[t]
                            .iter()
                            .zip(&means[t + 1])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        sum += d;
                        n += 1;
                    }
                }
                sum / n as f64
            };
            let index = DemoEmbeddingIndex::from_embeddings(demos, 0).unwrap();
            let thr = compute_epsilon(&index).unwrap();
            assert!((thr.epsilon - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_returns_self_and_singleton() {
        let index = line_index(&[0.0, 1.0, 3.0], 0);
        let hit = index.nearest(&[1.0]).unwrap();
        assert_eq!((hit.demo, hit.t, hit.distance), (0, 1, 0.0));

        let single =
            DemoEmbeddingIndex::from_embeddings(vec![(4, vec![vec![5.0, 5.0]])], 0).unwrap();
        let hit = single.nearest(&[-100.0, 3.0]).unwrap();
        assert_eq!((hit.demo, hit.t), (4, 0));
        assert_eq!(hit.demo_length, 0);

        let empty = DemoEmbeddingIndex::from_embeddings(vec![], 0).unwrap();
        assert!(empty.nearest(&[0.0]).is_err());
        assert!(index.nearest(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn nearest_breaks_ties_toward_later_steps_then_smaller_ids() {
        // Two entries of demo 0 equidistant from the query: larger t wins.
        let index = line_index(&[0.0, 2.0], 3);
        let hit = index.nearest(&[1.0]).unwrap();
        assert_eq!((hit.demo, hit.t), (0, 1));

        // Same t and distance in two demos: smaller id wins.
        let index = DemoEmbeddingIndex::from_embeddings(
            vec![(7, vec![vec![1.0]]), (2, vec![vec![-1.0]])],
            0,
        )
        .unwrap();
        let hit = index.nearest(&[0.0]).unwrap();
        assert_eq!(hit.demo, 2);
    }

    #[test]
    fn nearest_matches_linear_scan_oracle() {
        let mut r = rng::stream(6, "nn-oracle");
        let demos: Vec<(usize, Vec<Vec<f64>>)> = (0..4)
            .map(|i| {
                let means =
                    (0..25).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
                (i, means)
            })
            .collect();
        let index = DemoEmbeddingIndex::from_embeddings(demos, 0).unwrap();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..3).map(|_| r.gen_range(-1.2..1.2)).collect();
            let got = index.nearest(&q).unwrap();

            let best_d = index
                .entries()
                .iter()
                .map(|e| l2(&q, &e.mean))
                .fold(f64::INFINITY, f64::min);
            let oracle = index
                .entries()
                .iter()
                .filter(|e| l2(&q, &e.mean) == best_d)
                .max_by_key(|e| (e.t, std::cmp::Reverse(e.demo)))
                .unwrap();
            assert_eq!((got.demo, got.t), (oracle.demo, oracle.t));
            assert!((got.distance - best_d).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_reward_follows_the_published_cases() {
        // Demo of length 10: entries t = 0..=10.
        let means: Vec<f64> = (0..=10).map(|t| t as f64).collect();
        let index = line_index(&means, 0);
        let thr = Threshold { epsilon: 0.4, version: 0 };
        let cfg = default_cfg();

        // Matching the terminal state earns the full bonus.
        let out = shape_reward(-1.0, &[10.2], false, &index, &thr, &cfg).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.bonus, Some(1.0));

        // Goal transitions keep the sparse reward exactly.
        let out = shape_reward(100.0, &[10.2], true, &index, &thr, &cfg).unwrap();
        assert_eq!(out.reward, 100.0);
        assert_eq!(out.bonus, None);

        // Outside the threshold nothing changes.
        let out = shape_reward(-1.0, &[20.0], false, &index, &thr, &cfg).unwrap();
        assert_eq!(out.reward, -1.0);

        // Ten steps from the demo end: r + alpha^10 * r_e.
        let out = shape_reward(-1.0, &[0.1], false, &index, &thr, &cfg).unwrap();
        let mut oracle = 1.0;
        for _ in 0..10 {
            oracle *= 0.98;
        }
        assert!((out.reward - (-1.0 + oracle)).abs() < 1e-9);
        assert_eq!(out.nearest.unwrap().t, 0);
    }

    #[test]
    fn bonus_grows_toward_the_demo_end() {
        let means: Vec<f64> = (0..=6).map(|t| 10.0 * t as f64).collect();
        let index = line_index(&means, 0);
        let thr = Threshold { epsilon: 1.0, version: 0 };
        let cfg = default_cfg();
        let mut prev = f64::NEG_INFINITY;
        for t in 0..=6 {
            let q = [10.0 * t as f64 + 0.5];
            let out = shape_reward(-1.0, &q, false, &index, &thr, &cfg).unwrap();
            let bonus = out.bonus.unwrap();
            assert!(bonus >= prev, "bonus fell from {prev} to {bonus} at t={t}");
            prev = bonus;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn disabled_shaping_is_the_identity() {
        let index = line_index(&[0.0, 1.0], 0);
        let thr = Threshold { epsilon: 10.0, version: 0 };
        let cfg = ShapingConfig { enabled: false, ..default_cfg() };
        for r in [-1.0, 0.25, 100.0] {
            let out = shape_reward(r, &[0.0], false, &index, &thr, &cfg).unwrap();
            assert_eq!(out.reward, r);
            assert_eq!(out.bonus, None);
        }
    }

    #[test]
    fn stale_threshold_is_rejected() {
        let index = line_index(&[0.0, 1.0], 5);
        let thr = Threshold { epsilon: 1.0, version: 4 };
        let err = shape_reward(-1.0, &[0.0], false, &index, &thr, &default_cfg());
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn config_bounds_are_enforced() {
        assert!(default_cfg().validate(-1.0).is_ok());
        let mut cfg = default_cfg();
        cfg.r_e = 0.0;
        assert!(cfg.validate(-1.0).is_err());
        cfg.r_e = 1.5;
        assert!(cfg.validate(-1.0).is_err());
        assert!(cfg.validate(-2.0).is_ok());
        cfg = default_cfg();
        cfg.alpha = 1.0;
        assert!(cfg.validate(-1.0).is_err());
    }

    #[test]
    fn stats_track_match_rate_and_mean_bonus() {
        let mut stats = ShapingStats::default();
        stats.record(&ShapeOutcome { reward: 0.0, bonus: Some(1.0), nearest: None });
        stats.record(&ShapeOutcome { reward: -1.0, bonus: None, nearest: None });
        stats.record(&ShapeOutcome { reward: -0.5, bonus: Some(0.5), nearest: None });
        assert_eq!(stats.total, 3);
        assert!((stats.match_rate() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(stats.mean_bonus(), 0.75);
        stats.reset();
        assert_eq!(stats.total, 0);
    }

    proptest! {
        #[test]
        fn dense_rewards_stay_in_their_bands(
            entries in prop::collection::vec(-5.0f64..5.0, 2..30),
            query in -6.0f64..6.0,
            epsilon in 0.0f64..3.0,
            alpha in 0.05f64..0.95,
            r_e in 0.1f64..1.0,
            at_goal in any::<bool>(),
        ) {
            let index = line_index(&entries, 0);
            let thr = Threshold { epsilon, version: 0 };
            let cfg = ShapingConfig { r_e, alpha, enabled: true };
            let r_live = -1.0;
            let r_done = 100.0;
            cfg.validate(r_live).unwrap();
            let raw = if at_goal { r_done } else { r_live };
            let out = shape_reward(raw, &[query], at_goal, &index, &thr, &cfg).unwrap();
            if at_goal {
                prop_assert_eq!(out.reward, r_done);
            } else {
                prop_assert!(out.reward >= r_live);
                prop_assert!(out.reward <= r_live + r_e);
                prop_assert!(out.reward <= 0.0);
            }
        }
    }
}
