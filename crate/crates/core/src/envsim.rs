//! Pixel-rendered 2-d point-maze environment with sparse rewards.
//!
//! The world is a grid of unit cells, some of which are walls. The agent is a
//! point mass moving in continuous coordinates; observations are RGB renders
//! of the full maze. Reward is `r_done` (> 0) on reaching the goal disc and
//! `r_live` (< 0) everywhere else. A scripted demonstrator follows
//! breadth-first-search waypoints from start to goal with optional action
//! noise, producing the demonstration trajectories consumed by
//! [`crate::demostore`].

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::demostore::Trajectory;
use crate::diffnet::Real;
use crate::{rng, Error, Result};

/// Wall colour, free-space colour, goal disc, agent disc (RGB).
const COLOR_WALL: [u8; 3] = [40, 40, 45];
const COLOR_FREE: [u8; 3] = [230, 230, 230];
const COLOR_GOAL: [u8; 3] = [220, 60, 60];
const COLOR_AGENT: [u8; 3] = [40, 200, 80];

/// Agent blob radius in world units.
const AGENT_RADIUS: f64 = 0.25;

/// Sub-sample count for segment collision checks. Per-step displacement is
/// capped well below one cell, so this spacing cannot tunnel through a wall.
const COLLISION_SAMPLES: usize = 8;

/// Demonstrator: waypoint switch distance and action noise scale.
const WAYPOINT_TOL: f64 = 0.2;
pub const DEMO_ACTION_NOISE: f64 = 0.05;

/// Static description of a maze task.
#[derive(Clone, Debug)]
pub struct MazeConfig {
    /// Wall occupancy, indexed `[row][col]`, row 0 at the top.
    pub walls: Vec<Vec<bool>>,
    /// Start cell `(col, row)`.
    pub start: (usize, usize),
    /// Goal disc centre in world units (1 unit = 1 cell).
    pub goal_center: (f64, f64),
    /// Goal disc radius in world units.
    pub goal_radius: f64,
    /// Rendered image side length in pixels.
    pub image_side: usize,
    /// Episode truncation horizon.
    pub max_steps: usize,
    /// Per-step displacement cap in world units.
    pub max_step_size: f64,
    /// Uniform start jitter half-width in world units.
    pub start_jitter: f64,
    pub r_done: f64,
    pub r_live: f64,
}

impl MazeConfig {
    /// Parses rows of `.#SG` characters: `#` wall, `S` start, `G` goal cell.
    /// Remaining knobs get desk-scale defaults.
    pub fn from_rows(rows: &[&str]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("maze has no rows".to_string()));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::with_capacity(rows.len());
        let mut start = None;
        let mut goal = None;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Config(format!("maze row {r} is not {width} cells wide")));
            }
            let mut wall_row = Vec::with_capacity(width);
            for (c, ch) in row.chars().enumerate() {
                match ch {
                    '#' => wall_row.push(true),
                    '.' => wall_row.push(false),
                    'S' => {
                        if start.replace((c, r)).is_some() {
                            return Err(Error::Config("maze has two start cells".to_string()));
                        }
                        wall_row.push(false);
                    }
                    'G' => {
                        if goal.replace((c, r)).is_some() {
                            return Err(Error::Config("maze has two goal cells".to_string()));
                        }
                        wall_row.push(false);
                    }
                    other => {
                        return Err(Error::Config(format!("unknown maze cell {other:?}")));
                    }
                }
            }
            walls.push(wall_row);
        }
        let start = start.ok_or_else(|| Error::Config("maze has no start cell".to_string()))?;
        let goal = goal.ok_or_else(|| Error::Config("maze has no goal cell".to_string()))?;
        let config = MazeConfig {
            walls,
            start,
            goal_center: (goal.0 as f64 + 0.5, goal.1 as f64 + 0.5),
            goal_radius: 0.25,
            image_side: 48,
            max_steps: 60,
            max_step_size: 0.15,
            start_jitter: 0.0,
            r_done: 100.0,
            r_live: -1.0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn width(&self) -> usize {
        self.walls.first().map(Vec::len).unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        self.walls.len()
    }

    pub fn start_center(&self) -> (f64, f64) {
        (self.start.0 as f64 + 0.5, self.start.1 as f64 + 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        if w == 0 || h == 0 {
            return Err(Error::Config("maze is empty".to_string()));
        }
        if self.walls.iter().any(|r| r.len() != w) {
            return Err(Error::Config("maze rows differ in width".to_string()));
        }
        if self.start.0 >= w || self.start.1 >= h || self.walls[self.start.1][self.start.0] {
            return Err(Error::Config("start cell is missing or inside a wall".to_string()));
        }
        if !(self.r_done > 0.0) {
            return Err(Error::Config("r_done must be positive".to_string()));
        }
        if !(self.r_live < 0.0) {
            return Err(Error::Config("r_live must be negative".to_string()));
        }
        if !(self.goal_radius > 0.0) || !(self.max_step_size > 0.0) {
            return Err(Error::Config("goal radius and step size must be positive".to_string()));
        }
        if self.start_jitter < 0.0 {
            return Err(Error::Config("start jitter must be non-negative".to_string()));
        }
        if self.image_side < 8 {
            return Err(Error::Config("image side must be at least 8 pixels".to_string()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max steps must be positive".to_string()));
        }
        if !self.in_free_space(self.goal_center) {
            return Err(Error::Config("goal centre is inside a wall".to_string()));
        }
        // The goal disc must not poke into any wall cell.
        for row in 0..h {
            for col in 0..w {
                if self.walls[row][col]
                    && cell_distance(self.goal_center, col, row) < self.goal_radius
                {
                    return Err(Error::Config("goal disc overlaps a wall".to_string()));
                }
            }
        }
        let sc = self.start_center();
        let d = ((sc.0 - self.goal_center.0).powi(2) + (sc.1 - self.goal_center.1).powi(2)).sqrt();
        if d <= self.goal_radius {
            return Err(Error::Config("start cell lies inside the goal disc".to_string()));
        }
        Ok(())
    }

    /// True when `pos` lies inside the maze and outside every wall cell.
    pub fn in_free_space(&self, pos: (f64, f64)) -> bool {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if pos.0 < 0.0 || pos.1 < 0.0 || pos.0 >= w || pos.1 >= h {
            return false;
        }
        !self.walls[pos.1 as usize][pos.0 as usize]
    }

    fn in_goal(&self, pos: (f64, f64)) -> bool {
        let dx = pos.0 - self.goal_center.0;
        let dy = pos.1 - self.goal_center.1;
        (dx * dx + dy * dy).sqrt() <= self.goal_radius
    }

    /// Uniformly samples a free-space position by rejection.
    pub fn random_free_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let (w, h) = (self.width() as f64, self.height() as f64);
        loop {
            let p = (rng.gen::<f64>() * w, rng.gen::<f64>() * h);
            if self.in_free_space(p) {
                return p;
            }
        }
    }
}

/// Distance from a point to the closed unit cell `(col, row)`.
fn cell_distance(p: (f64, f64), col: usize, row: usize) -> f64 {
    let dx = (col as f64 - p.0).max(p.0 - (col as f64 + 1.0)).max(0.0);
    let dy = (row as f64 - p.1).max(p.1 - (row as f64 + 1.0)).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

/// Dynamic environment state. Hidden from the learner; used by evaluation
/// oracles only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub pos: (f64, f64),
    pub steps: usize,
    pub done: bool,
}

/// One rendered frame: `side x side` RGB, row-major HWC, 8-bit channels.
/// [`Observation::pixels`] exposes the unit-interval float view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    side: usize,
    rgb: Vec<u8>,
}

impl Observation {
    pub fn from_rgb(side: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != side * side * 3 {
            return Err(Error::Usage(format!(
                "observation byte count {} does not match side {side}",
                rgb.len()
            )));
        }
        Ok(Observation { side, rgb })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Raw HWC bytes.
    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    /// CHW float pixels in `[0, 1]`.
    pub fn pixels(&self) -> Vec<f32> {
        let s2 = self.side * self.side;
        let mut out = vec![0.0f32; 3 * s2];
        for i in 0..s2 {
            for c in 0..3 {
                out[c * s2 + i] = f32::from(self.rgb[i * 3 + c]) / 255.0;
            }
        }
        out
    }

    /// Inverse of [`Observation::pixels`]: quantises CHW floats in `[0, 1]`
    /// back to the 8-bit frame.
    pub fn from_pixels(side: usize, pixels: &[f32]) -> Result<Self> {
        let s2 = side * side;
        if pixels.len() != 3 * s2 {
            return Err(Error::Usage(format!(
                "pixel count {} does not match side {side}",
                pixels.len()
            )));
        }
        let mut rgb = vec![0u8; 3 * s2];
        for i in 0..s2 {
            for c in 0..3 {
                let v = pixels[c * s2 + i];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Usage(format!("pixel value {v} outside [0, 1]")));
                }
                rgb[i * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(Observation { side, rgb })
    }
}

/// Result of one environment step. `done` is success or truncation; only
/// `success` is a real terminal state for value bootstrapping.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub truncated: bool,
}

/// The environment: config plus mutable state.
#[derive(Clone, Debug)]
pub struct Env {
    config: MazeConfig,
    state: EnvState,
}

impl Env {
    pub fn new(config: MazeConfig) -> Result<Self> {
        config.validate()?;
        let state = EnvState { pos: config.start_center(), steps: 0, done: true };
        Ok(Env { config, state })
    }

    pub fn config(&self) -> &MazeConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Starts a new episode. The seed drives start jitter only; stepping is
    /// deterministic.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut r: ChaCha8Rng = rng::stream(seed, "env-reset");
        let center = self.config.start_center();
        let mut pos = center;
        if self.config.start_jitter > 0.0 {
            for _ in 0..100 {
                let cand = (
                    center.0 + (r.gen::<f64>() * 2.0 - 1.0) * self.config.start_jitter,
                    center.1 + (r.gen::<f64>() * 2.0 - 1.0) * self.config.start_jitter,
                );
                if self.config.in_free_space(cand) && !self.config.in_goal(cand) {
                    pos = cand;
                    break;
                }
            }
        }
        self.state = EnvState { pos, steps: 0, done: false };
        self.render()
    }

    /// Starts an episode at an explicit position, for building offline
    /// datasets with broad state coverage. The position must be free space.
    pub fn place(&mut self, pos: (f64, f64)) -> Result<Observation> {
        if !self.config.in_free_space(pos) {
            return Err(Error::Usage(format!("placement {pos:?} is not in free space")));
        }
        self.state = EnvState { pos, steps: 0, done: false };
        Ok(self.render())
    }

    /// Advances the point mass by the clipped action. Movement is
    /// all-or-nothing: if any point along the segment (or the endpoint)
    /// would leave free space, the position does not change.
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome> {
        if self.state.done {
            return Err(Error::Usage("step called on a finished episode".to_string()));
        }
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let mut dx = ax * self.config.max_step_size;
        let mut dy = ay * self.config.max_step_size;
        let norm = (dx * dx + dy * dy).sqrt();
        if norm > self.config.max_step_size {
            let scale = self.config.max_step_size / norm;
            dx *= scale;
            dy *= scale;
        }

        let from = self.state.pos;
        let target = (from.0 + dx, from.1 + dy);
        let mut blocked = false;
        for k in 1..=COLLISION_SAMPLES {
            let t = k as f64 / COLLISION_SAMPLES as f64;
            let p = (from.0 + dx * t, from.1 + dy * t);
            if !self.config.in_free_space(p) {
                blocked = true;
                break;
            }
        }
        if !blocked {
            self.state.pos = target;
        }

        self.state.steps += 1;
        let success = self.config.in_goal(self.state.pos);
        let truncated = !success && self.state.steps >= self.config.max_steps;
        self.state.done = success || truncated;
        let reward = if success { self.config.r_done } else { self.config.r_live };
        Ok(StepOutcome { obs: self.render(), reward, done: self.state.done, success, truncated })
    }

    /// Renders the current state. Pure function of config and agent position.
    pub fn render(&self) -> Observation {
        render_at(&self.config, self.state.pos)
    }
}

/// Euclidean distance between agent positions: the evaluation-only metric
/// oracle, never exposed to the learner.
pub fn ground_truth_distance(a: &EnvState, b: &EnvState) -> f64 {
    let dx = a.pos.0 - b.pos.0;
    let dy = a.pos.1 - b.pos.1;
    (dx * dx + dy * dy).sqrt()
}

/// Renders the maze with the agent at `pos`.
pub fn render_at(config: &MazeConfig, pos: (f64, f64)) -> Observation {
    let side = config.image_side;
    let (w, h) = (config.width() as f64, config.height() as f64);
    let px_per_unit = side as f64 / w.max(h);
    let mut rgb = vec![0u8; side * side * 3];
    for py in 0..side {
        for px in 0..side {
            let wx = (px as f64 + 0.5) / px_per_unit;
            let wy = (py as f64 + 0.5) / px_per_unit;
            let mut color = if wx >= w || wy >= h || config.walls[wy as usize][wx as usize] {
                COLOR_WALL
            } else {
                COLOR_FREE
            };
            let gd = (wx - config.goal_center.0).hypot(wy - config.goal_center.1);
            if gd <= config.goal_radius && color != COLOR_WALL {
                color = COLOR_GOAL;
            }
            let ad = (wx - pos.0).hypot(wy - pos.1);
            if ad <= AGENT_RADIUS {
                color = COLOR_AGENT;
            }
            let at = (py * side + px) * 3;
            rgb[at..at + 3].copy_from_slice(&color);
        }
    }
    // At coarse resolutions a disc can fall between pixel centres; the agent
    // and goal must stay visible, so their centre pixels are always painted.
    let mut paint_center = |center: (f64, f64), color: [u8; 3]| {
        let px = ((center.0 * px_per_unit) as usize).min(side - 1);
        let py = ((center.1 * px_per_unit) as usize).min(side - 1);
        let at = (py * side + px) * 3;
        rgb[at..at + 3].copy_from_slice(&color);
    };
    paint_center(config.goal_center, COLOR_GOAL);
    paint_center(pos, COLOR_AGENT);
    Observation { side, rgb }
}

/// Writes an observation as a PNG file.
pub fn save_png(obs: &Observation, path: &Path) -> Result<()> {
    let side = obs.side() as u32;
    let img = image::RgbImage::from_raw(side, side, obs.rgb().to_vec())
        .expect("observation byte count matches its side");
    img.save(path).map_err(|e| Error::Usage(format!("failed to write {path:?}: {e}")))
}

/// Breadth-first search over free cells, 4-connected. Returns the cell path
/// from start to goal inclusive.
fn bfs_cell_path(config: &MazeConfig, from: (usize, usize), to: (usize, usize)) -> Option<Vec<(usize, usize)>> {
    let (w, h) = (config.width(), config.height());
    let idx = |c: (usize, usize)| c.1 * w + c.0;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; w * h];
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    queue.push_back(from);
    seen[idx(from)] = true;
    while let Some(cur) = queue.pop_front() {
        if cur == to {
            let mut path = vec![cur];
            let mut node = cur;
            while let Some(p) = parent[idx(node)] {
                path.push(p);
                node = p;
            }
            path.reverse();
            return Some(path);
        }
        let (c, r) = cur;
        let mut neighbours = Vec::with_capacity(4);
        if c > 0 {
            neighbours.push((c - 1, r));
        }
        if c + 1 < w {
            neighbours.push((c + 1, r));
        }
        if r > 0 {
            neighbours.push((c, r - 1));
        }
        if r + 1 < h {
            neighbours.push((c, r + 1));
        }
        for n in neighbours {
            if !config.walls[n.1][n.0] && !seen[idx(n)] {
                seen[idx(n)] = true;
                parent[idx(n)] = Some(cur);
                queue.push_back(n);
            }
        }
    }
    None
}

/// Collects one demonstration by following breadth-first-search waypoints
/// toward the goal, with Gaussian action noise. Fails if no wall-free path
/// exists or the episode truncates before reaching the goal.
pub fn scripted_demonstrator(config: &MazeConfig, index: usize, seed: u64) -> Result<Trajectory> {
    let goal_cell = (config.goal_center.0 as usize, config.goal_center.1 as usize);
    let cells = bfs_cell_path(config, config.start, goal_cell)
        .ok_or_else(|| Error::Demonstrator("no wall-free path from start to goal".to_string()))?;
    let mut waypoints: Vec<(f64, f64)> =
        cells.iter().map(|&(c, r)| (c as f64 + 0.5, r as f64 + 0.5)).collect();
    match waypoints.last() {
        Some(&last) if last == config.goal_center => {}
        _ => waypoints.push(config.goal_center),
    }

    let mut env = Env::new(config.clone())?;
    let mut noise = rng::stream(seed, "demonstrator");
    let first = env.reset(seed);
    let mut observations = vec![first];
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut wp = 0usize;

    loop {
        let pos = env.state().pos;
        while wp + 1 < waypoints.len()
            && (pos.0 - waypoints[wp].0).hypot(pos.1 - waypoints[wp].1) < WAYPOINT_TOL
        {
            wp += 1;
        }
        let target = waypoints[wp];
        let delta = (target.0 - pos.0, target.1 - pos.1);
        let dist = delta.0.hypot(delta.1);
        let mut action = if dist > 1e-12 {
            let speed = (dist / config.max_step_size).min(1.0);
            [delta.0 / dist * speed, delta.1 / dist * speed]
        } else {
            [0.0, 0.0]
        };
        for a in &mut action {
            *a = (*a + f64::standard_normal(&mut noise) * DEMO_ACTION_NOISE).clamp(-1.0, 1.0);
        }
        let out = env.step(action)?;
        actions.push(action.to_vec());
        observations.push(out.obs);
        if out.success {
            return Trajectory::new(index, observations, actions, true);
        }
        if out.done {
            return Err(Error::Demonstrator(format!(
                "episode truncated after {} steps before reaching the goal",
                env.state().steps
            )));
        }
    }
}
