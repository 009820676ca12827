//! Deterministic pixel gridworld and a scripted expert.
//!
//! A square maze is rendered to RGB at a configurable resolution. Rewards
//! are either sparse (+10 on reaching the goal, 0 otherwise) or dense
//! (negative shaped distance to the goal). Layouts can be fixed for a run
//! or regenerated every episode; generated layouts always have a fully
//! connected free space, so every (agent, goal) placement is solvable.
//!
//! The true agent cell is exposed alongside pixels for probe evaluation
//! only; no learner in this crate ever consumes it.

use serde::{Deserialize, Serialize};

use crate::error::{AtcError, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Action order is fixed: up, down, left, right.
pub const NUM_ACTIONS: usize = 4;
const MOVES: [(i32, i32); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    /// +10 exactly once, on the step that reaches the goal.
    SparseGoal,
    /// Negative shaped distance: `-0.05 * bfs_distance(agent, goal)` per step.
    DenseNav,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    Fixed,
    PerEpisode,
}

/// Purely decorative pixels; never influence dynamics or reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    /// White bar in the top-left whose length tracks the episode score.
    #[serde(default)]
    pub score_counter: bool,
    /// Yellow sprite patrolling the border as a function of the step count.
    #[serde(default)]
    pub moving_sprite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorldConfig {
    /// Maze side length in cells, border walls included.
    pub grid: usize,
    /// Rendered height and width in pixels.
    pub render: usize,
    pub reward: RewardScheme,
    pub layout: LayoutMode,
    pub max_episode_len: usize,
    /// Probability that an interior cell is a wall when generating layouts.
    pub wall_density: f32,
    #[serde(default)]
    pub distractors: DistractorSpec,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        GridWorldConfig {
            grid: 9,
            render: 48,
            reward: RewardScheme::SparseGoal,
            layout: LayoutMode::PerEpisode,
            max_episode_len: 200,
            wall_density: 0.2,
            distractors: DistractorSpec::default(),
        }
    }
}

impl GridWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(AtcError::config("grid must be at least 4 cells"));
        }
        if self.render < self.grid {
            return Err(AtcError::config("render resolution below one pixel per cell"));
        }
        if self.max_episode_len == 0 {
            return Err(AtcError::config("max_episode_len must be positive"));
        }
        if !(0.0..=0.6).contains(&self.wall_density) {
            return Err(AtcError::config("wall_density outside [0, 0.6]"));
        }
        Ok(())
    }

    pub fn env_id(&self) -> String {
        let r = match self.reward {
            RewardScheme::SparseGoal => "sparse",
            RewardScheme::DenseNav => "dense",
        };
        format!("gridworld-{}-{}x{}-{}", r, self.grid, self.grid, self.render)
    }
}

/// One rendered observation: u8 RGB planes, dequantized to [0, 1] on use.
#[derive(Debug, Clone, PartialEq)]
pub struct Obs {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Obs {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Single observation as a `[1, c, h, w]` tensor in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f32> = self.pixels.iter().map(|p| *p as f32 / 255.0).collect();
        Tensor::from_vec(vec![1, self.channels, self.height, self.width], data).expect("sized")
    }
}

/// Stack observations into a `[n, c, h, w]` batch in [0, 1].
pub fn obs_batch(observations: &[&Obs]) -> Result<Tensor> {
    let first = observations.first().ok_or_else(|| AtcError::config("empty observation batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(observations.len() * c * h * w);
    for o in observations {
        if (o.channels, o.height, o.width) != (c, h, w) {
            return Err(AtcError::config("inconsistent observation shapes in batch"));
        }
        data.extend(o.pixels.iter().map(|p| *p as f32 / 255.0));
    }
    Tensor::from_vec(vec![observations.len(), c, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub reward: f32,
    pub done: bool,
    /// Episode ended by the step limit rather than the goal.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct GridWorldEnv {
    pub config: GridWorldConfig,
    walls: Vec<bool>,
    fixed_walls: Option<Vec<bool>>,
    agent: (usize, usize),
    goal: (usize, usize),
    /// BFS distance of every cell to the goal, -1 on walls.
    dist: Vec<i32>,
    steps: usize,
    episode_score: f32,
    done: bool,
}

impl GridWorldEnv {
    /// `layout_rng` seeds the fixed layout when `layout == Fixed`.
    pub fn new(config: GridWorldConfig, layout_rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let fixed_walls = match config.layout {
            LayoutMode::Fixed => Some(generate_connected_layout(&config, layout_rng)?),
            LayoutMode::PerEpisode => None,
        };
        let g = config.grid;
        Ok(GridWorldEnv {
            config,
            walls: vec![false; g * g],
            fixed_walls,
            agent: (1, 1),
            goal: (1, 1),
            dist: vec![-1; g * g],
            steps: 0,
            episode_score: 0.0,
            done: true,
        })
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    /// Ground-truth agent cell (x, y); probe evaluation only.
    pub fn agent_cell(&self) -> (usize, usize) {
        self.agent
    }

    /// Ground-truth agent cell as a flat class index.
    pub fn agent_cell_index(&self) -> usize {
        self.agent.1 * self.config.grid + self.agent.0
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.goal
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn walls(&self) -> &[bool] {
        &self.walls
    }

    /// Start a new episode: fresh layout in per-episode mode, fresh agent
    /// and goal cells on distinct free cells in both modes.
    pub fn reset(&mut self, rng: &mut Rng) -> Result<Obs> {
        self.walls = match (&self.config.layout, &self.fixed_walls) {
            (LayoutMode::Fixed, Some(w)) => w.clone(),
            _ => generate_connected_layout(&self.config, rng)?,
        };
        let free: Vec<usize> = (0..self.walls.len()).filter(|i| !self.walls[*i]).collect();
        if free.len() < 2 {
            return Err(AtcError::config("layout has fewer than two free cells"));
        }
        let g = self.config.grid;
        let a = free[rng.below(free.len())];
        let b = loop {
            let b = free[rng.below(free.len())];
            if b != a {
                break b;
            }
        };
        self.agent = (a % g, a / g);
        self.goal = (b % g, b / g);
        self.dist = bfs_distances(&self.walls, g, self.goal);
        debug_assert!(self.dist[a] >= 0, "free space is connected by construction");
        self.steps = 0;
        self.episode_score = 0.0;
        self.done = false;
        Ok(self.render())
    }

    /// Apply one action. Moving into a wall leaves the position unchanged.
    pub fn step(&mut self, action: usize) -> Result<(Obs, Step)> {
        if self.done {
            return Err(AtcError::contract("step called on a finished episode"));
        }
        if action >= NUM_ACTIONS {
            return Err(AtcError::config(format!("action {action} out of range")));
        }
        let (dx, dy) = MOVES[action];
        let nx = self.agent.0 as i32 + dx;
        let ny = self.agent.1 as i32 + dy;
        let g = self.config.grid as i32;
        if nx >= 0 && nx < g && ny >= 0 && ny < g && !self.walls[(ny * g + nx) as usize] {
            self.agent = (nx as usize, ny as usize);
        }
        self.steps += 1;
        let at_goal = self.agent == self.goal;
        let reward = match self.config.reward {
            RewardScheme::SparseGoal => {
                if at_goal {
                    10.0
                } else {
                    0.0
                }
            }
            RewardScheme::DenseNav => -0.05 * self.dist[self.agent.1 * self.config.grid + self.agent.0] as f32,
        };
        let truncated = !at_goal && self.steps >= self.config.max_episode_len;
        self.done = at_goal || truncated;
        self.episode_score += reward;
        Ok((self.render(), Step { reward, done: self.done, truncated }))
    }

    /// BFS distance from `cell` to the goal under the current layout.
    pub fn distance_to_goal(&self, cell: (usize, usize)) -> i32 {
        self.dist[cell.1 * self.config.grid + cell.0]
    }

    /// Pure function of (layout, agent, goal, decorations).
    pub fn render(&self) -> Obs {
        let g = self.config.grid;
        let side = self.config.render;
        let mut px = vec![0u8; 3 * side * side];
        let (plane_r, rest) = px.split_at_mut(side * side);
        let (plane_g, plane_b) = rest.split_at_mut(side * side);
        for y in 0..side {
            let cy = y * g / side;
            for x in 0..side {
                let cx = x * g / side;
                let cell = cy * g + cx;
                let (r, gg, b) = if (cx, cy) == self.agent {
                    (230, 60, 50)
                } else if (cx, cy) == self.goal {
                    (40, 220, 90)
                } else if self.walls[cell] {
                    (70, 70, 110)
                } else {
                    (25, 25, 25)
                };
                plane_r[y * side + x] = r;
                plane_g[y * side + x] = gg;
                plane_b[y * side + x] = b;
            }
        }
        if self.config.distractors.moving_sprite {
            // patrol the top border, two pixels tall
            let span = side.saturating_sub(4).max(1);
            let pos = 2 + (self.steps * 3) % span;
            for y in 0..2 {
                for x in pos..(pos + 2).min(side) {
                    plane_r[y * side + x] = 250;
                    plane_g[y * side + x] = 220;
                    plane_b[y * side + x] = 40;
                }
            }
        }
        if self.config.distractors.score_counter {
            let len = (self.episode_score.max(0.0) as usize).min(side / 2);
            for x in 0..len {
                let y = side - 1;
                plane_r[y * side + x] = 255;
                plane_g[y * side + x] = 255;
                plane_b[y * side + x] = 255;
            }
        }
        Obs { channels: 3, height: side, width: side, pixels: px }
    }
}

/// Shortest-path action with probability `1 - noise_level`, uniform random
/// otherwise. Ties between equally good moves break in fixed action order.
pub fn scripted_expert(env: &GridWorldEnv, noise_level: f32, rng: &mut Rng) -> usize {
    if rng.bernoulli(noise_level) {
        return rng.below(NUM_ACTIONS);
    }
    let g = env.config.grid as i32;
    let (ax, ay) = env.agent_cell();
    let mut best = 0usize;
    let mut best_dist = i32::MAX;
    for (action, (dx, dy)) in MOVES.iter().enumerate() {
        let nx = ax as i32 + dx;
        let ny = ay as i32 + dy;
        if nx < 0 || nx >= g || ny < 0 || ny >= g {
            continue;
        }
        let d = env.dist[(ny * g + nx) as usize];
        if d >= 0 && d < best_dist {
            best_dist = d;
            best = action;
        }
    }
    best
}

fn bfs_distances(walls: &[bool], g: usize, start: (usize, usize)) -> Vec<i32> {
    let mut dist = vec![-1i32; g * g];
    let mut queue = std::collections::VecDeque::new();
    let s = start.1 * g + start.0;
    if walls[s] {
        return dist;
    }
    dist[s] = 0;
    queue.push_back(start);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y * g + x];
        for (dx, dy) in MOVES {
            let nx = x as i32 + dx;
            let ny = y as i32 + dy;
            if nx >= 0 && nx < g as i32 && ny >= 0 && ny < g as i32 {
                let ni = (ny as usize) * g + nx as usize;
                if !walls[ni] && dist[ni] < 0 {
                    dist[ni] = d + 1;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
    }
    dist
}

/// Border walls plus random interior walls; regenerates until the free
/// space is one connected component (bounded retries).
fn generate_connected_layout(config: &GridWorldConfig, rng: &mut Rng) -> Result<Vec<bool>> {
    let g = config.grid;
    for _ in 0..128 {
        let mut walls = vec![false; g * g];
        for y in 0..g {
            for x in 0..g {
                let border = x == 0 || y == 0 || x == g - 1 || y == g - 1;
                walls[y * g + x] = border || rng.bernoulli(config.wall_density);
            }
        }
        let free: Vec<usize> = (0..g * g).filter(|i| !walls[*i]).collect();
        if free.len() < (g - 2) * (g - 2) / 2 || free.len() < 2 {
            continue;
        }
        let start = (free[0] % g, free[0] / g);
        let dist = bfs_distances(&walls, g, start);
        if free.iter().all(|i| dist[*i] >= 0) {
            return Ok(walls);
        }
    }
    Err(AtcError::config("failed to generate a connected layout in 128 attempts"))
}
