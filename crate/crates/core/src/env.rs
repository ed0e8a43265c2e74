//! 2D grid-world versions of the navigation, exploration and local-planning
//! tasks, with the discrete action space and reward constants of the
//! original environments.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rl::{LinearSoftmaxPolicy, Trajectory};
use crate::stats::EpisodeRecord;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid floor plan: {0}")]
    Plan(String),
    #[error("invalid task configuration: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("could not place {what} after {tries} tries")]
    Placement { what: &'static str, tries: usize },
    #[error("floor plan JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Cell = (u32, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TurnLeft,
    TurnRight,
    MoveForward,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::TurnLeft, Action::TurnRight, Action::MoveForward];

    pub fn from_index(index: usize) -> Result<Self, EnvError> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| EnvError::Protocol(format!("action index {index} is not one of 0, 1, 2")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Navigation,
    Exploration,
    Planning,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Navigation => "navigation",
            Task::Exploration => "exploration",
            Task::Planning => "planning",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "navigation" | "nav" => Ok(Task::Navigation),
            "exploration" | "explore" => Ok(Task::Exploration),
            "planning" | "plan" => Ok(Task::Planning),
            _ => Err(EnvError::Config(format!(
                "unknown task {s:?}; expected nav, explore or plan"
            ))),
        }
    }
}

/// Position in meters and heading in radians, normalized to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: heading.rem_euclid(TAU),
        }
    }

    pub fn cell(&self) -> Cell {
        (self.x.floor() as u32, self.y.floor() as u32)
    }

    pub fn distance_to(&self, point: (f64, f64)) -> f64 {
        (point.0 - self.x).hypot(point.1 - self.y)
    }
}

/// Half-open cell rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn contains(&self, (x, y): Cell) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

#[derive(Serialize, Deserialize)]
struct FloorPlanJson {
    width: u32,
    height: u32,
    #[serde(default)]
    obstacles: Vec<Cell>,
    spawn: Option<Rect>,
    target: Option<Rect>,
}

/// Bounded map of 1 m cells. `y` grows upward; cell `(x, y)` covers
/// `[x, x+1) × [y, y+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FloorPlanJson", into = "FloorPlanJson")]
pub struct FloorPlan {
    width: u32,
    height: u32,
    blocked: Vec<bool>,
    spawn: Rect,
    target: Rect,
}

impl FloorPlan {
    pub fn new(
        width: u32,
        height: u32,
        obstacles: &[Cell],
        spawn: Option<Rect>,
        target: Option<Rect>,
    ) -> Result<Self, EnvError> {
        if width == 0 || height == 0 {
            return Err(EnvError::Plan(format!("bounds {width}x{height} must be positive")));
        }
        let whole = Rect {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        };
        let mut blocked = vec![false; (width * height) as usize];
        for &(x, y) in obstacles {
            if !whole.contains((x, y)) {
                return Err(EnvError::Plan(format!("obstacle ({x}, {y}) lies outside the map")));
            }
            blocked[(y * width + x) as usize] = true;
        }
        let plan = Self {
            width,
            height,
            blocked,
            spawn: spawn.unwrap_or(whole),
            target: target.unwrap_or(whole),
        };
        for (name, rect) in [("spawn", plan.spawn), ("target", plan.target)] {
            if rect.x0 >= rect.x1 || rect.y0 >= rect.y1 || rect.x1 > width || rect.y1 > height {
                return Err(EnvError::Plan(format!("{name} region {rect:?} is empty or out of bounds")));
            }
            // A default region may contain obstacles; explicit ones must not.
            let explicit = match name {
                "spawn" => spawn.is_some(),
                _ => target.is_some(),
            };
            if explicit && rect.cells().any(|c| plan.is_blocked(c)) {
                return Err(EnvError::Plan(format!("{name} region {rect:?} overlaps an obstacle")));
            }
            if !rect.cells().any(|c| !plan.is_blocked(c)) {
                return Err(EnvError::Plan(format!("{name} region {rect:?} has no free cell")));
            }
        }
        Ok(plan)
    }

    /// Obstacle-free `width × height` room.
    pub fn open(width: u32, height: u32) -> Result<Self, EnvError> {
        Self::new(width, height, &[], None, None)
    }

    /// ASCII map: `#` obstacle, `.` free, `S` spawn, `T` target. The first
    /// line is the top row. Spawn and target regions are the bounding boxes
    /// of their markers.
    pub fn from_ascii(text: &str) -> Result<Self, EnvError> {
        let rows: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let Some(&(first_line, first)) = rows.first() else {
            return Err(EnvError::Parse {
                line: 1,
                message: "empty floor plan".into(),
            });
        };
        let width = first.chars().count();
        let height = rows.len();
        let mut obstacles = Vec::new();
        let mut spawn: Option<Rect> = None;
        let mut target: Option<Rect> = None;
        let grow = |rect: &mut Option<Rect>, (x, y): Cell| {
            let r = rect.get_or_insert(Rect {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            });
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x + 1);
            r.y1 = r.y1.max(y + 1);
        };
        for (row, &(line, text)) in rows.iter().enumerate() {
            if text.chars().count() != width {
                return Err(EnvError::Parse {
                    line,
                    message: format!(
                        "row has {} columns, line {first_line} has {width}",
                        text.chars().count()
                    ),
                });
            }
            let y = (height - 1 - row) as u32;
            for (x, ch) in text.chars().enumerate() {
                let cell = (x as u32, y);
                match ch {
                    '#' => obstacles.push(cell),
                    '.' => {}
                    'S' => grow(&mut spawn, cell),
                    'T' => grow(&mut target, cell),
                    other => {
                        return Err(EnvError::Parse {
                            line,
                            message: format!("unexpected character {other:?} in column {}", x + 1),
                        })
                    }
                }
            }
        }
        Self::new(width as u32, height as u32, &obstacles, spawn, target)
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        Ok(serde_json::from_str(text)?)
    }

    /// JSON when the text starts with `{`, ASCII art otherwise.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_ascii(text)
        }
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let c = (x, y);
                out.push(if self.is_blocked(c) {
                    '#'
                } else if self.spawn.contains(c) && self.spawn != self.bounds() {
                    'S'
                } else if self.target.contains(c) && self.target != self.bounds() {
                    'T'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn spawn(&self) -> Rect {
        self.spawn
    }

    pub fn target(&self) -> Rect {
        self.target
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    pub fn is_blocked(&self, (x, y): Cell) -> bool {
        self.blocked[(y * self.width + x) as usize]
    }

    pub fn free_cells(&self) -> usize {
        self.blocked.iter().filter(|b| !**b).count()
    }

    /// The cell holding `(x, y)` when it is inside the map and free.
    pub fn free_cell_at(&self, x: f64, y: f64) -> Option<Cell> {
        if !(x >= 0.0 && y >= 0.0 && x < f64::from(self.width) && y < f64::from(self.height)) {
            return None;
        }
        // Truncation equals floor for the non-negative coordinates left here.
        let cell = (x as u32, y as u32);
        (!self.is_blocked(cell)).then_some(cell)
    }

    pub fn obstacles(&self) -> Vec<Cell> {
        self.bounds().cells().filter(|&c| self.is_blocked(c)).collect()
    }
}

impl TryFrom<FloorPlanJson> for FloorPlan {
    type Error = EnvError;

    fn try_from(j: FloorPlanJson) -> Result<Self, Self::Error> {
        FloorPlan::new(j.width, j.height, &j.obstacles, j.spawn, j.target)
    }
}

impl From<FloorPlan> for FloorPlanJson {
    fn from(p: FloorPlan) -> Self {
        FloorPlanJson {
            width: p.width,
            height: p.height,
            obstacles: p.obstacles(),
            spawn: Some(p.spawn),
            target: Some(p.target),
        }
    }
}

/// Revealed 1 m cells. Only grows within an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: u32,
    unlocked: Vec<bool>,
    count: usize,
}

impl OccupancyGrid {
    pub fn new(plan: &FloorPlan) -> Self {
        Self {
            width: plan.width,
            unlocked: vec![false; (plan.width * plan.height) as usize],
            count: 0,
        }
    }

    pub fn contains(&self, (x, y): Cell) -> bool {
        self.unlocked[(y * self.width + x) as usize]
    }

    /// Returns whether the cell was newly unlocked.
    pub fn insert(&mut self, (x, y): Cell) -> bool {
        let slot = &mut self.unlocked[(y * self.width + x) as usize];
        let fresh = !*slot;
        *slot = true;
        self.count += usize::from(fresh);
        fresh
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn cells(&self) -> Vec<Cell> {
        let w = self.width as usize;
        self.unlocked
            .iter()
            .enumerate()
            .filter(|(_, u)| **u)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .collect()
    }
}

/// Reward constants, dynamics and sensor geometry for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub max_steps: usize,
    /// Added on every step, including the last.
    pub living_reward: f64,
    /// Paid on reaching the target (navigation) or goal (planning).
    pub success_reward: f64,
    pub collision_reward: f64,
    /// Exploration reward per newly unlocked cell.
    pub cell_reward: f64,
    /// Planning reward per meter of progress toward the goal.
    pub progress_coeff: f64,
    pub turn_angle: f64,
    pub forward_step: f64,
    pub touch_radius: f64,
    pub scan_range: f64,
    pub scan_half_angle: f64,
    pub scan_rays: usize,
    pub scan_spacing: f64,
    pub goal_distance_mean: f64,
    pub goal_distance_variance: f64,
}

impl TaskConfig {
    pub fn new(task: Task) -> Self {
        let base = Self {
            task,
            max_steps: 400,
            living_reward: 0.0,
            success_reward: 0.0,
            collision_reward: 0.0,
            cell_reward: 0.0,
            progress_coeff: 0.0,
            turn_angle: 0.24,
            forward_step: 0.1,
            touch_radius: 0.2,
            scan_range: 1.5,
            scan_half_angle: PI / 6.0,
            scan_rays: 61,
            scan_spacing: 0.05,
            goal_distance_mean: 5.0,
            goal_distance_variance: 2.0,
        };
        match task {
            Task::Navigation => Self {
                living_reward: -0.025,
                success_reward: 10.0,
                ..base
            },
            Task::Exploration => Self {
                max_steps: 1000,
                cell_reward: 0.1,
                ..base
            },
            Task::Planning => Self {
                living_reward: -0.05,
                success_reward: 20.0,
                collision_reward: -0.25,
                progress_coeff: 0.1,
                ..base
            },
        }
    }

    pub const KEYS: [&'static str; 15] = [
        "max_steps",
        "living_reward",
        "success_reward",
        "collision_reward",
        "cell_reward",
        "progress_coeff",
        "turn_angle",
        "forward_step",
        "touch_radius",
        "scan_range",
        "scan_half_angle",
        "scan_rays",
        "scan_spacing",
        "goal_distance_mean",
        "goal_distance_variance",
    ];

    /// Applies one `key`/`value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), EnvError> {
        let bad = || EnvError::Config(format!("{key}: cannot parse {value:?}"));
        let real = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "max_steps" => self.max_steps = value.parse().map_err(|_| bad())?,
            "scan_rays" => self.scan_rays = value.parse().map_err(|_| bad())?,
            "living_reward" => self.living_reward = real()?,
            "success_reward" => self.success_reward = real()?,
            "collision_reward" => self.collision_reward = real()?,
            "cell_reward" => self.cell_reward = real()?,
            "progress_coeff" => self.progress_coeff = real()?,
            "turn_angle" => self.turn_angle = real()?,
            "forward_step" => self.forward_step = real()?,
            "touch_radius" => self.touch_radius = real()?,
            "scan_range" => self.scan_range = real()?,
            "scan_half_angle" => self.scan_half_angle = real()?,
            "scan_spacing" => self.scan_spacing = real()?,
            "goal_distance_mean" => self.goal_distance_mean = real()?,
            "goal_distance_variance" => self.goal_distance_variance = real()?,
            _ => {
                return Err(EnvError::Config(format!(
                    "unknown key {key:?}; expected one of {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("forward_step", self.forward_step),
            ("turn_angle", self.turn_angle),
            ("touch_radius", self.touch_radius),
            ("scan_range", self.scan_range),
            ("scan_spacing", self.scan_spacing),
            ("goal_distance_mean", self.goal_distance_mean),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(EnvError::Config(format!("{name} = {v} must be positive")));
        }
        if self.forward_step >= 1.0 {
            return Err(EnvError::Config("forward_step must stay below one cell".into()));
        }
        if self.max_steps == 0 || self.scan_rays == 0 {
            return Err(EnvError::Config("max_steps and scan_rays must be positive".into()));
        }
        if self.goal_distance_variance.is_nan() || self.goal_distance_variance < 0.0 {
            return Err(EnvError::Config("goal_distance_variance must be non-negative".into()));
        }
        Ok(())
    }

    /// Lowest possible episode return; the `r_min` of the relative reward.
    pub fn min_episode_reward(&self) -> f64 {
        let worst_step = self.living_reward
            + self
                .collision_reward
                .min(0.0)
                .min(-self.progress_coeff.abs() * self.forward_step);
        self.max_steps as f64 * worst_step
    }
}

/// Event counts from which the episode return is computed, so that totals
/// such as `400 × (−0.025)` come out exact rather than as a running float sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardLedger {
    pub steps: usize,
    pub successes: usize,
    pub collisions: usize,
    pub cells: usize,
    pub progress: f64,
}

impl RewardLedger {
    pub fn total(&self, config: &TaskConfig) -> f64 {
        let mut total = 0.0;
        for (count, unit) in [
            (self.steps, config.living_reward),
            (self.successes, config.success_reward),
            (self.collisions, config.collision_reward),
            (self.cells, config.cell_reward),
        ] {
            if count > 0 && unit != 0.0 {
                total += count as f64 * unit;
            }
        }
        if self.progress != 0.0 && config.progress_coeff != 0.0 {
            total += config.progress_coeff * self.progress;
        }
        total
    }
}

/// Cells hit by the sample points `0, s, 2s, … ≤ range` of one ray, stopping
/// before the first sample that leaves the map or enters an obstacle.
fn ray_cells(plan: &FloorPlan, x: f64, y: f64, angle: f64, range: f64, spacing: f64, out: &mut Vec<Cell>) {
    let (s, c) = angle.sin_cos();
    let samples = (range / spacing + 1e-9).floor() as usize;
    for i in 0..=samples {
        let d = i as f64 * spacing;
        match plan.free_cell_at(x + d * c, y + d * s) {
            Some(cell) => {
                if out.last() != Some(&cell) {
                    out.push(cell);
                }
            }
            None => break,
        }
    }
}

fn cone_cells(plan: &FloorPlan, pose: &Pose, offsets: &[f64], range: f64, spacing: f64) -> Vec<Cell> {
    let mut cells = Vec::new();
    for off in offsets {
        ray_cells(plan, pose.x, pose.y, pose.heading + off, range, spacing, &mut cells);
    }
    cells
}

fn ray_offsets(half_angle: f64, rays: usize) -> Vec<f64> {
    if rays == 1 {
        return vec![0.0];
    }
    (0..rays)
        .map(|i| -half_angle + 2.0 * half_angle * i as f64 / (rays - 1) as f64)
        .collect()
}

/// Unlocks every cell touched by the forward scan cone and returns the newly
/// revealed ones in discovery order.
pub fn scan_unlock(
    pose: &Pose,
    plan: &FloorPlan,
    grid: &mut OccupancyGrid,
    config: &TaskConfig,
) -> Vec<Cell> {
    let offsets = ray_offsets(config.scan_half_angle, config.scan_rays);
    cone_cells(plan, pose, &offsets, config.scan_range, config.scan_spacing)
        .into_iter()
        .filter(|&c| grid.insert(c))
        .collect()
}

/// `(r, cos θ, sin θ)` of `goal` in the agent frame, `θ` counterclockwise
/// from the heading.
pub fn planning_observation(pose: &Pose, goal: (f64, f64)) -> [f64; 3] {
    let (dx, dy) = (goal.0 - pose.x, goal.1 - pose.y);
    let r = dx.hypot(dy);
    if r == 0.0 {
        return [0.0, 1.0, 0.0];
    }
    let (s, c) = (dy.atan2(dx) - pose.heading).sin_cos();
    [r, c, s]
}

/// Length of the observation vector every task produces.
pub const OBSERVATION_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub collision: bool,
    pub revealed: Vec<Cell>,
}

/// One running episode.
#[derive(Debug, Clone)]
pub struct Env {
    config: TaskConfig,
    plan: FloorPlan,
    pose: Pose,
    goal: Option<(f64, f64)>,
    grid: OccupancyGrid,
    ledger: RewardLedger,
    done: bool,
}

const PLACEMENT_TRIES: usize = 100;

fn sample_point(plan: &FloorPlan, rect: Rect, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let free: Vec<Cell> = rect.cells().filter(|&c| !plan.is_blocked(c)).collect();
    let (cx, cy) = free[rng.random_range(0..free.len())];
    (
        f64::from(cx) + rng.random::<f64>(),
        f64::from(cy) + rng.random::<f64>(),
    )
}

impl Env {
    /// Places the agent (and the target or goal) using `rng`.
    pub fn reset(config: &TaskConfig, plan: &FloorPlan, rng: &mut ChaCha8Rng) -> Result<Self, EnvError> {
        config.validate()?;
        let (x, y) = sample_point(plan, plan.spawn, rng);
        let pose = Pose::new(x, y, rng.random_range(0.0..TAU));
        let goal = match config.task {
            Task::Exploration => None,
            Task::Navigation => Some(Self::place_target(config, plan, &pose, rng)?),
            Task::Planning => Some(Self::place_goal(config, plan, &pose, rng)?),
        };
        Ok(Self {
            config: config.clone(),
            plan: plan.clone(),
            pose,
            goal,
            grid: OccupancyGrid::new(plan),
            ledger: RewardLedger::default(),
            done: false,
        })
    }

    fn place_target(
        config: &TaskConfig,
        plan: &FloorPlan,
        pose: &Pose,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64), EnvError> {
        for _ in 0..PLACEMENT_TRIES {
            let p = sample_point(plan, plan.target, rng);
            if pose.distance_to(p) > config.touch_radius {
                return Ok(p);
            }
        }
        Err(EnvError::Placement {
            what: "navigation target",
            tries: PLACEMENT_TRIES,
        })
    }

    fn place_goal(
        config: &TaskConfig,
        plan: &FloorPlan,
        pose: &Pose,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64), EnvError> {
        let normal = Normal::new(config.goal_distance_mean, config.goal_distance_variance.sqrt())
            .map_err(|e| EnvError::Config(e.to_string()))?;
        for _ in 0..PLACEMENT_TRIES {
            let d = normal.sample(rng);
            let bearing = rng.random_range(0.0..TAU);
            let p = (pose.x + d * bearing.cos(), pose.y + d * bearing.sin());
            if d > config.touch_radius && plan.free_cell_at(p.0, p.1).is_some() {
                return Ok(p);
            }
        }
        Err(EnvError::Placement {
            what: "planning goal",
            tries: PLACEMENT_TRIES,
        })
    }

    /// An episode starting from an explicit pose, for scripted scenarios.
    pub fn with_pose(
        config: &TaskConfig,
        plan: &FloorPlan,
        pose: Pose,
        goal: Option<(f64, f64)>,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        if plan.free_cell_at(pose.x, pose.y).is_none() {
            return Err(EnvError::Protocol(format!("pose {pose:?} is not in a free cell")));
        }
        if config.task != Task::Exploration && goal.is_none() {
            return Err(EnvError::Protocol(format!("{} needs a goal", config.task)));
        }
        Ok(Self {
            config: config.clone(),
            plan: plan.clone(),
            pose,
            goal,
            grid: OccupancyGrid::new(plan),
            ledger: RewardLedger::default(),
            done: false,
        })
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn goal(&self) -> Option<(f64, f64)> {
        self.goal
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn ledger(&self) -> RewardLedger {
        self.ledger
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn plan(&self) -> &FloorPlan {
        &self.plan
    }

    /// Return accumulated so far, computed from the event counts.
    pub fn cumulative_reward(&self) -> f64 {
        self.ledger.total(&self.config)
    }

    fn clearance(&self, offset: f64) -> f64 {
        let spacing = self.config.scan_spacing;
        let (s, c) = (self.pose.heading + offset).sin_cos();
        let samples = (self.config.scan_range / spacing + 1e-9).floor() as usize;
        let mut reach = 0.0;
        for i in 0..=samples {
            let d = i as f64 * spacing;
            if self
                .plan
                .free_cell_at(self.pose.x + d * c, self.pose.y + d * s)
                .is_none()
            {
                break;
            }
            reach = d;
        }
        reach / self.config.scan_range
    }

    fn unseen_fraction(&self, from: f64, to: f64) -> f64 {
        let offsets: Vec<f64> = (0..5).map(|i| from + (to - from) * f64::from(i) / 4.0).collect();
        let mut cells = cone_cells(
            &self.plan,
            &self.pose,
            &offsets,
            2.0 * self.config.scan_range,
            2.0 * self.config.scan_spacing,
        );
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return 0.0;
        }
        cells.iter().filter(|&&c| !self.grid.contains(c)).count() as f64 / cells.len() as f64
    }

    /// Bias, clearance ahead/left/right, then three task-specific entries:
    /// the scaled goal vector for navigation and planning, or the unseen
    /// fraction of cells in the left, center and right look-ahead sectors
    /// for exploration.
    pub fn observation(&self) -> Vec<f64> {
        let side = PI / 4.0;
        let mut obs = vec![
            1.0,
            self.clearance(0.0),
            self.clearance(side),
            self.clearance(-side),
        ];
        match self.goal {
            Some(goal) => {
                let [r, c, s] = planning_observation(&self.pose, goal);
                obs.extend([r / 10.0, c, s]);
            }
            None => {
                let h = self.config.scan_half_angle;
                obs.extend([
                    self.unseen_fraction(h / 3.0, h),
                    self.unseen_fraction(-h / 3.0, h / 3.0),
                    self.unseen_fraction(-h, -h / 3.0),
                ]);
            }
        }
        obs
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Protocol("step called after the episode ended".into()));
        }
        let before = self.goal.map(|g| self.pose.distance_to(g));
        let mut collision = false;
        match action {
            Action::TurnLeft => {
                self.pose = Pose::new(self.pose.x, self.pose.y, self.pose.heading + self.config.turn_angle)
            }
            Action::TurnRight => {
                self.pose = Pose::new(self.pose.x, self.pose.y, self.pose.heading - self.config.turn_angle)
            }
            Action::MoveForward => {
                let (s, c) = self.pose.heading.sin_cos();
                let x = self.pose.x + self.config.forward_step * c;
                let y = self.pose.y + self.config.forward_step * s;
                if self.plan.free_cell_at(x, y).is_some() {
                    self.pose = Pose { x, y, ..self.pose };
                } else {
                    collision = true;
                }
            }
        }

        let mut reward = self.config.living_reward;
        self.ledger.steps += 1;
        if collision {
            self.ledger.collisions += 1;
            reward += self.config.collision_reward;
        }
        let mut success = false;
        if let (Some(goal), Some(before)) = (self.goal, before) {
            let after = self.pose.distance_to(goal);
            if self.config.progress_coeff != 0.0 {
                self.ledger.progress += before - after;
                reward += self.config.progress_coeff * (before - after);
            }
            if after <= self.config.touch_radius {
                success = true;
                self.ledger.successes += 1;
                reward += self.config.success_reward;
            }
        }
        let revealed = if self.config.task == Task::Exploration {
            scan_unlock(&self.pose, &self.plan, &mut self.grid, &self.config)
        } else {
            Vec::new()
        };
        if !revealed.is_empty() {
            self.ledger.cells += revealed.len();
            reward += self.config.cell_reward * revealed.len() as f64;
        }
        self.done = success || self.ledger.steps >= self.config.max_steps;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            collision,
            revealed,
        })
    }
}

/// Chooses an action index and reports its log-probability.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    fn act(&self, observation: &[f64], rng: &mut ChaCha8Rng) -> Result<(usize, f64), EnvError>;
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> Result<(usize, f64), EnvError> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| EnvError::Protocol(format!("bad action distribution {probs:?}: {e}")))?;
    let a = dist.sample(rng);
    Ok((a, probs[a].ln()))
}

/// Uniform over the three actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&self, _: &[f64], rng: &mut ChaCha8Rng) -> Result<(usize, f64), EnvError> {
        Ok((rng.random_range(0..3), -(3f64.ln())))
    }
}

/// Fixed action distribution that never looks at the observation.
#[derive(Debug, Clone, Copy)]
pub struct BlindPolicy {
    pub probs: [f64; 3],
}

impl Default for BlindPolicy {
    fn default() -> Self {
        Self {
            probs: [0.25, 0.25, 0.5],
        }
    }
}

impl Policy for BlindPolicy {
    fn name(&self) -> &str {
        "blind"
    }

    fn act(&self, _: &[f64], rng: &mut ChaCha8Rng) -> Result<(usize, f64), EnvError> {
        sample_categorical(&self.probs, rng)
    }
}

/// Samples from a linear-softmax policy over the observation vector.
#[derive(Debug, Clone)]
pub struct SoftmaxAgent {
    pub name: String,
    pub policy: LinearSoftmaxPolicy,
}

impl Policy for SoftmaxAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&self, observation: &[f64], rng: &mut ChaCha8Rng) -> Result<(usize, f64), EnvError> {
        let log_probs = self
            .policy
            .log_probs(observation)
            .map_err(|e| EnvError::Protocol(e.to_string()))?;
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let (a, _) = sample_categorical(&probs, rng)?;
        Ok((a, log_probs[a]))
    }
}

pub const BASELINE_POLICIES: [&str; 2] = ["random", "blind"];

pub fn baseline_policy(name: &str) -> Result<Box<dyn Policy>, EnvError> {
    match name {
        "random" => Ok(Box::new(RandomPolicy)),
        "blind" => Ok(Box::new(BlindPolicy::default())),
        _ => Err(EnvError::Config(format!(
            "unknown policy {name:?}; registered policies: {}",
            BASELINE_POLICIES.join(", ")
        ))),
    }
}

/// Independent generators for placement and for action sampling, so that two
/// policies run with the same seed start from the same layout.
pub fn episode_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let placement = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = ChaCha8Rng::seed_from_u64(seed);
    actions.set_stream(1);
    (placement, actions)
}

/// Runs one episode to completion. Value estimates in the trajectory are
/// zero; the trainer fills them from its critic.
pub fn run_episode(
    config: &TaskConfig,
    plan: &FloorPlan,
    policy: &dyn Policy,
    seed: u64,
) -> Result<(Trajectory, EpisodeRecord), EnvError> {
    let (mut placement, mut actions) = episode_rngs(seed);
    let mut env = Env::reset(config, plan, &mut placement)?;
    let mut trajectory = Trajectory {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        behavior_log_probs: Vec::new(),
        value_estimates: Vec::new(),
        terminal: true,
        policy_snapshot: 0,
    };
    let mut observation = env.observation();
    while !env.is_done() {
        let (index, log_prob) = policy.act(&observation, &mut actions)?;
        let action = Action::from_index(index)?;
        let result = env.step(action)?;
        trajectory
            .observations
            .push(std::mem::replace(&mut observation, result.observation));
        trajectory.actions.push(index);
        trajectory.rewards.push(result.reward);
        trajectory.behavior_log_probs.push(log_prob);
    }
    trajectory.value_estimates = vec![0.0; trajectory.rewards.len() + 1];
    let record = EpisodeRecord {
        task: config.task.name().to_string(),
        condition: policy.name().to_string(),
        seed: seed.to_string(),
        episode_index: 0,
        reward: env.cumulative_reward(),
    };
    Ok((trajectory, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nav_env(pose: Pose, goal: (f64, f64)) -> Env {
        let plan = FloorPlan::open(10, 10).unwrap();
        Env::with_pose(&TaskConfig::new(Task::Navigation), &plan, pose, Some(goal)).unwrap()
    }

    #[test]
    fn turn_left_from_zero() {
        let mut env = nav_env(Pose::new(5.5, 5.5, 0.0), (1.0, 1.0));
        let r = env.step(Action::TurnLeft).unwrap();
        assert_eq!(env.pose().heading, 0.24);
        assert_eq!((env.pose().x, env.pose().y), (5.5, 5.5));
        assert!(!r.collision);
        env.step(Action::TurnRight).unwrap();
        env.step(Action::TurnRight).unwrap();
        assert!((env.pose().heading - (TAU - 0.24)).abs() < 1e-12);
    }

    #[test]
    fn navigation_hit_pays_target_and_living() {
        let mut env = nav_env(Pose::new(5.0, 5.0, 0.0), (5.25, 5.0));
        let r = env.step(Action::MoveForward).unwrap();
        assert!(r.done);
        assert_eq!(r.reward, 10.0 - 0.025);
        assert!(matches!(env.step(Action::TurnLeft), Err(EnvError::Protocol(_))));
    }

    #[test]
    fn planning_wall_bump() {
        let plan = FloorPlan::open(10, 10).unwrap();
        let pose = Pose::new(9.95, 5.0, 0.0);
        let mut env =
            Env::with_pose(&TaskConfig::new(Task::Planning), &plan, pose, Some((5.0, 5.0))).unwrap();
        let r = env.step(Action::MoveForward).unwrap();
        assert!(r.collision);
        assert_eq!(env.pose(), pose);
        assert!((r.reward - -0.30).abs() < 1e-15);
    }

    #[test]
    fn planning_observation_examples() {
        let pose = Pose::new(1.0, 1.0, 0.0);
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(planning_observation(&pose, (6.0, 1.0)), [5.0, 1.0, 0.0]));
        assert!(close(planning_observation(&pose, (-1.0, 1.0)), [2.0, -1.0, 0.0]));
        assert!(close(planning_observation(&pose, (1.0, 4.0)), [3.0, 0.0, 1.0]));
        let turned = Pose::new(1.0, 1.0, PI / 2.0);
        assert!(close(planning_observation(&turned, (1.0, 4.0)), [3.0, 1.0, 0.0]));
    }

    #[test]
    fn scan_in_open_space_reaches_two_cells_ahead() {
        let plan = FloorPlan::open(10, 10).unwrap();
        let config = TaskConfig::new(Task::Exploration);
        for x in [3.0, 3.5, 3.99] {
            let pose = Pose::new(x, 5.5, 0.0);
            let mut grid = OccupancyGrid::new(&plan);
            let cells = scan_unlock(&pose, &plan, &mut grid, &config);
            let ahead = cells.iter().filter(|c| c.1 == 5 && c.0 > 3).count();
            assert!(ahead <= 2, "{cells:?}");
            assert!(cells.iter().all(|c| f64::from(c.0) <= x + 1.5));
            assert!(scan_unlock(&pose, &plan, &mut grid, &config).is_empty());
        }
    }

    #[test]
    fn wall_close_ahead_limits_scan_to_own_cell() {
        let plan = FloorPlan::from_ascii(".#\n.#\n.#\n").unwrap();
        let config = TaskConfig::new(Task::Exploration);
        let pose = Pose::new(0.7, 1.5, 0.0);
        let mut grid = OccupancyGrid::new(&plan);
        assert_eq!(scan_unlock(&pose, &plan, &mut grid, &config), vec![(0, 1)]);
    }

    #[test]
    fn ascii_parsing() {
        let plan = FloorPlan::from_ascii("#..T\n#S..\n").unwrap();
        assert_eq!((plan.width(), plan.height()), (4, 2));
        assert!(plan.is_blocked((0, 1)) && plan.is_blocked((0, 0)));
        assert_eq!(plan.spawn(), Rect { x0: 1, y0: 0, x1: 2, y1: 1 });
        assert_eq!(plan.target(), Rect { x0: 3, y0: 1, x1: 4, y1: 2 });
        let again = FloorPlan::from_json(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(again, plan);
        assert_eq!(FloorPlan::from_ascii(&plan.to_ascii()).unwrap(), plan);

        assert!(matches!(FloorPlan::from_ascii("...\n..\n"), Err(EnvError::Parse { line: 2, .. })));
        assert!(matches!(FloorPlan::from_ascii("..\n.x\n"), Err(EnvError::Parse { line: 2, .. })));
        assert!(FloorPlan::from_ascii("##\n##\n").is_err());
    }

    #[test]
    fn min_rewards() {
        assert_eq!(TaskConfig::new(Task::Navigation).min_episode_reward(), -10.0);
        assert_eq!(TaskConfig::new(Task::Exploration).min_episode_reward(), 0.0);
        assert!((TaskConfig::new(Task::Planning).min_episode_reward() - -120.0).abs() < 1e-9);
    }

    #[test]
    fn config_overrides() {
        let mut c = TaskConfig::new(Task::Navigation);
        c.set("touch_radius", "0.5").unwrap();
        assert_eq!(c.touch_radius, 0.5);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("max_steps", "x").is_err());
        assert!("plan".parse::<Task>().is_ok() && "walk".parse::<Task>().is_err());
    }

    #[test]
    fn unknown_policy_lists_registered_ones() {
        let err = baseline_policy("greedy").err().unwrap().to_string();
        assert!(err.contains("random") && err.contains("blind"));
    }

    #[test]
    fn invalid_action_index_is_a_protocol_error() {
        assert!(matches!(Action::from_index(3), Err(EnvError::Protocol(_))));
    }
}
