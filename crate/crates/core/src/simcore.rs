//! Episode state machine, egocentric raycast renderer and GPS/compass sensors.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::GeodesicField;
use crate::taxonomy::{Granularity, Taxonomy, CEILING, FLOOR, WALL};
use crate::worldgen::{Cell, CellContent, Scene};

pub const IMG_W: usize = 32;
pub const IMG_H: usize = 32;
pub const IMG_PIXELS: usize = IMG_W * IMG_H;
pub const FOV: f64 = FRAC_PI_2;
pub const DEFAULT_SUCCESS_RADIUS: u32 = 4;
pub const DEFAULT_MAX_STEPS: u32 = 225;
/// 10 m at 0.25 m per cell.
pub const DEFAULT_MIN_START_DISTANCE: u32 = 40;

/// Cardinal heading: 0 = +x, 1 = +y, 2 = -x, 3 = -y (counterclockwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Heading(u8);

impl Heading {
    pub const EAST: Heading = Heading(0);
    pub const NORTH: Heading = Heading(1);
    pub const WEST: Heading = Heading(2);
    pub const SOUTH: Heading = Heading(3);

    pub fn new(k: u8) -> Option<Heading> {
        (k < 4).then_some(Heading(k))
    }

    pub fn all() -> [Heading; 4] {
        [Heading(0), Heading(1), Heading(2), Heading(3)]
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn left(self) -> Heading {
        Heading((self.0 + 1) % 4)
    }

    pub fn right(self) -> Heading {
        Heading((self.0 + 3) % 4)
    }

    pub fn angle(self) -> f64 {
        f64::from(self.0) * FRAC_PI_2
    }

    pub fn delta(self) -> (i32, i32) {
        match self.0 {
            0 => (1, 0),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (0, -1),
        }
    }
}

impl TryFrom<u8> for Heading {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Heading::new(v).ok_or_else(|| format!("heading {v} out of range 0..4"))
    }
}

impl From<Heading> for u8 {
    fn from(h: Heading) -> u8 {
        h.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

impl AgentPose {
    pub fn new(cell: Cell, heading: Heading) -> AgentPose {
        AgentPose { cell, heading }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    MoveForward = 2,
    MoveBackward = 3,
    Stop = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::MoveForward,
        Action::MoveBackward,
        Action::Stop,
    ];
    pub const COUNT: usize = 5;

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Action> {
        Action::ALL.get(id as usize).copied()
    }
}

impl TryFrom<u8> for Action {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Action::from_id(v).ok_or_else(|| format!("action id {v} out of range 0..5"))
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a.id()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::MoveForward => "move_forward",
            Action::MoveBackward => "move_backward",
            Action::Stop => "stop",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub scene: Arc<Scene>,
    pub start: AgentPose,
    pub goal: usize,
    pub success_radius_cells: u32,
    pub max_steps: u32,
}

/// Which frames the sensor produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub granularity: Granularity,
    pub color: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            granularity: Granularity::Coarse,
            color: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Row-major label ids, `IMG_H` x `IMG_W`.
    pub semantic: Vec<u8>,
    pub color: Option<Vec<[u8; 3]>>,
    pub gps: [f64; 3],
    pub compass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collided: bool,
    pub done: bool,
    pub success: bool,
    pub steps_taken: u32,
    pub collisions_total: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("goal {0} is not a goal category")]
    GoalNotLegal(usize),
    #[error("start cell {0} is not walkable")]
    StartNotWalkable(Cell),
    #[error("goal category unreachable from start")]
    GoalUnreachable,
    #[error("start is already within {radius} cells of the goal (distance {distance})")]
    StartTooClose { distance: u32, radius: u32 },
    #[error("a goal instance is visible from the start pose")]
    GoalVisible,
    #[error("max_steps must be positive")]
    ZeroMaxSteps,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("episode already finished")]
    EpisodeDone,
}

/// Result of casting one ray: distance in cells and what was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub content: CellContent,
}

pub fn ray_angle(heading: Heading, column: usize) -> f64 {
    heading.angle() + FOV * (0.5 - (column as f64 + 0.5) / IMG_W as f64)
}

/// Grid traversal from the cell center along `angle` until the first wall
/// or footprint cell. Distance is Euclidean to the entry point of that cell.
pub fn cast_ray(scene: &Scene, origin: Cell, angle: f64) -> RayHit {
    let (px, py) = (f64::from(origin.x) + 0.5, f64::from(origin.y) + 0.5);
    let (dx, dy) = (angle.cos(), angle.sin());
    let delta_x = if dx == 0.0 { f64::INFINITY } else { (1.0 / dx).abs() };
    let delta_y = if dy == 0.0 { f64::INFINITY } else { (1.0 / dy).abs() };
    let (step_x, mut side_x) = if dx < 0.0 {
        (-1, (px - f64::from(origin.x)) * delta_x)
    } else {
        (1, (f64::from(origin.x) + 1.0 - px) * delta_x)
    };
    let (step_y, mut side_y) = if dy < 0.0 {
        (-1, (py - f64::from(origin.y)) * delta_y)
    } else {
        (1, (f64::from(origin.y) + 1.0 - py) * delta_y)
    };
    let mut cell = origin;
    // out-of-bounds reads as wall, so the loop always terminates
    loop {
        let t;
        if side_x < side_y {
            t = side_x;
            side_x += delta_x;
            cell.x += step_x;
        } else {
            t = side_y;
            side_y += delta_y;
            cell.y += step_y;
        }
        let content = scene.content(cell);
        if content != CellContent::Free {
            return RayHit {
                distance: t,
                content,
            };
        }
    }
}

pub fn cast_columns(scene: &Scene, pose: AgentPose) -> [RayHit; IMG_W] {
    std::array::from_fn(|j| cast_ray(scene, pose.cell, ray_angle(pose.heading, j)))
}

/// Height in rows of the column drawn for a hit at `distance` cells.
pub fn column_height(distance: f64) -> usize {
    let h = (IMG_H as f64 / distance).round();
    (h.max(1.0) as usize).min(IMG_H)
}

fn paint<T: Copy>(hits: &[RayHit; IMG_W], mut hit: impl FnMut(CellContent) -> T, ceiling: T, floor: T) -> Vec<T> {
    let mut img = vec![floor; IMG_PIXELS];
    for (j, h) in hits.iter().enumerate() {
        let height = column_height(h.distance);
        let top = (IMG_H - height) / 2;
        let v = hit(h.content);
        for row in 0..IMG_H {
            img[row * IMG_W + j] = if row < top {
                ceiling
            } else if row < top + height {
                v
            } else {
                floor
            };
        }
    }
    img
}

/// Semantic label image. Never reads instance colors.
pub fn render_semantic(scene: &Scene, tax: &Taxonomy, pose: AgentPose, granularity: Granularity) -> Vec<u8> {
    let hits = cast_columns(scene, pose);
    let label = |c: CellContent| match c {
        CellContent::Object(k) => tax.label_of_fine(scene.instances()[k].fine_id, granularity) as u8,
        _ => tax.surface_label(WALL, granularity) as u8,
    };
    paint(
        &hits,
        label,
        tax.surface_label(CEILING, granularity) as u8,
        tax.surface_label(FLOOR, granularity) as u8,
    )
}

/// Color image: instance colors for objects, palette colors for surfaces.
pub fn render_color(scene: &Scene, tax: &Taxonomy, pose: AgentPose) -> Vec<[u8; 3]> {
    let hits = cast_columns(scene, pose);
    let pal = tax.palette();
    let color = |c: CellContent| match c {
        CellContent::Object(k) => scene.instances()[k].instance_color,
        _ => pal[WALL],
    };
    paint(&hits, color, pal[CEILING], pal[FLOOR])
}

pub fn goal_visible(scene: &Scene, tax: &Taxonomy, pose: AgentPose, goal: usize) -> bool {
    cast_columns(scene, pose).iter().any(|h| match h.content {
        CellContent::Object(k) => tax.fine_to_coarse(scene.instances()[k].fine_id).ok() == Some(goal),
        _ => false,
    })
}

/// Displacement from `start` to `pose` expressed in the start frame, plus
/// the heading change wrapped to (-pi, pi].
pub fn relative_gps_compass(start: AgentPose, pose: AgentPose, cell_size_m: f64) -> ([f64; 3], f64) {
    let (mut x, mut y) = (pose.cell.x - start.cell.x, pose.cell.y - start.cell.y);
    for _ in 0..start.heading.index() {
        (x, y) = (y, -x);
    }
    let turns = (pose.heading.index() + 4 - start.heading.index()) % 4;
    let compass = match turns {
        0 => 0.0,
        1 => FRAC_PI_2,
        2 => PI,
        _ => -FRAC_PI_2,
    };
    (
        [f64::from(x) * cell_size_m, f64::from(y) * cell_size_m, 0.0],
        compass,
    )
}

/// Check every EpisodeSpec invariant; returns the goal field on success.
pub fn validate_spec(spec: &EpisodeSpec, tax: &Taxonomy) -> Result<GeodesicField, SpecError> {
    if !tax.is_goal(spec.goal) {
        return Err(SpecError::GoalNotLegal(spec.goal));
    }
    if spec.max_steps == 0 {
        return Err(SpecError::ZeroMaxSteps);
    }
    let scene = &spec.scene;
    if !scene.is_walkable(spec.start.cell) {
        return Err(SpecError::StartNotWalkable(spec.start.cell));
    }
    let field = GeodesicField::compute(scene, tax, spec.goal, spec.success_radius_cells);
    match field.distance(spec.start.cell) {
        None => return Err(SpecError::GoalUnreachable),
        Some(0) => {
            return Err(SpecError::StartTooClose {
                distance: field.object_distance(spec.start.cell).unwrap_or(0),
                radius: spec.success_radius_cells,
            })
        }
        Some(_) => {}
    }
    if goal_visible(scene, tax, spec.start, spec.goal) {
        return Err(SpecError::GoalVisible);
    }
    Ok(field)
}

/// Live episode. Exclusively owned by one driver.
#[derive(Debug, Clone)]
pub struct SimState {
    spec: EpisodeSpec,
    tax: Arc<Taxonomy>,
    sensors: SensorConfig,
    field: Arc<GeodesicField>,
    pose: AgentPose,
    steps: u32,
    collisions: u32,
    done: bool,
    success: bool,
}

impl SimState {
    pub fn reset(
        spec: EpisodeSpec,
        tax: Arc<Taxonomy>,
        sensors: SensorConfig,
    ) -> Result<(SimState, Observation), SpecError> {
        let field = validate_spec(&spec, &tax)?;
        let state = SimState {
            pose: spec.start,
            spec,
            tax,
            sensors,
            field: Arc::new(field),
            steps: 0,
            collisions: 0,
            done: false,
            success: false,
        };
        let obs = state.observe();
        Ok((state, obs))
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.tax
    }

    pub fn sensors(&self) -> SensorConfig {
        self.sensors
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn field(&self) -> &GeodesicField {
        &self.field
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn info(&self, collided: bool) -> StepInfo {
        StepInfo {
            collided,
            done: self.done,
            success: self.success,
            steps_taken: self.steps,
            collisions_total: self.collisions,
        }
    }

    /// Distance in cells to the success region, `None` if unreachable.
    pub fn distance_to_goal(&self) -> Option<u32> {
        self.field.distance(self.pose.cell)
    }

    pub fn gps_compass(&self) -> ([f64; 3], f64) {
        relative_gps_compass(self.spec.start, self.pose, self.spec.scene.cell_size_m())
    }

    pub fn observe(&self) -> Observation {
        let scene = &self.spec.scene;
        let (gps, compass) = self.gps_compass();
        Observation {
            semantic: render_semantic(scene, &self.tax, self.pose, self.sensors.granularity),
            color: self
                .sensors
                .color
                .then(|| render_color(scene, &self.tax, self.pose)),
            gps,
            compass,
        }
    }

    /// Apply one action without rendering.
    pub fn apply(&mut self, action: Action) -> Result<StepInfo, SimError> {
        if self.done {
            return Err(SimError::EpisodeDone);
        }
        let mut collided = false;
        match action {
            Action::TurnLeft => self.pose.heading = self.pose.heading.left(),
            Action::TurnRight => self.pose.heading = self.pose.heading.right(),
            Action::MoveForward | Action::MoveBackward => {
                let (dx, dy) = self.pose.heading.delta();
                let sign = if action == Action::MoveForward { 1 } else { -1 };
                let target = self.pose.cell.offset(sign * dx, sign * dy);
                if self.spec.scene.is_walkable(target) {
                    self.pose.cell = target;
                } else {
                    collided = true;
                    self.collisions += 1;
                }
            }
            Action::Stop => {}
        }
        self.steps += 1;
        if action == Action::Stop {
            self.done = true;
            self.success = self.distance_to_goal() == Some(0);
        } else if self.steps >= self.spec.max_steps {
            self.done = true;
            self.success = false;
        }
        Ok(self.info(collided))
    }

    pub fn step(&mut self, action: Action) -> Result<(Observation, StepInfo), SimError> {
        let info = self.apply(action)?;
        Ok((self.observe(), info))
    }
}

/// Episode sampling parameters shared by demo generation, evaluation and
/// teleop sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub success_radius_cells: u32,
    pub max_steps: u32,
    /// Preferred minimum start distance (cells to the success region).
    pub min_start_distance: u32,
    /// When the preferred minimum is infeasible, require this percentage of
    /// the farthest feasible start distance instead.
    pub fallback_percent: u32,
    pub max_tries: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            success_radius_cells: DEFAULT_SUCCESS_RADIUS,
            max_steps: DEFAULT_MAX_STEPS,
            min_start_distance: DEFAULT_MIN_START_DISTANCE,
            fallback_percent: 50,
            max_tries: 64,
        }
    }
}

/// Draw a valid episode for `goal` in `scene`, or `None` when no spawn
/// satisfies the constraints within the retry budget.
pub fn sample_episode_for_goal(
    scene: &Arc<Scene>,
    tax: &Taxonomy,
    goal: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Option<EpisodeSpec> {
    let field = GeodesicField::compute(scene, tax, goal, cfg.success_radius_cells);
    let dists: Vec<(Cell, u32)> = scene
        .spawn_cells()
        .iter()
        .filter_map(|&c| field.distance(c).filter(|&d| d > 0).map(|d| (c, d)))
        .collect();
    let farthest = dists.iter().map(|&(_, d)| d).max()?;
    let required = if farthest >= cfg.min_start_distance {
        cfg.min_start_distance
    } else {
        ((u64::from(farthest) * u64::from(cfg.fallback_percent)).div_ceil(100) as u32).max(1)
    };
    let mut candidates: Vec<Cell> = dists
        .iter()
        .filter(|&&(_, d)| d >= required)
        .map(|&(c, _)| c)
        .collect();
    candidates.shuffle(rng);
    for &cell in candidates.iter().take(cfg.max_tries as usize) {
        let mut headings = Heading::all();
        headings.shuffle(rng);
        for heading in headings {
            let start = AgentPose::new(cell, heading);
            if !goal_visible(scene, tax, start, goal) {
                return Some(EpisodeSpec {
                    scene: Arc::clone(scene),
                    start,
                    goal,
                    success_radius_cells: cfg.success_radius_cells,
                    max_steps: cfg.max_steps,
                });
            }
        }
    }
    None
}

/// Draw a goal uniformly among the goal categories, then an episode for it.
pub fn sample_episode(
    scene: &Arc<Scene>,
    tax: &Taxonomy,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Option<EpisodeSpec> {
    for _ in 0..cfg.max_tries {
        let goal = *tax.goal_categories().choose(rng)?;
        if let Some(spec) = sample_episode_for_goal(scene, tax, goal, cfg, rng) {
            return Some(spec);
        }
    }
    None
}
