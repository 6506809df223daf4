//! Geodesic distances to goal categories and the shortest-path expert that
//! produces demonstration trajectories.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::simcore::{sample_episode, Action, AgentPose, EpisodeSpec, Heading, SamplerConfig, SensorConfig, SimState, SpecError};
use crate::taxonomy::{Granularity, Taxonomy};
use crate::trajectory::{Step, Trajectory, TrajectoryMeta};
use crate::worldgen::{Cell, CellContent, Scene};

const UNREACHED: u32 = u32::MAX;

/// Per-cell 4-connected distance to the success region of one goal category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeodesicField {
    width: usize,
    height: usize,
    radius: u32,
    /// Steps to a goal footprint cell (footprint cells are 0).
    to_object: Vec<u32>,
}

impl GeodesicField {
    /// Multi-source breadth-first search from every footprint cell of the
    /// goal category, expanding through walkable cells only.
    pub fn compute(scene: &Scene, tax: &Taxonomy, goal: usize, radius: u32) -> GeodesicField {
        let mut to_object = vec![UNREACHED; scene.num_cells()];
        let mut queue = VecDeque::new();
        for k in scene.instances_of(tax, goal) {
            for &c in &scene.instances()[k].footprint {
                to_object[scene.index(c)] = 0;
                queue.push_back(c);
            }
        }
        while let Some(c) = queue.pop_front() {
            let d = to_object[scene.index(c)];
            for n in c.neighbors4() {
                if scene.is_walkable(n) && to_object[scene.index(n)] == UNREACHED {
                    to_object[scene.index(n)] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        GeodesicField {
            width: scene.width(),
            height: scene.height(),
            radius,
            to_object,
        }
    }

    fn raw(&self, c: Cell) -> Option<u32> {
        if c.x < 0 || c.y < 0 || c.x as usize >= self.width || c.y as usize >= self.height {
            return None;
        }
        let d = self.to_object[c.y as usize * self.width + c.x as usize];
        (d != UNREACHED).then_some(d)
    }

    /// Steps to the nearest goal instance footprint.
    pub fn object_distance(&self, c: Cell) -> Option<u32> {
        self.raw(c)
    }

    /// Steps to the success region (cells within `radius` of an instance);
    /// 0 inside the region, `None` when unreachable.
    pub fn distance(&self, c: Cell) -> Option<u32> {
        self.raw(c).map(|d| d.saturating_sub(self.radius))
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }
}

/// Geodesic distance in cells from `cell` to the success region of `goal`.
pub fn geodesic_distance(scene: &Scene, tax: &Taxonomy, cell: Cell, goal: usize, radius: u32) -> Option<u32> {
    GeodesicField::compute(scene, tax, goal, radius).distance(cell)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("goal unreachable from {0}")]
    Unreachable(Cell),
    #[error("scene `{scene_id}`: no valid episode after bounded retries")]
    NoValidSpec { scene_id: String },
    #[error("episode spec: {0}")]
    Spec(#[from] SpecError),
    #[error("expert replay of episode {0} did not end in success")]
    ReplayFailed(u64),
}

fn state_index(scene: &Scene, cell: Cell, heading: Heading) -> usize {
    scene.index(cell) * 4 + heading.index() as usize
}

fn forward_cell(cell: Cell, heading: Heading) -> Cell {
    let (dx, dy) = heading.delta();
    cell.offset(dx, dy)
}

/// Expert plan over the (cell, heading) graph. Forward moves are restricted
/// to geodesic descents, so the forward count equals the geodesic distance;
/// among such plans the one with fewest turns is returned, ties broken by
/// the priority forward < left < right. Ends with `stop`.
pub fn expert_actions(
    scene: &Scene,
    tax: &Taxonomy,
    start: AgentPose,
    goal: usize,
    radius: u32,
) -> Result<Vec<Action>, OracleError> {
    let field = GeodesicField::compute(scene, tax, goal, radius);
    expert_actions_with_field(scene, &field, start)
}

pub fn expert_actions_with_field(scene: &Scene, field: &GeodesicField, start: AgentPose) -> Result<Vec<Action>, OracleError> {
    let Some(start_dist) = field.distance(start.cell).filter(|_| scene.is_walkable(start.cell)) else {
        return Err(OracleError::Unreachable(start.cell));
    };
    if start_dist == 0 {
        return Ok(vec![Action::Stop]);
    }
    let descends = |from: Cell, to: Cell| {
        scene.is_walkable(to)
            && matches!((field.distance(from), field.distance(to)), (Some(a), Some(b)) if b + 1 == a)
    };
    // backward breadth-first search of cost-to-go from the success region
    let mut cost = vec![UNREACHED; scene.num_cells() * 4];
    let mut queue = VecDeque::new();
    for idx in 0..scene.num_cells() {
        let c = scene.cell_at(idx);
        if scene.is_walkable(c) && field.distance(c) == Some(0) {
            for h in Heading::all() {
                cost[state_index(scene, c, h)] = 0;
                queue.push_back((c, h));
            }
        }
    }
    while let Some((c, h)) = queue.pop_front() {
        let here = cost[state_index(scene, c, h)];
        let (dx, dy) = h.delta();
        let behind = c.offset(-dx, -dy);
        let mut preds = [(c, h.right()), (c, h.left()), (behind, h)];
        let n = if descends(behind, c) { 3 } else { 2 };
        for (pc, ph) in preds.iter_mut().take(n) {
            let i = state_index(scene, *pc, *ph);
            if cost[i] == UNREACHED {
                cost[i] = here + 1;
                queue.push_back((*pc, *ph));
            }
        }
    }
    let mut pose = start;
    let mut plan = Vec::new();
    while field.distance(pose.cell) != Some(0) {
        let here = cost[state_index(scene, pose.cell, pose.heading)];
        if here == UNREACHED {
            return Err(OracleError::Unreachable(start.cell));
        }
        let ahead = forward_cell(pose.cell, pose.heading);
        let next = if descends(pose.cell, ahead) && cost[state_index(scene, ahead, pose.heading)] + 1 == here {
            (Action::MoveForward, AgentPose::new(ahead, pose.heading))
        } else if cost[state_index(scene, pose.cell, pose.heading.left())] + 1 == here {
            (Action::TurnLeft, AgentPose::new(pose.cell, pose.heading.left()))
        } else {
            (Action::TurnRight, AgentPose::new(pose.cell, pose.heading.right()))
        };
        plan.push(next.0);
        pose = next.1;
    }
    plan.push(Action::Stop);
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub episodes_per_scene: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Resample an episode (up to `view_retries` times) when the goal is not
    /// in the semantic frame on which the expert stops.
    pub require_goal_in_final_view: bool,
    pub view_retries: u32,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            episodes_per_scene: 20,
            seed: 0,
            sampler: SamplerConfig::default(),
            require_goal_in_final_view: true,
            view_retries: 8,
        }
    }
}

/// Roll the expert through the simulator and record (observation, action)
/// pairs.
pub fn record_expert(spec: &EpisodeSpec, tax: &Arc<Taxonomy>, sensors: SensorConfig, episode_id: u64) -> Result<Trajectory, OracleError> {
    let (mut sim, mut obs) = SimState::reset(spec.clone(), Arc::clone(tax), sensors)?;
    let plan = expert_actions_with_field(&spec.scene, sim.field(), spec.start)?;
    let mut steps = Vec::with_capacity(plan.len());
    let mut last = None;
    for action in plan {
        let (next, info) = sim.step(action).map_err(|_| OracleError::ReplayFailed(episode_id))?;
        steps.push(Step { obs, action });
        obs = next;
        last = Some(info);
    }
    if !last.is_some_and(|i| i.done && i.success) {
        return Err(OracleError::ReplayFailed(episode_id));
    }
    Ok(Trajectory {
        meta: TrajectoryMeta::from_spec(spec, episode_id),
        steps,
    })
}

/// Expert demonstrations: `episodes_per_scene` sampled episodes per scene,
/// in scene order. Episode ids are global indices. When the final-view
/// requirement cannot be met within the retry budget the last attempt is kept.
pub fn generate_demos(scenes: &[Arc<Scene>], tax: &Arc<Taxonomy>, cfg: &DemoConfig, sensors: SensorConfig) -> Result<Vec<Trajectory>, OracleError> {
    let mut out = Vec::with_capacity(scenes.len() * cfg.episodes_per_scene);
    for (si, scene) in scenes.iter().enumerate() {
        let mut rng = seed::rng(cfg.seed, si as u64);
        for _ in 0..cfg.episodes_per_scene {
            let id = out.len() as u64;
            let attempts = if cfg.require_goal_in_final_view { cfg.view_retries.max(1) } else { 1 };
            let mut traj = None;
            for _ in 0..attempts {
                let spec = sample_episode(scene, tax, &cfg.sampler, &mut rng).ok_or_else(|| OracleError::NoValidSpec {
                    scene_id: scene.scene_id().to_string(),
                })?;
                let t = record_expert(&spec, tax, sensors, id)?;
                let ok = goal_in_final_view(&t, tax, sensors.granularity);
                traj = Some(t);
                if ok {
                    break;
                }
            }
            out.extend(traj);
        }
    }
    Ok(out)
}

/// True when the frame the expert stops on shows a goal-category pixel.
/// `granularity` is the label space of the recorded semantic frames.
pub fn goal_in_final_view(traj: &Trajectory, tax: &Taxonomy, granularity: Granularity) -> bool {
    traj.steps.last().is_some_and(|s| {
        s.obs
            .semantic
            .iter()
            .any(|&l| tax.coarse_of_label(usize::from(l), granularity) == traj.meta.goal)
    })
}

/// Cells covered by goal instances (test and diagnostics helper).
pub fn goal_cells(scene: &Scene, tax: &Taxonomy, goal: usize) -> Vec<Cell> {
    (0..scene.num_cells())
        .map(|i| scene.cell_at(i))
        .filter(|&c| match scene.content(c) {
            CellContent::Object(k) => tax.fine_to_coarse(scene.instances()[k].fine_id).ok() == Some(goal),
            _ => false,
        })
        .collect()
}
