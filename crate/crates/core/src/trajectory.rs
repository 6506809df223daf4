//! Demonstration trajectories and their line-delimited JSON file format.
//!
//! Files store coarse semantic frames, GPS and compass per step. Color
//! frames (and fine-grained labels) are re-rendered from the scene by
//! replaying the recorded actions.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::{Action, AgentPose, EpisodeSpec, Heading, Observation, SensorConfig, SimError, SimState, SpecError, IMG_PIXELS};
use crate::taxonomy::{Granularity, Taxonomy};
use crate::worldgen::{Cell, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub episode_id: u64,
    pub scene_id: String,
    pub start: AgentPose,
    pub goal: usize,
    pub radius: u32,
    pub max_steps: u32,
}

impl TrajectoryMeta {
    pub fn from_spec(spec: &EpisodeSpec, episode_id: u64) -> TrajectoryMeta {
        TrajectoryMeta {
            episode_id,
            scene_id: spec.scene.scene_id().to_string(),
            start: spec.start,
            goal: spec.goal,
            radius: spec.success_radius_cells,
            max_steps: spec.max_steps,
        }
    }

    pub fn to_spec(&self, scene: Arc<Scene>) -> EpisodeSpec {
        EpisodeSpec {
            scene,
            start: self.start,
            goal: self.goal,
            success_radius_cells: self.radius,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub action: Action,
}

/// One episode of (observation, action) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn has_color(&self) -> bool {
        self.steps.iter().all(|s| s.obs.color.is_some())
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trajectory line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("episode {episode}: unknown scene `{scene_id}`")]
    UnknownScene { episode: u64, scene_id: String },
    #[error("episode {episode}: {source}")]
    Spec { episode: u64, source: SpecError },
    #[error("episode {episode}: {source}")]
    Sim { episode: u64, source: SimError },
    #[error("episode {episode}: step {step} {what} differs from re-rendered replay")]
    Mismatch {
        episode: u64,
        step: usize,
        what: &'static str,
    },
    #[error("episode {episode}: replay did not end in success")]
    NotSuccessful { episode: u64 },
}

#[derive(Serialize, Deserialize)]
struct StartRecord {
    x: i32,
    y: i32,
    heading: u8,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    sem: Vec<u8>,
    gps: [f64; 3],
    compass: f64,
    action: u8,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    episode_id: u64,
    scene_id: String,
    start: StartRecord,
    goal: usize,
    radius: u32,
    max_steps: u32,
    steps: Vec<StepRecord>,
}

/// Serialize one trajectory as a single JSON line (no trailing newline).
/// The semantic frames must be coarse.
pub fn trajectory_to_line(t: &Trajectory) -> String {
    let rec = TrajectoryRecord {
        episode_id: t.meta.episode_id,
        scene_id: t.meta.scene_id.clone(),
        start: StartRecord {
            x: t.meta.start.cell.x,
            y: t.meta.start.cell.y,
            heading: t.meta.start.heading.index(),
        },
        goal: t.meta.goal,
        radius: t.meta.radius,
        max_steps: t.meta.max_steps,
        steps: t
            .steps
            .iter()
            .map(|s| StepRecord {
                sem: s.obs.semantic.clone(),
                gps: s.obs.gps,
                compass: s.obs.compass,
                action: s.action.id(),
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("trajectory serializes")
}

pub fn trajectory_from_line(text: &str, line: usize) -> Result<Trajectory, TrajectoryError> {
    let rec: TrajectoryRecord = serde_json::from_str(text).map_err(|source| TrajectoryError::Parse { line, source })?;
    let schema = |message: String| TrajectoryError::Schema { line, message };
    let heading = Heading::new(rec.start.heading).ok_or_else(|| schema(format!("heading {} out of range", rec.start.heading)))?;
    if rec.steps.is_empty() {
        return Err(schema("trajectory has no steps".into()));
    }
    let steps = rec
        .steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.sem.len() != IMG_PIXELS {
                return Err(schema(format!("step {i}: sem has {} labels, expected {IMG_PIXELS}", s.sem.len())));
            }
            let action = Action::from_id(s.action).ok_or_else(|| schema(format!("step {i}: action {} out of range", s.action)))?;
            Ok(Step {
                obs: Observation {
                    semantic: s.sem,
                    color: None,
                    gps: s.gps,
                    compass: s.compass,
                },
                action,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory {
        meta: TrajectoryMeta {
            episode_id: rec.episode_id,
            scene_id: rec.scene_id,
            start: AgentPose::new(Cell::new(rec.start.x, rec.start.y), heading),
            goal: rec.goal,
            radius: rec.radius,
            max_steps: rec.max_steps,
        },
        steps,
    })
}

pub fn write_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<(), TrajectoryError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for t in trajectories {
        out.write_all(trajectory_to_line(t).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn append_trajectory(path: impl AsRef<Path>, t: &Trajectory) -> Result<(), TrajectoryError> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = trajectory_to_line(t);
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, TrajectoryError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(trajectory_from_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Replay the recorded actions from the episode start and return the
/// observations the simulator produces, plus whether the episode ended in
/// success.
pub fn replay(t: &Trajectory, scene: Arc<Scene>, tax: &Arc<Taxonomy>, sensors: SensorConfig) -> Result<(Vec<Observation>, bool), TrajectoryError> {
    let episode = t.meta.episode_id;
    let (mut sim, mut obs) = SimState::reset(t.meta.to_spec(scene), Arc::clone(tax), sensors).map_err(|source| TrajectoryError::Spec { episode, source })?;
    let mut frames = Vec::with_capacity(t.len());
    let mut success = false;
    for step in &t.steps {
        let (next, info) = sim.step(step.action).map_err(|source| TrajectoryError::Sim { episode, source })?;
        frames.push(obs);
        obs = next;
        success = info.done && info.success;
    }
    Ok((frames, success))
}

/// Check that stored frames match a fresh replay and that it succeeds.
pub fn verify(t: &Trajectory, scene: Arc<Scene>, tax: &Arc<Taxonomy>) -> Result<(), TrajectoryError> {
    let episode = t.meta.episode_id;
    let (frames, success) = replay(t, scene, tax, SensorConfig::default())?;
    for (i, (stored, fresh)) in t.steps.iter().zip(&frames).enumerate() {
        let mismatch = |what| TrajectoryError::Mismatch { episode, step: i, what };
        if stored.obs.semantic != fresh.semantic {
            return Err(mismatch("semantic frame"));
        }
        if stored.obs.gps != fresh.gps {
            return Err(mismatch("gps"));
        }
        if stored.obs.compass != fresh.compass {
            return Err(mismatch("compass"));
        }
    }
    if !success {
        return Err(TrajectoryError::NotSuccessful { episode });
    }
    Ok(())
}

/// Re-render every frame of `t` for the given sensor configuration
/// (e.g. to add color frames or switch to fine labels).
pub fn rerender(t: &Trajectory, scene: Arc<Scene>, tax: &Arc<Taxonomy>, sensors: SensorConfig) -> Result<Trajectory, TrajectoryError> {
    let (frames, _) = replay(t, scene, tax, sensors)?;
    let steps = frames
        .into_iter()
        .zip(&t.steps)
        .map(|(obs, s)| Step { obs, action: s.action })
        .collect();
    Ok(Trajectory {
        meta: t.meta.clone(),
        steps,
    })
}

/// Re-render a whole dataset when the sensors need more than the stored
/// coarse semantic frames.
pub fn prepare_dataset(
    trajectories: Vec<Trajectory>,
    scenes: &HashMap<String, Arc<Scene>>,
    tax: &Arc<Taxonomy>,
    sensors: SensorConfig,
) -> Result<Vec<Trajectory>, TrajectoryError> {
    if sensors == SensorConfig::default() || (sensors.granularity == Granularity::Coarse && !sensors.color) {
        return Ok(trajectories);
    }
    trajectories
        .iter()
        .map(|t| {
            let scene = scenes.get(&t.meta.scene_id).ok_or_else(|| TrajectoryError::UnknownScene {
                episode: t.meta.episode_id,
                scene_id: t.meta.scene_id.clone(),
            })?;
            rerender(t, Arc::clone(scene), tax, sensors)
        })
        .collect()
}

/// Record up to `max_len` uniformly random non-stop actions from the
/// episode start, ending early if the step budget runs out.
pub fn random_walk(spec: &EpisodeSpec, tax: &Arc<Taxonomy>, sensors: SensorConfig, max_len: usize, episode_id: u64, rng: &mut impl rand::Rng) -> Result<Trajectory, TrajectoryError> {
    let (mut sim, mut obs) = SimState::reset(spec.clone(), Arc::clone(tax), sensors).map_err(|source| TrajectoryError::Spec { episode: episode_id, source })?;
    let mut steps = Vec::with_capacity(max_len);
    while steps.len() < max_len && !sim.is_done() {
        let action = Action::ALL[rng.gen_range(0..Action::COUNT - 1)];
        let (next, _) = sim.step(action).map_err(|source| TrajectoryError::Sim { episode: episode_id, source })?;
        steps.push(Step { obs, action });
        obs = next;
    }
    Ok(Trajectory {
        meta: TrajectoryMeta::from_spec(spec, episode_id),
        steps,
    })
}
