//! Teleoperation sessions: a human drives one episode at a time and
//! successful episodes are appended to trajectory files.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use goalnav::evaluator::EpisodeResult;
use goalnav::simcore::{sample_episode_for_goal, Action, EpisodeSpec, Observation, SamplerConfig, SensorConfig, SimState, StepInfo};
use goalnav::trajectory::{append_trajectory, Step, Trajectory, TrajectoryMeta};
use goalnav::{seed, Granularity, Scene, Taxonomy};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Done,
    Aborted,
}

/// A goal given either by coarse category id or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoalRef {
    Id(usize),
    Name(String),
}

impl GoalRef {
    pub fn resolve(&self, tax: &Taxonomy) -> Result<usize> {
        let id = match self {
            GoalRef::Id(id) => Some(*id),
            GoalRef::Name(name) => tax.coarse_id(name),
        };
        match id {
            Some(g) if tax.is_goal(g) => Ok(g),
            _ => Err(NavError::new("bad_goal", format!("{self:?} is not a goal category"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    #[serde(flatten)]
    pub result: EpisodeResult,
    pub spl: f64,
}

/// Server-to-client frame. `success` and `metrics` are present once the
/// episode is over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub session: String,
    pub step: u32,
    pub goal: usize,
    pub sem: Vec<u8>,
    /// Packed `0xRRGGBB` per pixel.
    pub color: Vec<u32>,
    pub gps: [f64; 3],
    pub compass: f64,
    pub collided: bool,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub session: String,
    pub scene_id: String,
    pub goal: usize,
    pub goal_name: String,
    /// Coarse label names and packed palette colors, indexed by label id.
    pub labels: Vec<String>,
    pub palette: Vec<u32>,
    pub frame: FrameMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saved {
    pub session: String,
    pub path: String,
    pub episode_id: u64,
    pub steps: usize,
}

pub fn pack_rgb([r, g, b]: [u8; 3]) -> u32 {
    (u32::from(r) << 16) | (u32::from(g) << 8) | u32::from(b)
}

pub struct TeleopSession {
    pub id: String,
    pub spec: EpisodeSpec,
    sim: SimState,
    obs: Observation,
    steps: Vec<Step>,
    status: SessionStatus,
    path_cells: u32,
    shortest_cells: u32,
    last: Option<StepInfo>,
}

impl TeleopSession {
    pub fn new(id: String, spec: EpisodeSpec, tax: Arc<Taxonomy>) -> Result<TeleopSession> {
        let sensors = SensorConfig {
            granularity: Granularity::Coarse,
            color: true,
        };
        let (sim, obs) = SimState::reset(spec.clone(), tax, sensors).map_err(|e| NavError::new("no_valid_spec", e))?;
        let shortest_cells = sim.distance_to_goal().unwrap_or(0);
        Ok(TeleopSession {
            id,
            spec,
            sim,
            obs,
            steps: Vec::new(),
            status: SessionStatus::Active,
            path_cells: 0,
            shortest_cells,
            last: None,
        })
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn recorded_actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn frame(&self) -> FrameMessage {
        let info = self.last.unwrap_or_else(|| self.sim.info(false));
        let done = self.sim.is_done();
        FrameMessage {
            kind: "frame".into(),
            session: self.id.clone(),
            step: info.steps_taken,
            goal: self.spec.goal,
            sem: self.obs.semantic.clone(),
            color: self.obs.color.iter().flatten().map(|&c| pack_rgb(c)).collect(),
            gps: self.obs.gps,
            compass: self.obs.compass,
            collided: info.collided,
            done,
            success: done.then_some(info.success),
            metrics: done.then(|| self.metrics()),
        }
    }

    fn metrics(&self) -> EpisodeMetrics {
        let info = self.sim.info(false);
        let remaining = self.sim.distance_to_goal().unwrap_or(0);
        let result = EpisodeResult {
            success: info.success,
            steps: info.steps_taken,
            collisions: info.collisions_total,
            dtg_m: f64::from(remaining) * self.spec.scene.cell_size_m(),
            path_cells: self.path_cells,
            shortest_cells: self.shortest_cells,
            goal: self.spec.goal,
        };
        let spl = result.spl_term();
        EpisodeMetrics { result, spl }
    }

    /// Apply one action id. Invalid ids and finished sessions leave the
    /// state untouched.
    pub fn act(&mut self, action: i64) -> Result<FrameMessage> {
        if self.status != SessionStatus::Active {
            return Err(NavError::new("session_finished", format!("session {} is {:?}", self.id, self.status)));
        }
        let action = u8::try_from(action)
            .ok()
            .and_then(Action::from_id)
            .ok_or_else(|| NavError::new("invalid_action", format!("action {action} is not in 0..=4")))?;
        let before = self.sim.pose().cell;
        let (next, info) = self.sim.step(action).map_err(|e| NavError::new("session_finished", e))?;
        if self.sim.pose().cell != before {
            self.path_cells += 1;
        }
        let prev = std::mem::replace(&mut self.obs, next);
        self.steps.push(Step { obs: prev, action });
        self.last = Some(info);
        if info.done {
            self.status = SessionStatus::Done;
        }
        Ok(self.frame())
    }

    pub fn abort(&mut self) {
        if self.status == SessionStatus::Active {
            self.status = SessionStatus::Aborted;
        }
    }

    /// The recording as a trajectory, only for successful finished episodes.
    pub fn trajectory(&self, episode_id: u64) -> Result<Trajectory> {
        let success = self.last.is_some_and(|i| i.done && i.success);
        if self.status != SessionStatus::Done || !success {
            return Err(NavError::new(
                "not_successful",
                format!("session {} has not finished successfully", self.id),
            ));
        }
        Ok(Trajectory {
            meta: TrajectoryMeta::from_spec(&self.spec, episode_id),
            steps: self.steps.clone(),
        })
    }
}

/// All live sessions over a fixed scene set. Each session has its own lock
/// so requests for one session are applied strictly one at a time.
pub struct Hub {
    tax: Arc<Taxonomy>,
    scenes: HashMap<String, Arc<Scene>>,
    record_dir: PathBuf,
    sampler: SamplerConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<TeleopSession>>>>,
    next_id: AtomicU64,
    save_lock: Mutex<()>,
}

impl Hub {
    pub fn new(tax: Arc<Taxonomy>, scenes: Vec<Arc<Scene>>, record_dir: PathBuf) -> Hub {
        Hub {
            tax,
            scenes: scenes.into_iter().map(|s| (s.scene_id().to_string(), s)).collect(),
            record_dir,
            sampler: SamplerConfig::default(),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            save_lock: Mutex::new(()),
        }
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.tax
    }

    pub fn scene_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.scenes.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn start(&self, scene_id: &str, goal: &GoalRef, seed: u64) -> Result<SessionStarted> {
        let scene = self
            .scenes
            .get(scene_id)
            .ok_or_else(|| NavError::new("not_found", format!("unknown scene `{scene_id}`")))?;
        let goal = goal.resolve(&self.tax)?;
        let mut rng = seed::rng(seed, 0x7e1e_0000);
        let spec = sample_episode_for_goal(scene, &self.tax, goal, &self.sampler, &mut rng)
            .ok_or_else(|| NavError::new("no_valid_spec", format!("no valid episode for goal {goal} in `{scene_id}`")))?;
        let id = format!("sess-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = TeleopSession::new(id.clone(), spec, Arc::clone(&self.tax))?;
        let frame = session.frame();
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        let n = self.tax.num_labels(Granularity::Coarse);
        Ok(SessionStarted {
            session: id,
            scene_id: scene_id.to_string(),
            goal,
            goal_name: self.tax.coarse_names()[goal].clone(),
            labels: self.tax.coarse_names().to_vec(),
            palette: (0..n).map(|l| pack_rgb(self.tax.label_color(l, Granularity::Coarse))).collect(),
            frame,
        })
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<TeleopSession>>> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| NavError::new("not_found", format!("unknown session `{id}`")))
    }

    pub fn act(&self, id: &str, action: i64) -> Result<FrameMessage> {
        let session = self.session(id)?;
        let mut guard = session.lock().expect("session poisoned");
        guard.act(action)
    }

    pub fn abort(&self, id: &str) -> Result<SessionStatus> {
        let session = self.session(id)?;
        let mut guard = session.lock().expect("session poisoned");
        guard.abort();
        Ok(guard.status())
    }

    /// Append a finished successful episode to `relative` under the record
    /// directory. The episode id is the record's line index in that file.
    pub fn save(&self, id: &str, relative: &str) -> Result<Saved> {
        let path = self.record_path(relative)?;
        let session = self.session(id)?;
        let guard = session.lock().expect("session poisoned");
        let _file = self.save_lock.lock().expect("save lock poisoned");
        let episode_id = count_records(&path)?;
        let traj = guard.trajectory(episode_id)?;
        append_trajectory(&path, &traj).map_err(|e| NavError::new("io", e))?;
        Ok(Saved {
            session: id.to_string(),
            path: path.display().to_string(),
            episode_id,
            steps: traj.len(),
        })
    }

    fn record_path(&self, relative: &str) -> Result<PathBuf> {
        let rel = Path::new(relative);
        let plain = !relative.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
        if !plain {
            return Err(NavError::new(
                "bad_path",
                format!("`{relative}` must be a relative path inside the record directory"),
            ));
        }
        Ok(self.record_dir.join(rel))
    }
}

fn count_records(path: &Path) -> Result<u64> {
    match std::fs::File::open(path) {
        Ok(f) => {
            let mut n = 0;
            for line in std::io::BufReader::new(f).lines() {
                if !line.map_err(|e| NavError::new("io", e))?.trim().is_empty() {
                    n += 1;
                }
            }
            Ok(n)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(NavError::new("io", e)),
    }
}
