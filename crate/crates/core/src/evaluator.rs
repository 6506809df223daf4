//! Episode rollouts and navigation metrics: success rate, SPL, collisions,
//! distance to goal and success divided by step.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{expert_actions_with_field, OracleError};
use crate::policy::{act, HiddenState, InputMode, Policy, PolicyError, PolicyParams, Strategy};
use crate::seed;
use crate::simcore::{sample_episode, Action, EpisodeSpec, Observation, SamplerConfig, SensorConfig, SimError, SimState, SpecError};
use crate::taxonomy::Taxonomy;
use crate::worldgen::{resample_instance_colors, Scene};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes to aggregate")]
    Empty,
    #[error("no scene yielded a valid episode")]
    AllScenesSkipped,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Anything that chooses actions in an episode.
pub trait Agent {
    fn sensors(&self) -> SensorConfig {
        SensorConfig::default()
    }

    /// Agents that ignore observations let the rollout skip rendering.
    fn needs_observation(&self) -> bool {
        true
    }

    /// Called before each episode; `episode_seed` drives any sampling.
    fn reset(&mut self, sim: &SimState, episode_seed: u64) -> Result<(), EvalError>;

    fn act(&mut self, obs: Option<&Observation>, sim: &SimState) -> Result<Action, EvalError>;
}

/// The trained network with a carried hidden state.
pub struct NetworkAgent {
    policy: Arc<Policy>,
    params: Arc<PolicyParams>,
    strategy: Strategy,
    hidden: HiddenState,
    rng: ChaCha8Rng,
}

impl NetworkAgent {
    pub fn new(policy: Arc<Policy>, params: Arc<PolicyParams>, strategy: Strategy) -> NetworkAgent {
        let hidden = HiddenState::zeros(policy.hidden_dim());
        NetworkAgent {
            policy,
            params,
            strategy,
            hidden,
            rng: seed::rng(0, 0),
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Probabilities for `obs` and advance the hidden state.
    pub fn step_probs(&mut self, obs: &Observation, goal: usize) -> Result<[f64; 5], PolicyError> {
        let (probs, h) = self.policy.forward_step(&self.params, obs, goal, &self.hidden)?;
        self.hidden = h;
        Ok(probs)
    }

    pub fn reset_hidden(&mut self) {
        self.hidden = HiddenState::zeros(self.policy.hidden_dim());
    }
}

impl Agent for NetworkAgent {
    fn sensors(&self) -> SensorConfig {
        SensorConfig {
            granularity: self.policy.granularity(),
            color: self.policy.mode().uses_color(),
        }
    }

    fn reset(&mut self, _sim: &SimState, episode_seed: u64) -> Result<(), EvalError> {
        self.reset_hidden();
        self.rng = seed::rng(episode_seed, 0xa9e7);
        Ok(())
    }

    fn act(&mut self, obs: Option<&Observation>, sim: &SimState) -> Result<Action, EvalError> {
        let obs = obs.expect("network agent requests observations");
        let probs = self.step_probs(obs, sim.spec().goal)?;
        Ok(act(&probs, self.strategy, &mut self.rng)?)
    }
}

/// Replays the geodesic expert's plan.
#[derive(Default)]
pub struct ExpertAgent {
    plan: Vec<Action>,
    next: usize,
}

impl Agent for ExpertAgent {
    fn needs_observation(&self) -> bool {
        false
    }

    fn reset(&mut self, sim: &SimState, _episode_seed: u64) -> Result<(), EvalError> {
        self.plan = expert_actions_with_field(&sim.spec().scene, sim.field(), sim.pose())?;
        self.next = 0;
        Ok(())
    }

    fn act(&mut self, _obs: Option<&Observation>, _sim: &SimState) -> Result<Action, EvalError> {
        let a = self.plan.get(self.next).copied().unwrap_or(Action::Stop);
        self.next += 1;
        Ok(a)
    }
}

/// Uniform over all five actions.
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl Default for RandomAgent {
    fn default() -> Self {
        RandomAgent { rng: seed::rng(0, 0) }
    }
}

impl Agent for RandomAgent {
    fn needs_observation(&self) -> bool {
        false
    }

    fn reset(&mut self, _sim: &SimState, episode_seed: u64) -> Result<(), EvalError> {
        self.rng = seed::rng(episode_seed, 0x7a2d);
        Ok(())
    }

    fn act(&mut self, _obs: Option<&Observation>, _sim: &SimState) -> Result<Action, EvalError> {
        Ok(Action::ALL[self.rng.gen_range(0..Action::COUNT)])
    }
}

/// Stops immediately.
pub struct AlwaysStopAgent;

impl Agent for AlwaysStopAgent {
    fn needs_observation(&self) -> bool {
        false
    }
    fn reset(&mut self, _sim: &SimState, _episode_seed: u64) -> Result<(), EvalError> {
        Ok(())
    }
    fn act(&mut self, _obs: Option<&Observation>, _sim: &SimState) -> Result<Action, EvalError> {
        Ok(Action::Stop)
    }
}

/// Never stops; always tries to move forward.
pub struct NeverStopAgent;

impl Agent for NeverStopAgent {
    fn needs_observation(&self) -> bool {
        false
    }
    fn reset(&mut self, _sim: &SimState, _episode_seed: u64) -> Result<(), EvalError> {
        Ok(())
    }
    fn act(&mut self, _obs: Option<&Observation>, _sim: &SimState) -> Result<Action, EvalError> {
        Ok(Action::MoveForward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Actions taken, including the final stop.
    pub steps: u32,
    pub collisions: u32,
    /// Remaining geodesic distance to the success region, in meters.
    pub dtg_m: f64,
    /// Position-changing moves.
    pub path_cells: u32,
    /// Geodesic distance to the success region at the start.
    pub shortest_cells: u32,
    pub goal: usize,
}

impl EpisodeResult {
    pub fn spl_term(&self) -> f64 {
        if !self.success {
            return 0.0;
        }
        let l = f64::from(self.shortest_cells);
        let p = f64::from(self.path_cells);
        if l == 0.0 && p == 0.0 {
            1.0
        } else {
            l / p.max(l)
        }
    }
}

pub fn run_episode(agent: &mut dyn Agent, spec: &EpisodeSpec, tax: &Arc<Taxonomy>, episode_seed: u64) -> Result<EpisodeResult, EvalError> {
    let (mut sim, first) = SimState::reset(spec.clone(), Arc::clone(tax), agent.sensors())?;
    let shortest = sim.distance_to_goal().expect("validated spec is reachable");
    agent.reset(&sim, episode_seed)?;
    let render = agent.needs_observation();
    let mut obs = render.then_some(first);
    let mut path = 0u32;
    let mut success = false;
    while !sim.is_done() {
        let action = agent.act(obs.as_ref(), &sim)?;
        let before = sim.pose().cell;
        let info = if render {
            let (o, info) = sim.step(action)?;
            obs = Some(o);
            info
        } else {
            sim.apply(action)?
        };
        if sim.pose().cell != before {
            path += 1;
        }
        success = info.success;
    }
    let remaining = sim.distance_to_goal().expect("walkable cells stay reachable");
    Ok(EpisodeResult {
        success,
        steps: sim.info(false).steps_taken,
        collisions: sim.info(false).collisions_total,
        dtg_m: f64::from(remaining) * spec.scene.cell_size_m(),
        path_cells: path,
        shortest_cells: shortest,
        goal: spec.goal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sr: f64,
    pub spl: f64,
    pub c: f64,
    pub dtg: f64,
    pub sds: f64,
    pub n_episodes: usize,
    /// Successful episodes.
    pub n_ts: u64,
    /// Actions summed over successful episodes.
    pub n_as: u64,
    /// Mean actions per episode over all episodes.
    pub mean_actions: f64,
}

pub fn aggregate_metrics(results: &[EpisodeResult]) -> Result<Metrics, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = results.len() as f64;
    let n_ts = results.iter().filter(|r| r.success).count() as u64;
    let n_as: u64 = results.iter().filter(|r| r.success).map(|r| u64::from(r.steps)).sum();
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(Metrics {
        sr: n_ts as f64 / n,
        spl: mean(&|r| r.spl_term()),
        c: mean(&|r| f64::from(r.collisions)),
        dtg: mean(&|r| r.dtg_m),
        sds: if n_as > 0 { n_ts as f64 / n_as as f64 } else { 0.0 },
        n_episodes: results.len(),
        n_ts,
        n_as,
        mean_actions: mean(&|r| f64::from(r.steps)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_scene: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_scene: 10,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Keyed by goal category name.
    pub per_goal: BTreeMap<String, Metrics>,
    pub results: Vec<EpisodeResult>,
    pub warnings: Vec<String>,
}

/// The episodes `evaluate` runs for `cfg`; they depend only on scene
/// geometry, so recolored copies of a scene get the same episodes.
pub fn sample_eval_episodes(scenes: &[Arc<Scene>], tax: &Taxonomy, cfg: &EvalConfig) -> (Vec<(EpisodeSpec, u64)>, Vec<String>) {
    let mut specs = Vec::new();
    let mut warnings = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let mut rng = seed::rng(cfg.seed, 0xe7a1_0000 + si as u64);
        let mut found = Vec::with_capacity(cfg.episodes_per_scene);
        for k in 0..cfg.episodes_per_scene {
            match sample_episode(scene, tax, &cfg.sampler, &mut rng) {
                Some(spec) => found.push((spec, seed::derive(cfg.seed, (si as u64) << 20 | k as u64))),
                None => break,
            }
        }
        if found.len() < cfg.episodes_per_scene {
            warnings.push(format!("scene {} skipped: no valid episode within the retry budget", scene.scene_id()));
        } else {
            specs.extend(found);
        }
    }
    (specs, warnings)
}

pub fn evaluate(agent: &mut dyn Agent, scenes: &[Arc<Scene>], tax: &Arc<Taxonomy>, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let (specs, warnings) = sample_eval_episodes(scenes, tax, cfg);
    if specs.is_empty() {
        return Err(EvalError::AllScenesSkipped);
    }
    let results = specs
        .iter()
        .map(|(spec, s)| run_episode(agent, spec, tax, *s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_goal = BTreeMap::new();
    for &g in tax.goal_categories() {
        let subset: Vec<EpisodeResult> = results.iter().filter(|r| r.goal == g).cloned().collect();
        if let Ok(m) = aggregate_metrics(&subset) {
            per_goal.insert(tax.coarse_names()[g].clone(), m);
        }
    }
    Ok(EvalReport {
        metrics: aggregate_metrics(&results)?,
        per_goal,
        results,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub mode: InputMode,
    pub sr_orig: f64,
    pub sr_shift: f64,
    /// `sr_orig - sr_shift`.
    pub delta: f64,
    /// Every per-episode result field matches across the two conditions.
    pub results_identical: bool,
    pub orig: Metrics,
    pub shift: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub color_seed: u64,
    pub strategy: Strategy,
    pub rows: Vec<ShiftRow>,
}

/// Evaluate each network on the scenes and on instance-recolored copies.
pub fn domain_shift_report(
    policies: &[(Arc<Policy>, Arc<PolicyParams>)],
    scenes: &[Arc<Scene>],
    tax: &Arc<Taxonomy>,
    cfg: &EvalConfig,
    strategy: Strategy,
    color_seed: u64,
) -> Result<ShiftReport, EvalError> {
    let shifted: Vec<Arc<Scene>> = scenes
        .iter()
        .map(|s| Arc::new(resample_instance_colors(s, color_seed)))
        .collect();
    let mut rows = Vec::new();
    for (policy, params) in policies {
        let mut agent = NetworkAgent::new(Arc::clone(policy), Arc::clone(params), strategy);
        let orig = evaluate(&mut agent, scenes, tax, cfg)?;
        let shift = evaluate(&mut agent, &shifted, tax, cfg)?;
        rows.push(ShiftRow {
            mode: policy.mode(),
            sr_orig: orig.metrics.sr,
            sr_shift: shift.metrics.sr,
            delta: orig.metrics.sr - shift.metrics.sr,
            results_identical: orig.results == shift.results,
            orig: orig.metrics,
            shift: shift.metrics,
        });
    }
    Ok(ShiftReport { color_seed, strategy, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_scene, GenConfig};

    fn result(success: bool, steps: u32) -> EpisodeResult {
        EpisodeResult {
            success,
            steps,
            collisions: 0,
            dtg_m: if success { 0.0 } else { 2.0 },
            path_cells: 10,
            shortest_cells: 10,
            goal: 3,
        }
    }

    #[test]
    fn two_episode_spl() {
        let m = aggregate_metrics(&[result(true, 12), result(false, 30)]).unwrap();
        assert_eq!(m.sr, 0.5);
        assert_eq!(m.spl, 0.5);
        assert_eq!(m.mean_actions, 21.0);
        assert!(matches!(aggregate_metrics(&[]), Err(EvalError::Empty)));
    }

    fn fixture() -> (Arc<Taxonomy>, Vec<Arc<Scene>>) {
        let tax = Arc::new(Taxonomy::desk_default());
        let scenes = (0..3)
            .map(|s| Arc::new(generate_scene(300 + s, &GenConfig::default(), &tax).unwrap()))
            .collect();
        (tax, scenes)
    }

    #[test]
    fn baseline_agents() {
        let (tax, scenes) = fixture();
        let cfg = EvalConfig {
            episodes_per_scene: 4,
            ..EvalConfig::default()
        };
        let expert = evaluate(&mut ExpertAgent::default(), &scenes, &tax, &cfg).unwrap();
        assert_eq!(expert.metrics.sr, 1.0);
        assert_eq!(expert.metrics.spl, 1.0);

        let stop = evaluate(&mut AlwaysStopAgent, &scenes, &tax, &cfg).unwrap();
        assert_eq!(stop.metrics.sr, 0.0);
        for r in &stop.results {
            assert_eq!(r.steps, 1);
            assert_eq!(r.dtg_m, f64::from(r.shortest_cells) * 0.25);
        }

        let never = evaluate(&mut NeverStopAgent, &scenes, &tax, &cfg).unwrap();
        assert!(never.results.iter().all(|r| !r.success && r.steps == 225));

        let a = evaluate(&mut RandomAgent::default(), &scenes, &tax, &cfg).unwrap();
        let b = evaluate(&mut RandomAgent::default(), &scenes, &tax, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
