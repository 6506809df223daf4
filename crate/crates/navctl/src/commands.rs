//! Subcommand implementations. Each returns a JSON summary for stdout.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use goalnav::evaluator::{domain_shift_report, evaluate, Agent, AlwaysStopAgent, EvalConfig, ExpertAgent, NetworkAgent, RandomAgent};
use goalnav::oracle::{generate_demos, DemoConfig};
use goalnav::simcore::SensorConfig;
use goalnav::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainHooks};
use goalnav::trajectory::{prepare_dataset, read_trajectories, replay, verify, write_trajectories};
use goalnav::worldgen::{generate_scene, load_scene_dir, serialize_scene, GenConfig};
use goalnav::{Scene, Taxonomy};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cli::{BaselineAgent, Cli, Command, DemosCmd, EvalArgs, ReplayArgs, SceneCmd, ServeArgs, ShiftArgs, TrainArgs};
use crate::error::{Coded, NavError, Result};
use crate::teleop::Hub;

pub fn run(cli: Cli) -> Result<Value> {
    let tax = Arc::new(match &cli.taxonomy {
        Some(p) => Taxonomy::load(p).code("taxonomy")?,
        None => Taxonomy::desk_default(),
    });
    match cli.command {
        Command::Scene {
            action: SceneCmd::Gen { seed, count, out, config },
        } => scene_gen(&tax, seed, count, &out, config.as_deref()),
        Command::Demos {
            action:
                DemosCmd::Gen {
                    scenes,
                    per_scene,
                    out,
                    seed,
                    allow_unseen_goal,
                },
        } => {
            let cfg = DemoConfig {
                episodes_per_scene: per_scene,
                seed,
                require_goal_in_final_view: !allow_unseen_goal,
                ..DemoConfig::default()
            };
            demos_gen(&tax, &scenes, &cfg, &out)
        }
        Command::Train(args) => train_cmd(&tax, &args),
        Command::Eval(args) => eval_cmd(&tax, &args),
        Command::ShiftReport(args) => shift_cmd(&tax, &args),
        Command::Replay(args) => replay_cmd(&tax, &args),
        Command::Serve(args) => serve_cmd(tax, &args),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| NavError::new("missing_file", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| NavError::new("schema", format!("{}: {e}", path.display())))
}

fn write_report<T: Serialize>(path: Option<&Path>, report: &T) -> Result<()> {
    if let Some(p) = path {
        let mut text = serde_json::to_string_pretty(report).expect("report serializes");
        text.push('\n');
        std::fs::write(p, text).map_err(|e| NavError::new("io", format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

pub fn load_scenes(dir: &Path, tax: &Taxonomy) -> Result<Vec<Arc<Scene>>> {
    if !dir.is_dir() {
        return Err(NavError::new("missing_file", format!("{} is not a directory", dir.display())));
    }
    let scenes = load_scene_dir(dir, tax).code("schema")?;
    if scenes.is_empty() {
        return Err(NavError::new("missing_file", format!("no scene files in {}", dir.display())));
    }
    Ok(scenes.into_iter().map(Arc::new).collect())
}

fn scene_map(scenes: &[Arc<Scene>]) -> HashMap<String, Arc<Scene>> {
    scenes.iter().map(|s| (s.scene_id().to_string(), Arc::clone(s))).collect()
}

/// File name for a generated scene; zero padding keeps directory order
/// equal to seed order.
pub fn scene_file_name(seed: u64) -> String {
    format!("scene-{seed:06}.json")
}

fn scene_gen(tax: &Taxonomy, seed: u64, count: u64, out: &Path, config: Option<&Path>) -> Result<Value> {
    let cfg: GenConfig = match config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    std::fs::create_dir_all(out).code("io")?;
    let mut files = Vec::new();
    for s in seed..seed.checked_add(count).ok_or_else(|| NavError::new("usage", "seed range overflows"))? {
        let scene = generate_scene(s, &cfg, tax).code("generation")?;
        let path = out.join(scene_file_name(s));
        serialize_scene(&scene, &path).code("io")?;
        files.push(path.display().to_string());
    }
    Ok(json!({ "command": "scene gen", "files": files }))
}

fn demos_gen(tax: &Arc<Taxonomy>, scenes: &Path, cfg: &DemoConfig, out: &Path) -> Result<Value> {
    let scenes = load_scenes(scenes, tax)?;
    let demos = generate_demos(&scenes, tax, cfg, SensorConfig::default()).code("demos")?;
    write_trajectories(out, &demos).code("io")?;
    let steps: usize = demos.iter().map(|d| d.len()).sum();
    Ok(json!({
        "command": "demos gen",
        "out": out.display().to_string(),
        "trajectories": demos.len(),
        "steps": steps,
    }))
}

fn train_cmd(tax: &Arc<Taxonomy>, args: &TrainArgs) -> Result<Value> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(g) = args.granularity {
        cfg.granularity = g.into();
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    if !args.demos.is_file() {
        return Err(NavError::new("missing_file", format!("{} not found", args.demos.display())));
    }
    let demos = read_trajectories(&args.demos).code("schema")?;
    let sensors = SensorConfig {
        granularity: cfg.granularity,
        color: cfg.mode.uses_color(),
    };
    let demos = if sensors == SensorConfig::default() {
        demos
    } else {
        let dir = args
            .scenes
            .as_ref()
            .ok_or_else(|| NavError::new("usage", "--scenes is required to re-render frames for this mode or granularity"))?;
        let scenes = load_scenes(dir, tax)?;
        prepare_dataset(demos, &scene_map(&scenes), tax, sensors).code("schema")?
    };
    let mut log_lines = Vec::new();
    let hooks = TrainHooks {
        eval: None,
        on_epoch: Some(Box::new(|l| log_lines.push(serde_json::to_string(l).expect("log serializes")))),
    };
    let (ckpt, logs) = train(&demos, &cfg, tax, hooks).code("train")?;
    save_checkpoint(&ckpt, &args.out).code("io")?;
    if let Some(p) = &args.log {
        let mut text = log_lines.join("\n");
        text.push('\n');
        std::fs::write(p, text).code("io")?;
    }
    Ok(json!({
        "command": "train",
        "out": args.out.display().to_string(),
        "trajectories": demos.len(),
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.mean_loss),
        "n_params": ckpt.header.n_params,
    }))
}

fn network_agent(tax: &Taxonomy, path: &Path, strategy: goalnav::policy::Strategy) -> Result<NetworkAgent> {
    let (policy, params) = load_network(tax, path)?;
    Ok(NetworkAgent::new(policy, params, strategy))
}

type Network = (Arc<goalnav::policy::Policy>, Arc<goalnav::policy::PolicyParams>);

fn load_network(tax: &Taxonomy, path: &Path) -> Result<Network> {
    if !path.is_file() {
        return Err(NavError::new("missing_file", format!("{} not found", path.display())));
    }
    let ckpt = load_checkpoint(path).code("checkpoint")?;
    let (policy, params) = ckpt.policy(tax).code("checkpoint")?;
    Ok((Arc::new(policy), Arc::new(params)))
}

fn eval_cmd(tax: &Arc<Taxonomy>, args: &EvalArgs) -> Result<Value> {
    let scenes = load_scenes(&args.scenes, tax)?;
    let cfg = EvalConfig {
        episodes_per_scene: args.episodes,
        seed: args.seed,
        ..EvalConfig::default()
    };
    let (mut agent, name): (Box<dyn Agent>, String) = match (&args.ckpt, args.agent) {
        (Some(p), _) => (Box::new(network_agent(tax, p, args.strategy)?), p.display().to_string()),
        (None, Some(BaselineAgent::Expert)) => (Box::new(ExpertAgent::default()), "expert".into()),
        (None, Some(BaselineAgent::Random)) => (Box::new(RandomAgent::default()), "random".into()),
        (None, Some(BaselineAgent::Stop)) => (Box::new(AlwaysStopAgent), "stop".into()),
        (None, None) => return Err(NavError::new("usage", "either --ckpt or --agent is required")),
    };
    let report = evaluate(agent.as_mut(), &scenes, tax, &cfg).code("eval")?;
    write_report(args.report.as_deref(), &report)?;
    Ok(json!({ "command": "eval", "agent": name, "metrics": report.metrics, "warnings": report.warnings }))
}

fn shift_cmd(tax: &Arc<Taxonomy>, args: &ShiftArgs) -> Result<Value> {
    let scenes = load_scenes(&args.scenes, tax)?;
    let nets = vec![load_network(tax, &args.ckpt_os)?, load_network(tax, &args.ckpt_rgb)?];
    let cfg = EvalConfig {
        episodes_per_scene: args.episodes,
        seed: args.seed,
        ..EvalConfig::default()
    };
    let report = domain_shift_report(&nets, &scenes, tax, &cfg, args.strategy, args.color_seed).code("eval")?;
    write_report(args.report.as_deref(), &report)?;
    let summary: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({ "mode": r.mode.to_string(), "sr_orig": r.sr_orig, "sr_shift": r.sr_shift, "delta": r.delta, "results_identical": r.results_identical }))
        .collect();
    Ok(json!({ "command": "shift-report", "rows": summary }))
}

fn replay_cmd(tax: &Arc<Taxonomy>, args: &ReplayArgs) -> Result<Value> {
    if !args.trajectory.is_file() {
        return Err(NavError::new("missing_file", format!("{} not found", args.trajectory.display())));
    }
    let scenes = scene_map(&load_scenes(&args.scenes, tax)?);
    let trajs = read_trajectories(&args.trajectory).code("schema")?;
    let mut successes = 0;
    for t in &trajs {
        let scene = scenes.get(&t.meta.scene_id).cloned().ok_or_else(|| {
            NavError::new(
                "schema",
                format!("episode {}: unknown scene `{}`", t.meta.episode_id, t.meta.scene_id),
            )
        })?;
        if args.verify {
            verify(t, scene, tax).code("verify_failed")?;
            successes += 1;
        } else if replay(t, scene, tax, SensorConfig::default()).code("replay")?.1 {
            successes += 1;
        }
    }
    Ok(json!({
        "command": "replay",
        "trajectories": trajs.len(),
        "successes": successes,
        "verified": args.verify,
    }))
}

fn serve_cmd(tax: Arc<Taxonomy>, args: &ServeArgs) -> Result<Value> {
    let scenes = load_scenes(&args.scenes, &tax)?;
    std::fs::create_dir_all(&args.record_dir).code("io")?;
    let hub = Arc::new(Hub::new(tax, scenes, PathBuf::from(&args.record_dir)));
    let runtime = tokio::runtime::Runtime::new().code("io")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await.code("io")?;
        let addr = listener.local_addr().code("io")?;
        println!("{}", json!({ "command": "serve", "listening": addr.to_string() }));
        tokio::select! {
            r = crate::server::serve(hub, listener) => r.code("io"),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })?;
    Ok(json!({ "command": "serve", "stopped": true }))
}
