use std::process::Command;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use goalnav::oracle::expert_actions;
use goalnav::trainer::{train, TrainConfig, TrainHooks};
use goalnav::trajectory::read_trajectories;
use goalnav::worldgen::{generate_scene, serialize_scene, GenConfig};
use goalnav::Taxonomy;
use navctl::commands::scene_file_name;
use navctl::teleop::Hub;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

async fn send(ws: &mut (impl SinkExt<Message> + StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin), msg: Value) -> Value {
    ws.send(Message::Text(msg.to_string().into())).await.ok().expect("send");
    loop {
        match ws.next().await.expect("open socket").expect("frame") {
            Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            Message::Ping(_) | Message::Pong(_) => continue,
            other => panic!("unexpected message {other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_client_records_a_replayable_demo() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scenes");
    std::fs::create_dir_all(&scene_dir).unwrap();
    let tax = Arc::new(Taxonomy::desk_default());
    let scene = Arc::new(generate_scene(11, &GenConfig::default(), &tax).unwrap());
    serialize_scene(&scene, scene_dir.join(scene_file_name(11))).unwrap();

    let hub = Arc::new(Hub::new(Arc::clone(&tax), vec![Arc::clone(&scene)], dir.path().join("rec")));
    std::fs::create_dir_all(dir.path().join("rec")).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(navctl::server::serve(Arc::clone(&hub), listener));
    let http = reqwest::Client::new();
    let base = format!("http://{addr}");

    let listing: Value = http.get(format!("{base}/scenes")).send().await.unwrap().json().await.unwrap();
    assert_eq!(listing["scenes"], json!(["scene-11"]));
    let goal_name = listing["goals"][0]["name"].as_str().unwrap().to_string();

    let bad = http
        .post(format!("{base}/sessions"))
        .json(&json!({ "scene_id": "missing", "goal": 0, "seed": 0 }))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 404);
    let body: Value = bad.json().await.unwrap();
    assert_eq!(body["type"], "error");
    assert_eq!(body["code"], "not_found");

    let started: Value = http
        .post(format!("{base}/sessions"))
        .json(&json!({ "scene_id": "scene-11", "goal": goal_name, "seed": 4 }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let session = started["session"].as_str().unwrap().to_string();
    assert_eq!(started["frame"]["step"], 0);
    assert_eq!(started["frame"]["gps"], json!([0.0, 0.0, 0.0]));
    assert_eq!(started["palette"].as_array().unwrap().len(), tax.num_coarse());

    let unfinished = http
        .post(format!("{base}/sessions/{session}/save"))
        .json(&json!({ "path": "demos.jsonl" }))
        .send()
        .await
        .unwrap();
    assert_eq!(unfinished.status(), 409);

    let spec = hub.session(&session).unwrap().lock().unwrap().spec.clone();
    let plan = expert_actions(&spec.scene, &tax, spec.start, spec.goal, spec.success_radius_cells).unwrap();

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let err = send(&mut ws, json!({ "type": "act", "session": session, "action": 9 })).await;
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], "invalid_action");

    let mut last = Value::Null;
    for (i, a) in plan.iter().enumerate() {
        last = send(&mut ws, json!({ "type": "act", "session": session, "action": a.id() })).await;
        assert_eq!(last["type"], "frame");
        assert_eq!(last["step"], i + 1, "one applied action per request");
        assert_eq!(last["sem"].as_array().unwrap().len(), 1024);
        assert_eq!(last["color"].as_array().unwrap().len(), 1024);
    }
    assert_eq!(last["done"], true);
    assert_eq!(last["success"], true);
    assert_eq!(last["metrics"]["spl"], 1.0);
    let after = send(&mut ws, json!({ "type": "act", "session": session, "action": 2 })).await;
    assert_eq!(after["code"], "session_finished");

    let saved: Value = http
        .post(format!("{base}/sessions/{session}/save"))
        .json(&json!({ "path": "demos.jsonl" }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(saved["episode_id"], 0);
    let file = dir.path().join("rec/demos.jsonl");

    let out = Command::new(env!("CARGO_BIN_EXE_navctl"))
        .args(["replay", "--verify", "--trajectory"])
        .arg(&file)
        .arg("--scenes")
        .arg(&scene_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["successes"], 1);

    let demos = read_trajectories(&file).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (_, logs) = train(&demos, &cfg, &tax, TrainHooks::default()).unwrap();
    assert!(logs[0].mean_loss.is_finite());
}
