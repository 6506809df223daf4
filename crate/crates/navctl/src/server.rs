//! HTTP routes for session create/save and a WebSocket for act/frame
//! exchange.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/scenes` | | scene ids and goal categories |
//! | POST | `/sessions` | `{scene_id, goal, seed}` | session id, palette, first frame |
//! | GET | `/sessions/{id}` | | current frame |
//! | POST | `/sessions/{id}/save` | `{path}` | saved record location |
//! | DELETE | `/sessions/{id}` | | status after abort |
//! | GET | `/ws` | upgrade | `{type:"act", session, action}` in, frames out |

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::NavError;
use crate::teleop::{GoalRef, Hub};

impl IntoResponse for NavError {
    fn into_response(self) -> Response {
        let status = match self.code {
            "not_found" => StatusCode::NOT_FOUND,
            "not_successful" | "session_finished" => StatusCode::CONFLICT,
            "no_valid_spec" => StatusCode::UNPROCESSABLE_ENTITY,
            "io" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(error_message(&self))).into_response()
    }
}

pub fn error_message(e: &NavError) -> Value {
    json!({ "type": "error", "code": e.code, "message": e.message })
}

#[derive(Deserialize)]
struct StartRequest {
    scene_id: String,
    goal: GoalRef,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
struct SaveRequest {
    path: String,
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/sessions", post(start))
        .route("/sessions/{id}", get(current).delete(abort))
        .route("/sessions/{id}/save", post(save))
        .route("/ws", get(upgrade))
        .with_state(hub)
}

pub async fn serve(hub: Arc<Hub>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(hub)).await
}

async fn list_scenes(State(hub): State<Arc<Hub>>) -> Json<Value> {
    let tax = hub.taxonomy();
    let goals: Vec<Value> = tax
        .goal_categories()
        .iter()
        .map(|&g| json!({ "id": g, "name": tax.coarse_names()[g] }))
        .collect();
    Json(json!({ "scenes": hub.scene_ids(), "goals": goals }))
}

async fn start(State(hub): State<Arc<Hub>>, body: Result<Json<StartRequest>, axum::extract::rejection::JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return NavError::new("bad_request", e.body_text()).into_response(),
    };
    match hub.start(&req.scene_id, &req.goal, req.seed) {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn current(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Response {
    match hub.session(&id) {
        Ok(s) => Json(s.lock().expect("session poisoned").frame()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn abort(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Response {
    match hub.abort(&id) {
        Ok(status) => Json(json!({ "session": id, "status": status })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn save(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    body: Result<Json<SaveRequest>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return NavError::new("bad_request", e.body_text()).into_response(),
    };
    match hub.save(&id, &req.path) {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn upgrade(State(hub): State<Arc<Hub>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| drive(hub, socket))
}

/// One reply per text message, in arrival order.
async fn drive(hub: Arc<Hub>, mut socket: WebSocket) {
    while let Some(Ok(msg)) = socket.recv().await {
        let reply = match msg {
            Message::Text(text) => handle_text(&hub, text.as_str()),
            Message::Binary(_) => error_message(&NavError::new("bad_message", "binary messages are not supported")),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
            break;
        }
    }
}

/// Decode `{type:"act", session, action}` and apply it.
pub fn handle_text(hub: &Hub, text: &str) -> Value {
    let parsed: Result<(String, i64), NavError> = (|| {
        let v: Value = serde_json::from_str(text).map_err(|e| NavError::new("bad_message", e))?;
        if v.get("type").and_then(Value::as_str) != Some("act") {
            return Err(NavError::new("bad_message", "expected a message with type \"act\""));
        }
        let session = v
            .get("session")
            .and_then(Value::as_str)
            .ok_or_else(|| NavError::new("bad_message", "missing session"))?;
        let action = v
            .get("action")
            .and_then(Value::as_i64)
            .ok_or_else(|| NavError::new("invalid_action", "action must be an integer in 0..=4"))?;
        Ok((session.to_string(), action))
    })();
    match parsed.and_then(|(session, action)| hub.act(&session, action)) {
        Ok(frame) => serde_json::to_value(frame).expect("frame serializes"),
        Err(e) => error_message(&e),
    }
}
