use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use langarm_client::api::{
    CreateSession, FinishReply, FinishRequest, Frame, InterventionReply, Mode, Scores, SessionState, Status,
    StepReply, TextRequest, DEFAULT_BUDGET, FRAME_VERSION,
};
use langarm_core::policy_control::{policy_decision, GuidanceSource, DEFAULT_ALPHA};
use langarm_core::sim_world::TaskSpec;
use langarm_core::teleop::{resolve_primitive, save_episode, Session, SessionError, SessionStatus, Source};
use tokio::sync::{broadcast, Mutex, OwnedMutexGuard};

use crate::{AppError, AppState};

const FRAME_BUFFER: usize = 256;

pub(crate) struct Live {
    session: Session,
    mode: Mode,
    seed: u64,
    budget_left: usize,
    pending: Option<(usize, String)>,
    last_active: Instant,
    frames: broadcast::Sender<Frame>,
}

pub(crate) type Entry = Arc<Mutex<Live>>;

fn status_of(s: SessionStatus) -> Status {
    match s {
        SessionStatus::Active => Status::Active,
        SessionStatus::Done => Status::Done,
        SessionStatus::Aborted => Status::Aborted,
    }
}

impl Live {
    fn state(&self) -> SessionState {
        SessionState {
            session_id: self.session.session_id.clone(),
            task: self.session.task.task_id.clone(),
            seed: self.seed,
            mode: self.mode,
            instruction: self.session.world.instruction.clone(),
            step: self.session.transitions.len(),
            success: self.session.success(),
            status: status_of(self.session.status),
            budget_left: self.budget_left,
            pending_intervention: self.pending.as_ref().map(|(_, t)| t.clone()),
        }
    }

    fn png_b64(&self) -> String {
        B64.encode(self.session.observation().to_png())
    }

    fn frame(&self) -> Frame {
        Frame {
            version: FRAME_VERSION,
            session_id: self.session.session_id.clone(),
            step: self.session.transitions.len(),
            primitive: self.session.transitions.last().map(|t| t.primitive),
            success: self.session.success(),
            observation_png: self.png_b64(),
        }
    }

    /// Closes the session and writes its episode when anything was recorded.
    fn close(&mut self, status: SessionStatus, dir: &std::path::Path) -> Result<Option<PathBuf>, AppError> {
        let episode = self.session.finish(status);
        if episode.transitions.is_empty() {
            return Ok(None);
        }
        let path = dir.join(format!("{}.jsonl", self.session.session_id));
        save_episode(&episode, &path).map_err(|e| AppError::internal(e.to_string()))?;
        Ok(Some(path))
    }
}

fn lookup(state: &AppState, id: &str) -> Result<Entry, AppError> {
    state
        .sessions
        .lock()
        .expect("session map lock")
        .get(id)
        .cloned()
        .ok_or_else(|| AppError::not_found("session", id))
}

fn session_error(e: SessionError) -> AppError {
    match e {
        SessionError::Inactive(_) => AppError::conflict("finished", e.to_string()),
        SessionError::EmptyText => AppError::bad_request("empty_text", e.to_string()),
        other => AppError::internal(other.to_string()),
    }
}

/// Runs one command with exclusive access to the session; a second command
/// arriving meanwhile is rejected rather than queued.
async fn command<T, F>(state: &Arc<AppState>, id: &str, f: F) -> Result<T, AppError>
where
    T: Send + 'static,
    F: FnOnce(&mut Live, &AppState) -> Result<T, AppError> + Send + 'static,
{
    let entry = lookup(state, id)?;
    let mut guard: OwnedMutexGuard<Live> = entry.try_lock_owned().map_err(|_| AppError::busy(id))?;
    if guard.session.status != SessionStatus::Active {
        return Err(AppError::conflict("finished", format!("session {id:?} is finished")));
    }
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        if !st.config.command_delay.is_zero() {
            std::thread::sleep(st.config.command_delay);
        }
        let r = f(&mut guard, &st);
        guard.last_active = Instant::now();
        r
    })
    .await
    .map_err(|e| AppError::internal(e.to_string()))?
}

pub(crate) async fn create(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<Json<SessionState>, AppError> {
    if !state.config.tasks.contains(&req.task) {
        return Err(AppError::bad_request("unknown_task", format!("task {:?} is not served", req.task)));
    }
    if req.mode != Mode::Teleop && state.model.is_none() {
        return Err(AppError::conflict("no_policy", "the gateway was started without a checkpoint"));
    }
    let task = TaskSpec::by_id(&req.task).map_err(|e| AppError::bad_request("unknown_task", e.to_string()))?;
    let n = state.counter.fetch_add(1, Ordering::SeqCst) + 1;
    let id = format!("s{}-{n}", state.prefix);
    let session = Session::new(id.clone(), task, req.seed).map_err(session_error)?;
    let budget_left = match req.mode {
        Mode::PolicyIntervention => req.budget.unwrap_or(DEFAULT_BUDGET),
        _ => 0,
    };
    let live = Live {
        session,
        mode: req.mode,
        seed: req.seed,
        budget_left,
        pending: None,
        last_active: Instant::now(),
        frames: broadcast::channel(FRAME_BUFFER).0,
    };
    let reply = live.state();
    state
        .sessions
        .lock()
        .expect("session map lock")
        .insert(id, Arc::new(Mutex::new(live)));
    Ok(Json(reply))
}

pub(crate) async fn state(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionState>, AppError> {
    let entry = lookup(&state, &id)?;
    let live = entry.lock().await;
    Ok(Json(live.state()))
}

pub(crate) async fn observation(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, AppError> {
    let entry = lookup(&state, &id)?;
    let png = entry.lock().await.session.observation().to_png();
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn canonical(state: &AppState, id: usize) -> String {
    state
        .vocab
        .get(id)
        .map(|p| p.canonical_text.clone())
        .unwrap_or_default()
}

pub(crate) async fn supervise(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<TextRequest>,
) -> Result<Json<StepReply>, AppError> {
    command(&state, &id, move |live, st| {
        if live.mode != Mode::Teleop {
            return Err(AppError::conflict("wrong_mode", "supervision is only accepted in teleop mode"));
        }
        let out = live.session.step(&req.text).map_err(session_error)?;
        let Some(t) = out.transition else {
            return Err(AppError::bad_request(
                "no_motion",
                format!("{:?} does not describe a motion", req.text),
            ));
        };
        let _ = live.frames.send(live.frame());
        Ok(Json(StepReply {
            session_id: live.session.session_id.clone(),
            step: live.session.transitions.len(),
            primitive: t.primitive,
            canonical_text: canonical(st, t.primitive),
            supervision: t.supervision,
            success: out.success,
            observation_png: B64.encode(out.observation.to_png()),
            scores: None,
            policy_primitive: None,
            corrected: false,
            budget_left: live.budget_left,
        }))
    })
    .await
}

pub(crate) async fn policy_step(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<StepReply>, AppError> {
    command(&state, &id, move |live, st| {
        if live.mode == Mode::Teleop {
            return Err(AppError::conflict("wrong_mode", "policy steps need a policy session"));
        }
        let model = st.model.as_ref().ok_or_else(|| AppError::conflict("no_policy", "no checkpoint loaded"))?;
        let step = live.session.transitions.len() + 1;
        let obs = live.session.observation();
        let (chosen, scores) = policy_decision(
            model,
            &live.session.world,
            &live.session.task,
            &obs,
            step,
            &GuidanceSource::None,
            DEFAULT_ALPHA,
        )
        .map_err(|e| AppError::internal(e.to_string()))?;
        let (primitive, supervision, source, corrected) = match live.pending.take() {
            Some((p, text)) => (p, text, Source::Teleop, true),
            None => (chosen, canonical(st, chosen), Source::Policy, false),
        };
        let out = live
            .session
            .execute_primitive(primitive, &supervision, source)
            .map_err(session_error)?;
        let _ = live.frames.send(live.frame());
        Ok(Json(StepReply {
            session_id: live.session.session_id.clone(),
            step,
            primitive,
            canonical_text: canonical(st, primitive),
            supervision,
            success: out.success,
            observation_png: B64.encode(out.observation.to_png()),
            scores: Some(Scores {
                primitives: scores.primitives,
                cosines: scores.cosines,
                probs: scores.probs,
            }),
            policy_primitive: Some(chosen),
            corrected,
            budget_left: live.budget_left,
        }))
    })
    .await
}

pub(crate) async fn intervention(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<TextRequest>,
) -> Result<Json<InterventionReply>, AppError> {
    command(&state, &id, move |live, st| {
        if live.mode != Mode::PolicyIntervention {
            return Err(AppError::conflict("wrong_mode", "interventions need a policy_intervention session"));
        }
        if live.pending.is_some() {
            return Err(AppError::conflict("pending", "an intervention is already waiting for the next step"));
        }
        if live.budget_left == 0 {
            return Err(AppError::conflict("budget_exhausted", "no corrections left"));
        }
        let primitive = resolve_primitive(&st.vocab, &req.text).ok_or_else(|| {
            AppError::bad_request("no_motion", format!("{:?} does not describe a motion", req.text))
        })?;
        live.budget_left -= 1;
        live.pending = Some((primitive, req.text));
        Ok(Json(InterventionReply {
            primitive,
            canonical_text: canonical(st, primitive),
            budget_left: live.budget_left,
        }))
    })
    .await
}

pub(crate) async fn finish(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<FinishRequest>>,
) -> Result<Json<FinishReply>, AppError> {
    let status = body.map_or(Status::Done, |Json(b)| b.status);
    command(&state, &id, move |live, st| {
        let s = match status {
            Status::Done => SessionStatus::Done,
            Status::Aborted => SessionStatus::Aborted,
            Status::Active => return Err(AppError::bad_request("bad_status", "finish with done or aborted")),
        };
        let path = live.close(s, &st.config.episode_dir)?;
        Ok(Json(FinishReply {
            session_id: live.session.session_id.clone(),
            status,
            path,
            transitions: live.session.transitions.len(),
            success: live.session.success(),
        }))
    })
    .await
}

pub(crate) async fn stream(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, AppError> {
    let entry = lookup(&state, &id)?;
    Ok(ws.on_upgrade(move |socket| pump(socket, entry)))
}

async fn pump(mut socket: WebSocket, entry: Entry) {
    // Subscribing under the lock means no step lands between the snapshot
    // frame and the first broadcast frame.
    let (mut rx, first) = {
        let live = entry.lock().await;
        (live.frames.subscribe(), live.frame())
    };
    let mut last = first.step;
    if send(&mut socket, &first).await.is_err() {
        return;
    }
    loop {
        match rx.recv().await {
            Ok(frame) => {
                if frame.step <= last {
                    continue;
                }
                last = frame.step;
                if send(&mut socket, &frame).await.is_err() {
                    return;
                }
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                tracing::warn!(skipped = n, "stream consumer fell behind");
            }
            Err(broadcast::error::RecvError::Closed) => return,
        }
    }
}

async fn send(socket: &mut WebSocket, frame: &Frame) -> Result<(), axum::Error> {
    let text = serde_json::to_string(frame).expect("frames serialize");
    socket.send(Message::Text(text.into())).await
}

/// Aborts and persists sessions idle for longer than the configured timeout.
pub(crate) async fn sweep_forever(state: Arc<AppState>) {
    let mut tick = tokio::time::interval(state.config.sweep_interval);
    loop {
        tick.tick().await;
        let entries: Vec<Entry> = state.sessions.lock().expect("session map lock").values().cloned().collect();
        for entry in entries {
            let Ok(mut live) = entry.try_lock_owned() else {
                continue;
            };
            if live.session.status != SessionStatus::Active || live.last_active.elapsed() < state.config.idle_timeout {
                continue;
            }
            let dir = state.config.episode_dir.clone();
            let id = live.session.session_id.clone();
            let r = tokio::task::spawn_blocking(move || live.close(SessionStatus::Aborted, &dir)).await;
            match r {
                Ok(Ok(path)) => tracing::info!(session = %id, ?path, "idle session aborted"),
                Ok(Err(e)) => tracing::warn!(session = %id, "persisting idle session failed: {}", e.message),
                Err(e) => tracing::warn!(session = %id, "sweeper task failed: {e}"),
            }
        }
    }
}
