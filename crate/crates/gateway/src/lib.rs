//! Network surface: session lifecycle, observation streaming, teleoperation,
//! policy stepping and interventions, plus pipeline jobs.

mod error;
mod jobs;
mod sessions;

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::routing::{get, post};
use axum::{Json, Router};
use langarm_client::api::{JobStatus, VocabEntry};
use langarm_core::action_space::{default_vocabulary, PrimitiveVocabulary};
use langarm_core::cil_train::Checkpoint;
use langarm_core::policy_control::PolicyModel;
use langarm_core::sim_world::TaskSpec;
use tokio::net::TcpListener;

pub use error::AppError;
use sessions::Entry;

/// Every route, as documented in `docs/api.json`.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/v1/health"),
    ("GET", "/v1/vocabulary"),
    ("POST", "/v1/sessions"),
    ("GET", "/v1/sessions/{id}"),
    ("GET", "/v1/sessions/{id}/observation"),
    ("POST", "/v1/sessions/{id}/supervise"),
    ("POST", "/v1/sessions/{id}/policy_step"),
    ("POST", "/v1/sessions/{id}/intervention"),
    ("POST", "/v1/sessions/{id}/finish"),
    ("GET", "/v1/sessions/{id}/stream"),
    ("POST", "/v1/jobs"),
    ("GET", "/v1/jobs/{id}"),
];

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    /// Policy checkpoint; policy modes are refused without one.
    pub checkpoint: Option<PathBuf>,
    pub tasks: Vec<String>,
    pub episode_dir: PathBuf,
    pub idle_timeout: Duration,
    pub sweep_interval: Duration,
    /// Artificial latency added to every session command.
    pub command_delay: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 7878)),
            checkpoint: None,
            tasks: TaskSpec::defaults().into_iter().map(|t| t.task_id).collect(),
            episode_dir: PathBuf::from("episodes"),
            idle_timeout: Duration::from_secs(30 * 60),
            sweep_interval: Duration::from_secs(60),
            command_delay: Duration::ZERO,
        }
    }
}

pub struct AppState {
    pub config: ServeConfig,
    pub vocab: PrimitiveVocabulary,
    pub model: Option<Arc<PolicyModel>>,
    sessions: Mutex<HashMap<String, Entry>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    counter: AtomicU64,
    /// Distinguishes ids across server restarts sharing an episode directory.
    prefix: String,
}

impl AppState {
    pub fn new(config: ServeConfig) -> Result<Arc<Self>, String> {
        for t in &config.tasks {
            TaskSpec::by_id(t).map_err(|e| e.to_string())?;
        }
        let model = match &config.checkpoint {
            Some(p) => {
                let ck = Checkpoint::load(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Some(Arc::new(
                    PolicyModel::new(ck.params, &ck.vocabulary).map_err(|e| e.to_string())?,
                ))
            }
            None => None,
        };
        let millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis());
        Ok(Arc::new(AppState {
            config,
            vocab: default_vocabulary(),
            model,
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
            prefix: format!("{millis:x}"),
        }))
    }
}

async fn health(axum::extract::State(state): axum::extract::State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "policy": state.model.is_some(),
        "tasks": state.config.tasks,
    }))
}

async fn vocabulary(axum::extract::State(state): axum::extract::State<Arc<AppState>>) -> Json<Vec<VocabEntry>> {
    Json(
        state
            .vocab
            .primitives()
            .iter()
            .map(|p| VocabEntry {
                id: p.id,
                text: p.canonical_text.clone(),
                action: p.action().0,
            })
            .collect(),
    )
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/vocabulary", get(vocabulary))
        .route("/v1/sessions", post(sessions::create))
        .route("/v1/sessions/{id}", get(sessions::state))
        .route("/v1/sessions/{id}/observation", get(sessions::observation))
        .route("/v1/sessions/{id}/supervise", post(sessions::supervise))
        .route("/v1/sessions/{id}/policy_step", post(sessions::policy_step))
        .route("/v1/sessions/{id}/intervention", post(sessions::intervention))
        .route("/v1/sessions/{id}/finish", post(sessions::finish))
        .route("/v1/sessions/{id}/stream", get(sessions::stream))
        .route("/v1/jobs", post(jobs::submit))
        .route("/v1/jobs/{id}", get(jobs::status))
        .with_state(state)
}

/// Binds the listener and returns the bound address with the server future,
/// which also runs the idle-session sweeper.
pub async fn bind(config: ServeConfig) -> io::Result<(SocketAddr, impl Future<Output = io::Result<()>>)> {
    let state = AppState::new(config).map_err(io::Error::other)?;
    let listener = TcpListener::bind(state.config.addr).await?;
    let addr = listener.local_addr()?;
    let app = router(state.clone());
    Ok((addr, async move {
        tokio::spawn(sessions::sweep_forever(state));
        axum::serve(listener, app).await
    }))
}

pub async fn serve(config: ServeConfig) -> io::Result<()> {
    let (addr, server) = bind(config).await?;
    tracing::info!(%addr, "gateway listening");
    server.await
}

/// Runs the service on its own runtime thread; returns once it is bound.
pub fn spawn(config: ServeConfig) -> io::Result<SocketAddr> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let (tx, rx) = std::sync::mpsc::channel();
    thread::spawn(move || {
        rt.block_on(async move {
            match bind(config).await {
                Ok((addr, server)) => {
                    let _ = tx.send(Ok(addr));
                    if let Err(e) = server.await {
                        tracing::error!("gateway stopped: {e}");
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                }
            }
        });
    });
    rx.recv().map_err(io::Error::other)?
}
