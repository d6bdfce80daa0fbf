//! Request, reply and frame bodies exchanged with the gateway.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Version carried by every stream frame.
pub const FRAME_VERSION: u32 = 1;
pub const DEFAULT_BUDGET: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Teleop,
    Policy,
    PolicyIntervention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Done,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub task: String,
    pub seed: u64,
    pub mode: Mode,
    /// Correction budget in intervention mode.
    #[serde(default)]
    pub budget: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub task: String,
    pub seed: u64,
    pub mode: Mode,
    pub instruction: String,
    /// Transitions recorded so far.
    pub step: usize,
    pub success: bool,
    pub status: Status,
    pub budget_left: usize,
    pub pending_intervention: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub primitives: Vec<usize>,
    pub cosines: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReply {
    pub session_id: String,
    /// Index of the executed step, counted from 1.
    pub step: usize,
    pub primitive: usize,
    pub canonical_text: String,
    pub supervision: String,
    pub success: bool,
    /// Base64 PNG of the state after the step.
    pub observation_png: String,
    /// Policy scores before any correction; absent in teleop mode.
    pub scores: Option<Scores>,
    /// Policy steps only: the policy's own choice.
    pub policy_primitive: Option<usize>,
    pub corrected: bool,
    pub budget_left: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReply {
    pub primitive: usize,
    pub canonical_text: String,
    pub budget_left: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinishRequest {
    #[serde(default = "done")]
    pub status: Status,
}

fn done() -> Status {
    Status::Done
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinishReply {
    pub session_id: String,
    pub status: Status,
    /// Episode file; absent when nothing was recorded.
    pub path: Option<PathBuf>,
    pub transitions: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub version: u32,
    pub session_id: String,
    pub step: usize,
    pub primitive: Option<usize>,
    pub success: bool,
    pub observation_png: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: usize,
    pub text: String,
    pub action: [f64; 8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

/// Training overrides; unset fields keep the server defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobRequest {
    /// Scripted-expert teleoperation demonstrations.
    Collect {
        tasks: Vec<String>,
        episodes_per_task: usize,
        seed: u64,
        out_dir: PathBuf,
    },
    Augment {
        data_dirs: Vec<PathBuf>,
        out_dir: PathBuf,
        augmentations: usize,
        seed: u64,
    },
    Train {
        data_dirs: Vec<PathBuf>,
        include_sta: bool,
        few_shot_n: Option<usize>,
        action_token: bool,
        #[serde(default)]
        overrides: TrainOverrides,
        out: PathBuf,
    },
    Rollout {
        checkpoint: PathBuf,
        task: String,
        seeds: Vec<u64>,
        start_jitter: f64,
        budget: usize,
        oracle_guidance: bool,
    },
    Quantize {
        data_dirs: Vec<PathBuf>,
        ks: Vec<usize>,
        seed: u64,
    },
    /// Benchmark from a TOML configuration text.
    Bench {
        config: String,
    },
}

impl JobRequest {
    pub fn kind(&self) -> &'static str {
        match self {
            JobRequest::Collect { .. } => "collect",
            JobRequest::Augment { .. } => "augment",
            JobRequest::Train { .. } => "train",
            JobRequest::Rollout { .. } => "rollout",
            JobRequest::Quantize { .. } => "quantize",
            JobRequest::Bench { .. } => "bench",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: String,
    pub state: JobState,
    pub result: Option<serde_json::Value>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: String,
}
