//! Line-delimited episode files.
//!
//! Line 1 is a header, then one record per transition, then a footer holding
//! the transition count and a SHA-256 over every preceding line.

use std::fs;
use std::io;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Episode, EpisodeStatus, Source, Transition};
use crate::action_space::LowLevelAction;
use crate::sim_world::Observation;

pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported episode version {found} (expected {EPISODE_VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("episode has no transitions")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        version: u32,
        task: String,
        instruction: String,
        seed: u64,
        success: bool,
        status: EpisodeStatus,
    },
    Transition {
        step: usize,
        supervision: String,
        primitive: usize,
        action: LowLevelAction,
        source: Source,
        observation: String,
    },
    Footer {
        transitions: usize,
        sha256: String,
    },
}

pub fn encode_episode(e: &Episode) -> Result<String, EpisodeError> {
    if e.transitions.is_empty() {
        return Err(EpisodeError::Empty);
    }
    let mut lines = Vec::with_capacity(e.transitions.len() + 2);
    let header = Record::Header {
        version: EPISODE_VERSION,
        task: e.task_id.clone(),
        instruction: e.instruction.clone(),
        seed: e.seed,
        success: e.success,
        status: e.status,
    };
    lines.push(serde_json::to_string(&header).expect("header serializes"));
    for (step, t) in e.transitions.iter().enumerate() {
        let rec = Record::Transition {
            step,
            supervision: t.supervision.clone(),
            primitive: t.primitive,
            action: t.action,
            source: t.source,
            observation: B64.encode(t.observation.to_png()),
        };
        lines.push(serde_json::to_string(&rec).expect("transition serializes"));
    }
    let footer = Record::Footer {
        transitions: e.transitions.len(),
        sha256: digest(&lines),
    };
    lines.push(serde_json::to_string(&footer).expect("footer serializes"));
    let mut out = lines.join("\n");
    out.push('\n');
    Ok(out)
}

fn digest(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn decode_episode(text: &str) -> Result<Episode, EpisodeError> {
    let lines: Vec<&str> = text.lines().collect();
    let parse = |i: usize| -> Result<Record, EpisodeError> {
        let line = lines.get(i).ok_or_else(|| EpisodeError::Parse {
            line: i + 1,
            msg: "unexpected end of file".into(),
        })?;
        serde_json::from_str(line).map_err(|e| EpisodeError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })
    };
    let Record::Header {
        version,
        task,
        instruction,
        seed,
        success,
        status,
    } = parse(0)?
    else {
        return Err(EpisodeError::Parse {
            line: 1,
            msg: "first record is not a header".into(),
        });
    };
    if version != EPISODE_VERSION {
        return Err(EpisodeError::Version { found: version });
    }
    let mut transitions = Vec::new();
    let mut i = 1;
    loop {
        match parse(i)? {
            Record::Transition {
                step,
                supervision,
                primitive,
                action,
                source,
                observation,
            } => {
                let bad = |msg: String| EpisodeError::Parse { line: i + 1, msg };
                if step != transitions.len() {
                    return Err(bad(format!("expected step {}, found {step}", transitions.len())));
                }
                let png = B64.decode(observation).map_err(|e| bad(e.to_string()))?;
                let observation = Observation::from_png(&png).map_err(|e| bad(e.to_string()))?;
                transitions.push(Transition {
                    observation,
                    instruction: instruction.clone(),
                    supervision,
                    primitive,
                    action,
                    source,
                });
            }
            Record::Footer {
                transitions: n,
                sha256,
            } => {
                if n != transitions.len() {
                    return Err(EpisodeError::Parse {
                        line: i + 1,
                        msg: format!("footer counts {n} transitions, file has {}", transitions.len()),
                    });
                }
                let prior: Vec<String> = lines[..i].iter().map(|l| l.to_string()).collect();
                if digest(&prior) != sha256 {
                    return Err(EpisodeError::Checksum);
                }
                break;
            }
            Record::Header { .. } => {
                return Err(EpisodeError::Parse {
                    line: i + 1,
                    msg: "duplicate header".into(),
                })
            }
        }
        i += 1;
    }
    if transitions.is_empty() {
        return Err(EpisodeError::Empty);
    }
    Ok(Episode {
        task_id: task,
        instruction,
        seed,
        success,
        status,
        transitions,
    })
}

pub fn save_episode(e: &Episode, path: &Path) -> Result<(), EpisodeError> {
    let text = encode_episode(e)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode, EpisodeError> {
    decode_episode(&fs::read_to_string(path)?)
}
