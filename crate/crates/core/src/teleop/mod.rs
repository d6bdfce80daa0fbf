//! Language teleoperation: sessions that turn free-form supervision into
//! executed primitives and record demonstration episodes.

mod episode_file;
mod llm;
mod translate;

pub use episode_file::{decode_episode, encode_episode, load_episode, save_episode, EpisodeError, EPISODE_VERSION};
pub use llm::{llm_translator_client, parse_command_reply, translator_prompt};
pub use translate::{degrees_to_action_radians, gripper_only, translate_supervision};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{action_to_primitive, primitive_to_action, LowLevelAction, PrimitiveVocabulary};
use crate::sim_world::{apply_action, check_success, init_world, render, Observation, SimError, TaskSpec, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Teleop,
    StaDiversify,
    StaRecovery,
    /// Steps chosen by a learned policy in a live session.
    Policy,
}

impl Source {
    pub fn is_augmented(self) -> bool {
        matches!(self, Source::StaDiversify | Source::StaRecovery)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Observation of the state the action was taken in.
    pub observation: Observation,
    pub instruction: String,
    pub supervision: String,
    pub primitive: usize,
    pub action: LowLevelAction,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Done,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub instruction: String,
    pub seed: u64,
    pub success: bool,
    pub status: EpisodeStatus,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn actions(&self) -> impl Iterator<Item = &LowLevelAction> {
        self.transitions.iter().map(|t| &t.action)
    }

    pub fn is_teleop(&self) -> bool {
        self.transitions.iter().any(|t| t.source == Source::Teleop)
    }

    /// Re-executes the stored actions from the episode seed and checks every
    /// stored observation byte for byte.
    pub fn replays_exactly(&self, task: &TaskSpec) -> Result<bool, SimError> {
        let mut world = init_world(task, self.seed)?;
        for t in &self.transitions {
            if render(&world) != t.observation {
                return Ok(false);
            }
            world = apply_action(&world, &t.action);
        }
        Ok(true)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is {0:?}, not active")]
    Inactive(SessionStatus),
    #[error("supervision text is empty")]
    EmptyText,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Action(#[from] crate::action_space::ActionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Done,
    Aborted,
}

/// What one accepted command did.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Observation,
    /// `None` when the text carried no motion.
    pub transition: Option<Transition>,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub session_id: String,
    pub world: WorldState,
    pub task: TaskSpec,
    pub transitions: Vec<Transition>,
    pub status: SessionStatus,
    /// Last rendered frame with the state it shows; reused while `world` is unchanged.
    frame: Option<(WorldState, Observation)>,
}

impl Session {
    pub fn new(session_id: impl Into<String>, task: TaskSpec, seed: u64) -> Result<Self, SessionError> {
        let world = init_world(&task, seed)?;
        Ok(Session {
            session_id: session_id.into(),
            world,
            task,
            transitions: Vec::new(),
            status: SessionStatus::Active,
            frame: None,
        })
    }

    pub fn observation(&self) -> Observation {
        match &self.frame {
            Some((w, obs)) if *w == self.world => obs.clone(),
            _ => render(&self.world),
        }
    }

    pub fn success(&self) -> bool {
        check_success(&self.world, &self.task).unwrap_or(false)
    }

    fn ensure_active(&self) -> Result<(), SessionError> {
        match self.status {
            SessionStatus::Active => Ok(()),
            s => Err(SessionError::Inactive(s)),
        }
    }

    /// Translates, snaps to a primitive, executes and records one command.
    pub fn step(&mut self, text: &str) -> Result<StepOutcome, SessionError> {
        self.step_with(text, translate_supervision)
    }

    /// Like [`Session::step`] with a caller-supplied translator.
    pub fn step_with(
        &mut self,
        text: &str,
        translate: impl FnOnce(&str) -> LowLevelAction,
    ) -> Result<StepOutcome, SessionError> {
        self.ensure_active()?;
        if text.trim().is_empty() {
            return Err(SessionError::EmptyText);
        }
        let raw = translate(text);
        if raw.is_zero() {
            return Ok(StepOutcome {
                observation: self.observation(),
                transition: None,
                success: self.success(),
            });
        }
        let primitive = action_to_primitive(&raw)?;
        self.execute_primitive(primitive, text, Source::Teleop)
    }

    /// Executes a primitive chosen elsewhere (policy or correction).
    pub fn execute_primitive(
        &mut self,
        primitive: usize,
        supervision: &str,
        source: Source,
    ) -> Result<StepOutcome, SessionError> {
        self.ensure_active()?;
        let action = primitive_to_action(primitive)?;
        let before = self.observation();
        self.world = apply_action(&self.world, &action);
        let t = Transition {
            observation: before,
            instruction: self.world.instruction.clone(),
            supervision: supervision.to_string(),
            primitive,
            action,
            source,
        };
        self.transitions.push(t.clone());
        let after = render(&self.world);
        self.frame = Some((self.world.clone(), after.clone()));
        Ok(StepOutcome {
            observation: after,
            transition: Some(t),
            success: self.success(),
        })
    }

    /// Closes the session and returns its episode.
    pub fn finish(&mut self, status: SessionStatus) -> Episode {
        self.status = status;
        Episode {
            task_id: self.task.task_id.clone(),
            instruction: self.world.instruction.clone(),
            seed: self.world.rng_seed,
            success: self.success(),
            status: if status == SessionStatus::Done {
                EpisodeStatus::Done
            } else {
                EpisodeStatus::Aborted
            },
            transitions: self.transitions.clone(),
        }
    }
}

/// Stateless form of one session step.
pub fn step_session(session: &mut Session, text: &str) -> Result<(Observation, Option<Transition>), SessionError> {
    let out = session.step(text)?;
    Ok((out.observation, out.transition))
}

/// Resolves supervision text to a primitive, trying the vocabulary first.
pub fn resolve_primitive(vocab: &PrimitiveVocabulary, text: &str) -> Option<usize> {
    if let Ok(p) = vocab.find(text) {
        return Some(p.id);
    }
    let a = translate_supervision(text);
    if a.is_zero() {
        None
    } else {
        action_to_primitive(&a).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::canonical_vocabulary;

    #[test]
    fn lower_a_tiny_bit_moves_down_one_centimeter() {
        let mut s = Session::new("s", TaskSpec::pick(), 3).unwrap();
        let z0 = s.world.pose.z;
        let (_, t) = step_session(&mut s, "lower arm a tiny bit").unwrap();
        assert!((z0 - s.world.pose.z - 0.01).abs() < 1e-12);
        let t = t.unwrap();
        assert_eq!(t.action, primitive_to_action(t.primitive).unwrap());
        assert_eq!(t.supervision, "lower arm a tiny bit");
        assert_eq!(s.transitions.len(), 1);
    }

    #[test]
    fn zero_commands_record_nothing() {
        let mut s = Session::new("s", TaskSpec::point(), 3).unwrap();
        let before = s.observation();
        let (obs, t) = step_session(&mut s, "sing a song").unwrap();
        assert!(t.is_none());
        assert_eq!(obs, before);
        assert!(s.transitions.is_empty());
        step_session(&mut s, "move left a lot").unwrap();
        step_session(&mut s, "move forward").unwrap();
        assert_eq!(s.transitions.len(), 2);
    }

    #[test]
    fn stored_observation_is_pre_action() {
        let mut s = Session::new("s", TaskSpec::point(), 4).unwrap();
        let before = s.observation();
        let (after, t) = step_session(&mut s, "move left a lot").unwrap();
        let t = t.unwrap();
        assert_eq!(t.observation, before);
        assert_ne!(after, before);
        let vocab = canonical_vocabulary();
        assert_eq!(vocab.get(t.primitive).unwrap().canonical_text, "move arm to the left by 20cm");
    }

    #[test]
    fn finished_sessions_reject_commands() {
        let mut s = Session::new("s", TaskSpec::point(), 4).unwrap();
        step_session(&mut s, "move right").unwrap();
        let ep = s.finish(SessionStatus::Done);
        assert_eq!(ep.transitions.len(), 1);
        assert!(matches!(
            step_session(&mut s, "move right"),
            Err(SessionError::Inactive(SessionStatus::Done))
        ));
        assert!(ep.replays_exactly(&TaskSpec::point()).unwrap());
    }

    #[test]
    fn resolve_prefers_vocabulary() {
        let v = crate::action_space::default_vocabulary();
        assert_eq!(resolve_primitive(&v, "move upwards by 5cm"), Some(21));
        assert_eq!(resolve_primitive(&v, "go left a lot"), Some(15));
        assert_eq!(resolve_primitive(&v, "hello"), None);
    }
}
