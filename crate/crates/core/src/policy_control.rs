//! Closed-loop control with a trained encoder pair.
//!
//! Each step encodes the image and the prompted instruction once, scores every
//! candidate primitive against cached text embeddings, optionally reweights
//! the probabilities with an advisor's verdict, takes the argmax and executes
//! its table action. A scripted expert can replace the choice for a bounded
//! number of steps.

use std::sync::atomic::{AtomicUsize, Ordering};

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{primitive_to_action, ActionError, PrimitiveVocabulary, PLANAR_FAMILIES};
use crate::cil_train::{context, encode_text, CilError, EncoderParams};
use crate::endpoint::ChatEndpoint;
use crate::expert::{cost_to_go, expert_action, ALIGN_TOL};
use crate::sim_world::{
    apply_action, check_success, init_world, render, Observation, SimError, TaskSpec, WorldState, X_RANGE, Y_RANGE,
};

/// Guidance factor used when none is configured.
pub const DEFAULT_ALPHA: f64 = 0.7;

const ADVISOR_PROMPT: &str = include_str!("../prompts/advisor.txt");

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Cil(#[from] CilError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("guidance factor {0} outside [0, 1)")]
    Alpha(f64),
    #[error("guidance step must count from 1")]
    Step,
    #[error("primitive {0} is not a planar move")]
    NotPlanar(usize),
    #[error("primitive {0} is both appropriate and inappropriate")]
    Overlap(usize),
    #[error("policy has no candidate primitives")]
    NoCandidates,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-candidate scores. `primitives[k]` is the table id scored at slot `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub primitives: Vec<usize>,
    pub cosines: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ScoreVector {
    pub fn from_cosines(primitives: Vec<usize>, cosines: Vec<f64>) -> Self {
        let probs = cosines.iter().map(|&c| sigmoid(c)).collect();
        ScoreVector {
            primitives,
            cosines,
            probs,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Encoder parameters plus the cached unit embeddings of the candidate texts.
/// Read-only during inference apart from the invocation counter, so one
/// model can serve concurrent episodes.
#[derive(Debug)]
pub struct PolicyModel {
    pub params: EncoderParams,
    primitives: Vec<usize>,
    texts: Vec<String>,
    cache: Vec<Vec<f64>>,
    invocations: AtomicUsize,
}

impl PolicyModel {
    /// Candidates are the canonical texts, in vocabulary order.
    pub fn new(params: EncoderParams, vocab: &PrimitiveVocabulary) -> Result<Self, PolicyError> {
        let candidates = vocab.primitives().iter().map(|p| (p.id, p.canonical_text.clone())).collect();
        Self::with_candidates(params, candidates)
    }

    /// Arbitrary (primitive id, text) candidates, e.g. canonical texts plus
    /// paraphrases. Several texts may share an id.
    pub fn with_candidates(params: EncoderParams, candidates: Vec<(usize, String)>) -> Result<Self, PolicyError> {
        if candidates.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        for (id, _) in &candidates {
            primitive_to_action(*id)?;
        }
        let cache = candidates
            .iter()
            .map(|(_, t)| encode_text(t, &params))
            .collect::<Result<Vec<_>, _>>()?;
        let (primitives, texts) = candidates.into_iter().unzip();
        Ok(PolicyModel {
            params,
            primitives,
            texts,
            cache,
            invocations: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Encoder forward passes made since construction, excluding cache warm-up.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    fn context(&self, obs: &Observation, instruction: &str) -> Result<Vec<f64>, PolicyError> {
        self.invocations.fetch_add(2, Ordering::Relaxed);
        Ok(context(obs, instruction, &self.params)?)
    }

    /// Single pass: one image encode, one instruction encode, dot products
    /// against the cache.
    pub fn score(&self, obs: &Observation, instruction: &str) -> Result<ScoreVector, PolicyError> {
        let c = self.context(obs, instruction)?;
        let cosines = self.cache.iter().map(|z| dot(&c, z)).collect();
        Ok(ScoreVector::from_cosines(self.primitives.clone(), cosines))
    }

    /// Same scores with every candidate text re-encoded.
    pub fn score_uncached(&self, obs: &Observation, instruction: &str) -> Result<ScoreVector, PolicyError> {
        let c = self.context(obs, instruction)?;
        let mut cosines = Vec::with_capacity(self.texts.len());
        for t in &self.texts {
            self.invocations.fetch_add(1, Ordering::Relaxed);
            cosines.push(dot(&c, &encode_text(t, &self.params)?));
        }
        Ok(ScoreVector::from_cosines(self.primitives.clone(), cosines))
    }
}

pub fn score_primitives(obs: &Observation, instruction: &str, model: &PolicyModel) -> Result<ScoreVector, PolicyError> {
    model.score(obs, instruction)
}

/// Primitive id with the highest probability; ties go to the lowest id.
pub fn select_action(scores: &ScoreVector) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (&p, &id) in scores.probs.iter().zip(&scores.primitives) {
        best = match best {
            Some((bp, bid)) if bp > p || (bp == p && bid <= id) => Some((bp, bid)),
            _ => Some((p, id)),
        };
    }
    best.expect("scores are never empty").1
}

/// Advisor output for step `step` (counted from 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceVerdict {
    pub appropriate: Vec<usize>,
    pub inappropriate: Vec<usize>,
    pub step: usize,
    pub alpha: f64,
}

impl GuidanceVerdict {
    pub fn empty(step: usize, alpha: f64) -> Self {
        GuidanceVerdict {
            appropriate: Vec::new(),
            inappropriate: Vec::new(),
            step,
            alpha,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.appropriate.is_empty() && self.inappropriate.is_empty()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(PolicyError::Alpha(self.alpha));
        }
        if self.step == 0 {
            return Err(PolicyError::Step);
        }
        for &id in self.appropriate.iter().chain(&self.inappropriate) {
            if !PLANAR_FAMILIES.iter().any(|(_, ids)| ids.contains(&id)) {
                return Err(PolicyError::NotPlanar(id));
            }
        }
        if let Some(&id) = self.appropriate.iter().find(|id| self.inappropriate.contains(id)) {
            return Err(PolicyError::Overlap(id));
        }
        Ok(())
    }
}

/// Scales appropriate probabilities by (1 + α^t) and inappropriate ones by
/// (1 − α^t). Cosines are left as computed.
pub fn apply_guidance(scores: &ScoreVector, verdict: &GuidanceVerdict) -> Result<ScoreVector, PolicyError> {
    verdict.validate()?;
    let w = verdict.alpha.powi(verdict.step.min(i32::MAX as usize) as i32);
    let mut out = scores.clone();
    for (p, id) in out.probs.iter_mut().zip(&out.primitives) {
        if verdict.appropriate.contains(id) {
            *p *= 1.0 + w;
        } else if verdict.inappropriate.contains(id) {
            *p *= 1.0 - w;
        }
    }
    Ok(out)
}

/// Planar unit direction of a family, read off the lookup table.
fn family_direction(ids: &[usize; 4]) -> [f64; 2] {
    let a = primitive_to_action(ids[0]).expect("planar ids are in the table").0;
    [a[0].signum() * (a[0] != 0.0) as u8 as f64, a[1].signum() * (a[1] != 0.0) as u8 as f64]
}

/// Where the gripper should head next: the bowl while carrying for a place
/// task, the target object otherwise.
fn planar_goal(world: &WorldState, task: &TaskSpec) -> Option<[f64; 2]> {
    let target = world.target()?;
    if target.held {
        return (task.predicate == "place")
            .then(|| world.goal().map(|g| g.position))
            .flatten();
    }
    Some(target.position)
}

/// Ground-truth advisor: the planar family closing the lateral gap (or the
/// depth gap once aligned laterally) is appropriate; every family that moves
/// the gripper away from the goal is inappropriate.
pub fn scripted_advisor(world: &WorldState, task: &TaskSpec, step: usize) -> GuidanceVerdict {
    scripted_advisor_with(world, task, step, DEFAULT_ALPHA)
}

pub fn scripted_advisor_with(world: &WorldState, task: &TaskSpec, step: usize, alpha: f64) -> GuidanceVerdict {
    let mut verdict = GuidanceVerdict::empty(step, alpha);
    let Some(goal) = planar_goal(world, task) else {
        return verdict;
    };
    let gap = [goal[0] - world.pose.x, goal[1] - world.pose.y];
    let axis = if gap[1].abs() >= ALIGN_TOL {
        1
    } else if gap[0].abs() >= ALIGN_TOL {
        0
    } else {
        return verdict;
    };
    let dist = |p: [f64; 2]| (p[0] - goal[0]).hypot(p[1] - goal[1]);
    let here = dist([world.pose.x, world.pose.y]);
    for (_, ids) in PLANAR_FAMILIES {
        let d = family_direction(&ids);
        if d[axis] != 0.0 && d[axis].signum() == gap[axis].signum() {
            verdict.appropriate.extend(ids);
        } else if dist([world.pose.x + 0.01 * d[0], world.pose.y + 0.01 * d[1]]) > here {
            verdict.inappropriate.extend(ids);
        }
    }
    verdict
}

pub fn advisor_prompt(instruction: &str) -> String {
    ADVISOR_PROMPT.replace("{instruction}", instruction.trim().trim_end_matches('.'))
}

fn family_ids(name: &str) -> Option<[usize; 4]> {
    let name = name.trim().trim_end_matches('.').to_lowercase();
    PLANAR_FAMILIES.iter().find(|(n, _)| *n == name).map(|(_, ids)| *ids)
}

/// Parses an advisor reply holding a dictionary with "Appropriate" and
/// "Inappropriate" lists. Unknown action strings are skipped.
pub fn parse_advisor_reply(reply: &str, step: usize, alpha: f64) -> Result<GuidanceVerdict, String> {
    let start = reply.find('{').ok_or("no dictionary in reply")?;
    let end = reply.rfind('}').filter(|&e| e > start).ok_or("unterminated dictionary")?;
    let body = reply[start..=end].replace('\'', "\"");
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&body).map_err(|e| e.to_string())?;
    let list = |key: &str| -> Vec<usize> {
        map.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .and_then(|(_, v)| v.as_array())
            .map(|items| {
                items
                    .iter()
                    .filter_map(|v| v.as_str())
                    .filter_map(family_ids)
                    .flatten()
                    .collect()
            })
            .unwrap_or_default()
    };
    let appropriate = list("Appropriate");
    let inappropriate = list("Inappropriate")
        .into_iter()
        .filter(|id| !appropriate.contains(id))
        .collect();
    Ok(GuidanceVerdict {
        appropriate,
        inappropriate,
        step,
        alpha,
    })
}

/// Asks an external endpoint for a verdict. Any failure yields an empty
/// verdict, so guidance is simply skipped for that step.
pub fn llm_advisor_client(
    obs: &Observation,
    instruction: &str,
    endpoint: &ChatEndpoint,
    step: usize,
    alpha: f64,
) -> GuidanceVerdict {
    let png = base64::engine::general_purpose::STANDARD.encode(obs.to_png());
    let reply = match endpoint.complete(&advisor_prompt(instruction), Some(&png)) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(error = %e, "advisor endpoint failed, no guidance this step");
            return GuidanceVerdict::empty(step, alpha);
        }
    };
    match parse_advisor_reply(&reply, step, alpha) {
        Ok(v) => v,
        Err(e) => {
            tracing::warn!(error = %e, reply = %reply, "unparseable advisor reply, no guidance this step");
            GuidanceVerdict::empty(step, alpha)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub enum GuidanceSource {
    #[default]
    None,
    Oracle,
    Endpoint(ChatEndpoint),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSource {
    #[default]
    None,
    Expert,
}

#[derive(Clone, Debug)]
pub struct RolloutConfig {
    /// Defaults to the task's own step limit.
    pub max_steps: Option<usize>,
    pub guidance: GuidanceSource,
    pub alpha: f64,
    pub intervention_budget: usize,
    pub correction: CorrectionSource,
    /// Half-width in meters of the uniform planar offset applied to the
    /// initial gripper position.
    pub start_jitter: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_steps: None,
            guidance: GuidanceSource::None,
            alpha: DEFAULT_ALPHA,
            intervention_budget: 0,
            correction: CorrectionSource::None,
            start_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// The policy's own choice after guidance.
    pub policy_primitive: usize,
    /// What was executed; differs from the policy's choice when corrected.
    pub primitive: usize,
    pub corrected: bool,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub interventions: usize,
    pub trace: Vec<StepTrace>,
}

/// Shifts the gripper's start by a seeded uniform planar offset.
pub fn perturb_start(world: &mut WorldState, jitter: f64, seed: u64) {
    if jitter <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let dx = rng.random_range(-jitter..=jitter);
    let dy = rng.random_range(-jitter..=jitter);
    world.pose.x = (world.pose.x + dx).clamp(X_RANGE.0, X_RANGE.1);
    world.pose.y = (world.pose.y + dy).clamp(Y_RANGE.0, Y_RANGE.1);
}

/// Expert replacement for `chosen`, or `None` when `chosen` already makes
/// strict progress on the expert's remaining work.
pub fn expert_correction(world: &WorldState, task: &TaskSpec, chosen: usize) -> Result<Option<usize>, PolicyError> {
    let Some(fix) = expert_action(world, task)? else {
        return Ok(None);
    };
    if fix == chosen {
        return Ok(None);
    }
    let before = cost_to_go(world, task)?;
    let after = cost_to_go(&apply_action(world, &primitive_to_action(chosen)?), task)?;
    Ok((after >= before).then_some(fix))
}

/// Policy choice for one step, after optional guidance.
pub fn policy_decision(
    model: &PolicyModel,
    world: &WorldState,
    task: &TaskSpec,
    obs: &Observation,
    step: usize,
    guidance: &GuidanceSource,
    alpha: f64,
) -> Result<(usize, ScoreVector), PolicyError> {
    let scores = model.score(obs, &world.instruction)?;
    let verdict = match guidance {
        GuidanceSource::None => None,
        GuidanceSource::Oracle => Some(scripted_advisor_with(world, task, step, alpha)),
        GuidanceSource::Endpoint(ep) => Some(llm_advisor_client(obs, &world.instruction, ep, step, alpha)),
    };
    let scores = match verdict {
        Some(v) => apply_guidance(&scores, &v)?,
        None => scores,
    };
    Ok((select_action(&scores), scores))
}

pub fn run_episode(
    model: &PolicyModel,
    task: &TaskSpec,
    seed: u64,
    config: &RolloutConfig,
) -> Result<EpisodeResult, PolicyError> {
    let mut world = init_world(task, seed)?;
    perturb_start(&mut world, config.start_jitter, seed);
    let max_steps = config.max_steps.unwrap_or(task.max_steps);
    let mut result = EpisodeResult {
        task_id: task.task_id.clone(),
        seed,
        success: check_success(&world, task)?,
        steps: 0,
        interventions: 0,
        trace: Vec::new(),
    };
    while !result.success && result.steps < max_steps {
        let step = result.steps + 1;
        let obs = render(&world);
        let (chosen, scores) = policy_decision(model, &world, task, &obs, step, &config.guidance, config.alpha)?;
        let mut primitive = chosen;
        if config.correction == CorrectionSource::Expert && result.interventions < config.intervention_budget {
            if let Some(fix) = expert_correction(&world, task, chosen)? {
                primitive = fix;
                result.interventions += 1;
            }
        }
        world = apply_action(&world, &primitive_to_action(primitive)?);
        result.steps = step;
        result.success = check_success(&world, task)?;
        result.trace.push(StepTrace {
            step,
            policy_primitive: chosen,
            primitive,
            corrected: primitive != chosen,
            probs: scores.probs,
        });
    }
    Ok(result)
}
