//! Stochastic trajectory augmentation.
//!
//! A demonstration is cut into segments at waypoints (gripper flips, progress
//! reversals, the final step). Each segment's net translation is re-sampled as
//! a random sequence of increments from [`SAMPLE_SIZES`]; near the waypoint a
//! deviation is executed and undone, and only the undo is kept for training.
//! Net rotation and the gripper command are appended at the segment end.

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{action_to_primitive, GripCommand, LowLevelAction, PrimitiveVocabulary};
use crate::sim_world::{apply_action, check_success, init_world, render, SimError, TaskSpec, WorldState};
use crate::teleop::{Episode, EpisodeStatus, Source, Transition};

pub const SAMPLE_SIZES: [f64; 3] = [0.01, 0.05, 0.1];
/// Remaining translation below which a segment is complete.
pub const EPSILON: f64 = 1e-6;
/// Remaining translation at or below which a recovery pair is injected.
pub const RECOVERY_THRESHOLD: f64 = 0.1;
pub const DEVIATION_SAMPLE_CAP: usize = 100;
pub const REPLAY_TOLERANCE: f64 = 1e-4;
pub const MAX_ATTEMPTS: usize = 10;
pub const DEFAULT_AUGMENTATIONS: usize = 3;

/// Slack when comparing a sample size against the remaining distance, so
/// that float noise such as 0.06 - 0.05 = 0.00999... still admits 0.01.
const FEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StaError {
    #[error("trajectory has no transitions")]
    Empty,
    #[error("n_aug must be at least 1")]
    NoAugmentations,
    #[error("augmentation {index} diverged from the demonstration in all {attempts} attempts")]
    Diverged { index: usize, attempts: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointKind {
    GripperChange,
    ProgressReversal,
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Index of the last transition of the segment ending here.
    pub index: usize,
    pub kind: WaypointKind,
}

/// Waypoints of an action sequence. A reversal on step `t` closes the segment
/// at `t - 1`; a gripper flip on step `t` closes it at `t`.
pub fn waypoints_of(actions: &[LowLevelAction]) -> Vec<Waypoint> {
    let mut out = Vec::new();
    let Some(last) = actions.len().checked_sub(1) else {
        return out;
    };
    let mut open = true;
    let mut dir = [0.0f64; 3];
    for (t, a) in actions.iter().enumerate() {
        let flip = match a.grip() {
            GripCommand::Close if open => {
                open = false;
                true
            }
            GripCommand::Open if !open => {
                open = true;
                true
            }
            _ => false,
        };
        let reverses = (0..3).any(|i| {
            let s = a.0[i].signum();
            a.0[i] != 0.0 && dir[i] != 0.0 && s != dir[i]
        });
        if reverses {
            out.push(Waypoint {
                index: t - 1,
                kind: WaypointKind::ProgressReversal,
            });
            dir = [0.0; 3];
        }
        for i in 0..3 {
            if a.0[i] != 0.0 && dir[i] == 0.0 {
                dir[i] = a.0[i].signum();
            }
        }
        if t == last {
            out.push(Waypoint {
                index: t,
                kind: WaypointKind::Terminal,
            });
        } else if flip {
            out.push(Waypoint {
                index: t,
                kind: WaypointKind::GripperChange,
            });
            dir = [0.0; 3];
        }
    }
    out
}

pub fn find_waypoints(traj: &Episode) -> Vec<Waypoint> {
    let actions: Vec<LowLevelAction> = traj.actions().copied().collect();
    waypoints_of(&actions)
}

/// Componentwise sum of the motion slots of `actions[start..end]`.
pub fn cumulative_action(actions: &[LowLevelAction], start: usize, end: usize) -> [f64; 7] {
    let mut sum = [0.0; 7];
    for a in &actions[start..end] {
        for (s, v) in sum.iter_mut().zip(&a.0[..7]) {
            *s += v;
        }
    }
    sum
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn translation(v: [f64; 3]) -> LowLevelAction {
    LowLevelAction::from_motion([v[0], v[1], v[2], 0.0, 0.0, 0.0, 0.0])
}

/// One diversification increment for the remaining translation. Axes with no
/// feasible sample size stay zero; when every axis is infeasible the exact
/// residual is returned so the segment still closes.
fn sample_increment<R: Rng + ?Sized>(rem: [f64; 3], rng: &mut R) -> [f64; 3] {
    let mut inc = [0.0; 3];
    let mut any = false;
    for i in 0..3 {
        let feasible: Vec<f64> = SAMPLE_SIZES
            .iter()
            .copied()
            .filter(|&s| s <= rem[i].abs() + FEASIBILITY_SLACK)
            .collect();
        if let Some(&s) = feasible.choose(rng) {
            inc[i] = s.copysign(rem[i]);
            any = true;
        }
    }
    if any {
        inc
    } else {
        rem
    }
}

/// Decomposes a segment's net translation into sampled increments.
pub fn diversify_segment<R: Rng + ?Sized>(delta: [f64; 7], rng: &mut R) -> Vec<LowLevelAction> {
    let mut rem = [delta[0], delta[1], delta[2]];
    let mut out = Vec::new();
    while norm3(rem) > EPSILON {
        let inc = sample_increment(rem, rng);
        for i in 0..3 {
            rem[i] -= inc[i];
        }
        out.push(translation(inc));
    }
    out
}

/// Samples a deviation that moves the gripper away from the waypoint, paired
/// with its exact negation. `None` when no acceptable sample was found within
/// [`DEVIATION_SAMPLE_CAP`] draws.
pub fn make_recovery_pair<R: Rng + ?Sized>(
    rem: [f64; 3],
    rng: &mut R,
) -> Option<(LowLevelAction, LowLevelAction)> {
    let base = norm3(rem);
    for _ in 0..DEVIATION_SAMPLE_CAP {
        let mut dev = [0.0; 3];
        for i in 0..2 {
            let s = *SAMPLE_SIZES.choose(rng).expect("non-empty");
            dev[i] = if rem[i] < 0.0 { -s } else { s };
        }
        dev[2] = rem[2].abs();
        let plus = norm3([rem[0] + dev[0], rem[1] + dev[1], rem[2] + dev[2]]);
        // After executing `dev`, the waypoint lies at `rem - dev`.
        let after = norm3([rem[0] - dev[0], rem[1] - dev[1], rem[2] - dev[2]]);
        if plus > base && after > base {
            let d = translation(dev);
            return Some((d, d.negated_motion()));
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Increment,
    Deviation,
    Recovery,
    Rotation,
    Gripper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub action: LowLevelAction,
    pub role: StepRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    /// Transition range `start..=end` of the demonstration.
    pub start: usize,
    pub end: usize,
    pub cumulative: [f64; 7],
    pub steps: Vec<PlannedStep>,
}

impl SegmentPlan {
    pub fn increments(&self) -> impl Iterator<Item = &LowLevelAction> {
        self.steps
            .iter()
            .filter(|s| s.role == StepRole::Increment)
            .map(|s| &s.action)
    }

    pub fn recovery_pairs(&self) -> Vec<(LowLevelAction, LowLevelAction)> {
        self.steps
            .windows(2)
            .filter(|w| w[0].role == StepRole::Deviation)
            .map(|w| (w[0].action, w[1].action))
            .collect()
    }
}

fn plan_segment<R: Rng + ?Sized>(
    actions: &[LowLevelAction],
    start: usize,
    end: usize,
    rng: &mut R,
) -> SegmentPlan {
    let cumulative = cumulative_action(actions, start, end + 1);
    let mut steps = Vec::new();
    let mut rem = [cumulative[0], cumulative[1], cumulative[2]];
    let mut recovery_tried = false;
    while norm3(rem) > EPSILON {
        let inc = sample_increment(rem, rng);
        for i in 0..3 {
            rem[i] -= inc[i];
        }
        steps.push(PlannedStep {
            action: translation(inc),
            role: StepRole::Increment,
        });
        if !recovery_tried && norm3(rem) <= RECOVERY_THRESHOLD {
            recovery_tried = true;
            if let Some((dev, rec)) = make_recovery_pair(rem, rng) {
                steps.push(PlannedStep {
                    action: dev,
                    role: StepRole::Deviation,
                });
                steps.push(PlannedStep {
                    action: rec,
                    role: StepRole::Recovery,
                });
            }
        }
    }
    if cumulative[3..].iter().any(|v| v.abs() > EPSILON) {
        let mut m = [0.0; 7];
        m[3..].copy_from_slice(&cumulative[3..]);
        steps.push(PlannedStep {
            action: LowLevelAction::from_motion(m),
            role: StepRole::Rotation,
        });
    }
    let last = actions[end];
    if last.grip() != GripCommand::NoOp {
        steps.push(PlannedStep {
            action: LowLevelAction::gripper(last.grip()),
            role: StepRole::Gripper,
        });
    }
    SegmentPlan {
        start,
        end,
        cumulative,
        steps,
    }
}

/// Plans one augmentation of an action sequence.
pub fn plan_augmentation<R: Rng + ?Sized>(actions: &[LowLevelAction], rng: &mut R) -> Vec<SegmentPlan> {
    let mut start = 0;
    let mut plans = Vec::new();
    for wp in waypoints_of(actions) {
        plans.push(plan_segment(actions, start, wp.index, rng));
        start = wp.index + 1;
    }
    plans
}

/// An augmented episode together with the plan that produced it.
#[derive(Clone, Debug)]
pub struct Augmentation {
    pub episode: Episode,
    pub plan: Vec<SegmentPlan>,
    /// Every executed action, deviations included, in order.
    pub executed: Vec<PlannedStep>,
    /// Deviation steps as they were executed; never part of `episode`.
    pub deviations: Vec<Transition>,
    pub attempts: usize,
    /// Largest per-axis position error against the demonstration at any waypoint.
    pub endpoint_error: f64,
}

fn position_error(a: &WorldState, b: &WorldState) -> f64 {
    let pa = a.pose.position();
    let pb = b.pose.position();
    (0..3).map(|i| (pa[i] - pb[i]).abs()).fold(0.0, f64::max)
}

fn same_grasp(a: &WorldState, b: &WorldState) -> bool {
    a.pose.open == b.pose.open
        && a.objects.iter().zip(&b.objects).all(|(x, y)| x.held == y.held)
}

type Trace = Vec<(WorldState, PlannedStep)>;

/// Executes a plan from the demonstration's seed. Returns the per-step
/// pre-action states and the worst waypoint error, or `None` on divergence.
fn execute_plan(
    task: &TaskSpec,
    seed: u64,
    demo: &[LowLevelAction],
    plan: &[SegmentPlan],
) -> Result<Option<(Trace, f64)>, SimError> {
    let mut reference = init_world(task, seed)?;
    let mut world = reference.clone();
    let mut trace = Vec::new();
    let mut worst: f64 = 0.0;
    for seg in plan {
        for a in &demo[seg.start..=seg.end] {
            reference = apply_action(&reference, a);
        }
        for step in &seg.steps {
            let next = apply_action(&world, &step.action);
            trace.push((world, *step));
            world = next;
        }
        let err = position_error(&world, &reference);
        worst = worst.max(err);
        if err > REPLAY_TOLERANCE || !same_grasp(&world, &reference) {
            return Ok(None);
        }
    }
    Ok(Some((trace, worst)))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Produces `n_aug` augmentations of one demonstration; augmentation `k` draws
/// from stream `k` of a generator seeded with `seed`.
pub fn augment_with_plans(
    traj: &Episode,
    task: &TaskSpec,
    vocab: &PrimitiveVocabulary,
    n_aug: usize,
    seed: u64,
) -> Result<Vec<Augmentation>, StaError> {
    if traj.transitions.is_empty() {
        return Err(StaError::Empty);
    }
    if n_aug == 0 {
        return Err(StaError::NoAugmentations);
    }
    let demo: Vec<LowLevelAction> = traj.actions().copied().collect();
    let mut out = Vec::with_capacity(n_aug);
    for k in 0..n_aug {
        let mut rng = rng_for(seed, k as u64);
        let mut accepted = None;
        for attempt in 1..=MAX_ATTEMPTS {
            let plan = plan_augmentation(&demo, &mut rng);
            if let Some((trace, err)) = execute_plan(task, traj.seed, &demo, &plan)? {
                accepted = Some((plan, trace, err, attempt));
                break;
            }
            tracing::debug!(augmentation = k, attempt, "augmentation diverged, resampling");
        }
        let (plan, trace, endpoint_error, attempts) = accepted.ok_or(StaError::Diverged {
            index: k,
            attempts: MAX_ATTEMPTS,
        })?;
        let executed: Vec<PlannedStep> = trace.iter().map(|(_, s)| *s).collect();
        let mut transitions = Vec::new();
        let mut deviations = Vec::new();
        let mut last_world = None;
        for (world, step) in &trace {
            last_world = Some(apply_action(world, &step.action));
            let source = match step.role {
                StepRole::Recovery => Source::StaRecovery,
                _ => Source::StaDiversify,
            };
            let primitive = action_to_primitive(&step.action)
                .expect("planned steps always carry motion or a gripper command");
            let supervision = vocab
                .get(primitive)
                .map(|p| p.canonical_text.clone())
                .unwrap_or_default();
            let t = Transition {
                observation: render(world),
                instruction: traj.instruction.clone(),
                supervision,
                primitive,
                action: step.action,
                source,
            };
            if step.role == StepRole::Deviation {
                deviations.push(t);
            } else {
                transitions.push(t);
            }
        }
        let success = match &last_world {
            Some(w) => check_success(w, task)?,
            None => false,
        };
        out.push(Augmentation {
            episode: Episode {
                task_id: traj.task_id.clone(),
                instruction: traj.instruction.clone(),
                seed: traj.seed,
                success,
                status: EpisodeStatus::Done,
                transitions,
            },
            plan,
            executed,
            deviations,
            attempts,
            endpoint_error,
        });
    }
    Ok(out)
}

pub fn augment_trajectory(
    traj: &Episode,
    task: &TaskSpec,
    vocab: &PrimitiveVocabulary,
    n_aug: usize,
    seed: u64,
) -> Result<Vec<Episode>, StaError> {
    Ok(augment_with_plans(traj, task, vocab, n_aug, seed)?
        .into_iter()
        .map(|a| a.episode)
        .collect())
}

/// Augments a list of demonstrations; each demonstration gets its own seed
/// drawn from stream `i` of a generator seeded with `seed`.
pub fn augment_episodes(
    demos: &[(Episode, TaskSpec)],
    vocab: &PrimitiveVocabulary,
    n_aug: usize,
    seed: u64,
) -> Result<Vec<Episode>, StaError> {
    let mut out = Vec::new();
    for (i, (e, task)) in demos.iter().enumerate() {
        let sub = rng_for(seed, i as u64).next_u64();
        out.extend(augment_trajectory(e, task, vocab, n_aug, sub)?);
    }
    Ok(out)
}
