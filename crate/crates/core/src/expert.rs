//! Scripted operator with privileged access to the simulator state.
//!
//! Used to collect demonstrations, to issue corrections during policy
//! rollouts, and as ground truth for guidance. Planar alignment moves along
//! the axis with the larger gap; each move uses the largest granularity that
//! does not overshoot.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::action_space::{
    primitive_to_action, PrimitiveVocabulary, CLOSE_GRIPPER, OPEN_GRIPPER, POSITION_STEPS,
};
use crate::sim_world::{apply_action, check_success, init_world, SimError, TaskSpec, WorldState};
use crate::teleop::{Episode, Session, SessionError, SessionStatus};

/// Planar alignment tolerance in meters.
pub const ALIGN_TOL: f64 = 0.005;
/// Gripper height used for grasping.
pub const GRASP_Z: f64 = 0.02;
/// Height the expert lifts to after grasping.
pub const CARRY_Z: f64 = 0.22;

/// Primitive id moving `gap` meters along translation axis `slot` (0..3)
/// without overshooting; `None` when already within tolerance.
fn approach(slot: usize, gap: f64) -> Option<usize> {
    if gap.abs() < ALIGN_TOL {
        return None;
    }
    let step_idx = POSITION_STEPS
        .iter()
        .rposition(|&s| s <= gap.abs() + ALIGN_TOL)
        .unwrap_or(0);
    let step = POSITION_STEPS[step_idx].copysign(gap);
    (0..56).find(|&id| {
        let a = primitive_to_action(id).expect("id in range").0;
        a[slot] == step
    })
}

/// Moves along the axis with the larger remaining gap (y on ties).
fn align_planar(state: &WorldState, goal: [f64; 2]) -> Option<usize> {
    let gx = goal[0] - state.pose.x;
    let gy = goal[1] - state.pose.y;
    if gy.abs() >= gx.abs() {
        approach(1, gy).or_else(|| approach(0, gx))
    } else {
        approach(0, gx).or_else(|| approach(1, gy))
    }
}

/// Next primitive the expert would issue, or `None` once the task succeeds.
pub fn expert_action(state: &WorldState, task: &TaskSpec) -> Result<Option<usize>, SimError> {
    if check_success(state, task)? {
        return Ok(None);
    }
    let Some(target) = state.target() else {
        return Ok(None);
    };
    let pose = &state.pose;
    if !target.held {
        if !pose.open {
            return Ok(Some(OPEN_GRIPPER));
        }
        if let Some(p) = align_planar(state, target.position) {
            return Ok(Some(p));
        }
        if task.predicate == "point" {
            return Ok(None);
        }
        if let Some(p) = approach(2, GRASP_Z - pose.z).filter(|_| pose.z > GRASP_Z + ALIGN_TOL) {
            return Ok(Some(p));
        }
        return Ok(Some(CLOSE_GRIPPER));
    }
    if pose.z < CARRY_Z - ALIGN_TOL {
        return Ok(approach(2, CARRY_Z - pose.z));
    }
    if task.predicate == "place" {
        if let Some(goal) = state.goal() {
            if let Some(p) = align_planar(state, goal.position) {
                return Ok(Some(p));
            }
            return Ok(Some(OPEN_GRIPPER));
        }
    }
    Ok(None)
}

/// Picks a phrasing for a primitive the way an operator might type it.
pub fn phrase_for<R: Rng>(vocab: &PrimitiveVocabulary, id: usize, rng: &mut R) -> String {
    let p = vocab.get(id).expect("expert ids are in the vocabulary");
    let mut options: Vec<&str> = vec![p.canonical_text.as_str()];
    options.extend(vocab.paraphrases(id).iter().map(String::as_str));
    options.choose(rng).expect("non-empty").to_string()
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("expert did not finish task {task} seed {seed} within {steps} steps")]
    Unfinished { task: String, seed: u64, steps: usize },
}

/// Runs a teleoperation session driven by the expert's typed commands.
pub fn collect_demo<R: Rng>(
    task: &TaskSpec,
    seed: u64,
    vocab: &PrimitiveVocabulary,
    rng: &mut R,
) -> Result<Episode, DemoError> {
    let mut session = Session::new(format!("demo-{}-{seed}", task.task_id), task.clone(), seed)?;
    for _ in 0..task.max_steps {
        let Some(id) = expert_action(&session.world, task)? else {
            break;
        };
        let text = phrase_for(vocab, id, rng);
        let out = session.step(&text)?;
        debug_assert_eq!(out.transition.as_ref().map(|t| t.primitive), Some(id));
    }
    if !session.success() {
        return Err(DemoError::Unfinished {
            task: task.task_id.clone(),
            seed,
            steps: task.max_steps,
        });
    }
    Ok(session.finish(SessionStatus::Done))
}

/// Remaining work for the expert from `state`: the number of primitives it
/// would still issue and the total translation they cover. Compared
/// lexicographically, it strictly decreases along any expert step.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct CostToGo {
    pub steps: usize,
    pub distance: f64,
}

/// Step cap for [`cost_to_go`]; far beyond any expert solution.
const COST_CAP: usize = 200;

pub fn cost_to_go(state: &WorldState, task: &TaskSpec) -> Result<CostToGo, SimError> {
    let mut world = state.clone();
    let mut cost = CostToGo {
        steps: 0,
        distance: 0.0,
    };
    while let Some(id) = expert_action(&world, task)? {
        let a = primitive_to_action(id).expect("valid id");
        cost.steps += 1;
        cost.distance += a.position().iter().map(|v| v.abs()).sum::<f64>();
        world = apply_action(&world, &a);
        if cost.steps >= COST_CAP {
            break;
        }
    }
    Ok(cost)
}

/// Length of the expert's own solution from a fresh world.
pub fn expert_solution_len(task: &TaskSpec, seed: u64) -> Result<usize, SimError> {
    Ok(cost_to_go(&init_world(task, seed)?, task)?.steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::default_vocabulary;
    use crate::teleop::Source;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn teleop_only(e: &Episode) -> bool {
        e.transitions.iter().all(|t| t.source == Source::Teleop)
    }

    #[test]
    fn expert_solves_every_task_and_seed() {
        let vocab = default_vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for task in TaskSpec::defaults() {
            for seed in 0..30 {
                let e = collect_demo(&task, seed, &vocab, &mut rng).unwrap();
                assert!(e.success);
                assert!(teleop_only(&e));
                assert!(e.transitions.len() <= task.max_steps);
                assert!(e.replays_exactly(&task).unwrap());
            }
        }
    }

    #[test]
    fn approach_never_overshoots_by_more_than_tolerance() {
        for i in 1..400 {
            let gap = i as f64 * 0.001 - 0.2;
            if let Some(id) = approach(0, gap) {
                let step = primitive_to_action(id).unwrap().0[0];
                assert_eq!(step.signum(), gap.signum());
                assert!((gap - step).abs() < gap.abs() + 1e-12);
                assert!(step.abs() <= gap.abs() + ALIGN_TOL + 1e-12);
            } else {
                assert!(gap.abs() < ALIGN_TOL);
            }
        }
    }

    #[test]
    fn pick_demo_shape() {
        let vocab = default_vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = collect_demo(&TaskSpec::pick(), 5, &vocab, &mut rng).unwrap();
        let ids: Vec<usize> = e.transitions.iter().map(|t| t.primitive).collect();
        let close = ids.iter().position(|&p| p == CLOSE_GRIPPER).unwrap();
        // Lower right before closing, raise after.
        assert_eq!(ids[close - 1], 16);
        assert_eq!(ids[close + 1], 23);
    }

    #[test]
    fn expert_steps_reduce_cost_to_go() {
        for task in TaskSpec::defaults() {
            let mut w = init_world(&task, 4).unwrap();
            let mut c = cost_to_go(&w, &task).unwrap();
            assert_eq!(c.steps, expert_solution_len(&task, 4).unwrap());
            while let Some(id) = expert_action(&w, &task).unwrap() {
                w = apply_action(&w, &primitive_to_action(id).unwrap());
                let next = cost_to_go(&w, &task).unwrap();
                assert!(next < c);
                c = next;
            }
            assert_eq!(c.steps, 0);
        }
    }
}
