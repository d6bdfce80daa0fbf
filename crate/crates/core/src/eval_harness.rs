//! Experiment runner: trains model variants on generated or stored
//! demonstrations, evaluates seeded rollouts per cell, and summarizes the
//! directional comparisons; plus intervention sweeps and latency probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{default_vocabulary, primitive_to_action, PrimitiveVocabulary};
use crate::cil_train::{action_token_variant, train, CilError, TextMode, TrainConfig, TrainingExample};
use crate::dataset_io::{load_episode_dir, select_transitions, BuildOptions, DatasetError};
use crate::expert::{collect_demo, DemoError};
use crate::policy_control::{
    run_episode, score_primitives, select_action, CorrectionSource, PolicyError, PolicyModel, RolloutConfig,
};
use crate::sim_world::{apply_action, check_success, init_world, render, SimError, TaskSpec};
use crate::sta_augment::{augment_episodes, StaError};
use crate::teleop::Episode;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Sta(#[from] StaError),
    #[error(transparent)]
    Cil(#[from] CilError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Passive,
    ActionToken,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Passive => "passive",
            Variant::ActionToken => "action_token",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One model trained on every task.
    Multi,
    /// One model per task.
    Single,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Multi => "multi",
            Regime::Single => "single",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "ShotsRepr", into = "ShotsRepr")]
pub enum Shots {
    N(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShotsRepr {
    N(usize),
    Word(String),
}

impl TryFrom<ShotsRepr> for Shots {
    type Error = String;

    fn try_from(r: ShotsRepr) -> Result<Self, String> {
        match r {
            ShotsRepr::N(0) => Err("shots must be at least 1".into()),
            ShotsRepr::N(n) => Ok(Shots::N(n)),
            ShotsRepr::Word(w) if w == "all" => Ok(Shots::All),
            ShotsRepr::Word(w) => Err(format!("shots must be a count or \"all\", got {w:?}")),
        }
    }
}

impl From<Shots> for ShotsRepr {
    fn from(s: Shots) -> Self {
        match s {
            Shots::N(n) => ShotsRepr::N(n),
            Shots::All => ShotsRepr::Word("all".into()),
        }
    }
}

impl Shots {
    fn few_shot_n(self) -> Option<usize> {
        match self {
            Shots::N(n) => Some(n),
            Shots::All => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            Shots::N(n) => n.to_string(),
            Shots::All => "all".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub master_seed: u64,
    pub tasks: Vec<String>,
    pub variants: Vec<Variant>,
    pub regimes: Vec<Regime>,
    pub shots: Vec<Shots>,
    /// Rollouts per cell.
    pub trials: usize,
    /// Expert demonstrations per task when no data directories are given.
    pub demos_per_task: usize,
    pub sta_augmentations: usize,
    pub start_jitter: f64,
    /// Stored episodes to use instead of generated demonstrations.
    pub data_dirs: Vec<PathBuf>,
    pub train: TrainConfig,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            master_seed: 0,
            tasks: TaskSpec::defaults().into_iter().map(|t| t.task_id).collect(),
            variants: vec![Variant::Full, Variant::Passive],
            regimes: vec![Regime::Multi],
            shots: vec![Shots::All],
            trials: 10,
            demos_per_task: 10,
            sta_augmentations: 3,
            start_jitter: 0.1,
            data_dirs: Vec::new(),
            train: TrainConfig::default(),
            threads: 0,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))
    }

    fn task_specs(&self) -> Result<Vec<TaskSpec>, EvalError> {
        if self.tasks.is_empty() {
            return Err(EvalError::Config("no tasks".into()));
        }
        Ok(self
            .tasks
            .iter()
            .map(|t| TaskSpec::by_id(t))
            .collect::<Result<_, _>>()?)
    }
}

/// Teleop demonstrations plus their augmentations, either loaded or generated
/// with the scripted expert (seeds `0..demos_per_task`).
pub fn gather_episodes(cfg: &BenchConfig, vocab: &PrimitiveVocabulary) -> Result<Vec<Episode>, EvalError> {
    if !cfg.data_dirs.is_empty() {
        let mut out = Vec::new();
        for d in &cfg.data_dirs {
            out.extend(load_episode_dir(d)?);
        }
        return Ok(out);
    }
    let mut demos = Vec::new();
    for (i, task) in cfg.task_specs()?.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
        rng.set_stream(i as u64);
        for seed in 0..cfg.demos_per_task as u64 {
            demos.push((collect_demo(&task, seed, vocab, &mut rng)?, task.clone()));
        }
    }
    let mut out: Vec<Episode> = demos.iter().map(|(e, _)| e.clone()).collect();
    if cfg.sta_augmentations > 0 {
        out.extend(augment_episodes(&demos, vocab, cfg.sta_augmentations, cfg.master_seed)?);
    }
    Ok(out)
}

/// Evaluation seeds for one task, disjoint from demonstration seeds.
pub fn eval_seeds(master_seed: u64, task_index: usize, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(1000 + task_index as u64);
    (0..n).map(|_| rng.random_range(1_000_000..u64::from(u32::MAX))).collect()
}

/// Vocabulary a variant trains and scores against.
pub fn variant_vocabulary(variant: Variant, vocab: &PrimitiveVocabulary) -> PrimitiveVocabulary {
    match variant {
        Variant::ActionToken => action_token_variant(vocab),
        _ => vocab.clone(),
    }
}

pub fn variant_train_config(variant: Variant, base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        text_mode: match variant {
            Variant::ActionToken => TextMode::ActionToken,
            _ => TextMode::Language,
        },
        ..base.clone()
    }
}

/// Trains one variant on `episodes`. `None` when filtering leaves no data.
pub fn train_variant(
    episodes: &[Episode],
    variant: Variant,
    few_shot_n: Option<usize>,
    base: &TrainConfig,
    vocab: &PrimitiveVocabulary,
) -> Result<Option<(PolicyModel, usize, usize)>, EvalError> {
    let options = BuildOptions {
        include_sta: variant != Variant::Passive,
        few_shot_n,
    };
    let data = match select_transitions(episodes, options) {
        Ok(d) => d,
        Err(DatasetError::Empty) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let examples: Vec<TrainingExample> = data
        .transitions
        .iter()
        .map(TrainingExample::from_transition)
        .collect::<Result<_, _>>()?;
    let v = variant_vocabulary(variant, vocab);
    let ck = train(&examples, &v, &variant_train_config(variant, base))?;
    let model = PolicyModel::new(ck.params, &ck.vocabulary)?;
    Ok(Some((model, data.teleop_episodes, data.transitions.len())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub task: String,
    pub regime: Regime,
    pub shots: Shots,
    pub teleop_episodes: usize,
    pub transitions: usize,
    pub successes: usize,
    pub trials: usize,
    /// No training data for this cell; counts are zero.
    pub absent: bool,
}

impl CellResult {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub name: String,
    pub delta: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<CellResult>,
    pub checks: Vec<DirectionalCheck>,
}

/// One training run and the tasks it is evaluated on.
#[derive(Clone, Debug)]
struct Group {
    variant: Variant,
    regime: Regime,
    shots: Shots,
    tasks: Vec<(usize, TaskSpec)>,
}

/// Successful rollouts over `seeds`.
pub fn evaluate(model: &PolicyModel, task: &TaskSpec, seeds: &[u64], config: &RolloutConfig) -> Result<usize, EvalError> {
    let mut ok = 0;
    for &seed in seeds {
        ok += usize::from(run_episode(model, task, seed, config)?.success);
    }
    Ok(ok)
}

fn run_group(
    g: &Group,
    episodes: &[Episode],
    cfg: &BenchConfig,
    vocab: &PrimitiveVocabulary,
) -> Result<Vec<CellResult>, EvalError> {
    let pool: Vec<Episode> = match g.regime {
        Regime::Multi => episodes.to_vec(),
        Regime::Single => episodes
            .iter()
            .filter(|e| e.task_id == g.tasks[0].1.task_id)
            .cloned()
            .collect(),
    };
    let trained = train_variant(&pool, g.variant, g.shots.few_shot_n(), &cfg.train, vocab)?;
    let rollout = RolloutConfig {
        start_jitter: cfg.start_jitter,
        ..RolloutConfig::default()
    };
    let mut out = Vec::new();
    for (i, task) in &g.tasks {
        let mut cell = CellResult {
            variant: g.variant,
            task: task.task_id.clone(),
            regime: g.regime,
            shots: g.shots,
            teleop_episodes: 0,
            transitions: 0,
            successes: 0,
            trials: 0,
            absent: true,
        };
        if let Some((model, teleop_episodes, transitions)) = &trained {
            cell.teleop_episodes = *teleop_episodes;
            cell.transitions = *transitions;
            cell.trials = cfg.trials;
            cell.successes = evaluate(model, task, &eval_seeds(cfg.master_seed, *i, cfg.trials), &rollout)?;
            cell.absent = false;
        }
        out.push(cell);
    }
    Ok(out)
}

/// Trains and evaluates every configured cell. Groups run in parallel and
/// results are collected in configuration order.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, EvalError> {
    let vocab = default_vocabulary();
    let tasks: Vec<(usize, TaskSpec)> = cfg.task_specs()?.into_iter().enumerate().collect();
    let episodes = gather_episodes(cfg, &vocab)?;
    let mut groups = Vec::new();
    for &variant in &cfg.variants {
        for &regime in &cfg.regimes {
            for &shots in &cfg.shots {
                match regime {
                    Regime::Multi => groups.push(Group {
                        variant,
                        regime,
                        shots,
                        tasks: tasks.clone(),
                    }),
                    Regime::Single => groups.extend(tasks.iter().map(|t| Group {
                        variant,
                        regime,
                        shots,
                        tasks: vec![t.clone()],
                    })),
                }
            }
        }
    }
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(groups.len().max(1));
    type GroupResult = Result<Vec<CellResult>, EvalError>;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<GroupResult>>> =
        Mutex::new((0..groups.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= groups.len() {
                    break;
                }
                let r = run_group(&groups[i], &episodes, cfg, &vocab);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut cells = Vec::new();
    for r in slots.into_inner().expect("workers finished") {
        cells.extend(r.expect("every group ran")?);
    }
    let checks = directional_checks(&cells);
    Ok(BenchReport { cells, checks })
}

fn pooled_rate(cells: &[&CellResult]) -> Option<f64> {
    let trials: usize = cells.iter().map(|c| c.trials).sum();
    let ok: usize = cells.iter().map(|c| c.successes).sum();
    (trials > 0 && cells.iter().all(|c| !c.absent)).then(|| ok as f64 / trials as f64)
}

/// Aggregated full-minus-passive and multi-minus-single comparisons for every
/// setting where both sides are present.
pub fn directional_checks(cells: &[CellResult]) -> Vec<DirectionalCheck> {
    let mut by: BTreeMap<(Variant, Regime, Shots), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        by.entry((c.variant, c.regime, c.shots)).or_default().push(c);
    }
    let mut out = Vec::new();
    let mut push = |name: String, a: Option<&Vec<&CellResult>>, b: Option<&Vec<&CellResult>>| {
        if let (Some(a), Some(b)) = (a.and_then(|a| pooled_rate(a)), b.and_then(|b| pooled_rate(b))) {
            out.push(DirectionalCheck {
                name,
                delta: a - b,
                holds: a >= b,
            });
        }
    };
    for &(v, r, s) in by.keys() {
        if v == Variant::Full {
            push(
                format!("full>=passive regime={} shots={}", r.name(), s.label()),
                by.get(&(Variant::Full, r, s)),
                by.get(&(Variant::Passive, r, s)),
            );
        }
        if r == Regime::Multi {
            push(
                format!("multi>=single variant={} shots={}", v.name(), s.label()),
                by.get(&(v, Regime::Multi, s)),
                by.get(&(v, Regime::Single, s)),
            );
        }
    }
    out
}

impl BenchReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn cell(&self, variant: Variant, task: &str, regime: Regime, shots: Shots) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.task == task && c.regime == regime && c.shots == shots)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variant",
            "task",
            "regime",
            "shots",
            "teleop_episodes",
            "transitions",
            "successes",
            "trials",
            "rate",
            "absent",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.variant.name().to_string(),
                c.task.clone(),
                c.regime.name().to_string(),
                c.shots.label(),
                c.teleop_episodes.to_string(),
                c.transitions.to_string(),
                c.successes.to_string(),
                c.trials.to_string(),
                format!("{:.4}", c.rate()),
                c.absent.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-cell rates, per-task full-minus-passive deltas, then the checks.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            let rate = if c.absent {
                "absent".to_string()
            } else {
                format!("{}/{} ({:.0}%)", c.successes, c.trials, 100.0 * c.rate())
            };
            let _ = writeln!(
                s,
                "{:<12} {:<6} {:<6} shots={:<3} demos={:<3} transitions={:<5} {rate}",
                c.variant.name(),
                c.task,
                c.regime.name(),
                c.shots.label(),
                c.teleop_episodes,
                c.transitions
            );
        }
        for c in self.cells.iter().filter(|c| c.variant == Variant::Full && !c.absent) {
            if let Some(p) = self.cell(Variant::Passive, &c.task, c.regime, c.shots).filter(|p| !p.absent) {
                let _ = writeln!(
                    s,
                    "full-passive {} {} shots={}: {:+.0} pp",
                    c.task,
                    c.regime.name(),
                    c.shots.label(),
                    100.0 * (c.rate() - p.rate())
                );
            }
        }
        for k in &self.checks {
            let verdict = if k.holds { "holds" } else { "FAILS" };
            let _ = writeln!(s, "{}: {:+.0} pp {verdict}", k.name, 100.0 * k.delta);
        }
        s
    }
}

/// Early-stopped training: a quarter of the configured epochs.
pub fn weakened(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: (config.epochs / 4).max(1),
        ..config.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub task: String,
    pub budgets: Vec<usize>,
    pub successes: Vec<usize>,
    pub trials: usize,
    /// Success never drops as the budget grows.
    pub monotone: bool,
}

impl SweepResult {
    pub fn rates(&self) -> Vec<f64> {
        self.successes
            .iter()
            .map(|&s| s as f64 / self.trials.max(1) as f64)
            .collect()
    }
}

/// Success per correction budget with scripted-expert corrections.
pub fn intervention_sweep(
    model: &PolicyModel,
    task: &TaskSpec,
    budgets: &[usize],
    seeds: &[u64],
) -> Result<SweepResult, EvalError> {
    let mut successes = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let config = RolloutConfig {
            intervention_budget: b,
            correction: CorrectionSource::Expert,
            ..RolloutConfig::default()
        };
        successes.push(evaluate(model, task, seeds, &config)?);
    }
    let mut pairs: Vec<(usize, usize)> = budgets.iter().copied().zip(successes.iter().copied()).collect();
    pairs.sort();
    let monotone = pairs.windows(2).all(|w| w[0].1 <= w[1].1);
    Ok(SweepResult {
        task: task.task_id.clone(),
        budgets: budgets.to_vec(),
        successes,
        trials: seeds.len(),
        monotone,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub candidates: usize,
    pub steps: usize,
    pub invocations_per_step: f64,
    pub seconds_per_step: f64,
    pub steps_per_second: f64,
}

/// Canonical texts plus one paraphrase per primitive: twice the candidates.
pub fn doubled_candidates(vocab: &PrimitiveVocabulary) -> Vec<(usize, String)> {
    let mut out: Vec<(usize, String)> = vocab
        .primitives()
        .iter()
        .map(|p| (p.id, p.canonical_text.clone()))
        .collect();
    for p in vocab.primitives() {
        let alt = vocab
            .paraphrases(p.id)
            .first()
            .cloned()
            .unwrap_or_else(|| format!("please {}", p.canonical_text));
        out.push((p.id, alt));
    }
    out
}

/// Closed-loop control steps with a warm cache; episodes restart on success
/// or at the task's step limit.
pub fn latency_probe(model: &PolicyModel, task: &TaskSpec, steps: usize, seed: u64) -> Result<LatencyReport, EvalError> {
    let mut seed = seed;
    let mut world = init_world(task, seed)?;
    score_primitives(&render(&world), &world.instruction, model)?;
    let before = model.invocations();
    let start = Instant::now();
    let mut in_episode = 0;
    for _ in 0..steps {
        let scores = score_primitives(&render(&world), &world.instruction, model)?;
        let id = select_action(&scores);
        world = apply_action(&world, &primitive_to_action(id).map_err(PolicyError::from)?);
        in_episode += 1;
        if in_episode >= task.max_steps || check_success(&world, task)? {
            seed += 1;
            world = init_world(task, seed)?;
            in_episode = 0;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let n = steps.max(1) as f64;
    Ok(LatencyReport {
        candidates: model.len(),
        steps,
        invocations_per_step: (model.invocations() - before) as f64 / n,
        seconds_per_step: secs / n,
        steps_per_second: if secs > 0.0 { n / secs } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shots_parse_from_config() {
        let cfg = BenchConfig::from_toml(
            "master_seed = 3\nshots = [1, 5, \"all\"]\nvariants = [\"full\", \"action_token\"]\n[train]\nepochs = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.shots, vec![Shots::N(1), Shots::N(5), Shots::All]);
        assert_eq!(cfg.variants, vec![Variant::Full, Variant::ActionToken]);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.trials, 10);
        assert!(BenchConfig::from_toml("shots = [0]").is_err());
        assert!(BenchConfig::from_toml("shots = [\"many\"]").is_err());
    }

    #[test]
    fn eval_seeds_are_stable_and_distinct_per_task() {
        assert_eq!(eval_seeds(4, 0, 10), eval_seeds(4, 0, 10));
        assert_ne!(eval_seeds(4, 0, 10), eval_seeds(4, 1, 10));
        assert!(eval_seeds(4, 2, 10).iter().all(|&s| s >= 1_000_000));
    }

    fn cell(variant: Variant, task: &str, regime: Regime, ok: usize) -> CellResult {
        CellResult {
            variant,
            task: task.into(),
            regime,
            shots: Shots::All,
            teleop_episodes: 10,
            transitions: 100,
            successes: ok,
            trials: 10,
            absent: false,
        }
    }

    #[test]
    fn checks_pool_tasks_and_skip_absent() {
        let cells = vec![
            cell(Variant::Full, "a", Regime::Multi, 6),
            cell(Variant::Full, "b", Regime::Multi, 2),
            cell(Variant::Passive, "a", Regime::Multi, 3),
            cell(Variant::Passive, "b", Regime::Multi, 3),
            cell(Variant::Full, "a", Regime::Single, 5),
            CellResult {
                absent: true,
                ..cell(Variant::Full, "b", Regime::Single, 0)
            },
        ];
        let checks = directional_checks(&cells);
        assert_eq!(checks.len(), 1);
        assert!(checks[0].holds);
        assert!((checks[0].delta - 0.1).abs() < 1e-12);
    }
}
