use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::Json;
use langarm_client::api::{JobAccepted, JobRequest, JobState, JobStatus, TrainOverrides};
use langarm_core::cil_train::{train, Checkpoint, TrainConfig, TrainingExample};
use langarm_core::dataset_io::{build_dataset, load_episode_dir, quantization_report, write_report_csv, BuildOptions};
use langarm_core::eval_harness::{
    gather_episodes, run_benchmark, variant_train_config, variant_vocabulary, BenchConfig, Variant,
};
use langarm_core::policy_control::{run_episode, CorrectionSource, GuidanceSource, PolicyModel, RolloutConfig};
use langarm_core::sim_world::TaskSpec;
use langarm_core::sta_augment::augment_trajectory;
use langarm_core::teleop::save_episode;
use serde_json::{json, Value};

use crate::{AppError, AppState};

pub(crate) async fn submit(
    State(state): State<Arc<AppState>>,
    Json(req): Json<JobRequest>,
) -> Result<Json<JobAccepted>, AppError> {
    let n = state.counter.fetch_add(1, Ordering::SeqCst) + 1;
    let job_id = format!("j{}-{n}", state.prefix);
    state.jobs.lock().expect("job map lock").insert(
        job_id.clone(),
        JobStatus {
            job_id: job_id.clone(),
            kind: req.kind().into(),
            state: JobState::Running,
            result: None,
            error: None,
        },
    );
    let st = state.clone();
    let id = job_id.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = run(&req, &st);
        let mut jobs = st.jobs.lock().expect("job map lock");
        let entry = jobs.get_mut(&id).expect("submitted jobs stay registered");
        match outcome {
            Ok(v) => {
                entry.state = JobState::Done;
                entry.result = Some(v);
            }
            Err(e) => {
                tracing::warn!(job = %id, "job failed: {e}");
                entry.state = JobState::Failed;
                entry.error = Some(e);
            }
        }
    });
    Ok(Json(JobAccepted { job_id }))
}

pub(crate) async fn status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobStatus>, AppError> {
    state
        .jobs
        .lock()
        .expect("job map lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AppError::not_found("job", &id))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn apply_overrides(o: &TrainOverrides) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: o.epochs.unwrap_or(d.epochs),
        batch_size: o.batch_size.unwrap_or(d.batch_size),
        learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
        dim: o.dim.unwrap_or(d.dim),
        seed: o.seed.unwrap_or(d.seed),
        ..d
    }
}

fn save_all(episodes: &[(String, langarm_core::teleop::Episode)], dir: &FsPath) -> Result<Vec<PathBuf>, String> {
    episodes
        .iter()
        .map(|(name, e)| {
            let p = dir.join(name);
            save_episode(e, &p).map_err(err)?;
            Ok(p)
        })
        .collect()
}

fn run(req: &JobRequest, state: &AppState) -> Result<Value, String> {
    match req {
        JobRequest::Collect {
            tasks,
            episodes_per_task,
            seed,
            out_dir,
        } => {
            let cfg = BenchConfig {
                master_seed: *seed,
                tasks: tasks.clone(),
                demos_per_task: *episodes_per_task,
                sta_augmentations: 0,
                ..BenchConfig::default()
            };
            let episodes = gather_episodes(&cfg, &state.vocab).map_err(err)?;
            let named: Vec<_> = episodes
                .into_iter()
                .map(|e| (format!("{}-{:04}.jsonl", e.task_id, e.seed), e))
                .collect();
            let transitions: usize = named.iter().map(|(_, e)| e.transitions.len()).sum();
            let files = save_all(&named, out_dir)?;
            Ok(json!({ "episodes": files.len(), "transitions": transitions, "files": files }))
        }
        JobRequest::Augment {
            data_dirs,
            out_dir,
            augmentations,
            seed,
        } => {
            let mut named = Vec::new();
            let mut i = 0u64;
            for d in data_dirs {
                for e in load_episode_dir(d).map_err(err)?.into_iter().filter(|e| e.is_teleop()) {
                    let task = TaskSpec::by_id(&e.task_id).map_err(err)?;
                    let augs = augment_trajectory(&e, &task, &state.vocab, *augmentations, seed.wrapping_add(i))
                        .map_err(err)?;
                    i += 1;
                    for (k, a) in augs.into_iter().enumerate() {
                        named.push((format!("{}-{:04}-sta{k}.jsonl", e.task_id, e.seed), a));
                    }
                }
            }
            let transitions: usize = named.iter().map(|(_, e)| e.transitions.len()).sum();
            let files = save_all(&named, out_dir)?;
            Ok(json!({ "episodes": files.len(), "transitions": transitions, "files": files }))
        }
        JobRequest::Train {
            data_dirs,
            include_sta,
            few_shot_n,
            action_token,
            overrides,
            out,
        } => {
            let data = build_dataset(
                data_dirs,
                BuildOptions {
                    include_sta: *include_sta,
                    few_shot_n: *few_shot_n,
                },
            )
            .map_err(err)?;
            let examples: Vec<TrainingExample> = data
                .transitions
                .iter()
                .map(TrainingExample::from_transition)
                .collect::<Result<_, _>>()
                .map_err(err)?;
            let variant = if *action_token { Variant::ActionToken } else { Variant::Full };
            let vocab = variant_vocabulary(variant, &state.vocab);
            let cfg = variant_train_config(variant, &apply_overrides(overrides));
            let ck = train(&examples, &vocab, &cfg).map_err(err)?;
            ck.save(out).map_err(err)?;
            Ok(json!({
                "out": out,
                "transitions": data.transitions.len(),
                "teleop_episodes": data.teleop_episodes,
                "epochs": cfg.epochs,
                "final_loss": ck.loss_trace.last(),
            }))
        }
        JobRequest::Rollout {
            checkpoint,
            task,
            seeds,
            start_jitter,
            budget,
            oracle_guidance,
        } => {
            let ck = Checkpoint::load(checkpoint).map_err(err)?;
            let model = PolicyModel::new(ck.params, &ck.vocabulary).map_err(err)?;
            let spec = TaskSpec::by_id(task).map_err(err)?;
            let config = RolloutConfig {
                start_jitter: *start_jitter,
                intervention_budget: *budget,
                correction: if *budget > 0 { CorrectionSource::Expert } else { CorrectionSource::None },
                guidance: if *oracle_guidance { GuidanceSource::Oracle } else { GuidanceSource::None },
                ..RolloutConfig::default()
            };
            let mut episodes = Vec::new();
            let mut ok = 0;
            for &s in seeds {
                let r = run_episode(&model, &spec, s, &config).map_err(err)?;
                ok += usize::from(r.success);
                episodes.push(json!({
                    "seed": s,
                    "success": r.success,
                    "steps": r.steps,
                    "interventions": r.interventions,
                    "primitives": r.trace.iter().map(|t| t.primitive).collect::<Vec<_>>(),
                }));
            }
            let rate = if seeds.is_empty() { 0.0 } else { ok as f64 / seeds.len() as f64 };
            Ok(json!({ "task": task, "successes": ok, "trials": seeds.len(), "rate": rate, "episodes": episodes }))
        }
        JobRequest::Quantize { data_dirs, ks, seed } => {
            let data = build_dataset(data_dirs, BuildOptions::full()).map_err(err)?;
            let rows = quantization_report(&data.transitions, ks, *seed).map_err(err)?;
            let mut csv = Vec::new();
            write_report_csv(&rows, &mut csv).map_err(err)?;
            Ok(json!({
                "transitions": data.transitions.len(),
                "rows": rows,
                "csv": String::from_utf8(csv).map_err(err)?,
            }))
        }
        JobRequest::Bench { config } => {
            let cfg = BenchConfig::from_toml(config).map_err(err)?;
            let report = run_benchmark(&cfg).map_err(err)?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv).map_err(err)?;
            Ok(json!({
                "cells": report.cells,
                "checks": report.checks,
                "all_hold": report.all_hold(),
                "summary": report.summary(),
                "csv": String::from_utf8(csv).map_err(err)?,
            }))
        }
    }
}
