use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use langarm_client::api::{JobRequest, JobState, TrainOverrides};
use langarm_client::{Client, DEFAULT_SERVER};
use langarm_gateway::ServeConfig;

#[derive(Parser)]
#[command(name = "langarm", version, about = "Language-conditioned tabletop arm pipeline")]
struct Cli {
    /// Gateway base URL.
    #[arg(long, global = true, default_value = DEFAULT_SERVER)]
    server: String,
    /// Seconds to wait for a job before giving up.
    #[arg(long, global = true, default_value_t = 3600)]
    timeout: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gateway.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: std::net::SocketAddr,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "episodes")]
        episode_dir: PathBuf,
        /// Minutes before an idle session is aborted.
        #[arg(long, default_value_t = 30)]
        idle_minutes: u64,
    },
    /// Print the primitive vocabulary.
    Vocab,
    /// Record scripted demonstrations.
    Collect {
        #[arg(long, value_delimiter = ',', default_value = "point,pick,place")]
        tasks: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic augmentations of teleoperated episodes.
    Augment {
        #[arg(long = "data", required = true)]
        data_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        augmentations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a policy checkpoint.
    Train {
        #[arg(long = "data", required = true)]
        data_dirs: Vec<PathBuf>,
        /// Drop augmented episodes.
        #[arg(long)]
        passive: bool,
        #[arg(long)]
        few_shot: Option<usize>,
        /// Score single action-token strings instead of language.
        #[arg(long)]
        action_token: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a checkpoint on one task.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.0)]
        start_jitter: f64,
        /// Expert corrections allowed per episode.
        #[arg(long, default_value_t = 0)]
        budget: usize,
        #[arg(long)]
        oracle_guidance: bool,
    },
    /// Per-axis k-means distortion report.
    Quantize {
        #[arg(long = "data", required = true)]
        data_dirs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of printing JSON.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a benchmark described by a TOML file; exits nonzero when a directional check fails.
    Bench {
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// The gateway may run elsewhere in the filesystem; send it absolute paths.
fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn abs_all(ps: &[PathBuf]) -> Vec<PathBuf> {
    ps.iter().map(|p| abs(p)).collect()
}

fn print(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let client = Client::new(&cli.server);
    let timeout = Duration::from_secs(cli.timeout);
    let job = match cli.cmd {
        Cmd::Serve {
            addr,
            checkpoint,
            episode_dir,
            idle_minutes,
        } => {
            let config = ServeConfig {
                addr,
                checkpoint,
                episode_dir,
                idle_timeout: Duration::from_secs(idle_minutes * 60),
                ..ServeConfig::default()
            };
            tokio::runtime::Runtime::new()?.block_on(langarm_gateway::serve(config))?;
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Vocab => {
            print(&client.vocabulary()?);
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Collect {
            tasks,
            episodes,
            seed,
            out,
        } => JobRequest::Collect {
            tasks,
            episodes_per_task: episodes,
            seed,
            out_dir: abs(&out),
        },
        Cmd::Augment {
            data_dirs,
            out,
            augmentations,
            seed,
        } => JobRequest::Augment {
            data_dirs: abs_all(&data_dirs),
            out_dir: abs(&out),
            augmentations,
            seed,
        },
        Cmd::Train {
            data_dirs,
            passive,
            few_shot,
            action_token,
            epochs,
            batch_size,
            learning_rate,
            dim,
            seed,
            out,
        } => JobRequest::Train {
            data_dirs: abs_all(&data_dirs),
            include_sta: !passive,
            few_shot_n: few_shot,
            action_token,
            overrides: TrainOverrides {
                epochs,
                batch_size,
                learning_rate,
                dim,
                seed,
            },
            out: abs(&out),
        },
        Cmd::Rollout {
            checkpoint,
            task,
            seeds,
            start_jitter,
            budget,
            oracle_guidance,
        } => JobRequest::Rollout {
            checkpoint: abs(&checkpoint),
            task,
            seeds,
            start_jitter,
            budget,
            oracle_guidance,
        },
        Cmd::Quantize {
            data_dirs,
            ks,
            seed,
            csv,
        } => {
            let status = client.run_job(
                &JobRequest::Quantize {
                    data_dirs: abs_all(&data_dirs),
                    ks,
                    seed,
                },
                timeout,
            )?;
            return finish_with_csv(status, csv);
        }
        Cmd::Bench { config, csv } => {
            let text = std::fs::read_to_string(&config)?;
            let status = client.run_job(&JobRequest::Bench { config: text }, timeout)?;
            let hold = status
                .result
                .as_ref()
                .and_then(|r| r["all_hold"].as_bool())
                .unwrap_or(false);
            if let Some(r) = &status.result {
                if let Some(s) = r["summary"].as_str() {
                    eprintln!("{s}");
                }
            }
            let code = finish_with_csv(status, csv)?;
            return Ok(if hold { code } else { ExitCode::from(2) });
        }
    };
    let status = client.run_job(&job, timeout)?;
    if status.state != JobState::Done {
        eprintln!("job {} failed: {}", status.job_id, status.error.unwrap_or_default());
        return Ok(ExitCode::FAILURE);
    }
    print(&status.result);
    Ok(ExitCode::SUCCESS)
}

fn finish_with_csv(status: langarm_client::api::JobStatus, csv: Option<PathBuf>) -> Result<ExitCode, Box<dyn std::error::Error>> {
    if status.state != JobState::Done {
        eprintln!("job {} failed: {}", status.job_id, status.error.unwrap_or_default());
        return Ok(ExitCode::FAILURE);
    }
    let result = status.result.unwrap_or_default();
    match csv {
        Some(path) => std::fs::write(path, result["csv"].as_str().unwrap_or_default())?,
        None => print(&result),
    }
    Ok(ExitCode::SUCCESS)
}
