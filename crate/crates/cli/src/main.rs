//! `colm` — command-line front end.
//!
//! Exit codes: 0 success, 1 general error, 2 pipeline failure (every client
//! failed or the aggregation server failed), 3 replay divergence without
//! overrides, 64 usage error.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use colm_core::backend::MockScript;
use colm_core::config::{ColmConfig, ConfigError};
use colm_core::eval::report::{emit_report, ReportBundle};
use colm_core::eval::{load_benchmark, EvalError, Variant};
use colm_core::orchestrator::PipelineError;
use colm_core::store::{replay_divergences, Store, StoreError};
use colm_core::types::{ImageRef, InvariantError, Query, QueryMode};
use colm_service::ServeError;

const EXIT_PIPELINE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "colm", version, about = "Client-server LLM collaboration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP service.
    Serve {
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory for transcripts and manifests.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Run one question through the pipeline and print every final answer.
    Ask {
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory for transcripts and manifests.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// The question.
        question: String,
        /// Image attachment (repeatable); switches to the vision pipeline.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Override the configured number of experts.
        #[arg(long)]
        k: Option<usize>,
        /// Override the configured refinement round budget.
        #[arg(long)]
        rounds: Option<u32>,
        /// Override the configured early-stop behavior.
        #[arg(long)]
        early_stop: Option<bool>,
    },
    /// Score a benchmark under per-client baselines and the collaboration,
    /// with optional ablations, and emit a report.
    Bench {
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Benchmark items (JSONL).
        #[arg(long)]
        items: PathBuf,
        /// Benchmark name for the scale map (default: items file stem).
        #[arg(long)]
        name: Option<String>,
        /// Directory reports are written under.
        #[arg(long, default_value = "reports")]
        reports_dir: PathBuf,
        /// Directory for transcripts and manifests.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Rerun once per client with that client removed.
        #[arg(long)]
        leave_one_out: bool,
        /// Expert counts to sweep, comma separated (e.g. 1,2,3).
        #[arg(long, value_delimiter = ',')]
        sweep_k: Vec<usize>,
        /// Round budgets to sweep, comma separated (e.g. 0,1,2).
        #[arg(long, value_delimiter = ',')]
        sweep_rounds: Vec<u32>,
        /// Skip the per-client baseline runs.
        #[arg(long)]
        no_baselines: bool,
    },
    /// Re-run a stored transcript against mocks reconstructed from it and
    /// report any divergence.
    Replay {
        /// Directory for transcripts and manifests.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Transcript to replay.
        transcript_id: String,
        /// JSON file of mock-script overrides keyed by client name (the key
        /// "server" overrides the aggregation server).
        #[arg(long)]
        overrides: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Eval(EvalError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Invalid(#[from] InvariantError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
}

impl From<StoreError> for CliError {
    fn from(err: StoreError) -> Self {
        match err {
            StoreError::Replay(inner) => CliError::Pipeline(inner),
            other => CliError::Store(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        match err {
            EvalError::Pipeline(inner) => CliError::Pipeline(inner),
            other => CliError::Eval(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(_) => EXIT_PIPELINE,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(runtime) => runtime,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

async fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Serve {
            config,
            addr,
            data_dir,
        } => {
            let config = ColmConfig::load(&config)?;
            colm_service::serve(config, data_dir, addr).await?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ask {
            config,
            data_dir,
            question,
            images,
            k,
            rounds,
            early_stop,
        } => ask(&config, &data_dir, question, images, k, rounds, early_stop).await,
        Command::Bench {
            config,
            items,
            name,
            reports_dir,
            data_dir,
            leave_one_out,
            sweep_k,
            sweep_rounds,
            no_baselines,
        } => {
            bench(
                &config,
                &items,
                name,
                &reports_dir,
                &data_dir,
                leave_one_out,
                &sweep_k,
                &sweep_rounds,
                no_baselines,
            )
            .await
        }
        Command::Replay {
            data_dir,
            transcript_id,
            overrides,
        } => replay(&data_dir, &transcript_id, overrides.as_deref()).await,
    }
}

#[allow(clippy::too_many_arguments)]
async fn ask(
    config_path: &Path,
    data_dir: &Path,
    question: String,
    images: Vec<PathBuf>,
    k: Option<usize>,
    rounds: Option<u32>,
    early_stop: Option<bool>,
) -> Result<ExitCode, CliError> {
    let config = ColmConfig::load(config_path)?;
    let mut run_cfg = config.run.clone();
    if let Some(k) = k {
        run_cfg.k = k;
    }
    if let Some(rounds) = rounds {
        run_cfg.max_rounds = rounds;
    }
    if let Some(early_stop) = early_stop {
        run_cfg.early_stop = early_stop;
    }
    run_cfg.validate()?;

    let pool = config.pool()?;
    if pool.is_empty() {
        return Err(InvariantError::new("no clients configured").into());
    }
    let query = if images.is_empty() {
        Query::language(question)?
    } else {
        let attachments = images
            .iter()
            .map(|p| ImageRef::path(p.display().to_string()))
            .collect();
        Query::vision(question, attachments)?
    };

    let runner = config.runner();
    let transcript = match query.mode {
        QueryMode::Language => {
            runner
                .run_collaboration(&query, &pool, &run_cfg, None)
                .await?
        }
        QueryMode::VisionLanguage => {
            runner
                .run_vlm(&query, &pool.vision_profiles(), &run_cfg)
                .await?
        }
    };
    let store = Store::new(data_dir);
    store.append_transcript(&transcript)?;

    println!("transcript: {}", transcript.id);
    println!("experts: {}", transcript.selection.names().join(", "));
    if let Some(guidance) = transcript.final_guidance() {
        println!("\n--- shared guidance (round {}) ---", guidance.round);
        println!("{}", guidance.text);
    }
    for (name, text) in &transcript.finals {
        println!("\n--- {name} ---");
        println!("{text}");
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
async fn bench(
    config_path: &Path,
    items_path: &Path,
    name: Option<String>,
    reports_dir: &Path,
    data_dir: &Path,
    leave_one_out: bool,
    sweep_k: &[usize],
    sweep_rounds: &[u32],
    no_baselines: bool,
) -> Result<ExitCode, CliError> {
    let config = ColmConfig::load(config_path)?;
    let harness = config.harness();
    let pool = config.pool()?;
    if pool.is_empty() {
        return Err(InvariantError::new("no clients configured").into());
    }
    let items = load_benchmark(items_path)?;
    let benchmark = name.unwrap_or_else(|| {
        items_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "benchmark".to_string())
    });
    let cfg = config.run.clone();

    println!("benchmark: {benchmark} ({} items)", items.len());
    let mut baselines = Vec::new();
    if !no_baselines {
        for profile in pool.iter() {
            let variant = Variant::Baseline {
                client: profile.name.clone(),
            };
            let outcome = harness
                .run_benchmark(&benchmark, &items, &pool, &cfg, &variant)
                .await?;
            println!("baseline {}: {:.2}", profile.name, outcome.run_score);
            baselines.push(outcome);
        }
    }
    let colm = harness
        .run_benchmark(&benchmark, &items, &pool, &cfg, &Variant::Colm)
        .await?;
    println!("collaboration: {:.2}", colm.run_score);

    let loo = if leave_one_out {
        let loo = harness
            .ablate_leave_one_out(&benchmark, &items, &pool, &cfg)
            .await?;
        for point in &loo.points {
            println!(
                "without {}: {:.2} (drop {:.2})",
                point.removed,
                point.outcome.run_score,
                loo.drop_for(&point.removed).unwrap_or(0.0)
            );
        }
        Some(loo)
    } else {
        None
    };
    let scale_points = if sweep_k.is_empty() {
        None
    } else {
        let points = harness
            .ablate_user_scale(&benchmark, &items, &pool, &cfg, sweep_k)
            .await?;
        for point in &points {
            println!("k={}: {:.2}", point.k, point.outcome.run_score);
        }
        Some(points)
    };
    let rounds_points = if sweep_rounds.is_empty() {
        None
    } else {
        let points = harness
            .ablate_rounds(&benchmark, &items, &pool, &cfg, sweep_rounds)
            .await?;
        for point in &points {
            println!("rounds={}: {:.2}", point.rounds, point.outcome.run_score);
        }
        Some(points)
    };

    let bundle = ReportBundle {
        benchmark: &benchmark,
        baselines: &baselines,
        colm: Some(&colm),
        leave_one_out: loo.as_ref(),
        user_scale: scale_points.as_deref(),
        rounds: rounds_points.as_deref(),
    };
    let written = emit_report(reports_dir, &colm.run_id, &bundle)?;
    for path in &written {
        println!("wrote {}", path.display());
    }

    let manifest = serde_json::json!({
        "benchmark": benchmark,
        "items": items.len(),
        "collaboration": {
            "run_id": colm.run_id,
            "run_score": colm.run_score,
            "aggregates": colm.aggregates,
        },
        "baselines": baselines
            .iter()
            .map(|b| {
                serde_json::json!({
                    "variant": b.variant.label(),
                    "run_id": b.run_id,
                    "run_score": b.run_score,
                })
            })
            .collect::<Vec<_>>(),
    });
    let store = Store::new(data_dir);
    let manifest_path = store.write_manifest(&colm.run_id, &manifest)?;
    println!("wrote {}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}

async fn replay(
    data_dir: &Path,
    transcript_id: &str,
    overrides_path: Option<&Path>,
) -> Result<ExitCode, CliError> {
    let store = Store::new(data_dir);
    let original = store.load_transcript(transcript_id)?;
    let overrides: BTreeMap<String, MockScript> = match overrides_path {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    let replayed = store.replay(transcript_id, &overrides).await?;
    let divergences = replay_divergences(&original, &replayed);
    if divergences.is_empty() {
        println!(
            "replay faithful: {} round(s), {} final answer(s)",
            replayed.completed_rounds(),
            replayed.finals.len()
        );
        return Ok(ExitCode::SUCCESS);
    }
    println!("divergences ({}):", divergences.len());
    for divergence in &divergences {
        println!("- {divergence}");
    }
    if overrides_path.is_none() {
        eprintln!("replay diverged from the stored transcript without overrides");
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    Ok(ExitCode::SUCCESS)
}
