//! Operator commands.

use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use craftloop::par::Exec;
use craftloop::parser::{ExemplarRecord, ParserModel};
use craftloop::pipeline::{honest_pool, read_lines, run_loop, vision_accuracy, write_lines, DatasetRegistry, LoopConfig, LoopState};
use craftloop::vision::scene::{bootstrap, SceneConfig};
use craftloop::vision::{SegModel, VisionRecord};
use craftloop::worker::{parse_profiles, WorkerProfile, WorkerRegistry};

use crate::{router, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "craftloop", version, about = "Run the interactive-learning loop, generate data, evaluate models, or serve sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run loop iterations and write the registry, reports and models.
    RunLoop(RunLoopArgs),
    /// Generate rule-based segmentation examples as JSON lines.
    GenVisionData(GenVisionArgs),
    /// Exact-match accuracy of a parser, or segmentation accuracy of a vision model.
    Eval(EvalArgs),
    /// Serve the session API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunLoopArgs {
    #[arg(long, default_value_t = 10)]
    pub iterations: u32,
    #[arg(long, default_value_t = 30)]
    pub sessions: usize,
    /// Worker profiles, one JSON object per line. Defaults to ten honest workers.
    #[arg(long)]
    pub workers: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Deploy the latest re-biased parser from this iteration on.
    #[arg(long)]
    pub redeploy_from: Option<u32>,
    /// Output directory; must not exist yet or be empty.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenVisionArgs {
    /// Number of scenes; each yields one positive per object and up to three negatives.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Parser checkpoint (JSON lines) or vision model (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// `nlu_*.jsonl` or `vision_*.jsonl` from a registry tranche.
    #[arg(long)]
    pub testset: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub workers: Option<PathBuf>,
    /// Existing registry; without one a fresh tranche 0 is generated.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Parser checkpoint to deploy; defaults to one trained on tranche 0.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn load_workers(path: Option<&Path>, seed: u64) -> anyhow::Result<Vec<WorkerProfile>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let profiles = parse_profiles(&text).context("parsing worker profiles")?;
            if let Some(bad) = profiles.iter().find(|w| !w.is_valid()) {
                bail!("worker {} has rates outside [0, 1]", bad.id);
            }
            Ok(profiles)
        }
        None => Ok(honest_pool(10, seed)),
    }
}

pub fn run_loop_cmd(args: &RunLoopArgs) -> anyhow::Result<String> {
    if args.out.exists() && fs::read_dir(&args.out)?.next().is_some() {
        bail!("{} is not empty", args.out.display());
    }
    fs::create_dir_all(&args.out)?;
    let workers = load_workers(args.workers.as_deref(), args.seed)?;
    let config = LoopConfig { sessions: args.sessions, seed: args.seed, redeploy_from: args.redeploy_from, ..LoopConfig::default() };
    let outcome = run_loop(&config, workers, args.iterations, Some(&args.out))?;
    let mut summary = String::from("iteration\tdeployed\tcommands\ttranche\tbaseline_Tn\tepisode_Tn\n");
    for r in &outcome.reports {
        let acc = |m: &str| r.accuracy(m, "T_n").map_or("NA".to_string(), |a| format!("{a:.3}"));
        summary += &format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.iteration, r.deployed, r.commands, r.tranche_nlu.iter().sum::<usize>(), acc("baseline"), acc("episode"));
    }
    Ok(summary)
}

pub fn gen_vision_cmd(args: &GenVisionArgs) -> anyhow::Result<usize> {
    let examples = bootstrap(&SceneConfig::default(), args.n, args.seed);
    write_lines(&args.out, examples.iter().map(|e| e.to_record()))?;
    Ok(examples.len())
}

pub fn eval_cmd(args: &EvalArgs) -> anyhow::Result<serde_json::Value> {
    let text = fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    if let Ok(seg) = SegModel::from_json(&text) {
        let records: Vec<VisionRecord> = read_lines(&args.testset)?;
        let data = records.iter().map(|r| r.to_example()).collect::<Result<Vec<_>, _>>()?;
        let acc = vision_accuracy(&seg, &data, Exec::default());
        return Ok(json!({ "task": "vision", "size": data.len(), "accuracy": acc }));
    }
    let model = ParserModel::load(BufReader::new(text.as_bytes())).context("model is neither a parser checkpoint nor a vision model")?;
    let records: Vec<ExemplarRecord> = read_lines(&args.testset)?;
    let pairs = records.iter().map(|r| r.to_pair()).collect::<Result<Vec<_>, _>>()?;
    let acc = model.evaluate(&pairs, Exec::default());
    Ok(json!({ "task": "nlu", "size": pairs.len(), "accuracy": acc }))
}

/// Build the service state the `serve` command runs with.
pub fn serve_state(args: &ServeArgs) -> anyhow::Result<AppState> {
    let profiles = load_workers(args.workers.as_deref(), args.seed)?;
    let mut workers = WorkerRegistry::default();
    for p in profiles {
        workers.add(p, true);
    }
    let registry = match &args.registry {
        Some(dir) => DatasetRegistry::load(dir)?,
        None => {
            let config = LoopConfig { seed: args.seed, ..LoopConfig::default() };
            LoopState::bootstrap(&config, Vec::new(), DatasetRegistry::in_memory())?.registry
        }
    };
    if registry.is_empty() {
        bail!("registry has no tranche 0");
    }
    let parser = match &args.model {
        Some(p) => Some(ParserModel::load(BufReader::new(fs::File::open(p)?))?),
        None => None,
    };
    AppState::new(ServiceConfig { seed: args.seed, ..ServiceConfig::default() }, registry, workers, parser, None)
}

pub async fn serve_cmd(args: &ServeArgs) -> anyhow::Result<()> {
    let app = router(serve_state(args)?);
    let addr = SocketAddr::from(([0, 0, 0, 0], args.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
