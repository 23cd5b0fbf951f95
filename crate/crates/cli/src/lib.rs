//! Command-line front end: simulated runs, λ × seed grids, checkpoint
//! evaluation, and the human feedback service.

pub mod service;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use iters::envs::EnvKind;
use iters::eval::{evaluate, run_grid, ExperimentGrid};
use iters::orchestrator::{load_agent, run_iters, FeedbackMode, ItersConfig, RunOutcome, SimulatedUser};
use iters::rng::{stream, Stream};

use service::{HumanFeedback, RunInfo, Session};

#[derive(Debug, Parser)]
#[command(name = "iters", version, about = "Iterative reward shaping from explained trajectory feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with shaping for `n` iterations.
    Run(RunArgs),
    /// Run every (λ, seed) cell of an experiment grid with simulated feedback.
    Grid(GridArgs),
    /// Evaluate a saved agent checkpoint.
    Eval(EvalArgs),
    /// Run with human feedback collected over HTTP.
    Serve(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f32>,
    /// Number of iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sim` or `human`.
    #[arg(long)]
    pub feedback: Option<String>,
    /// `full` or `desk`.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Port for the feedback service in human mode.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Record real per-iteration timings in metrics.csv.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated λ values; defaults to the environment's standard set.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lambdas: Option<Vec<f32>>,
    /// Comma-separated seeds; defaults to 0,1,2.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Directory for CSV output and per-cell checkpoints.
    #[arg(long, default_value = "grid_out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// An `agent.ckpt` file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Builds the run configuration: file values, then flag overrides, then
/// environment-specific defaults for anything still unset.
pub fn build_config(args: &ConfigArgs) -> Result<ItersConfig> {
    let mut obj = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))? {
                Value::Object(m) => m,
                _ => bail!("invalid config field `config`: {} is not a JSON object", path.display()),
            }
        }
        None => Map::new(),
    };
    if let Some(env) = &args.env {
        let kind: EnvKind = env.parse()?;
        obj.insert("env".into(), json!(kind));
    }
    if let Some(scale) = &args.scale {
        let scale: iters::orchestrator::Scale = scale.parse()?;
        obj.insert("scale".into(), json!(scale));
    }
    if let Some(lambda) = args.lambda {
        obj.insert("lambda".into(), json!(lambda));
    }
    if let Some(n) = args.iters {
        obj.insert("n".into(), json!(n));
    }
    if let Some(seed) = args.seed {
        obj.insert("seeds".into(), json!([seed]));
    }
    if let Some(mode) = &args.feedback {
        let mode: FeedbackMode = mode.parse()?;
        obj.insert("feedback_mode".into(), json!(mode));
    }
    if let Some(dir) = &args.run_dir {
        obj.insert("run_dir".into(), json!(dir));
    }
    let cfg = ItersConfig::from_json(&Value::Object(obj).to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(cfg: &ItersConfig, seed: u64) -> Option<PathBuf> {
    cfg.run_dir.as_ref().map(|d| {
        if cfg.seeds.len() == 1 {
            d.clone()
        } else {
            d.join(format!("seed_{seed}"))
        }
    })
}

fn outcome_summary(seed: u64, out: &RunOutcome) -> Value {
    json!({
        "seed": seed,
        "iterations": out.records.len(),
        "final": out.records.last(),
        "buffer_entries": out.buffer.len(),
    })
}

fn run_simulated(cfg: &ItersConfig) -> Result<Value> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut c = cfg.clone();
        c.run_dir = seed_dir(cfg, seed);
        let out = run_iters(&c, seed, &mut SimulatedUser::new(seed), None)?;
        runs.push(outcome_summary(seed, &out));
    }
    Ok(json!({ "command": "run", "env": cfg.env, "lambda": cfg.lambda, "runs": runs }))
}

/// Runs the loop on a worker thread and serves the feedback API until the
/// run ends, then keeps serving status until interrupted.
fn run_human(cfg: &ItersConfig, port: u16) -> Result<Value> {
    let seed = cfg.seeds[0];
    let session = Session::new(RunInfo {
        env: cfg.env,
        l: cfg.l,
        n: cfg.n,
        lambda: cfg.lambda,
        seed,
    });
    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(("0.0.0.0", port)))
        .with_context(|| format!("binding port {port}"))?;
    log::info!("feedback service listening on port {port}");
    let app = service::router(session.clone());
    rt.spawn(async move { axum::serve(listener, app).await });

    let mut run_cfg = cfg.clone();
    run_cfg.run_dir = seed_dir(cfg, seed);
    let worker_session = session.clone();
    let worker = std::thread::spawn(move || {
        let mut source = HumanFeedback::new(worker_session.clone());
        let out = run_iters(&run_cfg, seed, &mut source, None);
        if let Err(e) = &out {
            worker_session.fail(e.to_string());
        }
        out
    });
    let out = worker.join().map_err(|_| anyhow::anyhow!("training thread panicked"))??;
    let summary = json!({ "command": "serve", "env": cfg.env, "runs": [outcome_summary(seed, &out)] });
    println!("{summary}");
    log::info!("run finished; status stays available until interrupted");
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    // already printed
    Ok(Value::Null)
}

fn run_command(args: &RunArgs, force_human: bool) -> Result<Value> {
    let mut cfg = build_config(&args.cfg)?;
    cfg.resume = args.resume;
    cfg.record_wall_clock = args.wall_clock;
    if force_human {
        cfg.feedback_mode = FeedbackMode::Human;
    }
    cfg.validate()?;
    match cfg.feedback_mode {
        FeedbackMode::Simulated => run_simulated(&cfg),
        FeedbackMode::Human => run_human(&cfg, args.port),
    }
}

fn grid_command(args: &GridArgs) -> Result<Value> {
    let cfg = build_config(&args.cfg)?;
    let mut grid = ExperimentGrid::standard(cfg);
    if let Some(l) = &args.lambdas {
        grid.lambdas = l.clone();
    }
    if let Some(s) = &args.seeds {
        grid.seeds = s.clone();
    }
    let report = run_grid(&grid, Some(&args.out))?;
    let failed = report.cells.iter().filter(|c| c.outcome.is_err()).count();
    Ok(json!({
        "command": "grid",
        "env": grid.env,
        "cells": report.cells.len(),
        "failed": failed,
        "feedback": report.feedback,
        "out": args.out,
    }))
}

fn eval_command(args: &EvalArgs) -> Result<Value> {
    if args.episodes == 0 {
        bail!("invalid config field `episodes`: must be at least 1");
    }
    let agent = load_agent(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let stats = evaluate(&agent, args.episodes, &mut stream(args.seed, Stream::Eval))?;
    Ok(json!({ "command": "eval", "env": agent.kind(), "checkpoint": args.checkpoint, "stats": stats }))
}

/// Executes a parsed command and returns its one-line JSON summary (`Null`
/// when the command printed it itself).
pub fn dispatch(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Run(a) => run_command(a, false),
        Command::Serve(a) => run_command(a, true),
        Command::Grid(a) => grid_command(a),
        Command::Eval(a) => eval_command(a),
    }
}
