use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use capsule_attn::checks::{self, Scope};
use capsule_attn::model::{ModelConfig, PlacementMap, Site};
use capsule_attn::routing::RoutingKind;
use capsule_attn::sweep::{self, Status, SweepKind};
use capsule_attn::task::TaskKind;
use capsule_attn::trace_export;
use capsule_attn::train::{self, RunConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capsattn", version, about = "Capsule-routed multi-head attention on toy sequence tasks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write metrics, config and checkpoints.
    Train(TrainArgs),
    /// Finite-difference gradient check in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Dump the routing state at one capsule site for one input.
    Trace(TraceArgs),
    /// Train a grid of placements or capsule counts.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// dynamic, em or none.
    #[arg(long, default_value = "dynamic")]
    routing: String,
    /// Comma-separated capsule sites such as ed2,dec2 (default: last layer ED and Dec).
    #[arg(long)]
    placement: Option<String>,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 4)]
    capsules: usize,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 128)]
    capsule_ffn: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value = "copy")]
    task: String,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    /// Longest task sequence.
    #[arg(long, default_value_t = 12)]
    task_max_len: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    #[arg(long, default_value_t = 400)]
    warmup: u64,
    #[arg(long, default_value_t = 0.0)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 100)]
    eval_every: u64,
    #[arg(long)]
    eval_size: Option<usize>,
    /// 0 keeps only the final checkpoint.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Stop once held-out token accuracy reaches this value.
    #[arg(long)]
    stop_at_acc: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Take every setting from this config file instead of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// squash, attention, dynamic_route, em_route, capsule_layer, full or all.
    #[arg(long, default_value = "full")]
    scope: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Capsule site, e.g. dec2.
    #[arg(long)]
    site: String,
    /// Space-separated source token ids.
    #[arg(long)]
    input: String,
    /// Decoder prefix; defaults to the model's greedy output.
    #[arg(long)]
    target: Option<String>,
    /// Run config; defaults to config.txt next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// placement or capsule_count.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value = "1", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Semicolon-separated variants: placements such as "ed6,dec6;enc1" or capsule counts such as "2;8".
    #[arg(long)]
    variants: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value = "sweep_out")]
    out: PathBuf,
}

fn parse_routing(s: &str) -> Result<Option<RoutingKind>> {
    Ok(match s {
        "none" => None,
        k => Some(k.parse()?),
    })
}

fn model_config(a: &ModelArgs) -> Result<ModelConfig> {
    let placement = match &a.placement {
        Some(p) => PlacementMap::parse(p)?,
        None => PlacementMap::last_layer(a.depth),
    };
    Ok(ModelConfig {
        src_vocab: a.vocab,
        tgt_vocab: a.vocab,
        d_model: a.d_model,
        heads: a.heads,
        depth: a.depth,
        d_ff: a.d_ff,
        max_len: a.max_len,
        routing: parse_routing(&a.routing)?,
        capsules: a.capsules,
        iterations: a.iters,
        capsule_ffn: a.capsule_ffn,
        placement,
        em_lambda: None,
        variance_floor: None,
    })
}

fn train_config(a: &ScheduleArgs, seed: u64, defaults: &TrainConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        task: a.task.parse::<TaskKind>()?,
        min_len: a.min_len,
        max_len: a.task_max_len,
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        steps: a.steps.unwrap_or(defaults.steps),
        seed,
        lr_scale: a.lr_scale,
        warmup: a.warmup,
        label_smoothing: a.label_smoothing,
        eval_every: a.eval_every,
        eval_size: a.eval_size.unwrap_or(defaults.eval_size),
        checkpoint_every: a.checkpoint_every.unwrap_or(defaults.checkpoint_every),
        stop_at_acc: a.stop_at_acc,
    })
}

fn tokens(s: &str) -> Result<Vec<usize>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().with_context(|| format!("bad token id '{t}'")))
        .collect()
}

fn cmd_train(a: &TrainArgs) -> Result<bool> {
    let run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            model: model_config(&a.model)?,
            train: train_config(&a.schedule, a.seed, &TrainConfig::default())?,
        },
    };
    run.validate()?;
    println!("{}", train::METRICS_HEADER);
    let summary = train::train(&run, &a.out, a.resume.as_deref(), |row| println!("{}", row.to_csv()))?;
    eprintln!(
        "trained {} steps in {:.1}s ({} parameters); final token_acc {:.4}, seq_acc {:.4}",
        summary.steps, summary.wall_secs, summary.num_params, summary.last.token_acc, summary.last.seq_acc
    );
    if let Some(s) = summary.reached_at {
        eprintln!("token accuracy target reached at step {s}");
    }
    Ok(true)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let scopes: Vec<Scope> = if a.scope == "all" { Scope::ALL.to_vec() } else { vec![a.scope.parse()?] };
    let mut ok = true;
    println!("scope,block,checked,max_rel_err,status");
    for scope in scopes {
        let report = checks::run(scope, a.seed)?;
        for b in &report.blocks {
            let pass = b.max_rel_err < checks::TOLERANCE;
            ok &= pass;
            println!(
                "{scope},{},{},{:.3e},{}",
                b.name,
                b.checked,
                b.max_rel_err,
                if pass { "ok" } else { "FAIL" }
            );
        }
        eprintln!("{scope}: max relative error {:.3e} over {} blocks", report.max_rel_err(), report.blocks.len());
    }
    if !ok {
        eprintln!("gradient check failed: some block exceeds {:e}", checks::TOLERANCE);
    }
    Ok(ok)
}

fn cmd_trace(a: &TraceArgs) -> Result<bool> {
    let model = train::load_model(&a.ckpt, a.config.as_deref())?;
    let site: Site = a.site.parse()?;
    model.check_site(site)?;
    let src = tokens(&a.input)?;
    let tgt = match &a.target {
        Some(t) => tokens(t)?,
        None => model.greedy_decode(&src, model.config.max_len - 1)?,
    };
    let trace = model.trace(site, &src, &tgt)?;
    let rows = trace_export::trace_rows(&trace, &site.to_string())?;
    match &a.out {
        Some(p) => trace_export::write_jsonl(io::BufWriter::new(fs::File::create(p)?), &rows)?,
        None => trace_export::write_jsonl(io::stdout().lock(), &rows)?,
    }
    eprintln!(
        "{} rows: {} iterations x {} positions; decoder prefix [{}]",
        rows.len(),
        trace.iterations.len(),
        trace.positions(),
        tgt.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    );
    Ok(true)
}

fn cmd_sweep(a: &SweepArgs) -> Result<bool> {
    let kind: SweepKind = a.kind.parse()?;
    if a.seeds.is_empty() {
        bail!("--seeds is empty");
    }
    let defaults = TrainConfig {
        steps: 500,
        batch_size: 16,
        eval_size: 128,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let schedule = train_config(&a.schedule, a.seeds[0], &defaults)?;
    let base = RunConfig {
        model: model_config(&a.model)?,
        train: schedule,
    };
    let requested: Vec<String> = a
        .variants
        .as_deref()
        .map(|v| v.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    let plan = sweep::plan(kind, &base, &requested);
    for s in &plan.skipped {
        eprintln!("warning: skipping variant '{}': {}", s.name, s.reason);
    }
    println!("{}", sweep::TABLE_HEADER);
    let rows = sweep::run(&plan, &a.seeds, &a.out, |r| {
        println!("{}", r.to_csv());
        let _ = io::stdout().flush();
    })?;
    let failed = rows.iter().filter(|r| matches!(r.status, Status::Failed(_))).count();
    eprintln!(
        "{} variants, {} skipped, {failed} failed; table in {}",
        rows.len(),
        plan.skipped.len(),
        a.out.join("sweep.csv").display()
    );
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Trace(a) => cmd_trace(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
