mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cwm_core::evaluation::{
    append_results, evaluate_condition, message_traces, read_results, rsa_by_source, write_traces, EvalConfig,
    ResultRow,
};
use cwm_core::metrics::rsa_score;
use cwm_core::plan::{ordering_checks, run_plan, train_to_dir, ExperimentPlan};
use cwm_core::runtime::CommConfig;
use cwm_core::training::{Checkpoint, Condition, TrainingConfig};
use cwm_core::{environment, io, Bins, Dataset, EnvConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "cwm", version, about = "Decentralized world models that learn to communicate")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset.
    GenData(GenData),
    /// Train one condition on a dataset.
    Train(Train),
    /// Evaluate a checkpoint, or check orderings over a results table.
    Eval(Eval),
    /// Message/position similarity of a checkpoint on held-out episodes.
    AnalyzeRsa(AnalyzeRsa),
    /// Render figures from a results table and optional message traces.
    Plot(Plot),
    /// Run a full experiment sweep.
    RunPlan(RunPlan),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(short, long, env = "CWM_OUTPUT_ROOT")]
    output: PathBuf,
}

#[derive(Args)]
struct GenData {
    /// Quantization bins for the secondary axis (`inf` or a positive integer).
    #[arg(long, default_value = "inf")]
    bins: Bins,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    noise_std: f64,
    #[arg(long, default_value_t = 0.1)]
    action_limit: f64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    condition: Condition,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 500)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.01)]
    w_kld: f64,
    #[arg(long, default_value_t = 0.005)]
    w_nce: f64,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 100.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint directory (the `checkpoint` folder written by `train`).
    #[arg(long, required_unless_present = "assert_ordering")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum, default_value = "on")]
    communication: Switch,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out episodes for the similarity analysis (0 skips it).
    #[arg(long, default_value_t = 100)]
    test_episodes: usize,
    /// Results table to append the summary row to.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Directory for the summary file.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Check the qualitative orderings over `--results` instead of
    /// evaluating; exits with status 3 when any check fails.
    #[arg(long, requires = "results", conflicts_with = "checkpoint")]
    assert_ordering: bool,
}

#[derive(Args)]
struct AnalyzeRsa {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out dataset directory; generated from the checkpoint's
    /// environment when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    test_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    results: PathBuf,
    /// Message trace table written by `analyze-rsa`.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Figure file format.
    #[arg(long, default_value = "svg")]
    format: String,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct RunPlan {
    /// Plan file; defaults to the full sweep unless `--scaled` is given.
    #[arg(long, conflicts_with = "scaled")]
    plan: Option<PathBuf>,
    /// Desk-scale preset.
    #[arg(long)]
    scaled: bool,
    /// Write the resolved plan to this file and exit.
    #[arg(long)]
    write_plan: Option<PathBuf>,
    /// Output root; overrides the plan's.
    #[arg(short, long, env = "CWM_OUTPUT_ROOT")]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AnalyzeRsa(a) => analyze_rsa(a),
        Command::Plot(a) => plot_cmd(a),
        Command::RunPlan(a) => run_plan_cmd(a),
    }
}

fn gen_data(a: GenData) -> Result<u8> {
    let cfg = EnvConfig {
        bins: a.bins,
        noise_std: a.noise_std,
        episode_length: a.steps,
        action_limit: a.action_limit,
        seed: a.seed,
        ..EnvConfig::default()
    };
    let ds = environment::generate_dataset(&cfg, a.episodes)?;
    ds.save(&a.out.output)?;
    println!(
        "wrote {} episodes of {} steps to {}",
        ds.episodes.len(),
        ds.steps(),
        a.out.output.display()
    );
    Ok(0)
}

fn train(a: Train) -> Result<u8> {
    let ds = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let cfg = TrainingConfig {
        w_kld: a.w_kld,
        w_nce: a.w_nce,
        tau: a.tau,
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        grad_clip: a.grad_clip,
        condition: a.condition,
        seed: a.seed,
    };
    train_to_dir(&ds, &cfg, &a.out.output)?;
    println!("checkpoint written to {}", a.out.output.join("checkpoint").display());
    Ok(0)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint<f32>> {
    // Accept either the checkpoint folder or the training output directory.
    let dir = if dir.join("manifest.toml").exists() {
        dir.to_path_buf()
    } else {
        dir.join("checkpoint")
    };
    Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn eval(a: Eval) -> Result<u8> {
    if a.assert_ordering {
        let path = a.results.expect("clap enforces --results");
        let rows = read_results(&path).with_context(|| format!("reading {}", path.display()))?;
        let checks = ordering_checks(&rows);
        for c in &checks {
            println!("[{}] {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
        }
        return Ok(if checks.iter().all(|c| c.passed) { 0 } else { EXIT_CHECK_FAILED });
    }
    let ckpt = load_checkpoint(a.checkpoint.as_deref().expect("clap enforces --checkpoint"))?;
    let cfg = EvalConfig {
        n_trials: a.trials,
        comm: CommConfig {
            window: a.window,
            communication: matches!(a.communication, Switch::On),
            w_kld: ckpt.training.w_kld,
        },
        seed: a.seed,
        n_test_episodes: a.test_episodes,
    };
    let env = ckpt.env.clone();
    let summary = evaluate_condition(&ckpt, &env, &cfg)?;
    let text = toml::to_string_pretty(&summary)?;
    print!("{text}");
    if let Some(dir) = &a.output {
        io::ensure_dir(dir)?;
        let name = if summary.communication { "summary_on.toml" } else { "summary_off.toml" };
        io::write_toml(&dir.join(name), &summary)?;
        io::write_toml(&dir.join("eval_config.toml"), &cfg)?;
    }
    if let Some(path) = &a.results {
        append_results(path, &[ResultRow::from(&summary)])?;
    }
    Ok(0)
}

fn analyze_rsa(a: AnalyzeRsa) -> Result<u8> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let test = match &a.data {
        Some(dir) => Dataset::load(dir)?,
        None => cwm_core::evaluation::test_dataset(&ckpt.env, a.test_episodes, a.seed)?,
    };
    let traces = message_traces(&ckpt.models, &test.episodes, a.seed)?;
    let out = &a.out.output;
    io::ensure_dir(out)?;
    let mut w = csv_writer(&out.join("rsa.csv"))?;
    w.write_record(["source", "episode", "spearman_rho", "n_pairs"])?;
    for t in &traces {
        match rsa_score(&t.means, &test.episodes[t.episode].truth) {
            Ok(r) => w.write_record([
                t.source.clone(),
                t.episode.to_string(),
                r.spearman_rho.to_string(),
                r.n_pairs.to_string(),
            ])?,
            Err(cwm_core::Error::MetricUndefined(msg)) => log::warn!("{} episode {}: {msg}", t.source, t.episode),
            Err(e) => return Err(e.into()),
        }
    }
    w.flush()?;
    write_traces(&out.join("traces.csv"), &traces, &test.episodes)?;
    for r in rsa_by_source(&traces, &test.episodes)? {
        println!("{}: mean rho {:.4} ({} undefined)", r.source, r.rho, r.undefined);
    }
    Ok(0)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn plot_cmd(a: Plot) -> Result<u8> {
    if a.format != "svg" {
        bail!("unsupported figure format `{}` (available: svg)", a.format);
    }
    let rows = read_results(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    io::ensure_dir(&a.out.output)?;
    let mut written = plot::results_figures(&rows, &a.out.output)?;
    if let Some(path) = &a.traces {
        let points = cwm_core::evaluation::read_traces(path)?;
        written.extend(plot::trace_figures(&points, &a.out.output)?);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(0)
}

fn run_plan_cmd(a: RunPlan) -> Result<u8> {
    let mut plan = match (&a.plan, a.scaled) {
        (Some(path), _) => ExperimentPlan::load(path)?,
        (None, true) => ExperimentPlan::scaled(PathBuf::from("runs/scaled")),
        (None, false) => ExperimentPlan::full(PathBuf::from("runs/full")),
    };
    if let Some(out) = a.output {
        plan.output_root = out;
    }
    plan.validate()?;
    if let Some(path) = a.write_plan {
        plan.save(&path)?;
        println!("plan written to {}", path.display());
        return Ok(0);
    }
    let summaries = run_plan(&plan)?;
    println!("{} evaluations; results in {}", summaries.len(), plan.results_path().display());
    let rows = read_results(&plan.results_path())?;
    for c in ordering_checks(&rows) {
        println!("[{}] {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
    }
    Ok(0)
}
