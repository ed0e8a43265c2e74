use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mlselect_core::cover::{
    max_threshold_for_size_with, min_set_for_threshold_with, AffinityMatrix, CoverError,
    CoverStatus, SecondaryObjective,
};
use mlselect_core::env::{
    baseline_policy, run_episode, FloorPlan, EnvError, Policy, SoftmaxAgent, Task, TaskConfig,
    BASELINE_POLICIES,
};
use mlselect_core::rl::TrainingConfig;
use mlselect_core::stats::{format_episodes, parse_episodes, EpisodeRecord, StatsError};
use mlselect_core::transfer::{
    min_delta_schedule, solve_transfer, ObjectiveMode, TransferError, TransferProblem,
    TransferStatus,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    analyze_p_values, analyze_records, format_tables, parse_p_value_list, render_relative_rewards,
    render_tables, AnalysisError, AnalyzeOptions,
};
use crate::manifest::RunManifest;
use crate::report::{load_report_input, render};
use crate::settings::Settings;
use crate::train::{train, PolicyFile, TrainError};
use crate::{
    AnalyzeArgs, Cli, CliError, Command, ReportArgs, SelectArgs, SimulateArgs, TrainArgs,
    TransferArgs,
};

pub const DEFAULT_Q: f64 = 0.2;
pub const DEFAULT_BASELINE: &str = "scratch";
pub const DEFAULT_ALPHAS: &str = "0.05,0.01,0.001";
pub const DEFAULT_BLIND: &str = "blind";

/// Output directory plus the manifest being assembled for this run.
struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            manifest: RunManifest::new(command, out),
        }
    }

    fn read(&mut self, path: &Path) -> Result<String, CliError> {
        self.manifest.input(path);
        fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))?;
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.manifest.outputs.push(name.to_string());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).context("cannot serialize output")?;
        self.write(name, &(text + "\n"))
    }

    fn finish(mut self, settings: &Settings) -> Result<(), CliError> {
        self.manifest.config_file = settings.path().map(|p| p.display().to_string());
        self.manifest.overrides = settings.applied().clone();
        let manifest = self.manifest.clone();
        self.write_json("manifest.json", &manifest)?;
        Ok(())
    }
}

fn path_setting(settings: &mut Settings, flag: &Option<PathBuf>, key: &str) -> Result<Option<PathBuf>, CliError> {
    Ok(settings
        .value(flag.as_ref().map(|p| p.display().to_string()), key)?
        .map(PathBuf::from))
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Select(args) => cmd_select(args, &cli.out, &mut settings),
        Command::TransferSelect(args) => cmd_transfer_select(args, &cli.out, &mut settings),
        Command::Analyze(args) => cmd_analyze(args, &cli.out, &mut settings),
        Command::Simulate(args) => cmd_simulate(args, &cli.out, &mut settings),
        Command::Train(args) => cmd_train(args, &cli.out, &mut settings),
        Command::Report(args) => cmd_report(args, &cli.out, &mut settings),
    }
}

fn cover_error(path: &Path, e: CoverError) -> CliError {
    match e {
        CoverError::Parse { line, message } => CliError::Input(format!("{}:{line}: {message}", path.display())),
        CoverError::Matrix(m) => CliError::Input(format!("{}: {m}", path.display())),
        CoverError::Input(m) => CliError::Usage(m),
        CoverError::Program(e) => CliError::Io(e.into()),
    }
}

pub fn cmd_select(args: &SelectArgs, out: &Path, settings: &mut Settings) -> Result<String, CliError> {
    let path = path_setting(settings, &args.affinities, "affinities")?
        .ok_or_else(|| CliError::Usage("--affinities is required".into()))?;
    let k = settings.value(args.k, "k")?;
    let delta = settings.value(args.delta, "delta")?;
    let objective = settings.value(args.objective.clone(), "objective")?;
    settings.finish()?;
    let secondary = match objective.as_deref().unwrap_or("min_size") {
        "min_size" => SecondaryObjective::None,
        "max_perf" => SecondaryObjective::MaxMeanAffinity,
        other => {
            return Err(CliError::Usage(format!(
                "unknown objective {other:?}; expected min_size or max_perf"
            )))
        }
    };

    let mut run = Run::new("select", out);
    let text = run.read(&path)?;
    let matrix = AffinityMatrix::parse(&text).map_err(|e| cover_error(&path, e))?;
    let solution = match (k, delta) {
        (Some(k), None) => max_threshold_for_size_with(&matrix, k, secondary),
        (None, Some(d)) => min_set_for_threshold_with(&matrix, d, secondary),
        _ => return Err(CliError::Usage("give exactly one of --k and --delta".into())),
    }
    .map_err(|e| cover_error(&path, e))?;
    let report = solution.report(&matrix);
    run.write_json("selection.json", &report)?;
    run.finish(settings)?;
    match report.status {
        CoverStatus::Feasible => Ok(format!("{report}\n")),
        CoverStatus::Infeasible => Err(CliError::Infeasible(format!(
            "no feature set reaches delta = {}",
            delta.unwrap_or(solution.threshold_delta)
        ))),
        CoverStatus::Empty => Err(CliError::Infeasible("the affinity matrix has no features".into())),
    }
}

fn transfer_error(path: &Path, e: TransferError) -> CliError {
    match e {
        TransferError::Json(e) => CliError::Input(format!("{}:{}: {e}", path.display(), e.line())),
        TransferError::Invalid(m) => CliError::Input(format!("{}: {m}", path.display())),
        TransferError::Program(e) => CliError::Io(e.into()),
    }
}

pub fn cmd_transfer_select(args: &TransferArgs, out: &Path, settings: &mut Settings) -> Result<String, CliError> {
    let path = path_setting(settings, &args.problem, "problem")?
        .ok_or_else(|| CliError::Usage("--problem is required".into()))?;
    let budget = settings.value(args.budget, "budget")?;
    let objective = settings.value(args.objective.clone(), "objective")?;
    settings.finish()?;

    let mut run = Run::new("transfer-select", out);
    let text = run.read(&path)?;
    let mut problem = TransferProblem::from_json(&text).map_err(|e| transfer_error(&path, e))?;
    match objective.as_deref() {
        None => {}
        Some("min_size") => problem.objective_mode = ObjectiveMode::MinSize,
        Some("max_perf") => problem.objective_mode = ObjectiveMode::MaxPerformance,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown objective {other:?}; expected min_size or max_perf"
            )))
        }
    }
    let solution = match budget {
        Some(b) => min_delta_schedule(&problem, b),
        None => solve_transfer(&problem),
    }
    .map_err(|e| transfer_error(&path, e))?;
    let report = solution.report(&problem);
    run.write_json("transfer.json", &report)?;
    run.finish(settings)?;
    if report.status == TransferStatus::Infeasible {
        return Err(CliError::Infeasible(format!(
            "no transfer subgraph is feasible at delta = {}",
            report.delta
        )));
    }
    let mut msg = String::new();
    for e in &report.transfers {
        let _ = writeln!(msg, "{} -> {}  (p = {})", e.sources.join(" + "), e.target, e.performance);
    }
    let _ = writeln!(msg, "active features: {}", report.active_features.join(", "));
    let _ = writeln!(
        msg,
        "objective = {}  delta = {}  (solver calls: {})",
        report.objective_value, report.delta, report.solver_calls
    );
    Ok(msg)
}

fn parse_alphas(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("significance level {a:?} is not a number")))
        })
        .collect()
}

fn parse_r_min(text: &str) -> Result<BTreeMap<String, f64>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (task, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected task=value, found {pair:?}")))?;
            let value = value
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("reward floor {value:?} is not a number")))?;
            Ok((task.trim().to_string(), value))
        })
        .collect()
}

fn analysis_error(path: &Path, e: AnalysisError) -> CliError {
    match e {
        AnalysisError::Parse { line, message } | AnalysisError::Stats(StatsError::Parse { line, message }) => {
            CliError::Input(format!("{}:{line}: {message}", path.display()))
        }
        e @ AnalysisError::MissingBaseline { .. } => CliError::Usage(e.to_string()),
        AnalysisError::Stats(e) => CliError::Usage(e.to_string()),
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &Path, settings: &mut Settings) -> Result<String, CliError> {
    let episodes = path_setting(settings, &args.episodes, "episodes")?;
    let p_values = path_setting(settings, &args.p_values, "p_values")?;
    let q = settings.value(args.q, "q")?.unwrap_or(DEFAULT_Q);
    let baseline = settings
        .value(args.baseline.clone(), "baseline")?
        .unwrap_or_else(|| DEFAULT_BASELINE.to_string());
    let alpha = settings
        .value(args.alpha.clone(), "alpha")?
        .unwrap_or_else(|| DEFAULT_ALPHAS.to_string());
    let blind = settings
        .value(args.blind.clone(), "blind")?
        .unwrap_or_else(|| DEFAULT_BLIND.to_string());
    let r_min = settings.value(args.r_min.clone(), "r_min")?.unwrap_or_default();
    let task = settings
        .value(args.task.clone(), "task")?
        .unwrap_or_else(|| "p-values".to_string());
    settings.finish()?;

    let mut run = Run::new("analyze", out);
    let analysis = match (episodes, p_values) {
        (Some(path), None) => {
            let text = run.read(&path)?;
            let records = parse_episodes(&text)
                .map_err(|e| analysis_error(&path, AnalysisError::Stats(e)))?;
            let options = AnalyzeOptions {
                q,
                baseline,
                alpha_levels: parse_alphas(&alpha)?,
                blind,
                r_min: parse_r_min(&r_min)?,
            };
            analyze_records(&records, &options).map_err(|e| analysis_error(&path, e))?
        }
        (None, Some(path)) => {
            let text = run.read(&path)?;
            let entries = parse_p_value_list(&text).map_err(|e| analysis_error(&path, e))?;
            analyze_p_values(&entries, q, &task).map_err(|e| analysis_error(&path, e))?
        }
        _ => return Err(CliError::Usage("give exactly one of --episodes and --p-values".into())),
    };

    run.write_json("analysis.json", &analysis)?;
    run.write("significance.md", &format_tables(&analysis.tables))?;
    let mut msg = render_tables(&analysis.tables);
    let rr = render_relative_rewards(&analysis.relative_rewards);
    if !rr.is_empty() {
        msg.push_str(&rr);
        msg.push('\n');
    }
    if let Some(graph) = &analysis.graph {
        run.write("rank_reversal.dot", &graph.to_dot())?;
        let _ = writeln!(msg, "rank reversals: {}", graph.reversals.len());
        for r in &graph.reversals {
            let _ = writeln!(
                msg,
                "  {} > {} on {}; {} > {} on {}",
                r.first,
                r.second,
                r.first_wins_on.join(", "),
                r.second,
                r.first,
                r.second_wins_on.join(", ")
            );
        }
        let universal = if graph.universal.is_empty() {
            "none".to_string()
        } else {
            graph.universal.join(", ")
        };
        let _ = writeln!(msg, "universal: {universal}");
    }
    run.finish(settings)?;
    Ok(msg)
}

fn env_error(path: Option<&Path>, e: EnvError) -> CliError {
    let source = path.map_or("floor plan".to_string(), |p| p.display().to_string());
    match e {
        EnvError::Parse { line, message } => CliError::Input(format!("{source}:{line}: {message}")),
        EnvError::Json(e) => CliError::Input(format!("{source}:{}: {e}", e.line())),
        EnvError::Plan(m) => CliError::Input(format!("{source}: {m}")),
        EnvError::Config(m) => CliError::Usage(m),
        EnvError::Placement { .. } => CliError::Infeasible(e.to_string()),
        EnvError::Protocol(m) => CliError::Io(anyhow::anyhow!(m)),
    }
}

fn load_plan(run: &mut Run, path: Option<&Path>) -> Result<FloorPlan, CliError> {
    match path {
        Some(p) => {
            let text = run.read(p)?;
            FloorPlan::parse(&text).map_err(|e| env_error(Some(p), e))
        }
        None => FloorPlan::open(10, 10).map_err(|e| env_error(None, e)),
    }
}

fn parse_task(name: &str) -> Result<Task, CliError> {
    name.parse().map_err(|e: EnvError| CliError::Usage(e.to_string()))
}

/// Per-episode seeds drawn from one generator, so that results do not
/// depend on how episodes are spread over worker threads.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    (0..episodes).map(|_| rng.random()).collect()
}

fn load_policy(run: &mut Run, name: &str) -> Result<Box<dyn Policy>, CliError> {
    if let Ok(p) = baseline_policy(name) {
        return Ok(p);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "unknown policy {name:?}; registered policies: {} (or a trained policy file)",
            BASELINE_POLICIES.join(", ")
        )));
    }
    let text = run.read(path)?;
    let file: PolicyFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), e.line())))?;
    Ok(Box::new(SoftmaxAgent {
        name: path
            .file_stem()
            .map_or("trained".to_string(), |s| s.to_string_lossy().into_owned()),
        policy: file.policy,
    }))
}

pub fn cmd_simulate(args: &SimulateArgs, out: &Path, settings: &mut Settings) -> Result<String, CliError> {
    let task = parse_task(&settings.required(args.task.clone(), "task")?)?;
    let map = path_setting(settings, &args.map, "map")?;
    let policy_name = settings.required(args.policy.clone(), "policy")?;
    let episodes = settings.value(args.episodes, "episodes")?.unwrap_or(100);
    let seed = settings.value(args.seed, "seed")?.unwrap_or(0);
    let condition = settings.value(args.condition.clone(), "condition")?;
    settings.finish()?;

    let mut run = Run::new("simulate", out);
    run.manifest.seed = Some(seed);
    let plan = load_plan(&mut run, map.as_deref())?;
    let policy = load_policy(&mut run, &policy_name)?;
    let config = TaskConfig::new(task);
    let condition = condition.unwrap_or_else(|| policy.name().to_string());

    let records = episode_seeds(seed, episodes)
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            run_episode(&config, &plan, policy.as_ref(), s).map(|(_, r)| EpisodeRecord {
                condition: condition.clone(),
                seed: seed.to_string(),
                episode_index: i,
                ..r
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| env_error(map.as_deref(), e))?;

    let log_path = run.out.join("episodes.csv");
    if args.append && log_path.exists() {
        let existing = fs::read_to_string(&log_path)
            .with_context(|| format!("cannot read {}", log_path.display()))?;
        parse_episodes(&existing).map_err(|e| analysis_error(&log_path, AnalysisError::Stats(e)))?;
        let mut file = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .with_context(|| format!("cannot open {}", log_path.display()))?;
        file.write_all(format_episodes(&records, false).as_bytes())
            .with_context(|| format!("cannot append to {}", log_path.display()))?;
        run.manifest.outputs.push("episodes.csv".into());
    } else {
        run.write("episodes.csv", &format_episodes(&records, true))?;
    }
    run.finish(settings)?;

    let mean = records.iter().map(|r| r.reward).sum::<f64>() / records.len().max(1) as f64;
    Ok(format!(
        "{episodes} {} episodes with {condition}: mean reward {mean:.3}\nlog: {}\n",
        task,
        log_path.display()
    ))
}

/// Applies `key=value` pairs to the training or task configuration.
fn apply_setting(training: &mut TrainingConfig, task: &mut TaskConfig, key: &str, value: &str) -> Result<(), String> {
    if TrainingConfig::KEYS.contains(&key) {
        training.set(key, value)
    } else if TaskConfig::KEYS.contains(&key) {
        task.set(key, value).map_err(|e| e.to_string())
    } else {
        Err(format!(
            "unknown setting {key:?}; training keys: {}; task keys: {}",
            TrainingConfig::KEYS.join(", "),
            TaskConfig::KEYS.join(", ")
        ))
    }
}

pub fn cmd_train(args: &TrainArgs, out: &Path, settings: &mut Settings) -> Result<String, CliError> {
    let task = parse_task(&settings.required(args.task.clone(), "task")?)?;
    let map = path_setting(settings, &args.map, "map")?;
    let iterations = settings.value(args.iters, "iters")?.unwrap_or(200);
    let seed = settings.value(args.seed, "seed")?.unwrap_or(0);

    let mut training = TrainingConfig::default();
    let mut task_config = TaskConfig::new(task);
    let file = settings.path().map(|p| p.display().to_string()).unwrap_or_default();
    for (key, line, value) in settings.drain() {
        apply_setting(&mut training, &mut task_config, &key, &value)
            .map_err(|m| CliError::Usage(format!("{file}:{line}: {m}")))?;
        settings.record(&key, &value);
    }
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, found {pair:?}")))?;
        let (key, value) = (key.trim().replace('-', "_"), value.trim());
        apply_setting(&mut training, &mut task_config, &key, value).map_err(CliError::Usage)?;
        settings.record(&key, value);
    }
    training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    task_config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut run = Run::new("train", out);
    run.manifest.seed = Some(seed);
    let plan = load_plan(&mut run, map.as_deref())?;
    let outcome = train(&task_config, &plan, &training, iterations, seed).map_err(|e| match e {
        TrainError::Diverged { .. } => CliError::Infeasible(e.to_string()),
        TrainError::Env(e) => env_error(map.as_deref(), e),
        other => CliError::Io(other.into()),
    })?;
    run.write_json("policy.json", &outcome.policy)?;
    let summary = outcome.summary(seed, &training);
    run.write_json("train_summary.json", &summary)?;
    run.finish(settings)?;

    let e = &summary.evaluation;
    Ok(format!(
        "{iterations} iterations on {task}\nevaluation over {} paired episodes: trained {:.3}, random {:.3}, one-sided p = {:.3e}\n",
        e.seeds.len(),
        e.trained_mean,
        e.random_mean,
        e.p_value
    ))
}

pub fn cmd_report(args: &ReportArgs, out: &Path, settings: &mut Settings) -> Result<String, CliError> {
    settings.finish()?;
    let mut run = Run::new("report", out);
    let text = run.read(&args.input)?;
    let input = load_report_input(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.input.display())))?;
    let mut msg = String::new();
    for (name, svg) in render(&input) {
        let path = run.write(name, &svg)?;
        let _ = writeln!(msg, "wrote {}", path.display());
    }
    run.finish(settings)?;
    Ok(msg)
}
