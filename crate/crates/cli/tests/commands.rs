use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlselect::analysis::{parse_tables, Analysis};
use mlselect::commands::episode_seeds;
use mlselect::report::{bars_svg, graph_svg};
use mlselect_core::cover::CoverReport;
use mlselect_core::env::{episode_rngs, Action, Env, FloorPlan, Policy, RandomPolicy, Task, TaskConfig};
use mlselect_core::stats::{parse_episodes, DominanceEdge, RankReversalGraph};
use mlselect_core::transfer::TransferReport;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mlselect(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlselect"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every output except the manifest, which carries a timestamp.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn assert_idempotent(args: &[&str]) {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = mlselect(a.path(), args);
    let second = mlselect(b.path(), args);
    assert_eq!(code(&first), code(&second));
    let text = |o: &Output, dir: &TempDir| {
        String::from_utf8_lossy(&o.stdout).replace(dir.path().to_str().unwrap(), "OUT")
    };
    assert_eq!(text(&first, &a), text(&second, &b));
    assert!(!outputs(a.path()).is_empty());
    assert_eq!(outputs(a.path()), outputs(b.path()), "{args:?}");
}

#[test]
fn select_fixture_examples() {
    let dir = TempDir::new().unwrap();
    let path = fixture("affinity_3x3.csv");
    let path = path.to_str().unwrap();

    let out = mlselect(dir.path(), &["select", "--affinities", path, "--k", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: CoverReport = read_json(&dir.path().join("selection.json"));
    assert_eq!(report.selected, vec!["f1", "f3"]);
    assert_eq!(report.delta, Some(0.9));
    assert!(String::from_utf8_lossy(&out.stdout).contains("delta = 0.9"));

    let out = mlselect(dir.path(), &["select", "--affinities", path, "--k", "3"]);
    assert_eq!(code(&out), 0);
    let report: CoverReport = read_json(&dir.path().join("selection.json"));
    assert_eq!(report.selected, vec!["f1", "f2", "f3"]);
    assert_eq!(report.delta, Some(1.0));

    let manifest: serde_json::Value = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "select");
    assert_eq!(manifest["overrides"]["k"], "3");
    assert_eq!(manifest["outputs"][0], "selection.json");
}

#[test]
fn threshold_above_every_entry_exits_infeasible() {
    let dir = TempDir::new().unwrap();
    let path = fixture("low_affinity.csv");
    let out = mlselect(dir.path(), &["select", "--affinities", path.to_str().unwrap(), "--delta", "0.7"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let report: CoverReport = read_json(&dir.path().join("selection.json"));
    assert!(report.selected.is_empty());
}

#[test]
fn parse_errors_name_the_line() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "source,f1,f2\nf1,1.0,0.5\nf2,0.4,oops\n").unwrap();
    let out = mlselect(dir.path(), &["select", "--affinities", bad.to_str().unwrap(), "--k", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.csv:3"), "{}", stderr(&out));

    let plan = dir.path().join("plan.txt");
    fs::write(&plan, "....\n..?.\n").unwrap();
    let out = mlselect(
        dir.path(),
        &["simulate", "--task", "nav", "--policy", "blind", "--map", plan.to_str().unwrap()],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("plan.txt:2"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let path = fixture("affinity_3x3.csv");
    let path = path.to_str().unwrap();
    for args in [
        vec!["select", "--affinities", path],
        vec!["select", "--affinities", path, "--k", "1", "--delta", "0.5"],
        vec!["select", "--affinities", path, "--k", "1", "--objective", "fastest"],
        vec!["select", "--k", "1"],
        vec!["no-such-command"],
        vec!["simulate", "--task", "nav", "--policy", "oracle"],
        vec!["simulate", "--task", "swim", "--policy", "blind"],
        vec!["train", "--task", "explore", "--iters", "0", "--set", "mystery=1"],
    ] {
        let out = mlselect(dir.path(), &args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
    let out = mlselect(dir.path(), &["simulate", "--task", "nav", "--policy", "oracle"]);
    assert!(stderr(&out).contains("random, blind"), "{}", stderr(&out));
    assert_eq!(code(&mlselect(dir.path(), &["--help"])), 0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("select.conf");
    fs::write(
        &config,
        format!("# budget run\naffinities = {}\nk = 1\n", fixture("affinity_3x3.csv").display()),
    )
    .unwrap();
    let config = config.to_str().unwrap();

    let out = mlselect(dir.path(), &["--config", config, "select"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: CoverReport = read_json(&dir.path().join("selection.json"));
    assert_eq!(report.selected, vec!["f1"]);

    let out = mlselect(dir.path(), &["--config", config, "select", "--k", "2"]);
    assert_eq!(code(&out), 0);
    let report: CoverReport = read_json(&dir.path().join("selection.json"));
    assert_eq!(report.selected, vec!["f1", "f3"]);

    let unknown = dir.path().join("unknown.conf");
    fs::write(&unknown, "k = 1\ncolour = blue\n").unwrap();
    let path = fixture("affinity_3x3.csv");
    let out = mlselect(
        dir.path(),
        &["--config", unknown.to_str().unwrap(), "select", "--affinities", path.to_str().unwrap()],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));
}

#[test]
fn transfer_fixture_examples() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let path = fixture(name);
        let mut args = vec!["transfer-select", "--problem", path.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = mlselect(dir.path(), &args);
        let report: TransferReport = read_json(&dir.path().join("transfer.json"));
        (code(&out), report)
    };

    let (status, single) = run("transfer_single.json", &[]);
    assert_eq!(status, 0);
    assert_eq!(single.active_features, vec!["t"]);
    assert_eq!(single.objective_value, 1.0);

    let (status, perf) = run("transfer_two_routes.json", &[]);
    assert_eq!(status, 0);
    assert_eq!(perf.active_features, vec!["s1", "s2"]);
    assert_eq!(perf.objective_value, 0.95);

    let (status, size) = run("transfer_two_routes.json", &["--objective", "min_size"]);
    assert_eq!(status, 0);
    assert_eq!(size.active_features, vec!["s1"]);

    let (status, budget) = run("transfer_two_routes.json", &["--budget", "1"]);
    assert_eq!(status, 0);
    assert_eq!((budget.delta, budget.active_features.clone()), (0.9, vec!["s1".to_string()]));

    let (status, _) = run("transfer_uncovered.json", &[]);
    assert_eq!(status, 3);

    let bad = dir.path().join("broken.json");
    fs::write(&bad, "{\"features\": [\"a\"],\n \"targets\": [\"a\"],\n \"edges\": [}").unwrap();
    let out = mlselect(dir.path(), &["transfer-select", "--problem", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("broken.json:3"), "{}", stderr(&out));
}

#[test]
fn commands_are_idempotent() {
    let affinity = fixture("affinity_3x3.csv");
    let problem = fixture("transfer_two_routes.json");
    let episodes = fixture("reversal_episodes.csv");
    assert_idempotent(&["select", "--affinities", affinity.to_str().unwrap(), "--k", "2"]);
    assert_idempotent(&["transfer-select", "--problem", problem.to_str().unwrap()]);
    assert_idempotent(&["analyze", "--episodes", episodes.to_str().unwrap()]);
    assert_idempotent(&["simulate", "--task", "nav", "--policy", "blind", "--episodes", "100", "--seed", "7"]);
    assert_idempotent(&["train", "--task", "explore", "--iters", "3", "--seed", "5", "--set", "eval_episodes=5"]);
}

#[test]
fn analysis_tables_round_trip() {
    let dir = TempDir::new().unwrap();
    let episodes = fixture("reversal_episodes.csv");
    let out = mlselect(dir.path(), &["analyze", "--episodes", episodes.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let analysis: Analysis = read_json(&dir.path().join("analysis.json"));
    let markdown = fs::read_to_string(dir.path().join("significance.md")).unwrap();
    assert_eq!(parse_tables(&markdown).unwrap(), analysis.tables);

    let blind: Vec<f64> = analysis
        .relative_rewards
        .iter()
        .filter(|r| r.condition == "blind")
        .map(|r| r.relative_reward)
        .collect();
    assert_eq!(blind, vec![1.0, 1.0]);
    assert!(dir.path().join("rank_reversal.dot").exists());
}

#[test]
fn missing_baseline_names_available_conditions() {
    let dir = TempDir::new().unwrap();
    let episodes = fixture("reversal_episodes.csv");
    let out = mlselect(
        dir.path(),
        &["analyze", "--episodes", episodes.to_str().unwrap(), "--baseline", "imagenet"],
    );
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("imagenet") && err.contains("A, B, blind, scratch"), "{err}");
}

#[test]
fn simulate_log_matches_cell_count() {
    let dir = TempDir::new().unwrap();
    let seed = 11;
    let out = mlselect(
        dir.path(),
        &["simulate", "--task", "explore", "--policy", "random", "--episodes", "20", "--seed", "11"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let records = parse_episodes(&fs::read_to_string(dir.path().join("episodes.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 20);

    let config = TaskConfig::new(Task::Exploration);
    let plan = FloorPlan::open(10, 10).unwrap();
    for (record, episode_seed) in records.iter().zip(episode_seeds(seed, 20)) {
        let (mut placement, mut actions) = episode_rngs(episode_seed);
        let mut env = Env::reset(&config, &plan, &mut placement).unwrap();
        while !env.is_done() {
            let (a, _) = RandomPolicy.act(&env.observation(), &mut actions).unwrap();
            env.step(Action::from_index(a).unwrap()).unwrap();
        }
        assert_eq!(record.reward, 0.1 * env.grid().len() as f64);
    }

    let again = mlselect(
        dir.path(),
        &["simulate", "--task", "explore", "--policy", "random", "--episodes", "20", "--seed", "12", "--append"],
    );
    assert_eq!(code(&again), 0);
    let text = fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
    assert_eq!(text.matches("task,condition").count(), 1);
    assert_eq!(parse_episodes(&text).unwrap().len(), 40);
}

#[test]
fn zero_iterations_saves_the_uniform_policy() {
    let dir = TempDir::new().unwrap();
    let out = mlselect(
        dir.path(),
        &["train", "--task", "explore", "--iters", "0", "--set", "eval_episodes=10"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let policy: serde_json::Value = read_json(&dir.path().join("policy.json"));
    assert!(policy["policy"]["theta"].as_array().unwrap().iter().all(|w| w == 0.0));
    let summary: serde_json::Value = read_json(&dir.path().join("train_summary.json"));
    assert_eq!(summary["iterations"], 0);

    let trained = dir.path().join("policy.json");
    let out = mlselect(
        dir.path(),
        &["simulate", "--task", "explore", "--policy", trained.to_str().unwrap(), "--episodes", "3"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("MLSELECT_UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
    assert_eq!(actual, expected, "{name} differs from the committed render");
}

#[test]
fn report_matches_golden_renders() {
    let dir = TempDir::new().unwrap();
    let analysis = fixture("reversal_analysis.json");
    let out = mlselect(dir.path(), &["report", "--in", analysis.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    golden("golden_bars.svg", &fs::read_to_string(dir.path().join("bars.svg")).unwrap());
    golden("golden_graph.svg", &fs::read_to_string(dir.path().join("graph.svg")).unwrap());
}

#[test]
fn empty_analysis_renders_a_scaffold() {
    let empty = Analysis::empty(0.2);
    for svg in [bars_svg(&empty), graph_svg(None)] {
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<path d="));
    }
}

#[test]
fn opposing_edges_render_both_arrowheads() {
    let edge = |task: &str, winner: &str, loser: &str| DominanceEdge {
        task: task.into(),
        winner: winner.into(),
        loser: loser.into(),
        alpha: 0.05,
        p_value: 0.004,
        weight: 1,
    };
    let graph = RankReversalGraph {
        tasks: vec!["t1".into(), "t2".into()],
        conditions: vec!["A".into(), "B".into()],
        alpha_levels: vec![0.05],
        edges: vec![edge("t1", "A", "B"), edge("t2", "B", "A")],
        reversals: Vec::new(),
        universal: Vec::new(),
        excluded: Vec::new(),
    };
    let svg = graph_svg(Some(&graph));
    assert_eq!(svg.matches("marker-end=\"url(#arrow-0)\"").count(), 1);
    assert_eq!(svg.matches("marker-end=\"url(#arrow-1)\"").count(), 1);
    assert!(svg.contains("<marker id=\"arrow-0\"") && svg.contains("<marker id=\"arrow-1\""));
    // The two curves bow to opposite sides, so their control points differ.
    let controls: Vec<String> = svg
        .lines()
        .filter(|l| l.starts_with("<path d=\"M"))
        .map(|l| l.split(" Q ").nth(1).unwrap().split(' ').take(2).collect::<Vec<_>>().join(" "))
        .collect();
    assert_eq!(controls.len(), 2);
    assert_ne!(controls[0], controls[1]);
}

#[test]
fn report_rejects_unknown_schema_versions() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("future.json");
    fs::write(&input, "{\"schema\": \"mlselect.analysis\", \"version\": 99}").unwrap();
    let out = mlselect(dir.path(), &["report", "--in", input.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("version 99"), "{}", stderr(&out));
}
