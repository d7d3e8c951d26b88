use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmlo_cli::config::ExperimentConfig;
use cmlo_core::engine::{RunRecord, MANIFEST_FILE, RETURNS_FILE, TRIGGERS_FILE};

fn cmlo(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmlo"))
        .args(args)
        .env("CMLO_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn experiment_dir(root: &Path, config: &Path) -> PathBuf {
    let cfg = ExperimentConfig::load(config).unwrap();
    root.join(config.file_stem().unwrap()).join(&cfg.hash()[..12])
}

const TABULAR: &str = r#"
format_version = 1
seeds = [3]

[run]
mode = "cmlo"
ablation_intervals = [100]

[run.env]
name = "tabular-5"
kind = "tabular_random"
state_dim = 5
action_dim = 1
action_low = [0.0]
action_high = [1.0]
horizon = 40
terminal = "never"
reward_bound = 1.0
gamma = 0.9

[run.env.constants]
n_states = 5
n_actions = 2
seed = 1

[run.engine]
budget = BUDGET

[run.engine.trigger]
alpha = 0.5
check_frequency = 20
t_min = 40
t_max = 200

[run.engine.oracle]
kind = "value_iteration"
"#;

const PENDULUM: &str = r#"
format_version = 1
seeds = [1]

[run]
env = "pendulum"

[run.engine]
budget = 400

[run.engine.trigger]
alpha = 0.5
check_frequency = 50
t_min = 100
t_max = 200
hull_sample_size = 200

[run.engine.oracle]
kind = "ilqr"
horizon = 10
max_iterations = 3
tolerance = 1e-3
replan_every = 5

[run.engine.model]
ensemble_size = 2
hidden = [8]
epochs = 2
batch_size = 32
seed = 0
"#;

fn tabular(budget: u64) -> String {
    TABULAR.replace("BUDGET", &budget.to_string())
}

#[test]
fn budget_zero_gives_an_empty_run_directory() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write(root.path(), "zero.toml", &tabular(0));
    let out = cmlo(root.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = experiment_dir(root.path(), &cfg).join("cmlo-seed3");
    let rec = RunRecord::read_dir(&run).unwrap();
    assert_eq!(rec.manifest.steps_taken, 0);
    assert!(rec.episodes.is_empty() && rec.estimates.is_empty());
    assert_eq!(rec.manifest.config_hash, ExperimentConfig::load(&cfg).unwrap().hash());
    assert_eq!(fs::read_to_string(run.join(RETURNS_FILE)).unwrap(), "episode,end_step,return,length\n");
    assert!(experiment_dir(root.path(), &cfg).join("config.toml").is_file());
}

fn traces(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_are_byte_identical() {
    for (name, text) in [("tab.toml", tabular(600)), ("pend.toml", PENDULUM.to_string())] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = write(a.path(), name, &text);
        let cb = write(b.path(), name, &text);
        assert_eq!(cmlo(a.path(), &["run", ca.to_str().unwrap()]).status.code(), Some(0));
        assert_eq!(cmlo(b.path(), &["run", cb.to_str().unwrap()]).status.code(), Some(0));
        let seed = if name == "tab.toml" { 3 } else { 1 };
        let ra = experiment_dir(a.path(), &ca).join(format!("cmlo-seed{seed}"));
        let rb = experiment_dir(b.path(), &cb).join(format!("cmlo-seed{seed}"));
        let (ta, tb) = (traces(&ra), traces(&rb));
        assert_eq!(ta.len(), 5);
        assert_eq!(ta, tb, "{name}");
        let rec = RunRecord::read_dir(&ra).unwrap();
        assert!(rec.training_count() > 0, "{name}");
        assert!(!fs::read(ra.join(TRIGGERS_FILE)).unwrap().is_empty());
    }
}

#[test]
fn ablation_emits_both_modes_and_a_report() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write(root.path(), "abl.toml", &tabular(600));
    let out = cmlo(root.path(), &["ablate-trigger", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = experiment_dir(root.path(), &cfg);
    for run in ["cmlo-seed3", "fixed-100-seed3"] {
        assert!(dir.join(run).join(MANIFEST_FILE).is_file(), "{run}");
    }
    let fixed = RunRecord::read_dir(&dir.join("fixed-100-seed3")).unwrap();
    assert_eq!(fixed.manifest.training_steps, vec![100, 200, 300, 400, 500, 600]);
    let summary = fs::read_to_string(dir.join("report/summary.csv")).unwrap();
    let lines: Vec<_> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",cmlo,") && lines[2].contains(",fixed-100,"));
    assert!(dir.join("report/stages.csv").is_file());
}

#[test]
fn halved_kappa_exits_one() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write(
        root.path(),
        "kappa.toml",
        r#"
format_version = 1
[verify_bounds.campaign]
trials = 5
n_states = 4
n_actions = 2
gamma = 0.9
n_samples = 10
extra_samples = 10
seed = 0
kappa_scale = 0.5
"#,
    );
    let out = cmlo(root.path(), &["verify-bounds", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("campaign trial 0 failed"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(experiment_dir(root.path(), &cfg).join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["pass"], false);
    assert_eq!(summary["campaign"]["failed_trials"].as_array().unwrap().len(), 5);
}

#[test]
fn empty_campaign_exits_zero() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write(
        root.path(),
        "empty.toml",
        r#"
format_version = 1
[verify_bounds.campaign]
trials = 0
n_states = 4
n_actions = 2
gamma = 0.9
n_samples = 10
extra_samples = 10
seed = 0
"#,
    );
    let out = cmlo(root.path(), &["verify-bounds", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let dir = experiment_dir(root.path(), &cfg);
    let csv = fs::read_to_string(dir.join("campaign.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["campaign"]["trials"], 0);
}

#[test]
fn small_bound_suite_passes() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write(
        root.path(),
        "small.toml",
        r#"
format_version = 1
[verify_bounds.campaign]
trials = 20
n_states = 5
n_actions = 2
gamma = 0.9
n_samples = 10
extra_samples = 30
seed = 2

[verify_bounds.concentration]
alphabet = 4
m = [50]
eps = [0.3]
draws = 5000

[verify_bounds.interval]
instances = 10
n_states = 4
n_actions = 2
gamma = 0.9
xi = 0.1
seed = 1
"#,
    );
    let out = cmlo(root.path(), &["verify-bounds", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = experiment_dir(root.path(), &cfg);
    assert_eq!(fs::read_to_string(dir.join("campaign.csv")).unwrap().lines().count(), 21);
    assert_eq!(fs::read_to_string(dir.join("concentration.csv")).unwrap().lines().count(), 2);
    assert_eq!(fs::read_to_string(dir.join("interval.csv")).unwrap().lines().count(), 11);
}

#[test]
fn usage_errors_exit_two() {
    let root = tempfile::tempdir().unwrap();
    let unknown = write(root.path(), "unknown.toml", "format_version = 1\nsurprise = true\n");
    assert_eq!(cmlo(root.path(), &["run", unknown.to_str().unwrap()]).status.code(), Some(2));
    let mismatch = write(
        root.path(),
        "mismatch.toml",
        &PENDULUM.replace("kind = \"ilqr\"", "kind = \"value_iteration\""),
    );
    let out = cmlo(root.path(), &["run", mismatch.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not fit"));
    let no_section = write(root.path(), "bare.toml", "format_version = 1\n");
    assert_eq!(cmlo(root.path(), &["verify-bounds", no_section.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cmlo(root.path(), &["run", no_section.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cmlo(root.path(), &["run", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(cmlo(root.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(cmlo(root.path(), &["report"]).status.code(), Some(2));
}

#[test]
fn report_rejects_foreign_manifest_versions() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write(root.path(), "v.toml", &tabular(0));
    assert_eq!(cmlo(root.path(), &["run", cfg.to_str().unwrap()]).status.code(), Some(0));
    let run = experiment_dir(root.path(), &cfg).join("cmlo-seed3");
    let ok = cmlo(root.path(), &["report", run.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("env,config_hash,group"));
    let manifest = run.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).unwrap().replace("\"version\": 1", "\"version\": 99");
    fs::write(&manifest, text).unwrap();
    let out = cmlo(root.path(), &["report", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported version"));
}
