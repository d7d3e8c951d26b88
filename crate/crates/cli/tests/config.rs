use std::path::Path;

use cmlo_cli::config::{experiment_dir, ExperimentConfig, ModeName};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}

#[test]
fn ablation_config_shape() {
    let cfg = ExperimentConfig::load(&configs_dir().join("pendulum_ablation.toml")).unwrap();
    let run = cfg.run_section().unwrap();
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(run.engine.budget, 20_000);
    assert_eq!(run.ablation_intervals, vec![125, 250, 500]);
    assert_eq!(run.mode, ModeName::Cmlo);
    assert_eq!(run.env.resolve().unwrap().name, "pendulum");
}

#[test]
fn hash_ignores_formatting() {
    let a = ExperimentConfig::parse("format_version = 1\nseeds = [1, 2]\n").unwrap();
    let b = ExperimentConfig::parse("seeds = [ 1,2 ]   # comment\n\nformat_version=1").unwrap();
    let c = ExperimentConfig::parse("format_version = 1\nseeds = [2, 1]\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn rejects_bad_documents() {
    for text in [
        "format_version = 2",
        "format_version = 1\nunknown = 3",
        "format_version = 1\noutput_dir = \"../escape\"",
        "format_version = 1\noutput_dir = \"/abs\"",
        "seeds = [1]",
        "format_version = 1\n[run]\nenv = \"acrobot\"\n[run.engine]\nbudget = 1\n[run.engine.trigger]\nalpha = 1.0\ncheck_frequency = 1\nt_min = 1\nt_max = 2\n[run.engine.oracle]\nkind = \"ilqr\"",
        "format_version = 1\n[run]\nenv = \"pendulum\"\nmode = \"fixed\"\n[run.engine]\nbudget = 1\n[run.engine.trigger]\nalpha = 1.0\ncheck_frequency = 1\nt_min = 1\nt_max = 2\n[run.engine.oracle]\nkind = \"ilqr\"",
        "format_version = 1\n[verify_bounds.concentration]\nalphabet = 1\nm = [10]\neps = [0.1]\ndraws = 10",
        "format_version = 1\n[verify_bounds.campaign]\ntrials = 1\nn_states = 0\nn_actions = 1\ngamma = 0.9\nn_samples = 1\nextra_samples = 0\nseed = 0",
    ] {
        assert!(ExperimentConfig::parse(text).is_err(), "{text}");
    }
}

#[test]
fn output_dir_defaults_to_the_file_stem() {
    let cfg = ExperimentConfig::parse("format_version = 1").unwrap();
    let dir = experiment_dir(&cfg, Path::new("some/where/exp1.toml"));
    assert!(dir.ends_with(Path::new("exp1").join(&cfg.hash()[..12])));
    let named = ExperimentConfig::parse("format_version = 1\noutput_dir = \"group/x\"").unwrap();
    assert!(experiment_dir(&named, Path::new("a.toml")).ends_with(Path::new("group/x").join(&named.hash()[..12])));
}
