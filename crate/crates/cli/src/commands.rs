//! Subcommand implementations. Each returns a [`Status`]; errors are usage
//! or I/O failures.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cmlo_core::bounds::{
    concentration_cell, interval_campaign, interval_success, verify_gap_campaign, write_campaign_csv,
    ConcentrationCell, IntervalTrial, TrialReport,
};
use cmlo_core::engine::{run_cmlo, run_fixed_interval, EnsembleLearner, ModelLearner, RunRecord, TabularLearner};
use cmlo_core::envs::{EnvKind, EnvSpec, TabularEnv};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{experiment_dir, ExperimentConfig, ModeName, RunSection, FORMAT_VERSION};
use crate::report::{collect_runs, mode_label, summarize, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    /// A checked invariant or a run failed.
    Fail,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
        }
    }
}

pub const CONFIG_COPY: &str = "config.toml";

fn load(path: &Path) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(path)?;
    let dir = experiment_dir(&cfg, path);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::copy(path, dir.join(CONFIG_COPY)).context("archiving the config")?;
    Ok((cfg, dir))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CampaignSummary {
    pub trials: usize,
    pub passed: usize,
    pub failed_trials: Vec<usize>,
    pub conservative_ok: usize,
    pub simulation_ok: usize,
    pub ceiling_ok: usize,
    /// Trials where the equality approximation holds.
    pub equality_holds: usize,
    /// Of those, trials where the nominal bound holds.
    pub nominal_ok_given_equality: usize,
    pub nominal_ok: usize,
}

impl CampaignSummary {
    pub fn of(reports: &[TrialReport]) -> Self {
        let eq: Vec<_> = reports.iter().filter(|r| r.equality_assumption_holds()).collect();
        Self {
            trials: reports.len(),
            passed: reports.iter().filter(|r| r.passed()).count(),
            failed_trials: reports.iter().filter(|r| !r.passed()).map(|r| r.trial).collect(),
            conservative_ok: reports.iter().filter(|r| r.conservative_ok).count(),
            simulation_ok: reports.iter().filter(|r| r.simulation_ok).count(),
            ceiling_ok: reports.iter().filter(|r| r.ceiling_ok).count(),
            equality_holds: eq.len(),
            nominal_ok_given_equality: eq.iter().filter(|r| r.nominal_c_ok).count(),
            nominal_ok: reports.iter().filter(|r| r.nominal_c_ok).count(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalSummary {
    pub instances: usize,
    pub within: usize,
    pub success_fraction: f64,
    pub threshold: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub format_version: u32,
    pub config_hash: String,
    pub campaign: Option<CampaignSummary>,
    pub concentration: Option<Vec<ConcentrationCell>>,
    pub interval: Option<IntervalSummary>,
    pub pass: bool,
}

pub const CONCENTRATION_HEADER: [&str; 9] =
    ["alphabet", "m", "eps", "draws", "bound", "violations", "frequency", "std_err", "ok"];

pub const INTERVAL_HEADER: [&str; 8] = [
    "instance",
    "delta_m1",
    "sigma",
    "eps_opt",
    "epsilon",
    "k",
    "max_l1",
    "within",
];

fn write_concentration_csv(path: &Path, cells: &[ConcentrationCell]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CONCENTRATION_HEADER)?;
    for c in cells {
        w.write_record([
            c.alphabet.to_string(),
            c.m.to_string(),
            c.eps.to_string(),
            c.draws.to_string(),
            c.bound.to_string(),
            c.violations.to_string(),
            c.frequency.to_string(),
            c.std_err.to_string(),
            c.ok.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_interval_csv(path: &Path, trials: &[IntervalTrial]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(INTERVAL_HEADER)?;
    for t in trials {
        w.write_record([
            t.instance.to_string(),
            t.query.delta_m1.to_string(),
            t.query.sigma.to_string(),
            t.query.eps_opt.to_string(),
            t.epsilon.to_string(),
            t.k.to_string(),
            t.max_l1.to_string(),
            t.within.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configured bound check and writes `campaign.csv`,
/// `concentration.csv`, `interval.csv` and `summary.json`.
pub fn verify_bounds(config_path: &Path) -> anyhow::Result<Status> {
    let (cfg, dir) = load(config_path)?;
    let Some(vb) = cfg.verify_bounds.clone() else {
        bail!("config has no [verify_bounds] section");
    };
    let mut pass = true;

    let campaign = match &vb.campaign {
        Some(c) => {
            let reports = verify_gap_campaign(c)?;
            write_campaign_csv(std::fs::File::create(dir.join("campaign.csv"))?, &reports)?;
            let s = CampaignSummary::of(&reports);
            for r in reports.iter().filter(|r| !r.passed()) {
                eprintln!(
                    "campaign trial {} failed: consistent={} simulation={} conservative={} refined={} ceiling={}",
                    r.trial,
                    r.inputs_consistent,
                    r.simulation_ok,
                    r.conservative_ok,
                    r.refined_conservative_ok,
                    r.ceiling_ok
                );
            }
            pass &= s.failed_trials.is_empty();
            println!(
                "campaign: {}/{} trials pass; nominal bound holds in {}/{} equality-consistent trials",
                s.passed, s.trials, s.nominal_ok_given_equality, s.equality_holds
            );
            Some(s)
        }
        None => None,
    };

    let concentration = match &vb.concentration {
        Some(c) => {
            let mut cells = Vec::new();
            for (i, &m) in c.m.iter().enumerate() {
                for (j, &eps) in c.eps.iter().enumerate() {
                    let seed = cmlo_core::rng::derive(c.seed, (i * c.eps.len() + j) as u64);
                    cells.push(concentration_cell(c.alphabet, m, eps, c.draws, seed)?);
                }
            }
            write_concentration_csv(&dir.join("concentration.csv"), &cells)?;
            for cell in cells.iter().filter(|c| !c.ok) {
                eprintln!(
                    "concentration cell m={} eps={} failed: frequency {} > bound {} + 3·{}",
                    cell.m, cell.eps, cell.frequency, cell.bound, cell.std_err
                );
            }
            pass &= cells.iter().all(|c| c.ok);
            println!(
                "concentration: {}/{} cells within bound",
                cells.iter().filter(|c| c.ok).count(),
                cells.len()
            );
            Some(cells)
        }
        None => None,
    };

    let interval = match &vb.interval {
        Some(c) => {
            let trials = interval_campaign(c)?;
            write_interval_csv(&dir.join("interval.csv"), &trials)?;
            let (frac, threshold) = interval_success(&trials, c.xi);
            let ok = trials.is_empty() || frac >= threshold;
            if !ok {
                eprintln!("interval: success fraction {frac} below {threshold}");
            }
            pass &= ok;
            println!("interval: {frac:.3} of instances within epsilon (threshold {threshold:.3})");
            Some(IntervalSummary {
                instances: trials.len(),
                within: trials.iter().filter(|t| t.within).count(),
                success_fraction: frac,
                threshold,
                ok,
            })
        }
        None => None,
    };

    let summary = VerifySummary {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        campaign,
        concentration,
        interval,
        pass,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("outputs in {}", dir.display());
    Ok(if pass { Status::Pass } else { Status::Fail })
}

fn learner_for(spec: &EnvSpec, run: &RunSection) -> anyhow::Result<Box<dyn ModelLearner>> {
    let engine = &run.engine;
    Ok(match spec.kind {
        EnvKind::TabularRandom => {
            let env = TabularEnv::from_spec(spec.clone())?;
            Box::new(TabularLearner::new(env.mdp().clone()))
        }
        EnvKind::Pendulum | EnvKind::Cartpole => {
            let env = spec.build()?;
            Box::new(EnsembleLearner::new(
                env.as_ref(),
                engine.model.clone(),
                engine.warm_start,
                engine.rollout.sample_members,
            )?)
        }
    })
}

/// `None` runs the trigger; `Some(k)` trains every `k` steps.
pub fn execute(spec: &EnvSpec, run: &RunSection, interval: Option<usize>, seed: u64) -> anyhow::Result<RunRecord> {
    let env = spec.build()?;
    let mut learner = learner_for(spec, run)?;
    let record = match interval {
        None => run_cmlo(env, learner.as_mut(), &run.engine, seed)?,
        Some(k) => run_fixed_interval(env, learner.as_mut(), &run.engine, k, seed)?,
    };
    Ok(record)
}

/// Name of a run directory inside the experiment directory.
pub fn run_dir_name(interval: Option<usize>, seed: u64) -> String {
    match interval {
        None => format!("cmlo-seed{seed}"),
        Some(k) => format!("fixed-{k}-seed{seed}"),
    }
}

fn run_all(
    cfg: &ExperimentConfig,
    dir: &Path,
    variants: &[Option<usize>],
) -> anyhow::Result<Vec<(PathBuf, RunRecord)>> {
    let run = cfg.run_section()?;
    if cfg.seeds.is_empty() {
        bail!("`seeds` must list at least one seed");
    }
    let spec = run.env.resolve()?;
    let jobs: Vec<(Option<usize>, u64)> = variants
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let hash = cfg.hash();
    let results: Vec<anyhow::Result<(PathBuf, RunRecord)>> = jobs
        .par_iter()
        .map(|&(interval, seed)| {
            let mut record = execute(&spec, run, interval, seed)?;
            record.manifest.config_hash = hash.clone();
            let out = dir.join(run_dir_name(interval, seed));
            record.write_dir(&out)?;
            Ok((out, record))
        })
        .collect();
    let results = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    for (out, r) in &results {
        let m = &r.manifest;
        println!(
            "{} seed {}: steps {} trainings {} final return {} {}{}",
            mode_label(m.mode),
            m.seed,
            m.steps_taken,
            r.training_count(),
            r.final_mean_return(run.final_episodes)
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "n/a".into()),
            out.display(),
            m.failure
                .as_ref()
                .map(|f| format!(" FAILED at step {}: {}", f.step, f.message))
                .unwrap_or_default()
        );
    }
    Ok(results)
}

fn status_of(results: &[(PathBuf, RunRecord)]) -> Status {
    if results.iter().any(|(_, r)| r.manifest.failure.is_some()) {
        Status::Fail
    } else {
        Status::Pass
    }
}

/// Runs the configured mode once per seed.
pub fn run(config_path: &Path) -> anyhow::Result<Status> {
    let (cfg, dir) = load(config_path)?;
    let run = cfg.run_section()?;
    let variant = match run.mode {
        ModeName::Cmlo => None,
        ModeName::Fixed => run.interval,
    };
    let results = run_all(&cfg, &dir, &[variant])?;
    Ok(status_of(&results))
}

/// Runs the trigger and every ablation interval for every seed, then writes
/// the comparison report into `<experiment>/report`.
pub fn ablate_trigger(config_path: &Path) -> anyhow::Result<Status> {
    let (cfg, dir) = load(config_path)?;
    let run = cfg.run_section()?;
    if run.ablation_intervals.is_empty() {
        bail!("ablate-trigger needs a non-empty `ablation_intervals`");
    }
    let mut variants = vec![None];
    variants.extend(run.ablation_intervals.iter().map(|&k| Some(k)));
    let results = run_all(&cfg, &dir, &variants)?;
    let runs: Vec<_> = results
        .iter()
        .map(|(d, r)| crate::report::LoadedRun {
            dir: d.clone(),
            record: r.clone(),
        })
        .collect();
    let report = summarize(&runs, run.final_episodes);
    let out = dir.join("report");
    report.write_dir(&out)?;
    print_summary(&report);
    println!("report in {}", out.display());
    Ok(status_of(&results))
}

fn print_summary(report: &Report) {
    let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
        (Some(m), None) => format!("{m:.2}"),
        _ => "n/a".into(),
    };
    for g in &report.summary {
        println!(
            "{:<12} runs {:>2}  trainings {:<16} final return {}",
            g.group,
            g.runs,
            fmt(g.trainings_mean, g.trainings_std),
            fmt(g.final_return_mean, g.final_return_std)
        );
    }
}

/// Aggregates run directories; writes CSVs to `out` or prints the summary
/// table to stdout.
pub fn report(dirs: &[PathBuf], final_episodes: usize, out: Option<&Path>) -> anyhow::Result<Status> {
    if final_episodes == 0 {
        bail!("--final-episodes must be >= 1");
    }
    let runs = collect_runs(dirs)?;
    let report = summarize(&runs, final_episodes);
    match out {
        Some(dir) => {
            report.write_dir(dir)?;
            print_summary(&report);
            println!("report in {}", dir.display());
        }
        None => report.write_summary(std::io::stdout().lock())?,
    }
    Ok(Status::Pass)
}
