//! Cross-seed aggregation of run directories.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cmlo_core::engine::{RunManifest, RunMode, RunRecord, MANIFEST_FILE};
use serde::Serialize;

pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
}

/// `cmlo` or `fixed-<k>`.
pub fn mode_label(mode: RunMode) -> String {
    match mode {
        RunMode::Cmlo => "cmlo".into(),
        RunMode::Fixed { interval } => format!("fixed-{interval}"),
    }
}

/// Loads every run directory at or below each path (up to four levels).
pub fn collect_runs(paths: &[PathBuf]) -> anyhow::Result<Vec<LoadedRun>> {
    let mut dirs = Vec::new();
    for p in paths {
        if !p.is_dir() {
            bail!("{} is not a directory", p.display());
        }
        find_run_dirs(p, 4, &mut dirs)?;
    }
    if dirs.is_empty() {
        bail!("no run directories (containing {MANIFEST_FILE}) found");
    }
    dirs.sort();
    dirs.dedup();
    dirs.into_iter()
        .map(|dir| {
            let record = RunRecord::read_dir(&dir).with_context(|| format!("loading {}", dir.display()))?;
            Ok(LoadedRun { dir, record })
        })
        .collect()
}

fn find_run_dirs(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if dir.join(MANIFEST_FILE).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_run_dirs(&c, depth - 1, out)?;
    }
    Ok(())
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub env: String,
    pub config_hash: String,
    pub group: String,
    pub runs: usize,
    pub failed_runs: usize,
    pub trainings_mean: Option<f64>,
    pub trainings_std: Option<f64>,
    pub final_return_mean: Option<f64>,
    pub final_return_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub env: String,
    pub config_hash: String,
    pub group: String,
    pub stage: usize,
    pub end_step: u64,
    pub coverage_mean: Option<f64>,
    pub coverage_std: Option<f64>,
    pub pred_error_mean: Option<f64>,
    pub pred_error_std: Option<f64>,
    pub runs_with_error: usize,
}

#[derive(Debug, Default)]
pub struct Report {
    pub summary: Vec<GroupSummary>,
    pub stages: Vec<StageRow>,
}

type GroupKey = (String, String, u8, usize);

fn group_key(m: &RunManifest) -> GroupKey {
    // cmlo sorts before the fixed intervals, which sort numerically
    let (rank, k) = match m.mode {
        RunMode::Cmlo => (0, 0),
        RunMode::Fixed { interval } => (1, interval),
    };
    (m.env_name.clone(), m.config_hash.clone(), rank, k)
}

/// Groups runs by environment, config hash and mode, then aggregates over
/// seeds.
pub fn summarize(runs: &[LoadedRun], final_episodes: usize) -> Report {
    let mut groups: BTreeMap<GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry(group_key(&r.record.manifest)).or_default().push(&r.record);
    }
    let mut report = Report::default();
    for ((env, hash, _, _), recs) in groups {
        let label = mode_label(recs[0].manifest.mode);
        let trainings: Vec<f64> = recs.iter().map(|r| r.training_count() as f64).collect();
        let returns: Vec<f64> = recs.iter().filter_map(|r| r.final_mean_return(final_episodes)).collect();
        let (tm, ts) = mean_std(&trainings);
        let (rm, rs) = mean_std(&returns);
        report.summary.push(GroupSummary {
            env: env.clone(),
            config_hash: hash.clone(),
            group: label.clone(),
            runs: recs.len(),
            failed_runs: recs.iter().filter(|r| r.manifest.failure.is_some()).count(),
            trainings_mean: tm,
            trainings_std: ts,
            final_return_mean: rm,
            final_return_std: rs,
        });
        let n_stages = recs.iter().map(|r| r.stages.len()).max().unwrap_or(0);
        for i in 0..n_stages {
            let at: Vec<_> = recs.iter().filter_map(|r| r.stages.get(i)).collect();
            let cov: Vec<f64> = at.iter().filter_map(|s| s.coverage).collect();
            let err: Vec<f64> = at.iter().filter_map(|s| s.pred_error).collect();
            let (cm, cs) = mean_std(&cov);
            let (em, es) = mean_std(&err);
            report.stages.push(StageRow {
                env: env.clone(),
                config_hash: hash.clone(),
                group: label.clone(),
                stage: i,
                end_step: at.first().map(|s| s.end_step).unwrap_or(0),
                coverage_mean: cm,
                coverage_std: cs,
                pred_error_mean: em,
                pred_error_std: es,
                runs_with_error: err.len(),
            });
        }
    }
    report
}

fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T], header: &[&str]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "env",
    "config_hash",
    "group",
    "runs",
    "failed_runs",
    "trainings_mean",
    "trainings_std",
    "final_return_mean",
    "final_return_std",
];

pub const STAGES_HEADER: [&str; 10] = [
    "env",
    "config_hash",
    "group",
    "stage",
    "end_step",
    "coverage_mean",
    "coverage_std",
    "pred_error_mean",
    "pred_error_std",
    "runs_with_error",
];

impl Report {
    pub fn write_summary<W: Write>(&self, out: W) -> anyhow::Result<()> {
        write_csv(out, &self.summary, &SUMMARY_HEADER)
    }

    pub fn write_stages<W: Write>(&self, out: W) -> anyhow::Result<()> {
        write_csv(out, &self.stages, &STAGES_HEADER)
    }

    pub fn write_dir(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_summary(std::fs::File::create(dir.join("summary.csv"))?)?;
        self.write_stages(std::fs::File::create(dir.join("stages.csv"))?)?;
        Ok(())
    }
}
