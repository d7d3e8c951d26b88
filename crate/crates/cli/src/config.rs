//! The experiment document: one TOML file per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cmlo_core::bounds::{CampaignConfig, IntervalCampaignConfig};
use cmlo_core::engine::EngineConfig;
use cmlo_core::envs::{EnvKind, EnvSpec};
use cmlo_core::oracles::OracleKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

/// Environment variable naming the directory all outputs go under.
pub const OUTPUT_ROOT_VAR: &str = "CMLO_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Subdirectory of the output root; defaults to the config file stem.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub verify_bounds: Option<VerifyBoundsSection>,
    #[serde(default)]
    pub run: Option<RunSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBoundsSection {
    #[serde(default)]
    pub campaign: Option<CampaignConfig>,
    #[serde(default)]
    pub concentration: Option<ConcentrationSection>,
    #[serde(default)]
    pub interval: Option<IntervalCampaignConfig>,
}

/// A grid of concentration cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationSection {
    pub alphabet: u32,
    pub m: Vec<u64>,
    pub eps: Vec<f64>,
    pub draws: u64,
    #[serde(default)]
    pub seed: u64,
}

/// A built-in environment or a full inline specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Preset(String),
    Inline(EnvSpec),
}

impl EnvSource {
    pub fn resolve(&self) -> anyhow::Result<EnvSpec> {
        match self {
            EnvSource::Preset(name) => match name.as_str() {
                "pendulum" => Ok(EnvSpec::pendulum_default()),
                "cartpole" => Ok(EnvSpec::cartpole_default()),
                other => bail!("unknown environment preset `{other}` (expected pendulum or cartpole)"),
            },
            EnvSource::Inline(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Cmlo,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub env: EnvSource,
    #[serde(default)]
    pub mode: ModeName,
    /// Training interval for `mode = "fixed"`.
    #[serde(default)]
    pub interval: Option<usize>,
    /// Fixed intervals compared against the trigger by `ablate-trigger`.
    #[serde(default)]
    pub ablation_intervals: Vec<usize>,
    /// Episodes averaged into the final return.
    #[serde(default = "default_final_episodes")]
    pub final_episodes: usize,
    pub engine: EngineConfig,
}

fn default_final_episodes() -> usize {
    10
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.format_version != FORMAT_VERSION {
            bail!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            );
        }
        if let Some(dir) = &self.output_dir {
            let p = Path::new(dir);
            if dir.is_empty() || p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                bail!("output_dir must be a relative path without `..`");
            }
        }
        if let Some(vb) = &self.verify_bounds {
            if let Some(c) = &vb.campaign {
                c.validate()?;
            }
            if let Some(c) = &vb.concentration {
                if c.alphabet < 2 || c.draws == 0 || c.m.contains(&0) || c.eps.iter().any(|e| !(*e > 0.0)) {
                    bail!("concentration: alphabet >= 2, draws >= 1, m >= 1 and eps > 0 required");
                }
            }
        }
        if let Some(run) = &self.run {
            run.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, so formatting and key order in
    /// the TOML file do not matter.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn run_section(&self) -> anyhow::Result<&RunSection> {
        self.run.as_ref().context("config has no [run] section")
    }
}

impl RunSection {
    pub fn validate(&self) -> anyhow::Result<()> {
        let spec = self.env.resolve()?;
        self.engine.validate()?;
        let tabular = spec.kind == EnvKind::TabularRandom;
        let vi = self.engine.oracle.kind == OracleKind::ValueIteration;
        if tabular != vi {
            bail!(
                "oracle `{:?}` does not fit environment `{}`: tabular environments need value_iteration, continuous ones a planner",
                self.engine.oracle.kind,
                spec.name
            );
        }
        match (self.mode, self.interval) {
            (ModeName::Fixed, None) | (ModeName::Fixed, Some(0)) => bail!("mode = \"fixed\" needs interval >= 1"),
            _ => {}
        }
        if self.ablation_intervals.contains(&0) {
            bail!("ablation intervals must be >= 1");
        }
        Ok(())
    }
}

/// The output root from the environment, or `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// `<root>/<output_dir or config stem>/<first 12 hex digits of the hash>`.
pub fn experiment_dir(cfg: &ExperimentConfig, config_path: &Path) -> PathBuf {
    let name = cfg.output_dir.clone().unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "experiment".into())
    });
    output_root().join(name).join(&cfg.hash()[..12])
}
