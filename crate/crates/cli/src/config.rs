//! Run settings: built-in defaults, then an optional JSON config file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use segchain_adapters::{POLICY_URL_ENV, TRACKER_URL_ENV};
use segchain_core::grpo::GrpoConfig;
use segchain_core::TemporalRewardMode;
use serde::Deserialize;

/// Flags shared by every subcommand. Each may also be given as a key of the
/// same name (dashes as underscores) in the `--config` file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommonArgs {
    /// Root seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Frames sampled per video (toy training: frames per episode)
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    /// Rollouts per group
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// KL coefficient
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Gradient-ascent step size
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Optimizer steps
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Temporal reward: none, binary or soft
    #[arg(long, global = true)]
    pub temporal_mode: Option<TemporalRewardMode>,
    /// Policy server base URL [env: SEGCHAIN_POLICY_URL]
    #[arg(long, global = true)]
    pub policy_url: Option<String>,
    /// Tracker server base URL [env: SEGCHAIN_TRACKER_URL]
    #[arg(long, global = true, alias = "tracker-endpoint")]
    pub tracker_url: Option<String>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Curation IoU threshold
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// JSON file with defaults for any of these flags
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl CommonArgs {
    /// Fill every unset field from `other`.
    fn or(self, other: CommonArgs) -> CommonArgs {
        CommonArgs {
            seed: self.seed.or(other.seed),
            frames: self.frames.or(other.frames),
            group_size: self.group_size.or(other.group_size),
            beta: self.beta.or(other.beta),
            lr: self.lr.or(other.lr),
            steps: self.steps.or(other.steps),
            temporal_mode: self.temporal_mode.or(other.temporal_mode),
            policy_url: self.policy_url.or(other.policy_url),
            tracker_url: self.tracker_url.or(other.tracker_url),
            input: self.input.or(other.input),
            output: self.output.or(other.output),
            threshold: self.threshold.or(other.threshold),
            config: self.config,
        }
    }
}

fn load_file(path: &Path) -> Result<CommonArgs> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub group_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub temporal_mode: TemporalRewardMode,
    pub policy_url: Option<String>,
    pub tracker_url: Option<String>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub threshold: f64,
}

impl RunConfig {
    pub fn resolve(flags: CommonArgs) -> Result<Self> {
        let merged = match &flags.config {
            Some(path) => {
                let file = load_file(path)?;
                flags.or(file)
            }
            None => flags,
        };
        let grpo = GrpoConfig::default();
        let config = RunConfig {
            seed: merged.seed.unwrap_or(grpo.seed),
            frames: merged.frames.unwrap_or(16),
            group_size: merged.group_size.unwrap_or(grpo.n),
            beta: merged.beta.unwrap_or(grpo.beta),
            lr: merged.lr.unwrap_or(grpo.learning_rate),
            steps: merged.steps.unwrap_or(grpo.steps),
            temporal_mode: merged.temporal_mode.unwrap_or_default(),
            policy_url: merged
                .policy_url
                .or_else(|| std::env::var(POLICY_URL_ENV).ok()),
            tracker_url: merged
                .tracker_url
                .or_else(|| std::env::var(TRACKER_URL_ENV).ok()),
            input: merged.input,
            output: merged.output,
            threshold: merged.threshold.unwrap_or(0.6),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            bail!("--frames must be positive");
        }
        if !self.threshold.is_finite() {
            bail!("--threshold must be finite");
        }
        self.grpo().validate()?;
        Ok(())
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            n: self.group_size,
            beta: self.beta,
            learning_rate: self.lr,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn require_input(&self) -> Result<&Path> {
        self.input.as_deref().context("--input is required")
    }

    pub fn require_output(&self) -> Result<&Path> {
        self.output.as_deref().context("--output is required")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"seed": 5, "steps": 10, "temporal_mode": "binary", "beta": 0.1}"#,
        )
        .unwrap();
        let flags = CommonArgs {
            steps: Some(20),
            config: Some(path),
            ..Default::default()
        };
        let c = RunConfig::resolve(flags).unwrap();
        assert_eq!((c.seed, c.steps, c.beta), (5, 20, 0.1));
        assert_eq!(c.temporal_mode, TemporalRewardMode::Binary01);
        assert_eq!(c.group_size, 8);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sed": 5}"#).unwrap();
        let flags = CommonArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(RunConfig::resolve(flags).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for flags in [
            CommonArgs {
                beta: Some(-1.0),
                ..Default::default()
            },
            CommonArgs {
                group_size: Some(1),
                ..Default::default()
            },
            CommonArgs {
                lr: Some(0.0),
                ..Default::default()
            },
        ] {
            assert!(RunConfig::resolve(flags).is_err());
        }
    }
}
