//! TOML configuration shared by every subcommand.
//!
//! Every section is optional and every key has a default:
//!
//! ```toml
//! seed = 0
//!
//! [reward]        # w_acc, w_fmt, w_fs, w_tt, w_ar; must sum to 1
//! [length_clip]   # lo, hi
//! [parse]         # tail_fraction, total_frames, ngram
//! [election]      # delta, gamma, exact_subset_limit
//! [budget]        # k_max, initial_k, expand_step, max_retries
//! [diversification]  # temperature_grid, top_p, seeds, base_seed, crop_tags, include_conservative
//! [referee]       # kappa, timeout_secs, command
//! [grpo]          # epsilon_clip, beta, eps_z, group_size, learning_rate, updates_per_step, kl_estimator
//! [provider]      # spec ("synthetic", "replay:FILE", "subprocess:CMD"), timeout_secs
//! [output]        # report, curve, policy
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::election::ElectionConfig;
use crate::error::{Error, Result};
use crate::grpo_math::GrpoConfig;
use crate::orchestrator::{BudgetConfig, DiversificationSpec, RunSettings, ScoringSettings};
use crate::referee::RefereeConfig;
use crate::reward_kernel::{LengthClip, RewardWeights, DEFAULT_NGRAM};
use crate::trace_schema::{FrameHorizon, DEFAULT_TAIL_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseConfig {
    pub tail_fraction: f64,
    /// Frame count assumed when an input does not carry its own.
    pub total_frames: u32,
    pub ngram: usize,
}

impl Default for ParseConfig {
    fn default() -> Self {
        Self {
            tail_fraction: DEFAULT_TAIL_FRACTION,
            total_frames: 32,
            ngram: DEFAULT_NGRAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefereeSection {
    #[serde(flatten)]
    pub settings: RefereeConfig,
    /// External referee command; the built-in heuristic is used when absent.
    pub command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub spec: String,
    pub timeout_secs: f64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            spec: "synthetic".into(),
            timeout_secs: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub report: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

/// Where run candidates come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Synthetic,
    Replay(PathBuf),
    Subprocess(String),
}

impl std::str::FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("provider.spec", format!("{s:?} is not synthetic, replay:FILE or subprocess:CMD"));
        match s.split_once(':') {
            None if s == "synthetic" => Ok(Self::Synthetic),
            Some(("replay", path)) if !path.is_empty() => Ok(Self::Replay(path.into())),
            Some(("subprocess", cmd)) if !cmd.trim().is_empty() => Ok(Self::Subprocess(cmd.trim().into())),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub reward: RewardWeights,
    pub length_clip: LengthClip,
    pub parse: ParseConfig,
    pub election: ElectionConfig,
    pub budget: BudgetConfig,
    pub diversification: DiversificationSpec,
    pub referee: RefereeSection,
    pub grpo: GrpoConfig,
    pub provider: ProviderSection,
    pub output: OutputSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reward: RewardWeights::default(),
            length_clip: LengthClip::default(),
            parse: ParseConfig::default(),
            election: ElectionConfig::default(),
            budget: BudgetConfig::default(),
            diversification: DiversificationSpec::default(),
            referee: RefereeSection::default(),
            grpo: GrpoConfig::default(),
            provider: ProviderSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    /// Checks every section against its module's invariants.
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.run_settings().validate()?;
        FrameHorizon::new(self.parse.total_frames)
            .map_err(|_| Error::config("parse.total_frames", "must be positive"))?;
        self.grpo.validate()?;
        if !(self.provider.timeout_secs > 0.0) || !self.provider.timeout_secs.is_finite() {
            return Err(Error::config("provider.timeout_secs", "must be a finite value > 0"));
        }
        self.provider_spec()?;
        Ok(())
    }

    pub fn provider_spec(&self) -> Result<ProviderSpec> {
        self.provider.spec.parse()
    }

    pub fn scoring(&self) -> ScoringSettings {
        ScoringSettings {
            clip: self.length_clip,
            ngram: self.parse.ngram,
            tail_fraction: self.parse.tail_fraction,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        let mut diversification = self.diversification.clone();
        if diversification.base_seed == 0 {
            diversification.base_seed = self.seed;
        }
        RunSettings {
            diversification,
            budget: self.budget,
            election: self.election,
            referee: self.referee.settings,
            scoring: self.scoring(),
        }
    }
}
