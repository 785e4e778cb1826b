//! Evidence-shaped rewards, GRPO objective math, and evidence-weighted
//! answer election over parsed candidate traces.
//!
//! The crate is organised bottom-up:
//!
//! - [`trace_schema`] parses tagged outputs into [`CandidateTrace`]s.
//! - [`reward_kernel`] scores a trace against a ground truth for training.
//! - [`grpo_math`] holds the group-relative objective and a toy trainer.
//! - [`evidence_scoring`] scores a trace without a ground truth.
//! - [`election`] clusters answers and elects a winner with its consensus frames.
//! - [`referee`] runs the single self-check of the provisional winner.
//! - [`orchestrator`] drives acquisition, expansion and early stopping.

pub mod config;
pub mod election;
pub mod error;
pub mod evidence_scoring;
pub mod grpo_math;
pub mod orchestrator;
pub mod referee;
pub mod reward_kernel;
pub mod trace_schema;

pub use config::AppConfig;
pub use election::{aggregate, elect, fallback_majority, ElectionConfig, ElectionOutcome};
pub use error::{Error, ProviderError, Result};
pub use evidence_scoring::{score_candidate, EvidenceScore};
pub use orchestrator::{compute_metrics, run, Metrics, RunReport, RunSettings};
pub use referee::{RefereeClient, RefereeVerdict};
pub use reward_kernel::{total_reward, LengthClip, RewardBreakdown, RewardWeights};
pub use trace_schema::{parse_trace, CandidateTrace, FrameHorizon, RawOutput};
