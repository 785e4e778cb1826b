//! Training rewards for evidence-shaped outputs.
//!
//! Five components are computed for one output against a ground-truth
//! answer and combined with non-negative weights that sum to one:
//!
//! | component | value | gate |
//! |-----------|-------|------|
//! | frame-sensitive | `clip((|K| - E) / (1 + |K|), 0, 1)` | correct and schema-valid |
//! | think-transparency | `sin²(π · L̃)` | correct |
//! | anti-repetition | `-ρ` over whitespace n-grams | none |
//! | format | schema indicator | none |
//! | accuracy | exact match after canonicalization | none |

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_schema::{canonicalize_answer, CandidateTrace};

/// Default n-gram order for the repetition ratio.
pub const DEFAULT_NGRAM: usize = 3;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Convex weights over the five reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_acc: f64,
    pub w_fmt: f64,
    pub w_fs: f64,
    pub w_tt: f64,
    pub w_ar: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_acc: 0.1,
            w_fmt: 0.1,
            w_fs: 0.2,
            w_tt: 0.3,
            w_ar: 0.3,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("w_acc", self.w_acc),
            ("w_fmt", self.w_fmt),
            ("w_fs", self.w_fs),
            ("w_tt", self.w_tt),
            ("w_ar", self.w_ar),
        ];
        for (name, w) in named {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!("reward.{name}"), format!("{w} must be a finite value >= 0")));
            }
        }
        let sum: f64 = named.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::config("reward", format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Operating range for the reasoning length before rescaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthClip {
    pub lo: u32,
    pub hi: u32,
}

impl Default for LengthClip {
    fn default() -> Self {
        Self { lo: 64, hi: 1024 }
    }
}

impl LengthClip {
    pub fn new(lo: u32, hi: u32) -> Result<Self> {
        let clip = Self { lo, hi };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo == 0 {
            return Err(Error::config("length_clip.lo", "must be positive"));
        }
        if self.lo >= self.hi {
            return Err(Error::config(
                "length_clip",
                format!("lo ({}) must be below hi ({})", self.lo, self.hi),
            ));
        }
        Ok(())
    }
}

/// All five reward components of one output plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fs: f64,
    pub r_tt: f64,
    pub r_ar: f64,
    pub r_fmt: f64,
    pub r_acc: f64,
    pub r_total: f64,
}

/// Ungated frame-citation score, shared with inference-time scoring.
pub fn frame_sensitive_score(trace: &CandidateTrace) -> f64 {
    let kept = trace.keyframes.len() as f64;
    let invalid = f64::from(trace.invalid_frame_count);
    ((kept - invalid) / (1.0 + kept)).clamp(0.0, 1.0)
}

pub fn frame_sensitive_reward(trace: &CandidateTrace, correct: bool) -> f64 {
    if correct && trace.schema_valid {
        frame_sensitive_score(trace)
    } else {
        0.0
    }
}

/// Clips the length into `[lo, hi]` and rescales it onto `[0, 1]`.
pub fn normalized_length(think_token_length: u32, clip: LengthClip) -> f64 {
    let clipped = think_token_length.clamp(clip.lo, clip.hi);
    f64::from(clipped - clip.lo) / f64::from(clip.hi - clip.lo)
}

/// Unimodal length preference `sin²(π · L̃)`, peaking at mid-range.
pub fn transparency(think_token_length: u32, clip: LengthClip) -> f64 {
    let s = (PI * normalized_length(think_token_length, clip)).sin();
    // sin(π) is ~1.2e-16 rather than 0; squaring keeps the result in [0, 1].
    (s * s).clamp(0.0, 1.0)
}

pub fn think_transparency_reward(trace: &CandidateTrace, correct: bool, clip: LengthClip) -> f64 {
    if correct {
        transparency(trace.think_token_length, clip)
    } else {
        0.0
    }
}

/// `1 - |unique n-grams| / |n-grams|` over whitespace tokens, 0 when there are none.
pub fn repetition_ratio(think_text: &str, n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    let tokens: Vec<&str> = think_text.split_whitespace().collect();
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[&str]> = tokens.windows(n).collect();
    1.0 - unique.len() as f64 / total as f64
}

pub fn anti_repetition_reward(think_text: &str, n: usize) -> f64 {
    -repetition_ratio(think_text, n)
}

/// Exact match after canonicalization. An empty canonical answer never matches.
pub fn is_correct(trace: &CandidateTrace, ground_truth: &str) -> bool {
    let truth = canonicalize_answer(ground_truth);
    !trace.answer_canon.is_empty() && trace.answer_canon == truth
}

/// Scores one output against the ground truth.
pub fn total_reward(
    trace: &CandidateTrace,
    ground_truth: &str,
    weights: &RewardWeights,
    clip: LengthClip,
    n: usize,
) -> Result<RewardBreakdown> {
    weights.validate()?;
    clip.validate()?;
    if n == 0 {
        return Err(Error::config("reward.ngram", "must be at least 1"));
    }
    let correct = is_correct(trace, ground_truth);
    let r_acc = if correct { 1.0 } else { 0.0 };
    let r_fmt = if trace.schema_valid { 1.0 } else { 0.0 };
    let r_fs = frame_sensitive_reward(trace, correct);
    let r_tt = think_transparency_reward(trace, correct, clip);
    let r_ar = anti_repetition_reward(&trace.think_text, n);
    let r_total = weights.w_acc * r_acc
        + weights.w_fmt * r_fmt
        + weights.w_fs * r_fs
        + weights.w_tt * r_tt
        + weights.w_ar * r_ar;
    Ok(RewardBreakdown {
        r_fs,
        r_tt,
        r_ar,
        r_fmt,
        r_acc,
        r_total,
    })
}
