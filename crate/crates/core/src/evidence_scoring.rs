//! Inference-time evidence score of a single candidate.
//!
//! The composite is the equal-weight mean of four signals in `[0, 1]`:
//! the ungated frame-citation score, the length preference `τ`, the
//! non-redundancy `1 - ρ`, and the tail confidence.

use serde::{Deserialize, Serialize};

use crate::reward_kernel::{frame_sensitive_score, repetition_ratio, transparency, LengthClip};
use crate::trace_schema::CandidateTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceScore {
    pub s_fs: f64,
    pub tau: f64,
    pub non_redundancy: f64,
    pub confidence: f64,
    pub composite: f64,
}

impl EvidenceScore {
    /// Builds a score from its four components.
    pub fn from_components(s_fs: f64, tau: f64, non_redundancy: f64, confidence: f64) -> Self {
        Self {
            s_fs,
            tau,
            non_redundancy,
            confidence,
            composite: (s_fs + tau + non_redundancy + confidence) / 4.0,
        }
    }

    /// Repetition ratio the score was built from.
    pub fn repetition(&self) -> f64 {
        1.0 - self.non_redundancy
    }
}

/// Scores one parsed candidate. Schema-invalid traces get no citation credit.
pub fn score_candidate(trace: &CandidateTrace, clip: LengthClip, n: usize) -> EvidenceScore {
    let s_fs = if trace.schema_valid {
        frame_sensitive_score(trace)
    } else {
        0.0
    };
    let tau = transparency(trace.think_token_length, clip);
    let non_redundancy = 1.0 - repetition_ratio(&trace.think_text, n);
    EvidenceScore::from_components(s_fs, tau, non_redundancy, trace.confidence.clamp(0.0, 1.0))
}
