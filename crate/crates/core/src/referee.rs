//! One-shot self-check of the provisional winner.
//!
//! A critique lists support gaps in the winner's evidence. The gaps become a
//! non-positive adjustment `Δ = -S(winner) · min(1, g / n) · κ`, where `g` is
//! the number of gaps and `n` the number of trimmed supporting candidates,
//! and the final choice is the argmax of `S(winner) + Δ` against the
//! runner-up's unadjusted score. Ties keep the winner.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::election::{AnswerCluster, ElectionOutcome};
use crate::error::{Error, Result};
use crate::orchestrator::QuestionContext;
use crate::trace_schema::{CandidateTrace, FrameSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefereeConfig {
    /// Scale of the adjustment when every supporting candidate shows a gap.
    pub kappa: f64,
    /// Deadline for external referee clients, in seconds.
    pub timeout_secs: f64,
}

impl Default for RefereeConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            timeout_secs: 30.0,
        }
    }
}

impl RefereeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::config("referee.kappa", "must be a finite value >= 0"));
        }
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(Error::config("referee.timeout_secs", "must be a finite value > 0"));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// What a gap is about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapSubject {
    Frame(u32),
    Candidate(usize),
    Claim(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapEntry {
    pub subject: GapSubject,
    pub reason: String,
}

/// Output of a referee client.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Critique {
    #[serde(default)]
    pub gaps: Vec<GapEntry>,
    #[serde(default)]
    pub aha_detected: bool,
}

/// Everything a referee may inspect: the winner and its trimmed supporters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueRequest {
    pub question: QuestionContext,
    pub winner: AnswerCluster,
    /// `(candidate index, trace)` for each trimmed member of the winner.
    pub members: Vec<(usize, CandidateTrace)>,
}

impl CritiqueRequest {
    pub fn new(question: &QuestionContext, winner: &AnswerCluster, traces: &[CandidateTrace]) -> Self {
        Self {
            question: question.clone(),
            winner: winner.clone(),
            members: winner
                .trimmed_indices
                .iter()
                .map(|&i| (i, traces[i].clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefereeError {
    #[error("referee timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed critique: {0}")]
    Malformed(String),
    #[error("referee failed: {0}")]
    Failed(String),
}

/// Source of critiques for the self-check.
pub trait RefereeClient {
    fn name(&self) -> String;

    fn critique(&mut self, request: &CritiqueRequest) -> std::result::Result<Critique, RefereeError>;
}

fn reversal_marker() -> &'static Regex {
    static MARKER: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    MARKER.get_or_init(|| Regex::new(r"(?i)\b(wait|re-evaluate|let me reconsider)\b").expect("valid regex"))
}

/// First self-reversal marker in a reasoning text, if any.
pub fn find_reversal_marker(text: &str) -> Option<&str> {
    reversal_marker().find(text).map(|m| m.as_str())
}

fn critique_members(consensus: &FrameSet, members: &[(usize, &CandidateTrace)]) -> Critique {
    let mut critique = Critique::default();
    let n = members.len();
    for &frame in consensus {
        let cited = members.iter().filter(|(_, t)| t.keyframes.contains(&frame)).count();
        if 2 * cited < n {
            critique.gaps.push(GapEntry {
                subject: GapSubject::Frame(frame),
                reason: format!("consensus frame cited by only {cited} of {n} supporting candidates"),
            });
        }
    }
    if !consensus.is_empty() {
        for &(index, trace) in members {
            if trace.keyframes.is_disjoint(consensus) {
                critique.gaps.push(GapEntry {
                    subject: GapSubject::Candidate(index),
                    reason: "cites none of the consensus frames".into(),
                });
            }
        }
    }
    for &(index, trace) in members {
        if let Some(marker) = find_reversal_marker(&trace.think_text) {
            critique.aha_detected = true;
            critique.gaps.push(GapEntry {
                subject: GapSubject::Candidate(index),
                reason: format!("reasoning reverses itself (\"{marker}\")"),
            });
        }
    }
    critique
}

/// Rule-based critique of the winner's trimmed supporters.
///
/// Flags consensus frames cited by fewer than half of them, supporters whose
/// citations miss the consensus entirely, and self-reversal markers.
pub fn heuristic_critique(winner: &AnswerCluster, traces: &[CandidateTrace]) -> Critique {
    let members: Vec<(usize, &CandidateTrace)> = winner
        .trimmed_indices
        .iter()
        .map(|&i| (i, &traces[i]))
        .collect();
    critique_members(&winner.consensus_keyframes, &members)
}

/// Built-in referee that applies [`heuristic_critique`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicReferee;

impl RefereeClient for HeuristicReferee {
    fn name(&self) -> String {
        "heuristic".into()
    }

    fn critique(&mut self, request: &CritiqueRequest) -> std::result::Result<Critique, RefereeError> {
        let members: Vec<(usize, &CandidateTrace)> = request.members.iter().map(|(i, t)| (*i, t)).collect();
        Ok(critique_members(&request.winner.consensus_keyframes, &members))
    }
}

/// Runs an external command once per critique.
///
/// The request is written as one JSON object to the child's stdin, which is
/// then closed. The child must print a [`Critique`] JSON object on stdout.
#[derive(Debug, Clone)]
pub struct SubprocessReferee {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl SubprocessReferee {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        Self {
            program: program.into(),
            args,
            timeout,
        }
    }

    /// Splits a command line on whitespace (no quoting).
    pub fn from_command_line(command: &str, timeout: Duration) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::config("referee", "subprocess command is empty"))?;
        Ok(Self::new(program, parts.collect(), timeout))
    }
}

impl RefereeClient for SubprocessReferee {
    fn name(&self) -> String {
        format!("subprocess:{}", self.program)
    }

    fn critique(&mut self, request: &CritiqueRequest) -> std::result::Result<Critique, RefereeError> {
        let payload = serde_json::to_string(request).map_err(|e| RefereeError::Failed(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| RefereeError::Failed(format!("cannot start {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut out = String::new();
            let res = stdout.read_to_string(&mut out).map(|_| out);
            let _ = tx.send(res);
        });
        // A child that exits without reading its input is reported through stdout.
        let _ = stdin.write_all(payload.as_bytes()).and_then(|_| stdin.write_all(b"\n"));
        drop(stdin);

        let output = match rx.recv_timeout(self.timeout) {
            Ok(res) => res.map_err(|e| RefereeError::Failed(e.to_string())),
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RefereeError::Timeout(self.timeout));
            }
        };
        let _ = child.wait();
        let text = output?;
        parse_critique(&text)
    }
}

/// Parses critique text: a JSON object, optionally preceded by other lines.
pub fn parse_critique(text: &str) -> std::result::Result<Critique, RefereeError> {
    let trimmed = text.trim();
    if let Ok(c) = serde_json::from_str::<Critique>(trimmed) {
        return Ok(c);
    }
    trimmed
        .lines()
        .rev()
        .find_map(|l| serde_json::from_str::<Critique>(l.trim()).ok())
        .ok_or_else(|| {
            let preview: String = trimmed.chars().take(80).collect();
            RefereeError::Malformed(format!("expected a critique JSON object, got {preview:?}"))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefereeDecision {
    Confirm,
    FlipToRunnerUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefereeVerdict {
    pub delta_adjustment: f64,
    pub gap_report: Vec<GapEntry>,
    pub decision: RefereeDecision,
    pub aha_detected: bool,
    /// Which client produced the critique.
    pub critic: String,
    /// Why the heuristic stood in for the configured client, if it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

/// `-winner_score · min(1, gaps / trimmed_count) · κ`, or 0 without gaps.
pub fn gap_to_delta(gap_report: &[GapEntry], winner_score: f64, trimmed_count: usize, kappa: f64) -> f64 {
    if gap_report.is_empty() {
        return 0.0;
    }
    let fraction = (gap_report.len() as f64 / trimmed_count.max(1) as f64).min(1.0);
    -(winner_score.max(0.0) * fraction * kappa)
}

/// Keeps the winner unless the runner-up strictly beats its adjusted score.
pub fn decide(winner_score: f64, runner_up_score: Option<f64>, delta: f64) -> RefereeDecision {
    match runner_up_score {
        Some(r) if r > winner_score + delta => RefereeDecision::FlipToRunnerUp,
        _ => RefereeDecision::Confirm,
    }
}

/// Turns a critique of the provisional winner into a verdict.
pub fn referee_decide(outcome: &ElectionOutcome, critique: Critique, critic: String, cfg: &RefereeConfig) -> RefereeVerdict {
    let winner = &outcome.winner;
    let delta = gap_to_delta(&critique.gaps, winner.score, winner.trimmed_indices.len(), cfg.kappa);
    RefereeVerdict {
        delta_adjustment: delta,
        decision: decide(winner.score, outcome.runner_up.as_ref().map(|r| r.score), delta),
        gap_report: critique.gaps,
        aha_detected: critique.aha_detected,
        critic,
        fallback_reason: None,
    }
}

/// Asks `client` for a critique, substituting the heuristic when it fails.
pub fn run_referee(
    client: &mut dyn RefereeClient,
    question: &QuestionContext,
    outcome: &ElectionOutcome,
    traces: &[CandidateTrace],
    cfg: &RefereeConfig,
) -> RefereeVerdict {
    let request = CritiqueRequest::new(question, &outcome.winner, traces);
    match client.critique(&request) {
        Ok(critique) => referee_decide(outcome, critique, client.name(), cfg),
        Err(err) => {
            let critique = heuristic_critique(&outcome.winner, traces);
            let mut verdict = referee_decide(outcome, critique, HeuristicReferee.name(), cfg);
            verdict.fallback_reason = Some(format!("{}: {err}", client.name()));
            verdict
        }
    }
}
