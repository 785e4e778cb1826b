//! Adaptive inference loop: diversify, acquire, score, elect, expand, check.
//!
//! A run starts with `initial_k` candidates and adds `expand_step` more per
//! round until the election stops early or `k_max` is reached. The referee
//! then inspects the provisional winner once. If it flips toward the
//! runner-up, exactly one more candidate is drawn and the election is
//! recomputed without another referee pass.

mod metrics;
mod providers;

pub use metrics::{compute_metrics, Metrics};
pub use providers::{ReplayProvider, SubprocessProvider, SyntheticProfile, SyntheticProvider};

use serde::{Deserialize, Serialize};

use crate::election::{aggregate, ElectionConfig, ElectionOutcome};
use crate::error::{Error, ProviderError, Result};
use crate::evidence_scoring::{score_candidate, EvidenceScore};
use crate::referee::{run_referee, RefereeClient, RefereeConfig, RefereeDecision, RefereeVerdict};
use crate::reward_kernel::{LengthClip, DEFAULT_NGRAM};
use crate::trace_schema::{parse_trace, CandidateTrace, FrameHorizon, RawOutput, DEFAULT_TAIL_FRACTION};

/// The question a run answers. Frames are numbered `1..=total_frames`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionContext {
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    pub total_frames: u32,
}

impl QuestionContext {
    pub fn new(id: impl Into<String>, total_frames: u32) -> Self {
        Self {
            id: id.into(),
            prompt: String::new(),
            total_frames,
        }
    }
}

/// How candidate requests are perturbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversificationSpec {
    pub temperature_grid: Vec<f64>,
    pub top_p: f64,
    /// Explicit per-request seeds. Requests past the end get derived seeds.
    pub seeds: Vec<u64>,
    pub base_seed: u64,
    /// Forwarded to the provider verbatim.
    pub crop_tags: Vec<String>,
    pub include_conservative: bool,
}

impl Default for DiversificationSpec {
    fn default() -> Self {
        Self {
            temperature_grid: vec![0.2, 0.7, 0.9],
            top_p: 0.9,
            seeds: Vec::new(),
            base_seed: 0,
            crop_tags: [
                "crop:center@0.9",
                "crop:top_left@0.9",
                "crop:top_right@0.9",
                "crop:bottom_left@0.9",
                "crop:bottom_right@0.9",
                "blur:0.5",
                "brightness:+0.10",
                "brightness:-0.10",
            ]
            .map(String::from)
            .to_vec(),
            include_conservative: true,
        }
    }
}

impl DiversificationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.temperature_grid.is_empty() {
            return Err(Error::config("diversification.temperature_grid", "must not be empty"));
        }
        if let Some(t) = self.temperature_grid.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::config(
                "diversification.temperature_grid",
                format!("temperature {t} must be finite and > 0"),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("diversification.top_p", format!("{} is outside (0, 1]", self.top_p)));
        }
        Ok(())
    }

    fn seed_for(&self, index: usize) -> u64 {
        self.seeds
            .get(index)
            .copied()
            .unwrap_or_else(|| splitmix64(self.base_seed ^ splitmix64(index as u64)))
    }

    /// Request number `index` of the deterministic enumeration.
    ///
    /// With the conservative run enabled, request 0 uses the lowest
    /// temperature and no crop. The rest walk the grid from the highest
    /// temperature down while cycling the crop tags, so the first few
    /// requests are the most diverse.
    pub fn request(&self, index: usize) -> PerturbationRequest {
        let seed = self.seed_for(index);
        if self.include_conservative && index == 0 {
            let lowest = self.temperature_grid.iter().copied().fold(f64::INFINITY, f64::min);
            return PerturbationRequest {
                index,
                temperature: lowest,
                top_p: self.top_p,
                seed,
                crop_tag: None,
                conservative: true,
            };
        }
        let j = index - usize::from(self.include_conservative);
        let mut temps = self.temperature_grid.clone();
        temps.sort_by(|a, b| b.total_cmp(a));
        PerturbationRequest {
            index,
            temperature: temps[j % temps.len()],
            top_p: self.top_p,
            seed,
            crop_tag: (!self.crop_tags.is_empty()).then(|| self.crop_tags[j % self.crop_tags.len()].clone()),
            conservative: false,
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First `count` requests of the enumeration.
pub fn build_requests(spec: &DiversificationSpec, count: usize) -> Vec<PerturbationRequest> {
    (0..count).map(|i| spec.request(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRequest {
    pub index: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    #[serde(default)]
    pub crop_tag: Option<String>,
    #[serde(default)]
    pub conservative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub k_max: usize,
    pub initial_k: usize,
    pub expand_step: usize,
    /// Extra attempts per candidate after a failed or timed-out request.
    pub max_retries: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            k_max: 8,
            initial_k: 3,
            expand_step: 2,
            max_retries: 2,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::config("budget.k_max", "must be positive"));
        }
        if self.initial_k == 0 || self.initial_k > self.k_max {
            return Err(Error::config(
                "budget.initial_k",
                format!("{} must be in 1..={}", self.initial_k, self.k_max),
            ));
        }
        if self.expand_step == 0 {
            return Err(Error::config("budget.expand_step", "must be at least 1"));
        }
        Ok(())
    }
}

/// Source of raw candidate outputs.
pub trait CandidateProvider {
    fn name(&self) -> String;

    fn generate(
        &mut self,
        question: &QuestionContext,
        request: &PerturbationRequest,
    ) -> std::result::Result<RawOutput, ProviderError>;
}

/// Everything `run` needs besides the question and its collaborators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSettings {
    pub diversification: DiversificationSpec,
    pub budget: BudgetConfig,
    pub election: ElectionConfig,
    pub referee: RefereeConfig,
    pub scoring: ScoringSettings,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringSettings {
    pub clip: LengthClip,
    pub ngram: usize,
    pub tail_fraction: f64,
}

impl Default for ScoringSettings {
    fn default() -> Self {
        Self {
            clip: LengthClip::default(),
            ngram: DEFAULT_NGRAM,
            tail_fraction: DEFAULT_TAIL_FRACTION,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.diversification.validate()?;
        self.budget.validate()?;
        self.election.validate()?;
        self.referee.validate()?;
        self.scoring.clip.validate()?;
        if self.scoring.ngram == 0 {
            return Err(Error::config("reward.ngram", "must be at least 1"));
        }
        if !(self.scoring.tail_fraction > 0.0 && self.scoring.tail_fraction <= 1.0) {
            return Err(Error::config("parse.tail_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub request: PerturbationRequest,
    pub raw: RawOutput,
    pub trace: CandidateTrace,
    pub score: EvidenceScore,
}

/// Election state after one acquisition round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub k: usize,
    /// `None` when no candidate carried an answer yet.
    pub winner: Option<String>,
    pub margin: Option<f64>,
    pub early_stop: bool,
}

/// The extra acquisition and recomputed election after a referee flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resample {
    /// False when the provider had nothing left to give.
    pub acquired: bool,
    pub election: Option<ElectionOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub question_id: String,
    pub final_answer: String,
    pub k_used: usize,
    pub early_stopped: bool,
    pub resampled: bool,
    pub referee_invocations: usize,
    pub rounds: Vec<RoundRecord>,
    /// Election the referee inspected.
    pub election: ElectionOutcome,
    pub referee: RefereeVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample: Option<Resample>,
    pub candidates: Vec<CandidateRecord>,
}

impl RunReport {
    /// The election whose clusters define the final consensus sets.
    pub fn final_election(&self) -> &ElectionOutcome {
        self.resample
            .as_ref()
            .and_then(|r| r.election.as_ref())
            .unwrap_or(&self.election)
    }
}

/// What a run had gathered when it was aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRun {
    pub candidates: Vec<CandidateRecord>,
    pub rounds: Vec<RoundRecord>,
}

struct Pool<'a> {
    question: &'a QuestionContext,
    horizon: FrameHorizon,
    settings: &'a RunSettings,
    records: Vec<CandidateRecord>,
    rounds: Vec<RoundRecord>,
    exhausted: bool,
}

impl Pool<'_> {
    fn len(&self) -> usize {
        self.records.len()
    }

    /// Acquires up to `n` more candidates. Stops quietly when the provider is exhausted.
    fn acquire(&mut self, provider: &mut dyn CandidateProvider, n: usize) -> Result<usize> {
        let mut got = 0;
        while got < n && !self.exhausted {
            let request = self.settings.diversification.request(self.records.len());
            match self.fetch(provider, &request) {
                Ok(raw) => {
                    let trace = parse_trace(&raw, self.horizon, self.settings.scoring.tail_fraction)?;
                    let score = score_candidate(&trace, self.settings.scoring.clip, self.settings.scoring.ngram);
                    self.records.push(CandidateRecord { request, raw, trace, score });
                    got += 1;
                }
                Err(ProviderError::Exhausted(_)) => self.exhausted = true,
                Err(cause) => {
                    return Err(Error::RunAborted {
                        question_id: self.question.id.clone(),
                        cause,
                        partial: Box::new(PartialRun {
                            candidates: std::mem::take(&mut self.records),
                            rounds: std::mem::take(&mut self.rounds),
                        }),
                    })
                }
            }
        }
        Ok(got)
    }

    fn fetch(
        &self,
        provider: &mut dyn CandidateProvider,
        request: &PerturbationRequest,
    ) -> std::result::Result<RawOutput, ProviderError> {
        let mut last = None;
        for _ in 0..=self.settings.budget.max_retries {
            let result = provider.generate(self.question, request).and_then(|raw| {
                raw.validate()
                    .map(|_| raw)
                    .map_err(|e| ProviderError::Failed(format!("invalid output: {e}")))
            });
            match result {
                Ok(raw) => return Ok(raw),
                Err(e @ ProviderError::Exhausted(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn elect(&self) -> Result<Option<ElectionOutcome>> {
        let traces: Vec<CandidateTrace> = self.records.iter().map(|r| r.trace.clone()).collect();
        let scores: Vec<EvidenceScore> = self.records.iter().map(|r| r.score).collect();
        match aggregate(&traces, &scores, &self.settings.election) {
            Ok(outcome) => Ok(Some(outcome)),
            Err(Error::NoAnswer(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn traces(&self) -> Vec<CandidateTrace> {
        self.records.iter().map(|r| r.trace.clone()).collect()
    }
}

/// Answers one question.
pub fn run(
    question: &QuestionContext,
    provider: &mut dyn CandidateProvider,
    referee: &mut dyn RefereeClient,
    settings: &RunSettings,
) -> Result<RunReport> {
    settings.validate()?;
    let mut pool = Pool {
        question,
        horizon: FrameHorizon::new(question.total_frames)?,
        settings,
        records: Vec::new(),
        rounds: Vec::new(),
        exhausted: false,
    };
    let budget = settings.budget;

    pool.acquire(provider, budget.initial_k)?;
    let provisional = loop {
        if pool.len() == 0 {
            return Err(Error::NoAnswer(format!("provider {} returned no candidates", provider.name())));
        }
        let outcome = pool.elect()?;
        pool.rounds.push(RoundRecord {
            k: pool.len(),
            winner: outcome.as_ref().map(|o| o.winner.answer_canon.clone()),
            margin: outcome.as_ref().map(|o| o.margin),
            early_stop: outcome.as_ref().is_some_and(|o| o.early_stop),
        });
        let stop = outcome.as_ref().is_some_and(|o| o.early_stop);
        if stop || pool.len() >= budget.k_max || pool.exhausted {
            break outcome;
        }
        let want = budget.expand_step.min(budget.k_max - pool.len());
        pool.acquire(provider, want)?;
    };
    let provisional = provisional.ok_or_else(|| {
        Error::NoAnswer(format!("none of {} candidates carries an answer", pool.len()))
    })?;

    let traces = pool.traces();
    let verdict = run_referee(referee, question, &provisional, &traces, &settings.referee);
    let winner = provisional.winner.answer_canon.clone();

    let (final_answer, resample) = match (verdict.decision, &provisional.runner_up) {
        (RefereeDecision::FlipToRunnerUp, Some(runner_up)) => {
            let runner_up = runner_up.answer_canon.clone();
            let acquired = pool.acquire(provider, 1)? == 1;
            if acquired {
                let recomputed = pool.elect()?;
                let answer = recomputed
                    .as_ref()
                    .map_or(runner_up.clone(), |o| better_of(o, &winner, &runner_up));
                (answer, Some(Resample { acquired, election: recomputed }))
            } else {
                (runner_up, Some(Resample { acquired, election: None }))
            }
        }
        _ => (winner, None),
    };

    Ok(RunReport {
        question_id: question.id.clone(),
        final_answer,
        k_used: pool.len(),
        early_stopped: provisional.early_stop,
        resampled: resample.as_ref().is_some_and(|r| r.acquired),
        referee_invocations: 1,
        rounds: pool.rounds,
        election: provisional,
        referee: verdict,
        resample,
        candidates: pool.records,
    })
}

/// Picks between the provisional top two by recomputed score; ties go to the runner-up.
fn better_of(outcome: &ElectionOutcome, winner: &str, runner_up: &str) -> String {
    let score = |answer: &str| {
        outcome
            .ranking
            .iter()
            .find(|c| c.answer_canon == answer)
            .map_or(f64::NEG_INFINITY, |c| c.score)
    };
    if score(winner) > score(runner_up) {
        winner.to_string()
    } else {
        runner_up.to_string()
    }
}
