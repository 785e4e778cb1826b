use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CandidateProvider, PerturbationRequest, QuestionContext};
use crate::error::{Error, ProviderError, Result};
use crate::trace_schema::RawOutput;

#[derive(Debug, Deserialize)]
struct ReplayLine {
    question_id: String,
    #[serde(default)]
    total_frames: Option<u32>,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(flatten)]
    output: RawOutput,
}

/// Serves recorded outputs: the `i`-th line of a question answers request `i`.
///
/// Each line is a raw output object with an extra `question_id` and,
/// optionally, `total_frames` and `prompt` that describe the question.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    outputs: BTreeMap<String, Vec<RawOutput>>,
    questions: Vec<QuestionContext>,
}

impl ReplayProvider {
    pub fn from_reader(reader: impl BufRead, default_total_frames: u32) -> Result<Self> {
        let mut provider = Self::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayLine = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("replay line {}: {e}", n + 1)))?;
            rec.output
                .validate()
                .map_err(|e| Error::Data(format!("replay line {}: {e}", n + 1)))?;
            if !provider.outputs.contains_key(&rec.question_id) {
                provider.questions.push(QuestionContext {
                    id: rec.question_id.clone(),
                    prompt: String::new(),
                    total_frames: default_total_frames,
                });
            }
            let q = provider
                .questions
                .iter_mut()
                .find(|q| q.id == rec.question_id)
                .expect("question registered");
            if let Some(t) = rec.total_frames {
                q.total_frames = t;
            }
            if let Some(p) = rec.prompt {
                q.prompt = p;
            }
            provider.outputs.entry(rec.question_id).or_default().push(rec.output);
        }
        Ok(provider)
    }

    /// Questions in order of first appearance.
    pub fn questions(&self) -> &[QuestionContext] {
        &self.questions
    }
}

impl CandidateProvider for ReplayProvider {
    fn name(&self) -> String {
        "replay".into()
    }

    fn generate(
        &mut self,
        question: &QuestionContext,
        request: &PerturbationRequest,
    ) -> std::result::Result<RawOutput, ProviderError> {
        let outputs = self.outputs.get(&question.id).map_or(&[][..], Vec::as_slice);
        outputs
            .get(request.index)
            .cloned()
            .ok_or(ProviderError::Exhausted(outputs.len()))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    question: &'a QuestionContext,
    request: &'a PerturbationRequest,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireReply {
    Output(RawOutput),
    Control {
        #[serde(default)]
        exhausted: bool,
        #[serde(default)]
        error: Option<String>,
    },
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Long-lived child process speaking one JSON object per line each way.
///
/// Requests are `{"question": .., "request": ..}`. Replies are raw output
/// objects, or `{"exhausted": true}` / `{"error": ".."}`. After a timeout the
/// child is restarted on the next request so late replies cannot be
/// mistaken for fresh ones.
pub struct SubprocessProvider {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    session: Option<Session>,
}

impl SubprocessProvider {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        Self {
            program: program.into(),
            args,
            timeout,
            session: None,
        }
    }

    /// Splits a command line on whitespace (no quoting).
    pub fn from_command_line(command: &str, timeout: Duration) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::config("provider", "subprocess command is empty"))?;
        Ok(Self::new(program, parts.collect(), timeout))
    }

    fn spawn(&self) -> std::result::Result<Session, ProviderError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Failed(format!("cannot start {}: {e}", self.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session { child, stdin, lines })
    }
}

impl CandidateProvider for SubprocessProvider {
    fn name(&self) -> String {
        format!("subprocess:{}", self.program)
    }

    fn generate(
        &mut self,
        question: &QuestionContext,
        request: &PerturbationRequest,
    ) -> std::result::Result<RawOutput, ProviderError> {
        if self.session.is_none() {
            self.session = Some(self.spawn()?);
        }
        let session = self.session.as_mut().expect("session started");
        let mut payload = serde_json::to_string(&WireRequest { question, request })
            .map_err(|e| ProviderError::Failed(e.to_string()))?;
        payload.push('\n');
        if let Err(e) = session.stdin.write_all(payload.as_bytes()).and_then(|_| session.stdin.flush()) {
            self.session = None;
            return Err(ProviderError::Failed(format!("writing request: {e}")));
        }
        let line = loop {
            match session.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => break line,
                Ok(Err(e)) => {
                    self.session = None;
                    return Err(ProviderError::Failed(format!("reading reply: {e}")));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.session = None;
                    return Err(ProviderError::Timeout(self.timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.session = None;
                    return Err(ProviderError::Failed("provider closed its output".into()));
                }
            }
        };
        match serde_json::from_str::<WireReply>(&line) {
            Ok(WireReply::Output(raw)) => Ok(raw),
            Ok(WireReply::Control { exhausted: true, .. }) => Err(ProviderError::Exhausted(request.index)),
            Ok(WireReply::Control { error: Some(e), .. }) => Err(ProviderError::Failed(e)),
            _ => Err(ProviderError::Failed(format!("malformed reply: {line}"))),
        }
    }
}

/// Shape of the synthetic candidate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticProfile {
    /// One answer is drawn with probability `p_dominant` and carries strong
    /// evidence; the others are weakly supported. Conservative requests
    /// always return the dominant answer.
    Dominant { answer: String, distractors: Vec<String>, p_dominant: f64 },
    /// Answers rotate with the request index and carry near-identical
    /// evidence, so no margin ever clears the early-stop threshold.
    Contested { answers: Vec<String> },
    /// Untagged free-text answers, mostly `answer`.
    Untagged { answer: String, distractors: Vec<String>, p_dominant: f64 },
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self::Dominant {
            answer: "B".into(),
            distractors: vec!["A".into(), "C".into(), "D".into()],
            p_dominant: 0.9,
        }
    }
}

/// Deterministic stand-in for a sampling model.
///
/// Every output is a pure function of the provider seed, the question id
/// and the request (index and seed).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticProvider {
    pub profile: SyntheticProfile,
    pub seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn distinct_think(rng: &mut ChaCha8Rng, len: usize) -> String {
    let offset: u32 = rng.gen_range(0..1000);
    (0..len).map(|i| format!("s{}", i as u32 + offset)).collect::<Vec<_>>().join(" ")
}

fn probs(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn frame_list(frames: &[u32]) -> String {
    frames.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

fn tagged(think: &str, frames: &str, answer: &str) -> String {
    format!("<think>{think}</think>\n<keyframes>{frames}</keyframes>\n<answer>{answer}</answer>")
}

impl SyntheticProvider {
    pub fn new(profile: SyntheticProfile, seed: u64) -> Self {
        Self { profile, seed }
    }

    /// Frames every strong candidate for this question cites.
    fn question_frames(&self, question: &QuestionContext) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&question.id));
        let t = question.total_frames.max(1);
        let mut all: Vec<u32> = (1..=t).collect();
        all.shuffle(&mut rng);
        let mut chosen: Vec<u32> = all.into_iter().take(3).collect();
        chosen.sort_unstable();
        chosen
    }

    fn strong(&self, rng: &mut ChaCha8Rng, frames: &[u32], answer: &str) -> RawOutput {
        let len = rng.gen_range(520..=568);
        let think = distinct_think(rng, len);
        RawOutput::new(tagged(&think, &frame_list(frames), answer)).with_token_probs(probs(rng, 40, 0.85, 0.98))
    }

    fn weak(&self, rng: &mut ChaCha8Rng, question: &QuestionContext, answer: &str) -> RawOutput {
        let phrase = format!("maybe it is {answer}");
        let think = vec![phrase.as_str(); rng.gen_range(6..12)].join(" ");
        let t = question.total_frames.max(1);
        let frames = format!("{}, {}", rng.gen_range(1..=t), t + rng.gen_range(1..10));
        RawOutput::new(tagged(&think, &frames, answer)).with_token_probs(probs(rng, 40, 0.2, 0.5))
    }
}

impl CandidateProvider for SyntheticProvider {
    fn name(&self) -> String {
        "synthetic".into()
    }

    fn generate(
        &mut self,
        question: &QuestionContext,
        request: &PerturbationRequest,
    ) -> std::result::Result<RawOutput, ProviderError> {
        let mix = self.seed ^ fnv1a(&question.id).rotate_left(17) ^ (request.index as u64).rotate_left(41) ^ request.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let frames = self.question_frames(question);
        let out = match &self.profile {
            SyntheticProfile::Dominant { answer, distractors, p_dominant } => {
                if request.conservative || distractors.is_empty() || rng.gen_bool(p_dominant.clamp(0.0, 1.0)) {
                    self.strong(&mut rng, &frames, answer)
                } else {
                    let wrong = distractors.choose(&mut rng).expect("non-empty");
                    self.weak(&mut rng, question, wrong)
                }
            }
            SyntheticProfile::Contested { answers } => {
                if answers.is_empty() {
                    return Err(ProviderError::Failed("contested profile has no answers".into()));
                }
                let answer = &answers[request.index % answers.len()];
                let len = rng.gen_range(540..=548);
                let think = distinct_think(&mut rng, len);
                RawOutput::new(tagged(&think, &frame_list(&frames), answer)).with_token_probs(probs(&mut rng, 40, 0.59, 0.61))
            }
            SyntheticProfile::Untagged { answer, distractors, p_dominant } => {
                let pick = if request.conservative || distractors.is_empty() || rng.gen_bool(p_dominant.clamp(0.0, 1.0)) {
                    answer
                } else {
                    distractors.choose(&mut rng).expect("non-empty")
                };
                RawOutput::new(format!("Looking at the clip.\nThe answer is ({pick}).")).with_token_probs(probs(&mut rng, 12, 0.5, 0.9))
            }
        };
        Ok(out.with_provenance(format!("synthetic:{}:{}", question.id, request.index)))
    }
}
