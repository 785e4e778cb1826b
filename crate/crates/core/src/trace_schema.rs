//! Structured trace parsing.
//!
//! A model output is expected to carry three literal tag pairs,
//! `<think>…</think>`, `<answer>…</answer>` and `<keyframes>…</keyframes>`,
//! in any order. [`parse_trace`] maps the raw text onto a [`CandidateTrace`]
//! deterministically; when the schema is violated it still extracts whatever
//! it can so that answer-level aggregation has something to vote on.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted set of 1-based frame indices.
pub type FrameSet = BTreeSet<u32>;

/// Default share of the output tail used for the confidence proxy.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;

const TAGS: [&str; 3] = ["think", "answer", "keyframes"];

/// One unparsed model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOutput {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub provenance: String,
}

impl RawOutput {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_probs: None,
            provenance: String::new(),
        }
    }

    pub fn with_token_probs(mut self, probs: Vec<f64>) -> Self {
        self.token_probs = Some(probs);
        self
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Checks the token probability invariant: non-empty, every value in (0, 1].
    pub fn validate(&self) -> Result<()> {
        if let Some(probs) = &self.token_probs {
            if probs.is_empty() {
                return Err(Error::Data("token_probs must not be empty".into()));
            }
            if let Some((i, p)) = probs
                .iter()
                .enumerate()
                .find(|(_, p)| !(**p > 0.0 && **p <= 1.0))
            {
                return Err(Error::Data(format!(
                    "token_probs[{i}] = {p} is outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Number of frames in the video a question refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameHorizon {
    total_frames: u32,
}

impl FrameHorizon {
    pub fn new(total_frames: u32) -> Result<Self> {
        if total_frames == 0 {
            return Err(Error::config("total_frames", "must be at least 1"));
        }
        Ok(Self { total_frames })
    }

    pub fn total_frames(&self) -> u32 {
        self.total_frames
    }

    pub fn contains(&self, frame: u64) -> bool {
        frame >= 1 && frame <= u64::from(self.total_frames)
    }
}

/// Canonical structured view of one model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub answer_raw: String,
    pub answer_canon: String,
    pub keyframes: FrameSet,
    pub invalid_frame_count: u32,
    pub think_text: String,
    pub think_token_length: u32,
    pub schema_valid: bool,
    pub confidence: f64,
}

impl CandidateTrace {
    /// Number of entries in the raw keyframe list (kept plus rejected).
    pub fn raw_keyframe_entries(&self) -> u32 {
        self.keyframes.len() as u32 + self.invalid_frame_count
    }
}

#[derive(Debug, Clone, Copy)]
struct TagSpan {
    /// Byte offset of the opening tag.
    start: usize,
    /// Byte offset just past the closing tag.
    end: usize,
    content_start: usize,
    content_end: usize,
}

fn open_tag(name: &str) -> String {
    format!("<{name}>")
}

fn close_tag(name: &str) -> String {
    format!("</{name}>")
}

/// Locates the single well-formed occurrence of a tag pair, if there is exactly one.
fn unique_span(text: &str, name: &str) -> Option<TagSpan> {
    let open = open_tag(name);
    let close = close_tag(name);
    if text.matches(open.as_str()).count() != 1 || text.matches(close.as_str()).count() != 1 {
        return None;
    }
    let start = text.find(open.as_str())?;
    let close_at = text.find(close.as_str())?;
    let content_start = start + open.len();
    if close_at < content_start {
        return None;
    }
    Some(TagSpan {
        start,
        end: close_at + close.len(),
        content_start,
        content_end: close_at,
    })
}

/// Returns true iff the output carries exactly one well-formed, non-nested
/// occurrence of each tag pair and a non-empty answer.
pub fn check_format(raw: &RawOutput) -> bool {
    let text = raw.text.as_str();
    let mut spans = Vec::with_capacity(TAGS.len());
    for name in TAGS {
        match unique_span(text, name) {
            Some(span) => spans.push(span),
            None => return false,
        }
    }
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if a.start < b.end && b.start < a.end {
                return false;
            }
        }
    }
    let answer = spans[1];
    !text[answer.content_start..answer.content_end].trim().is_empty()
}

/// Best-effort content of the first occurrence of a tag.
///
/// An unclosed tag runs to the next recognised tag or the end of the text.
fn tag_content<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let open = open_tag(name);
    let start = text.find(open.as_str())? + open.len();
    let rest = &text[start..];
    if let Some(end) = rest.find(close_tag(name).as_str()) {
        return Some(&rest[..end]);
    }
    let stop = TAGS
        .iter()
        .flat_map(|t| [open_tag(t), close_tag(t)])
        .filter_map(|t| rest.find(t.as_str()))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..stop])
}

/// Removes a tag and its content, plus any stray copies of its markers.
fn strip_tag(text: &str, name: &str) -> String {
    let open = open_tag(name);
    let close = close_tag(name);
    let mut out = text.to_string();
    while let Some(start) = out.find(open.as_str()) {
        match out[start..].find(close.as_str()) {
            Some(rel) => out.replace_range(start..start + rel + close.len(), " "),
            None => out.replace_range(start..start + open.len(), " "),
        }
    }
    out.replace(close.as_str(), " ")
}

/// Answer for outputs without an `<answer>` tag: the last non-empty line
/// outside the reasoning block, with a leading "answer is"/"answer:" removed.
fn fallback_answer(text: &str) -> String {
    let mut rest = strip_tag(text, "think");
    rest = strip_tag(&rest, "keyframes");
    let line = rest
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .unwrap_or("");
    let lower = line.to_lowercase();
    for marker in ["answer is", "answer:"] {
        if let Some(pos) = lower.rfind(marker) {
            // Lowercasing can shift byte offsets for non-ASCII text.
            if lower.len() == line.len() {
                return line[pos + marker.len()..].trim().to_string();
            }
        }
    }
    line.to_string()
}

#[derive(Debug, Default, PartialEq)]
struct ParsedFrames {
    kept: FrameSet,
    invalid: u32,
}

/// Parses a comma/whitespace separated frame list against the horizon.
fn parse_frames(content: &str, horizon: FrameHorizon) -> ParsedFrames {
    let trimmed = content
        .trim()
        .trim_start_matches(['[', '(', '{'])
        .trim_end_matches([']', ')', '}']);
    let mut out = ParsedFrames::default();
    for entry in trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|e| !e.is_empty())
    {
        match entry.parse::<u64>() {
            Ok(frame) if horizon.contains(frame) => {
                if !out.kept.insert(frame as u32) {
                    out.invalid += 1;
                }
            }
            _ => out.invalid += 1,
        }
    }
    out
}

/// Mean of the last `ceil(tail_fraction * n)` token probabilities.
fn tail_confidence(probs: Option<&[f64]>, tail_fraction: f64) -> f64 {
    let Some(probs) = probs.filter(|p| !p.is_empty()) else {
        return 0.0;
    };
    let n = probs.len();
    // The small offset keeps e.g. 0.1 * 30 from rounding up to 4.
    let take = ((tail_fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let tail = &probs[n - take..];
    let mean = tail.iter().sum::<f64>() / take as f64;
    mean.clamp(0.0, 1.0)
}

/// Whitespace token count used as the reasoning length.
pub fn whitespace_token_count(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

/// Maps a raw output onto its structured trace.
pub fn parse_trace(raw: &RawOutput, horizon: FrameHorizon, tail_fraction: f64) -> Result<CandidateTrace> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::config("tail_fraction", format!("{tail_fraction} is outside (0, 1]")));
    }
    let text = raw.text.as_str();
    let schema_valid = check_format(raw);

    let answer_raw = match tag_content(text, "answer") {
        Some(a) => a.trim().to_string(),
        None => fallback_answer(text),
    };
    let think_text = tag_content(text, "think").unwrap_or("").trim().to_string();
    let frames = tag_content(text, "keyframes")
        .map(|c| parse_frames(c, horizon))
        .unwrap_or_default();

    Ok(CandidateTrace {
        answer_canon: canonicalize_answer(&answer_raw),
        answer_raw,
        keyframes: frames.kept,
        invalid_frame_count: frames.invalid,
        think_token_length: whitespace_token_count(&think_text),
        think_text,
        schema_valid,
        confidence: tail_confidence(raw.token_probs.as_deref(), tail_fraction),
    })
}

const TRAILING_PUNCT: [char; 6] = ['.', ',', ';', ':', '!', '?'];

fn option_letter(s: &str) -> Option<char> {
    let single = |t: &str| {
        let mut chars = t.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_lowercase() => Some(c),
            _ => None,
        }
    };
    if let Some(inner) = s.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
        return single(inner);
    }
    if let Some(inner) = s.strip_suffix(')').or_else(|| s.strip_suffix('.')) {
        return single(inner);
    }
    if let Some(inner) = s.strip_prefix("option ") {
        return single(inner);
    }
    None
}

/// Normalises a free-form answer for exact-match comparison.
///
/// Lowercases, collapses whitespace, strips trailing `.,;:!?`, and reduces
/// option-letter forms such as `(b)`, `b)`, `b.` and `option b` to the letter.
pub fn canonicalize_answer(answer_raw: &str) -> String {
    let lowered = answer_raw.to_lowercase();
    let mut s = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = s.trim_end_matches(TRAILING_PUNCT).trim_end();
        if stripped.len() == s.len() {
            break;
        }
        s = stripped.to_string();
    }
    match option_letter(&s) {
        Some(letter) => letter.to_string(),
        None => s,
    }
}
