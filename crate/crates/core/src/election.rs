//! Evidence-weighted election over canonical answers.
//!
//! Candidates are grouped by canonical answer. Each cluster gets a consensus
//! keyframe set `K̄` maximising `Σ S_i · J(K, K_i)` and a score
//! `Σ S_i · J(K_i, K̄)` over the members that survive outlier trimming.
//!
//! # Consensus search space
//!
//! Let `U` be the union of the members' citations. For any `K` and any frame
//! `f ∉ U`, removing `f` from `K` leaves every `|K ∩ K_i|` unchanged and
//! shrinks every `|K ∪ K_i|` by one, so no Jaccard term decreases. The
//! maximiser can therefore be searched among subsets of `U` only. The search
//! is exhaustive for `|U| <= exact_subset_limit` and a deterministic local
//! search otherwise.
//!
//! Every floating-point reduction sums in a canonical member order so that
//! results are bit-identical under any reordering of the input candidates.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence_scoring::EvidenceScore;
use crate::trace_schema::{CandidateTrace, FrameSet};

const MAX_EXACT_SUBSET_LIMIT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectionConfig {
    /// Margin the winner must exceed for early stopping. `inf` disables early stopping.
    pub delta: f64,
    /// Mean confidence the winning cluster must exceed for early stopping.
    pub gamma: f64,
    /// Largest citation union searched exhaustively for the consensus set.
    pub exact_subset_limit: usize,
}

impl Default for ElectionConfig {
    fn default() -> Self {
        Self {
            delta: 0.08,
            gamma: 0.4,
            exact_subset_limit: 16,
        }
    }
}

impl ElectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) {
            return Err(Error::config("election.delta", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("election.gamma", "must lie in [0, 1]"));
        }
        if self.exact_subset_limit == 0 || self.exact_subset_limit > MAX_EXACT_SUBSET_LIMIT {
            return Err(Error::config(
                "election.exact_subset_limit",
                format!("must lie in 1..={MAX_EXACT_SUBSET_LIMIT}"),
            ));
        }
        Ok(())
    }
}

/// Jaccard similarity, with two empty sets counting as identical.
pub fn jaccard(a: &FrameSet, b: &FrameSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Candidates sharing one canonical answer, before scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCluster {
    pub answer_canon: String,
    pub member_indices: Vec<usize>,
}

/// Partitions candidate indices by canonical answer, ordered by answer.
pub fn cluster_answers(traces: &[CandidateTrace]) -> Vec<RawCluster> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        groups.entry(t.answer_canon.as_str()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(answer, member_indices)| RawCluster {
            answer_canon: answer.to_string(),
            member_indices,
        })
        .collect()
}

/// A cluster member as seen by the consensus search and the scorer.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub index: usize,
    pub keyframes: &'a FrameSet,
    pub score: f64,
}

/// Canonical order: higher score first, then citations, then index.
fn canonical_order(members: &mut [Member<'_>]) {
    members.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.keyframes.cmp(b.keyframes))
            .then_with(|| a.index.cmp(&b.index))
    });
}

/// `Σ S_i · J(K, K_i)` summed in the order given.
pub fn consensus_objective(candidate: &FrameSet, members: &[Member<'_>]) -> f64 {
    members.iter().map(|m| m.score * jaccard(candidate, m.keyframes)).sum()
}

/// True when `a` beats `b` under the tie rules: higher objective, then smaller, then lexicographically smaller.
fn prefer(a_obj: f64, a: &[u32], b_obj: f64, b: &[u32]) -> bool {
    match a_obj.total_cmp(&b_obj) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.len(), a) < (b.len(), b),
    }
}

/// Consensus keyframe set of a cluster.
pub fn consensus_keyframes(members: &[Member<'_>], cfg: &ElectionConfig) -> FrameSet {
    let mut ordered = members.to_vec();
    canonical_order(&mut ordered);
    let universe: Vec<u32> = ordered
        .iter()
        .flat_map(|m| m.keyframes.iter().copied())
        .collect::<FrameSet>()
        .into_iter()
        .collect();
    if universe.is_empty() {
        return FrameSet::new();
    }
    if universe.len() <= cfg.exact_subset_limit {
        exhaustive_consensus(&universe, &ordered)
    } else {
        local_search_consensus(&universe, &ordered)
    }
}

fn exhaustive_consensus(universe: &[u32], members: &[Member<'_>]) -> FrameSet {
    let position = |f: &u32| universe.binary_search(f).expect("frame in universe");
    let masks: Vec<(u64, u32, f64)> = members
        .iter()
        .map(|m| {
            let mask = m.keyframes.iter().fold(0u64, |acc, f| acc | 1 << position(f));
            (mask, mask.count_ones(), m.score)
        })
        .collect();
    let frames_of = |mask: u64| -> Vec<u32> {
        (0..universe.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| universe[i])
            .collect()
    };

    let mut best_mask = 0u64;
    let mut best_obj = f64::NEG_INFINITY;
    let mut best_frames = Vec::new();
    for mask in 0..(1u64 << universe.len()) {
        let size = mask.count_ones();
        let obj: f64 = masks
            .iter()
            .map(|&(m, m_size, s)| {
                if size == 0 && m_size == 0 {
                    s
                } else {
                    let inter = (mask & m).count_ones();
                    s * f64::from(inter) / f64::from(size + m_size - inter)
                }
            })
            .sum();
        if obj > best_obj {
            best_obj = obj;
            best_mask = mask;
            best_frames = frames_of(mask);
        } else if obj == best_obj {
            let frames = frames_of(mask);
            if prefer(obj, &frames, best_obj, &best_frames) {
                best_mask = mask;
                best_frames = frames;
            }
        }
    }
    debug_assert_eq!(frames_of(best_mask), best_frames);
    best_frames.into_iter().collect()
}

/// Incremental state for the local search: per-member intersection sizes.
struct SearchState<'m, 'a> {
    members: &'m [Member<'a>],
    chosen: Vec<bool>,
    size: usize,
    inter: Vec<usize>,
    /// `contains[u][i]`: member i cites universe frame u.
    contains: Vec<Vec<bool>>,
}

impl SearchState<'_, '_> {
    fn objective_with(&self, size: usize, inter: impl Fn(usize) -> usize) -> f64 {
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let k = m.keyframes.len();
                if size == 0 && k == 0 {
                    m.score
                } else {
                    let n = inter(i);
                    m.score * n as f64 / (size + k - n) as f64
                }
            })
            .sum()
    }

    fn objective(&self) -> f64 {
        self.objective_with(self.size, |i| self.inter[i])
    }

    fn objective_after(&self, add: Option<usize>, remove: Option<usize>) -> f64 {
        let size = self.size + add.is_some() as usize - remove.is_some() as usize;
        self.objective_with(size, |i| {
            self.inter[i] + add.is_some_and(|u| self.contains[u][i]) as usize
                - remove.is_some_and(|u| self.contains[u][i]) as usize
        })
    }

    fn apply(&mut self, add: Option<usize>, remove: Option<usize>) {
        if let Some(u) = add {
            self.chosen[u] = true;
            self.size += 1;
            for (i, n) in self.inter.iter_mut().enumerate() {
                *n += self.contains[u][i] as usize;
            }
        }
        if let Some(u) = remove {
            self.chosen[u] = false;
            self.size -= 1;
            for (i, n) in self.inter.iter_mut().enumerate() {
                *n -= self.contains[u][i] as usize;
            }
        }
    }
}

/// Greedy add phase followed by remove/swap refinement, seeded with the
/// citations of the highest-scoring member. Only strictly improving moves are
/// taken, so the search terminates.
fn local_search_consensus(universe: &[u32], members: &[Member<'_>]) -> FrameSet {
    let contains: Vec<Vec<bool>> = universe
        .iter()
        .map(|f| members.iter().map(|m| m.keyframes.contains(f)).collect())
        .collect();
    let mut state = SearchState {
        members,
        chosen: vec![false; universe.len()],
        size: 0,
        inter: vec![0; members.len()],
        contains,
    };
    for (u, f) in universe.iter().enumerate() {
        if members[0].keyframes.contains(f) {
            state.apply(Some(u), None);
        }
    }
    let mut current = state.objective();
    loop {
        let outside: Vec<usize> = (0..universe.len()).filter(|&u| !state.chosen[u]).collect();
        let inside: Vec<usize> = (0..universe.len()).filter(|&u| state.chosen[u]).collect();

        let mut best: Option<(f64, Option<usize>, Option<usize>)> = None;
        let consider = |best: &mut Option<(f64, Option<usize>, Option<usize>)>, obj: f64, add, remove| {
            if obj > current && best.is_none_or(|(b, _, _)| obj > b) {
                *best = Some((obj, add, remove));
            }
        };
        for &u in &outside {
            consider(&mut best, state.objective_after(Some(u), None), Some(u), None);
        }
        if best.is_none() {
            for &u in &inside {
                consider(&mut best, state.objective_after(None, Some(u)), None, Some(u));
            }
            for &out in &inside {
                for &add in &outside {
                    consider(&mut best, state.objective_after(Some(add), Some(out)), Some(add), Some(out));
                }
            }
        }
        match best {
            Some((obj, add, remove)) => {
                state.apply(add, remove);
                current = obj;
            }
            None => break,
        }
    }
    universe
        .iter()
        .zip(&state.chosen)
        .filter(|(_, c)| **c)
        .map(|(f, _)| *f)
        .collect()
}

/// Which members were discarded as outliers.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trim {
    pub removed_max: Option<usize>,
    pub removed_min: Option<usize>,
}

/// Drops one maximal and one minimal member from clusters of four or more,
/// only the minimal one from clusters of three, and nothing otherwise.
/// Score ties go to the lexicographically smallest keyframe set, then the
/// earliest index, so the outcome does not depend on candidate order unless
/// the tied members are interchangeable. Returns the survivors in input order.
pub fn trim_members<'a>(members: &[Member<'a>]) -> (Vec<Member<'a>>, Trim) {
    let extreme = |pool: &[Member<'a>], want: Ordering| -> Option<usize> {
        pool.iter()
            .copied()
            .reduce(|best, m| match m.score.total_cmp(&best.score) {
                o if o == want => m,
                Ordering::Equal if (m.keyframes, m.index) < (best.keyframes, best.index) => m,
                _ => best,
            })
            .map(|m| m.index)
    };
    let mut trim = Trim::default();
    let mut pool = members.to_vec();
    if pool.len() >= 4 {
        trim.removed_max = extreme(&pool, Ordering::Greater);
        pool.retain(|m| Some(m.index) != trim.removed_max);
    }
    if pool.len() >= 3 {
        trim.removed_min = extreme(&pool, Ordering::Less);
        pool.retain(|m| Some(m.index) != trim.removed_min);
    }
    (pool, trim)
}

/// Trimmed evidence-weighted score of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerScore {
    pub score: f64,
    pub survivors: Vec<usize>,
    pub trim: Trim,
}

pub fn answer_score(members: &[Member<'_>], consensus: &FrameSet) -> AnswerScore {
    let (mut survivors, trim) = trim_members(members);
    let indices = survivors.iter().map(|m| m.index).collect();
    canonical_order(&mut survivors);
    let score = survivors
        .iter()
        .map(|m| m.score * jaccard(m.keyframes, consensus))
        .sum();
    AnswerScore {
        score,
        survivors: indices,
        trim,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCluster {
    pub answer_canon: String,
    pub member_indices: Vec<usize>,
    pub consensus_keyframes: FrameSet,
    pub score: f64,
    pub trimmed_indices: Vec<usize>,
    pub mean_confidence: f64,
}

/// One entry of the election's decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditRecord {
    ClusterScored {
        answer: String,
        members: Vec<usize>,
        consensus: FrameSet,
        removed_max: Option<usize>,
        removed_min: Option<usize>,
        survivors: Vec<usize>,
        score: f64,
        mean_confidence: f64,
    },
    Ranking {
        order: Vec<String>,
    },
    Predicate {
        margin: f64,
        delta: f64,
        mean_confidence: f64,
        gamma: f64,
        early_stop: bool,
    },
    Fallback {
        reason: String,
        votes: Vec<(String, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionOutcome {
    pub winner: AnswerCluster,
    pub runner_up: Option<AnswerCluster>,
    pub margin: f64,
    pub early_stop: bool,
    /// True when the outcome came from answer-level plurality voting.
    #[serde(default)]
    pub fallback: bool,
    /// Every cluster, best first.
    pub ranking: Vec<AnswerCluster>,
    pub audit: Vec<AuditRecord>,
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn rank(clusters: &mut [AnswerCluster]) {
    clusters.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.mean_confidence.total_cmp(&a.mean_confidence))
            .then_with(|| a.answer_canon.cmp(&b.answer_canon))
    });
}

fn finish(mut ranking: Vec<AnswerCluster>, mut audit: Vec<AuditRecord>, cfg: &ElectionConfig, fallback: bool) -> ElectionOutcome {
    rank(&mut ranking);
    audit.push(AuditRecord::Ranking {
        order: ranking.iter().map(|c| c.answer_canon.clone()).collect(),
    });
    let winner = ranking[0].clone();
    let runner_up = ranking.get(1).cloned();
    let margin = winner.score - runner_up.as_ref().map_or(0.0, |r| r.score);
    let early_stop = margin > cfg.delta && winner.mean_confidence > cfg.gamma;
    audit.push(AuditRecord::Predicate {
        margin,
        delta: cfg.delta,
        mean_confidence: winner.mean_confidence,
        gamma: cfg.gamma,
        early_stop,
    });
    ElectionOutcome {
        winner,
        runner_up,
        margin,
        early_stop,
        fallback,
        ranking,
        audit,
    }
}

/// Runs the evidence-weighted election.
pub fn elect(traces: &[CandidateTrace], scores: &[EvidenceScore], cfg: &ElectionConfig) -> Result<ElectionOutcome> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(Error::Usage("election needs at least one candidate".into()));
    }
    if traces.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} traces but {} scores",
            traces.len(),
            scores.len()
        )));
    }
    let mut audit = Vec::new();
    let mut clusters = Vec::new();
    // An empty answer cannot be output, so its cluster does not stand.
    for raw in cluster_answers(traces).into_iter().filter(|c| !c.answer_canon.is_empty()) {
        let members: Vec<Member<'_>> = raw
            .member_indices
            .iter()
            .map(|&i| Member {
                index: i,
                keyframes: &traces[i].keyframes,
                score: scores[i].composite,
            })
            .collect();
        let consensus = consensus_keyframes(&members, cfg);
        let scored = answer_score(&members, &consensus);
        let mean_confidence = sorted_mean(raw.member_indices.iter().map(|&i| traces[i].confidence).collect());
        audit.push(AuditRecord::ClusterScored {
            answer: raw.answer_canon.clone(),
            members: raw.member_indices.clone(),
            consensus: consensus.clone(),
            removed_max: scored.trim.removed_max,
            removed_min: scored.trim.removed_min,
            survivors: scored.survivors.clone(),
            score: scored.score,
            mean_confidence,
        });
        clusters.push(AnswerCluster {
            answer_canon: raw.answer_canon,
            member_indices: raw.member_indices,
            consensus_keyframes: consensus,
            score: scored.score,
            trimmed_indices: scored.survivors,
            mean_confidence,
        });
    }
    if clusters.is_empty() {
        return Err(Error::NoAnswer(format!(
            "none of {} candidates carries an answer",
            traces.len()
        )));
    }
    Ok(finish(clusters, audit, cfg, false))
}

/// Plurality vote on canonical answers for outputs without a usable schema.
///
/// Cluster scores are vote shares; ties go to the higher mean confidence and
/// then the lexicographically smaller answer. Empty answers do not vote.
pub fn fallback_majority(traces: &[CandidateTrace], cfg: &ElectionConfig) -> Result<ElectionOutcome> {
    cfg.validate()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        if !t.answer_canon.is_empty() {
            groups.entry(t.answer_canon.as_str()).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::NoAnswer(format!(
            "none of {} candidates carries an answer",
            traces.len()
        )));
    }
    let voters: usize = groups.values().map(Vec::len).sum();
    let votes = groups.iter().map(|(a, m)| (a.to_string(), m.len())).collect();
    let audit = vec![AuditRecord::Fallback {
        reason: "no candidate follows the trace schema".into(),
        votes,
    }];
    let clusters = groups
        .into_iter()
        .map(|(answer, members)| AnswerCluster {
            answer_canon: answer.to_string(),
            score: members.len() as f64 / voters as f64,
            mean_confidence: sorted_mean(members.iter().map(|&i| traces[i].confidence).collect()),
            consensus_keyframes: FrameSet::new(),
            trimmed_indices: members.clone(),
            member_indices: members,
        })
        .collect();
    Ok(finish(clusters, audit, cfg, true))
}

/// Evidence election when any candidate follows the schema, plurality otherwise.
pub fn aggregate(traces: &[CandidateTrace], scores: &[EvidenceScore], cfg: &ElectionConfig) -> Result<ElectionOutcome> {
    if traces.iter().any(|t| t.schema_valid) {
        elect(traces, scores, cfg)
    } else {
        fallback_majority(traces, cfg)
    }
}
