//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the summary lines are
//! always shown. Exits non-zero if any criterion fails.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use evidence_core::election::{
    answer_score, consensus_keyframes, consensus_objective, elect, ElectionConfig, Member,
};
use evidence_core::evidence_scoring::EvidenceScore;
use evidence_core::grpo_math::{
    group_advantages, log_softmax, train_toy, GrpoConfig, KlEstimator, ToyObjective, ToyPolicy, ToyScoring, ToyTask,
};
use evidence_core::orchestrator::{
    compute_metrics, run, CandidateProvider, PerturbationRequest, QuestionContext, ReplayProvider, RunReport,
    RunSettings, SyntheticProfile, SyntheticProvider,
};
use evidence_core::referee::{
    decide, gap_to_delta, Critique, CritiqueRequest, GapEntry, GapSubject, HeuristicReferee, RefereeClient,
    RefereeDecision, RefereeError,
};
use evidence_core::reward_kernel::{total_reward, LengthClip, RewardWeights};
use evidence_core::trace_schema::{parse_trace, CandidateTrace, FrameHorizon, FrameSet, RawOutput};
use evidence_core::ProviderError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

// ---------------------------------------------------------------- criterion 1

struct Golden {
    name: &'static str,
    text: String,
    truth: &'static str,
    // r_fs, r_tt, r_ar, r_fmt, r_acc
    expect: [f64; 5],
}

fn words(n: usize) -> String {
    (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ")
}

fn doc(think: &str, frames: &str, answer: &str) -> String {
    format!("<think>{think}</think>\n<keyframes>{frames}</keyframes>\n<answer>{answer}</answer>")
}

fn golden_cases() -> Vec<Golden> {
    let r2 = 2f64.sqrt();
    // sin²(πx) at the normalized lengths used below, from half-angle identities.
    let tt_eighth = (2.0 - r2) / 4.0; // L = 184, x = 1/8
    let tt_three_eighths = (2.0 + r2) / 4.0; // L = 424, x = 3/8
    vec![
        Golden { name: "worked example", text: doc(&words(544), "1, 2", "B"), truth: "B", expect: [2.0 / 3.0, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "wrong answer", text: doc(&words(544), "1, 2", "C"), truth: "B", expect: [0.0, 0.0, 0.0, 1.0, 0.0] },
        Golden { name: "empty text", text: String::new(), truth: "B", expect: [0.0; 5] },
        Golden { name: "three frames, quarter length", text: doc(&words(304), "1,2,3", "B"), truth: "B", expect: [0.75, 0.5, 0.0, 1.0, 1.0] },
        Golden { name: "no frames cited", text: doc(&words(544), "", "B"), truth: "B", expect: [0.0, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "out-of-range frame", text: doc(&words(544), "1, 99", "B"), truth: "B", expect: [0.0, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "duplicate frame", text: doc(&words(544), "1, 1, 2", "B"), truth: "B", expect: [1.0 / 3.0, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "non-numeric frame", text: doc(&words(544), "1, x, 2, 3", "B"), truth: "B", expect: [0.5, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "eighth length", text: doc(&words(184), "5", "B"), truth: "B", expect: [0.5, tt_eighth, 0.0, 1.0, 1.0] },
        Golden { name: "three-eighths length", text: doc(&words(424), "5", "B"), truth: "B", expect: [0.5, tt_three_eighths, 0.0, 1.0, 1.0] },
        Golden { name: "sixth length", text: doc(&words(224), "5", "B"), truth: "B", expect: [0.5, 0.25, 0.0, 1.0, 1.0] },
        Golden { name: "third length", text: doc(&words(384), "5", "B"), truth: "B", expect: [0.5, 0.75, 0.0, 1.0, 1.0] },
        Golden { name: "below clip", text: doc(&words(10), "5", "B"), truth: "B", expect: [0.5, 0.0, 0.0, 1.0, 1.0] },
        Golden { name: "above clip", text: doc(&words(2000), "5", "B"), truth: "B", expect: [0.5, 0.0, 0.0, 1.0, 1.0] },
        // "a b c" x10: 28 trigrams, 3 distinct.
        Golden { name: "periodic reasoning", text: doc(&vec!["a b c"; 10].join(" "), "2", "B"), truth: "B", expect: [0.5, 0.0, -25.0 / 28.0, 1.0, 1.0] },
        // 324 distinct tokens then "r" x100: 422 trigrams, 325 distinct.
        Golden {
            name: "repetitive tail",
            text: doc(&format!("{} {}", words(324), vec!["r"; 100].join(" ")), "2", "B"),
            truth: "B",
            expect: [0.5, tt_three_eighths, -(1.0 - 325.0 / 422.0), 1.0, 1.0],
        },
        // "x" x5: 3 trigrams, 1 distinct.
        Golden { name: "single repeated token", text: doc("x x x x x", "2", "B"), truth: "B", expect: [0.5, 0.0, -2.0 / 3.0, 1.0, 1.0] },
        Golden { name: "untagged answer", text: "The answer is B".into(), truth: "B", expect: [0.0, 0.0, 0.0, 0.0, 1.0] },
        Golden { name: "option letter forms", text: doc(&words(544), "3, 4, 5, 6", "(B)."), truth: "b", expect: [0.8, 1.0, 0.0, 1.0, 1.0] },
        Golden {
            name: "tags in another order",
            text: format!("<answer>B</answer><keyframes>1,2</keyframes><think>{}</think>", words(544)),
            truth: "B",
            expect: [2.0 / 3.0, 1.0, 0.0, 1.0, 1.0],
        },
        Golden {
            name: "duplicated answer tag",
            text: format!("<think>{}</think><answer>B</answer><answer>B</answer><keyframes>1</keyframes>", words(544)),
            truth: "B",
            expect: [0.0, 1.0, 0.0, 0.0, 1.0],
        },
        Golden { name: "answer whitespace", text: doc(&words(544), "7", "  B \n"), truth: "b", expect: [0.5, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "bracketed frame list", text: doc(&words(544), "[1, 2]", "B"), truth: "B", expect: [2.0 / 3.0, 1.0, 0.0, 1.0, 1.0] },
        Golden { name: "wrong and repetitive", text: doc("x x x x x", "1,2,3", "D"), truth: "B", expect: [0.0, 0.0, -2.0 / 3.0, 1.0, 0.0] },
    ]
}

fn criterion_1() -> Outcome {
    let weights = [0.2, 0.3, 0.3, 0.1, 0.1]; // w_fs, w_tt, w_ar, w_fmt, w_acc
    let horizon = FrameHorizon::new(32).unwrap();
    let cases = golden_cases();
    let mut worst: f64 = 0.0;
    for case in &cases {
        let trace = parse_trace(&RawOutput::new(case.text.clone()), horizon, 0.25).map_err(|e| e.to_string())?;
        let got = total_reward(&trace, case.truth, &RewardWeights::default(), LengthClip::default(), 3)
            .map_err(|e| e.to_string())?;
        let expect_total: f64 = case.expect.iter().zip(weights).map(|(r, w)| r * w).sum();
        let pairs = [
            ("r_fs", got.r_fs, case.expect[0]),
            ("r_tt", got.r_tt, case.expect[1]),
            ("r_ar", got.r_ar, case.expect[2]),
            ("r_fmt", got.r_fmt, case.expect[3]),
            ("r_acc", got.r_acc, case.expect[4]),
            ("r_total", got.r_total, expect_total),
        ];
        for (field, g, e) in pairs {
            let err = (g - e).abs();
            worst = worst.max(err);
            check(err <= 1e-9, || format!("{}: {field} = {g}, expected {e}", case.name))?;
        }
    }
    let worked = &cases[0];
    let trace = parse_trace(&RawOutput::new(worked.text.clone()), horizon, 0.25).unwrap();
    let total = total_reward(&trace, "B", &RewardWeights::default(), LengthClip::default(), 3).unwrap().r_total;
    check((total - 0.633_333_333_333_333_3).abs() <= 1e-9, || format!("worked example gave {total}"))?;
    Ok(format!("{} traces, max abs error {worst:.1e}", cases.len()))
}

// ---------------------------------------------------------------- criterion 2

fn jaccard_oracle(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Exhaustive maximum of the consensus objective, evaluated with the
/// library's summation order so equal sets give bit-equal values.
fn brute_force(sets: &[FrameSet], members: &[Member<'_>]) -> (f64, FrameSet, f64) {
    let universe: Vec<u32> = sets.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut values = Vec::with_capacity(1 << universe.len());
    for mask in 0u32..(1 << universe.len()) {
        let k: FrameSet = universe.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, f)| *f).collect();
        let mut ordered = members.to_vec();
        ordered.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.keyframes.cmp(b.keyframes)).then_with(|| a.index.cmp(&b.index)));
        let v = consensus_objective(&k, &ordered);
        // Cross-check against an order-free recomputation.
        let plain: f64 = members.iter().map(|m| m.score * jaccard_oracle(&k, m.keyframes)).sum();
        assert!((v - plain).abs() < 1e-12);
        values.push((v, k));
    }
    values.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (a.1.len(), &a.1).cmp(&(b.1.len(), &b.1))));
    let gap = if values.len() > 1 { values[0].0 - values[1].0 } else { f64::INFINITY };
    (values[0].0, values[0].1.clone(), gap)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ElectionConfig::default();
    let mut well_separated = 0;
    let mut local_hits = 0;
    for instance in 0..500 {
        let u = rng.gen_range(0..=10);
        let mut pool: Vec<u32> = (1..=40).collect();
        pool.shuffle(&mut rng);
        let universe = &pool[..u];
        let n = rng.gen_range(1..=6);
        let sets: Vec<FrameSet> = (0..n)
            .map(|_| universe.iter().filter(|_| rng.gen_bool(0.5)).copied().collect())
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let members: Vec<Member<'_>> = sets
            .iter()
            .zip(&scores)
            .enumerate()
            .map(|(index, (k, &score))| Member { index, keyframes: k, score })
            .collect();

        let found = consensus_keyframes(&members, &cfg);
        let (best, best_set, gap) = brute_force(&sets, &members);
        let mut ordered = members.clone();
        ordered.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.keyframes.cmp(b.keyframes)).then_with(|| a.index.cmp(&b.index)));
        let value = consensus_objective(&found, &ordered);
        check(value == best, || format!("instance {instance}: search {value} vs exhaustive {best}"))?;
        if gap > 1e-12 {
            well_separated += 1;
            check(found == best_set, || format!("instance {instance}: {found:?} vs {best_set:?}"))?;
        }
        let local = consensus_keyframes(&members, &ElectionConfig { exact_subset_limit: 1, ..cfg });
        if consensus_objective(&local, &ordered) == best {
            local_hits += 1;
        }
    }
    Ok(format!(
        "500/500 exact, argmax set identical on {well_separated} non-degenerate instances; local search alone optimal on {local_hits}/500"
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean: f64 = 0.0;
    for _ in 0..1000 {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = if rng.gen_bool(0.05) {
            vec![rng.gen_range(-1.0..1.0); g]
        } else {
            (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let adv = group_advantages(&rewards, 1e-8).map_err(|e| e.to_string())?;
        let mean = adv.iter().sum::<f64>() / g as f64;
        worst_mean = worst_mean.max(mean.abs());
        check(mean.abs() < 1e-9, || format!("advantage mean {mean}"))?;
        let m = rewards.iter().sum::<f64>() / g as f64;
        let sigma = (rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / g as f64).sqrt();
        let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        let constant = rewards.iter().all(|r| *r == rewards[0]);
        let expect = if constant { 0.0 } else { sigma / (sigma + 1e-8) };
        check((sd - expect).abs() < 1e-9, || format!("advantage std {sd}, expected {expect}"))?;
    }

    // Analytic gradient against central differences.
    let task = ToyTask::default_templated(&ToyScoring::default()).map_err(|e| e.to_string())?;
    let rewards = task.rewards();
    let mut worst_rel: f64 = 0.0;
    let mut points = 0;
    while points < 10 {
        let n = task.len();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let old: Vec<f64> = logits.iter().map(|l| l + rng.gen_range(-0.3..0.3)).collect();
        let reference: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let samples: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n)).collect();
        let kl = if points % 2 == 0 { KlEstimator::Exact } else { KlEstimator::Sampled };
        let cfg = GrpoConfig { kl_estimator: kl, ..GrpoConfig::default() };
        let old_lp = log_softmax(&old);
        let objective = ToyObjective {
            old_logprobs: samples.iter().map(|&a| old_lp[a]).collect(),
            rewards: samples.iter().map(|&a| rewards[a]).collect(),
            samples: samples.clone(),
            ref_log_probs: log_softmax(&reference),
            cfg,
        };
        // Skip points within reach of a clipping kink.
        let lp = log_softmax(&logits);
        let near_kink = samples.iter().any(|&a| {
            let ratio = (lp[a] - old_lp[a]).exp();
            (ratio - 0.8).abs() < 1e-3 || (ratio - 1.2).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let grad = objective.gradient(&logits).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for j in 0..n {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (objective.value(&up).unwrap() - objective.value(&down).unwrap()) / (2.0 * h);
            diff_sq += (grad[j] - fd).powi(2);
            norm_sq += fd * fd;
        }
        let rel = diff_sq.sqrt() / norm_sq.sqrt().max(1e-12);
        worst_rel = worst_rel.max(rel);
        check(rel < 1e-4, || format!("gradient relative error {rel} at point {points} ({kl:?})"))?;
        points += 1;
    }

    // Two-action bandit under defaults.
    let task = ToyTask::two_action(&ToyScoring::default()).map_err(|e| e.to_string())?;
    let r = task.rewards();
    let cfg = GrpoConfig::default();
    let best = if r[0] > r[1] { 0 } else { 1 };
    // Independent fixed point: argmax of E[r] - beta*KL(pi || uniform) is pi ∝ exp(r / beta).
    let z: f64 = r.iter().map(|ri| (ri / cfg.beta).exp()).sum();
    let oracle_best = (r[best] / cfg.beta).exp() / z;
    check(oracle_best > 0.9, || format!("oracle fixed point {oracle_best}"))?;
    let mut slowest = 0;
    let mut lowest: f64 = 1.0;
    for seed in 0..20 {
        let result = train_toy(ToyPolicy::uniform(2).unwrap(), &task, &cfg, 200, seed).map_err(|e| e.to_string())?;
        let p = result.policy.probs()[best];
        lowest = lowest.min(p);
        check(p > 0.9, || format!("seed {seed}: p(best) = {p} after 200 steps"))?;
        let ordered = p > 0.5;
        check(ordered, || "trained policy prefers the wrong action".into())?;
        let first = result
            .curve
            .iter()
            .position(|s| s.expected_reward > 0.9 * r[best] + 0.1 * r[1 - best])
            .unwrap_or(200);
        slowest = slowest.max(first + 1);
    }
    Ok(format!(
        "|mean A| <= {worst_mean:.1e}; max gradient rel error {worst_rel:.1e}; bandit p(best) >= {lowest:.4} over 20 seeds (oracle {oracle_best:.6}), E[r] within 10% of the best arm by step {slowest}"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn random_pool(rng: &mut ChaCha8Rng) -> (Vec<CandidateTrace>, Vec<EvidenceScore>) {
    let n = rng.gen_range(1..=10);
    let answers = ["a", "b", "c", "d"];
    let mut traces = Vec::new();
    let mut scores = Vec::new();
    for _ in 0..n {
        let k: FrameSet = (1..=12).filter(|_| rng.gen_bool(0.3)).collect();
        let answer = answers[rng.gen_range(0..answers.len())];
        traces.push(CandidateTrace {
            answer_raw: answer.into(),
            answer_canon: answer.into(),
            keyframes: k,
            invalid_frame_count: 0,
            think_text: String::new(),
            think_token_length: 0,
            schema_valid: true,
            confidence: rng.gen_range(0.0..1.0),
        });
        let parts: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        scores.push(EvidenceScore::from_components(parts[0], parts[1], parts[2], parts[3]));
    }
    (traces, scores)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ElectionConfig::default();
    let mut trims_checked = 0;
    for case in 0..1000 {
        let (traces, scores) = random_pool(&mut rng);
        let outcome = elect(&traces, &scores, &cfg).map_err(|e| e.to_string())?;

        // Permutation invariance.
        let mut perm: Vec<usize> = (0..traces.len()).collect();
        perm.shuffle(&mut rng);
        let t2: Vec<_> = perm.iter().map(|&i| traces[i].clone()).collect();
        let s2: Vec<_> = perm.iter().map(|&i| scores[i]).collect();
        let shuffled = elect(&t2, &s2, &cfg).map_err(|e| e.to_string())?;
        check(shuffled.winner.answer_canon == outcome.winner.answer_canon, || format!("case {case}: winner changed under permutation"))?;
        check(shuffled.margin.to_bits() == outcome.margin.to_bits(), || format!("case {case}: margin changed under permutation"))?;
        check(shuffled.early_stop == outcome.early_stop, || format!("case {case}: early stop changed"))?;
        for (a, b) in outcome.ranking.iter().zip(&shuffled.ranking) {
            check(
                a.answer_canon == b.answer_canon
                    && a.score.to_bits() == b.score.to_bits()
                    && a.consensus_keyframes == b.consensus_keyframes,
                || format!("case {case}: cluster {} differs under permutation", a.answer_canon),
            )?;
        }

        for cluster in &outcome.ranking {
            // Score bounds: non-negative, at most the survivors' summed evidence.
            let survivors: f64 = cluster.trimmed_indices.iter().map(|&i| scores[i].composite).sum();
            check(cluster.score >= 0.0 && cluster.score <= survivors + 1e-12, || format!("case {case}: score {} outside [0, {survivors}]", cluster.score))?;
            check(cluster.score <= cluster.trimmed_indices.len() as f64, || format!("case {case}: score above survivor count"))?;
            let expected_survivors = match cluster.member_indices.len() {
                m if m >= 4 => m - 2,
                3 => 2,
                m => m,
            };
            check(cluster.trimmed_indices.len() == expected_survivors, || format!("case {case}: wrong survivor count"))?;
            check(cluster.trimmed_indices.iter().all(|i| cluster.member_indices.contains(i)), || format!("case {case}: survivor outside cluster"))?;

            // Trimming robustness: with the consensus fixed, pushing the top
            // score up or the bottom score down leaves the cluster score alone.
            if cluster.member_indices.len() >= 4 {
                let base: Vec<Member<'_>> = cluster
                    .member_indices
                    .iter()
                    .map(|&i| Member { index: i, keyframes: &traces[i].keyframes, score: scores[i].composite })
                    .collect();
                let original = answer_score(&base, &cluster.consensus_keyframes).score;
                let top = base.iter().enumerate().max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.1.index.cmp(&a.1.index))).unwrap().0;
                let bottom = base.iter().enumerate().min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.1.index.cmp(&b.1.index))).unwrap().0;
                let mut inflated = base.clone();
                inflated[top].score = 1e6;
                let mut deflated = base.clone();
                deflated[bottom].score = -1e6;
                let a = answer_score(&inflated, &cluster.consensus_keyframes).score;
                let b = answer_score(&deflated, &cluster.consensus_keyframes).score;
                check(a == original && b == original, || format!("case {case}: outlier moved score {original} -> {a} / {b}"))?;
                trims_checked += 1;
            }
        }
        check(outcome.margin >= 0.0, || format!("case {case}: negative margin"))?;
        if outcome.early_stop {
            check(outcome.margin > cfg.delta && outcome.winner.mean_confidence > cfg.gamma, || format!("case {case}: early stop without predicate"))?;
        }
    }
    Ok(format!("1000 elections, 0 failures ({trims_checked} trimmed clusters stress-tested)"))
}

// ---------------------------------------------------------------- criterion 5

fn run_many(profile: SyntheticProfile, settings: &RunSettings, questions: usize, seed: u64) -> Result<Vec<RunReport>, String> {
    let mut provider = SyntheticProvider::new(profile, seed);
    (0..questions)
        .map(|i| {
            let q = QuestionContext::new(format!("q{i:03}"), 32);
            run(&q, &mut provider, &mut HeuristicReferee, settings).map_err(|e| e.to_string())
        })
        .collect()
}

fn avg_k(reports: &[RunReport]) -> f64 {
    reports.iter().map(|r| r.k_used as f64).sum::<f64>() / reports.len() as f64
}

fn criterion_5() -> Outcome {
    let settings = RunSettings::default();
    let k_max = settings.budget.k_max;
    let initial = settings.budget.initial_k;

    let dominant = run_many(SyntheticProfile::default(), &settings, 200, 5)?;
    let at_initial = dominant.iter().filter(|r| r.k_used == initial).count();
    let dom_k = avg_k(&dominant);
    let mean_conf = dominant.iter().map(|r| r.election.winner.mean_confidence).sum::<f64>() / 200.0;
    check(mean_conf > 0.5, || format!("dominant winners average confidence {mean_conf}"))?;
    check(dom_k < k_max as f64, || format!("dominant Avg K {dom_k}"))?;
    check(at_initial * 10 >= 200 * 9, || format!("only {at_initial}/200 stopped at k={initial}"))?;
    for r in &dominant {
        if r.rounds[0].early_stop {
            check(r.rounds.len() == 1 && r.k_used <= initial + 1, || format!("{}: expanded after early stop", r.question_id))?;
        }
    }

    let contested = SyntheticProfile::Contested { answers: vec!["A".into(), "B".into(), "C".into()] };
    let reports = run_many(contested, &settings, 200, 5)?;
    let con_k = avg_k(&reports);
    check(con_k == k_max as f64, || format!("contested Avg K {con_k}"))?;
    check(reports.iter().all(|r| r.rounds.iter().all(|x| x.margin.unwrap() <= settings.election.delta)), || "a contested margin cleared delta".into())?;

    let never = RunSettings {
        election: ElectionConfig { delta: f64::INFINITY, ..ElectionConfig::default() },
        ..RunSettings::default()
    };
    let disabled = run_many(SyntheticProfile::default(), &never, 50, 6)?;
    check(disabled.iter().all(|r| r.k_used == k_max), || "early stop disabled but a run ended below k_max".into())?;

    Ok(format!(
        "dominant: Avg K {dom_k:.3}, {at_initial}/200 at k={initial}; contested: Avg K {con_k:.3}; delta=inf: Avg K {:.3}",
        avg_k(&disabled)
    ))
}

// ---------------------------------------------------------------- criterion 6

/// Counts invocations and reports a fixed number of gaps.
struct Scripted {
    calls: Rc<Cell<usize>>,
    gaps: usize,
}

impl RefereeClient for Scripted {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn critique(&mut self, _request: &CritiqueRequest) -> Result<Critique, RefereeError> {
        self.calls.set(self.calls.get() + 1);
        Ok(Critique {
            gaps: (0..self.gaps)
                .map(|i| GapEntry { subject: GapSubject::Claim(format!("gap {i}")), reason: "unsupported".into() })
                .collect(),
            aha_detected: false,
        })
    }
}

/// Counts provider calls on top of a synthetic provider.
struct Counting {
    inner: SyntheticProvider,
    calls: Rc<Cell<usize>>,
}

impl CandidateProvider for Counting {
    fn name(&self) -> String {
        "counting".into()
    }

    fn generate(&mut self, q: &QuestionContext, r: &PerturbationRequest) -> Result<RawOutput, ProviderError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.generate(q, r)
    }
}

fn criterion_6() -> Outcome {
    // Decision table against a direct argmax over {winner + delta, runner-up}.
    let winners = [0.0, 0.1, 0.45, 0.5, 1.0, 1.4, 2.0];
    let runners = [None, Some(0.0), Some(0.05), Some(0.45), Some(0.5), Some(0.6), Some(1.0), Some(2.0)];
    let deltas = [0.0, -0.05, -0.1, -0.175, -0.5, -0.7, -1.0, -2.0];
    let mut cells = 0;
    for &w in &winners {
        for &r in &runners {
            if r.is_some_and(|r| r > w) {
                continue;
            }
            for &d in &deltas {
                let argmax = match r {
                    Some(r) if r > w + d => RefereeDecision::FlipToRunnerUp,
                    _ => RefereeDecision::Confirm,
                };
                check(decide(w, r, d) == argmax, || format!("decide({w}, {r:?}, {d})"))?;
                cells += 1;
            }
        }
    }
    let gap = GapEntry { subject: GapSubject::Frame(1), reason: String::new() };
    for g in 0..7 {
        for trimmed in 1..6 {
            for kappa in [0.0, 0.25, 0.5, 1.0] {
                let score = 1.3;
                let expected = if g == 0 { 0.0 } else { -score * (g as f64 / trimmed as f64).min(1.0) * kappa };
                let got = gap_to_delta(&vec![gap.clone(); g], score, trimmed, kappa);
                check((got - expected).abs() < 1e-15 && got <= 0.0, || format!("delta for g={g}, n={trimmed}"))?;
            }
        }
    }

    // Exactly one referee call per orchestrated run.
    let settings = RunSettings::default();
    let mut flips = 0;
    for i in 0..100 {
        let profile = match i % 3 {
            0 => SyntheticProfile::default(),
            1 => SyntheticProfile::Contested { answers: vec!["A".into(), "B".into()] },
            _ => SyntheticProfile::Contested { answers: vec!["A".into(), "B".into(), "C".into()] },
        };
        let calls = Rc::new(Cell::new(0));
        let acquired = Rc::new(Cell::new(0));
        let mut referee = Scripted { calls: calls.clone(), gaps: 3 * (i % 2) };
        let mut provider = Counting { inner: SyntheticProvider::new(profile, i as u64), calls: acquired.clone() };
        let q = QuestionContext::new(format!("r{i:03}"), 32);
        let report = run(&q, &mut provider, &mut referee, &settings).map_err(|e| e.to_string())?;
        check(calls.get() == 1 && report.referee_invocations == 1, || format!("run {i}: {} referee calls", calls.get()))?;
        let before = report.rounds.last().unwrap().k;
        let top_two: Vec<&str> = [Some(&report.election.winner), report.election.runner_up.as_ref()]
            .into_iter()
            .flatten()
            .map(|c| c.answer_canon.as_str())
            .collect();
        check(top_two.contains(&report.final_answer.as_str()), || format!("run {i}: final answer outside the top two"))?;
        check(report.k_used == acquired.get(), || format!("run {i}: k_used disagrees with provider calls"))?;
        check(report.k_used <= settings.budget.k_max + 1, || format!("run {i}: budget exceeded"))?;
        match report.referee.decision {
            RefereeDecision::FlipToRunnerUp => {
                flips += 1;
                check(report.resampled && report.k_used == before + 1, || format!("run {i}: flip drew {} extra", report.k_used - before))?;
            }
            RefereeDecision::Confirm => {
                check(!report.resampled && report.k_used == before, || format!("run {i}: confirm drew extra samples"))?;
            }
        }
    }
    check(flips > 0, || "no run exercised the flip path".into())?;
    Ok(format!("{cells} decision cells and 140 delta cells match; 100 runs with one referee call each, {flips} flips each drew exactly one extra sample"))
}

// ---------------------------------------------------------------- criterion 7

fn replay_reports(file: &str, seed: u64) -> Result<String, String> {
    let path = fixtures().join(file);
    let reader = std::io::BufReader::new(std::fs::File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?);
    let mut provider = ReplayProvider::from_reader(reader, 32).map_err(|e| e.to_string())?;
    let mut settings = RunSettings::default();
    settings.diversification.base_seed = seed;
    let mut out = String::new();
    for q in provider.questions().to_vec() {
        let report = run(&q, &mut provider, &mut HeuristicReferee, &settings).map_err(|e| e.to_string())?;
        out.push_str(&serde_json::to_string(&report).unwrap());
        out.push('\n');
    }
    Ok(out)
}

fn criterion_7() -> Outcome {
    let a = replay_reports("replay.jsonl", 7)?;
    let b = replay_reports("replay.jsonl", 7)?;
    check(a == b, || "replay reports differ between runs".into())?;
    let settings = RunSettings::default();
    let s1 = serde_json::to_string(&run_many(SyntheticProfile::default(), &settings, 10, 7)?).unwrap();
    let s2 = serde_json::to_string(&run_many(SyntheticProfile::default(), &settings, 10, 7)?).unwrap();
    check(s1 == s2, || "synthetic reports differ between runs".into())?;

    let untagged = replay_reports("replay_untagged.jsonl", 7)?;
    let report: RunReport = serde_json::from_str(untagged.lines().next().unwrap()).unwrap();
    check(report.election.fallback, || "schema-missing fixture did not use the answer-level fallback".into())?;
    check(report.candidates.iter().all(|c| !c.trace.schema_valid), || "fixture unexpectedly has schema-valid traces".into())?;
    check(report.final_answer == "c", || format!("fallback answered {:?}", report.final_answer))?;
    Ok(format!(
        "replay fixture: {} reports, {} bytes identical across runs; synthetic identical; fallback answer {:?}",
        a.lines().count(),
        a.len(),
        report.final_answer
    ))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let reports: Vec<RunReport> = replay_reports("replay_metrics.jsonl", 0)?
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-9);

    // m1: two "b" traces, T = 10.
    //   c0 cites {1,2,3}, 544 distinct tokens: tau = 1, rho = 0, v = 1.
    //   c1 cites {2,3} plus the out-of-range 12, 304 tokens: tau = 1/2, v = 2/3.
    //   S0 = (3/4 + 1 + 1 + 0.9)/4, S1 = (1/3 + 1/2 + 1 + 0.9)/4, so
    //   {1,2,3} scores S0 + 2/3 S1 > {2,3} at 2/3 S0 + S1: consensus {1,2,3}.
    //   u0 = 1, u1 = 2/3, EGS = (1 + 2/3) / 2 = 5/6, TI = 3/4, RR = 0, Avg K = 2.
    let m1 = compute_metrics(&reports[..1]).map_err(|e| e.to_string())?;
    check(close(m1.egs, 5.0 / 6.0), || format!("m1 EGS {:?}", m1.egs))?;
    check(close(m1.ti, 0.75), || format!("m1 TI {:?}", m1.ti))?;
    check(close(m1.rr, 0.0), || format!("m1 RR {:?}", m1.rr))?;
    check((m1.avg_k - 2.0).abs() <= 1e-9, || format!("m1 Avg K {}", m1.avg_k))?;

    // m2: two identical "c" traces citing {4} with "a a a a a a" (4 trigrams,
    //   1 distinct: rho = 3/4, tau = 0) and one untagged "c" that is not parsed.
    //   The tagged pair outweighs the empty citation, so consensus {4}: EGS 1 each.
    // Both: EGS = (1 + 2/3 + 1 + 1)/4 = 11/12, TI = 3/8, RR = 3/8, Avg K = 5/2.
    let both = compute_metrics(&reports).map_err(|e| e.to_string())?;
    check(both.parsed_candidates == 4, || format!("{} parsed candidates", both.parsed_candidates))?;
    check(close(both.egs, 11.0 / 12.0), || format!("EGS {:?}", both.egs))?;
    check(close(both.ti, 0.375), || format!("TI {:?}", both.ti))?;
    check(close(both.rr, 0.375), || format!("RR {:?}", both.rr))?;
    check((both.avg_k - 2.5).abs() <= 1e-9, || format!("Avg K {}", both.avg_k))?;

    // k_used of 3, 3 and 4 average to 10/3.
    let mut three = vec![reports[1].clone(), reports[1].clone(), reports[1].clone()];
    three[2].k_used = 4;
    let k = compute_metrics(&three).map_err(|e| e.to_string())?.avg_k;
    check((k - 10.0 / 3.0).abs() <= 1e-9, || format!("Avg K {k}"))?;

    Ok(format!(
        "EGS {:.6} TI {:.3} RR {:.3} Avg K {:.2} as derived by hand",
        both.egs.unwrap(),
        both.ti.unwrap(),
        both.rr.unwrap(),
        both.avg_k
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("reward golden suite", criterion_1),
        ("consensus oracle equivalence", criterion_2),
        ("GRPO math checks", criterion_3),
        ("election invariance suite", criterion_4),
        ("early-stop mechanics", criterion_5),
        ("referee contract", criterion_6),
        ("end-to-end reproducibility", criterion_7),
        ("metrics definitions", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.2}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.2}s) {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
