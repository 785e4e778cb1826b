use std::io::Write;
use std::path::Path;

use evidence_core::config::{AppConfig, ProviderSpec};
use evidence_core::election::aggregate;
use evidence_core::evidence_scoring::{score_candidate, EvidenceScore};
use evidence_core::grpo_math::{train_toy, KlEstimator, ToyPolicy, ToyScoring, ToyTask};
use evidence_core::orchestrator::{
    compute_metrics, run, CandidateProvider, QuestionContext, ReplayProvider, RunReport, SubprocessProvider,
    SyntheticProfile, SyntheticProvider,
};
use evidence_core::referee::{HeuristicReferee, RefereeClient, SubprocessReferee};
use evidence_core::reward_kernel::total_reward;
use evidence_core::trace_schema::CandidateTrace;
use evidence_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::io::{open_input, open_output, read_jsonl, read_text, source_name, write_json_line, TraceInput};

pub fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_parse(cfg: &mut AppConfig, opts: &ParseOptions) {
    if let Some(t) = opts.total_frames {
        cfg.parse.total_frames = t;
    }
    if let Some(f) = opts.tail_fraction {
        cfg.parse.tail_fraction = f;
    }
}

fn apply_scoring(cfg: &mut AppConfig, opts: &ScoringOptions) {
    if let Some(lo) = opts.clip_lo {
        cfg.length_clip.lo = lo;
    }
    if let Some(hi) = opts.clip_hi {
        cfg.length_clip.hi = hi;
    }
    if let Some(n) = opts.ngram {
        cfg.parse.ngram = n;
    }
}

fn apply_election(cfg: &mut AppConfig, opts: &ElectionOptions) {
    if let Some(d) = opts.delta {
        cfg.election.delta = d;
    }
    if let Some(g) = opts.gamma {
        cfg.election.gamma = g;
    }
    if let Some(l) = opts.exact_subset_limit {
        cfg.election.exact_subset_limit = l;
    }
}

fn read_traces(path: Option<&Path>, cfg: &AppConfig) -> Result<Vec<CandidateTrace>> {
    let inputs: Vec<TraceInput> = read_jsonl(open_input(path)?, &source_name(path))?;
    inputs
        .into_iter()
        .map(|i| i.into_trace(cfg.parse.total_frames, cfg.parse.tail_fraction))
        .collect()
}

pub fn parse(mut cfg: AppConfig, args: &ParseArgs) -> Result<()> {
    apply_parse(&mut cfg, &args.parse);
    cfg.validate()?;
    let traces = read_traces(args.io.input.as_deref(), &cfg)?;
    let mut out = open_output(args.io.out.as_deref())?;
    for t in &traces {
        write_json_line(&mut out, t)?;
    }
    out.flush()?;
    let valid = traces.iter().filter(|t| t.schema_valid).count();
    eprintln!("parsed {} outputs, {valid} schema-valid", traces.len());
    Ok(())
}

fn read_ground_truth(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let l = l.trim();
            if l.starts_with('"') {
                serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))
            } else {
                Ok(l.to_string())
            }
        })
        .collect()
}

pub fn reward(mut cfg: AppConfig, args: &RewardArgs) -> Result<()> {
    apply_parse(&mut cfg, &args.parse);
    apply_scoring(&mut cfg, &args.scoring);
    let w = &mut cfg.reward;
    for (slot, flag) in [
        (&mut w.w_acc, args.w_acc),
        (&mut w.w_fmt, args.w_fmt),
        (&mut w.w_fs, args.w_fs),
        (&mut w.w_tt, args.w_tt),
        (&mut w.w_ar, args.w_ar),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    cfg.validate()?;
    let traces = read_traces(args.io.input.as_deref(), &cfg)?;
    let truths = read_ground_truth(&args.ground_truth)?;
    if truths.len() != traces.len() {
        return Err(Error::Data(format!(
            "{} traces but {} ground-truth answers in {}",
            traces.len(),
            truths.len(),
            args.ground_truth.display()
        )));
    }
    let mut out = open_output(args.io.out.as_deref())?;
    let mut sum = 0.0;
    for (t, gt) in traces.iter().zip(&truths) {
        let r = total_reward(t, gt, &cfg.reward, cfg.length_clip, cfg.parse.ngram)?;
        sum += r.r_total;
        write_json_line(&mut out, &r)?;
    }
    out.flush()?;
    if !traces.is_empty() {
        eprintln!("scored {} traces, mean reward {:.4}", traces.len(), sum / traces.len() as f64);
    }
    Ok(())
}

pub fn score(mut cfg: AppConfig, args: &ScoreArgs) -> Result<()> {
    apply_parse(&mut cfg, &args.parse);
    apply_scoring(&mut cfg, &args.scoring);
    cfg.validate()?;
    let traces = read_traces(args.io.input.as_deref(), &cfg)?;
    let mut out = open_output(args.io.out.as_deref())?;
    for t in &traces {
        write_json_line(&mut out, &score_candidate(t, cfg.length_clip, cfg.parse.ngram))?;
    }
    out.flush()?;
    eprintln!("scored {} traces", traces.len());
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ElectLine {
    Pair { trace: TraceInput, score: EvidenceScore },
    Single(TraceInput),
}

pub fn elect(mut cfg: AppConfig, args: &ElectArgs) -> Result<()> {
    apply_parse(&mut cfg, &args.parse);
    apply_scoring(&mut cfg, &args.scoring);
    apply_election(&mut cfg, &args.election);
    cfg.validate()?;
    let path = args.io.input.as_deref();
    let lines: Vec<ElectLine> = read_jsonl(open_input(path)?, &source_name(path))?;
    let mut traces = Vec::with_capacity(lines.len());
    let mut scores = Vec::with_capacity(lines.len());
    for line in lines {
        let (input, given) = match line {
            ElectLine::Pair { trace, score } => (trace, Some(score)),
            ElectLine::Single(trace) => (trace, None),
        };
        let trace = input.into_trace(cfg.parse.total_frames, cfg.parse.tail_fraction)?;
        scores.push(given.unwrap_or_else(|| score_candidate(&trace, cfg.length_clip, cfg.parse.ngram)));
        traces.push(trace);
    }
    if let Some(p) = &args.scores {
        let override_scores: Vec<EvidenceScore> = read_jsonl(open_input(Some(p))?, &p.display().to_string())?;
        if override_scores.len() != traces.len() {
            return Err(Error::Data(format!(
                "{} candidates but {} scores in {}",
                traces.len(),
                override_scores.len(),
                p.display()
            )));
        }
        scores = override_scores;
    }
    if traces.is_empty() {
        return Err(Error::Data(format!("no candidates in {}", source_name(path))));
    }
    let outcome = aggregate(&traces, &scores, &cfg.election)?;
    let mut out = open_output(args.io.out.as_deref())?;
    write_json_line(&mut out, &outcome)?;
    out.flush()?;
    eprintln!(
        "winner {:?} score {:.4} margin {:.4}{}{}",
        outcome.winner.answer_canon,
        outcome.winner.score,
        outcome.margin,
        if outcome.early_stop { ", early stop" } else { "" },
        if outcome.fallback { ", answer-level fallback" } else { "" }
    );
    Ok(())
}

pub fn synthetic_profile_for(p: ProfileArg) -> SyntheticProfile {
    let letters = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match p {
        ProfileArg::Dominant => SyntheticProfile::default(),
        ProfileArg::Contested => SyntheticProfile::Contested { answers: letters(&["A", "B", "C"]) },
        ProfileArg::Untagged => SyntheticProfile::Untagged {
            answer: "B".into(),
            distractors: letters(&["A", "C", "D"]),
            p_dominant: 0.7,
        },
    }
}

pub fn run_cmd(mut cfg: AppConfig, args: &RunArgs) -> Result<()> {
    apply_parse(&mut cfg, &args.parse);
    apply_scoring(&mut cfg, &args.scoring);
    apply_election(&mut cfg, &args.election);
    if let Some(p) = &args.provider {
        cfg.provider.spec = p.clone();
    }
    if let Some(k) = args.k_max {
        cfg.budget.k_max = k;
    }
    if let Some(k) = args.initial_k {
        cfg.budget.initial_k = k;
    }
    if let Some(s) = args.expand_step {
        cfg.budget.expand_step = s;
    }
    if let Some(k) = args.kappa {
        cfg.referee.settings.kappa = k;
    }
    if let Some(r) = &args.referee {
        cfg.referee.command = Some(r.clone());
    }
    if let Some(o) = &args.out {
        cfg.output.report = Some(o.clone());
    }
    cfg.validate()?;
    let settings = cfg.run_settings();
    let timeout = std::time::Duration::from_secs_f64(cfg.provider.timeout_secs);

    let mut questions: Option<Vec<QuestionContext>> = match &args.questions {
        Some(p) => Some(read_jsonl(open_input(Some(p))?, &p.display().to_string())?),
        None => None,
    };
    let mut provider: Box<dyn CandidateProvider> = match cfg.provider_spec()? {
        ProviderSpec::Synthetic => Box::new(SyntheticProvider::new(synthetic_profile_for(args.profile), cfg.seed)),
        ProviderSpec::Replay(path) => {
            let replay = ReplayProvider::from_reader(open_input(Some(&path))?, cfg.parse.total_frames)?;
            questions.get_or_insert_with(|| replay.questions().to_vec());
            Box::new(replay)
        }
        ProviderSpec::Subprocess(cmd) => Box::new(SubprocessProvider::from_command_line(&cmd, timeout)?),
    };
    let questions = questions.unwrap_or_else(|| {
        (0..args.num_questions)
            .map(|i| QuestionContext::new(format!("q{:04}", i + 1), cfg.parse.total_frames))
            .collect()
    });
    let mut referee: Box<dyn RefereeClient> = match &cfg.referee.command {
        Some(cmd) => Box::new(SubprocessReferee::from_command_line(cmd, cfg.referee.settings.timeout())?),
        None => Box::new(HeuristicReferee),
    };

    let mut out = open_output(cfg.output.report.as_deref())?;
    let mut k_total = 0;
    for q in &questions {
        let report = run(q, provider.as_mut(), referee.as_mut(), &settings)?;
        k_total += report.k_used;
        eprintln!(
            "{}: {:?} k={} {}{}",
            report.question_id,
            report.final_answer,
            report.k_used,
            if report.early_stopped { "early stop" } else { "full budget" },
            if report.resampled { ", resampled after referee flip" } else { "" }
        );
        write_json_line(&mut out, &report)?;
    }
    out.flush()?;
    if !questions.is_empty() {
        eprintln!("{} questions, avg k {:.3}", questions.len(), k_total as f64 / questions.len() as f64);
    }
    Ok(())
}

#[derive(Serialize)]
struct PolicySummary<'a> {
    labels: Vec<&'a str>,
    rewards: Vec<f64>,
    logits: &'a [f64],
    probs: Vec<f64>,
}

pub fn train_toy_cmd(mut cfg: AppConfig, args: &TrainToyArgs) -> Result<()> {
    let g = &mut cfg.grpo;
    if let Some(v) = args.group_size {
        g.group_size = v;
    }
    if let Some(v) = args.beta {
        g.beta = v;
    }
    if let Some(v) = args.eps_clip {
        g.epsilon_clip = v;
    }
    if let Some(v) = args.lr {
        g.learning_rate = v;
    }
    if let Some(kl) = args.kl {
        g.kl_estimator = match kl {
            KlArg::Exact => KlEstimator::Exact,
            KlArg::Sampled => KlEstimator::Sampled,
        };
    }
    if let Some(p) = &args.curve {
        cfg.output.curve = Some(p.clone());
    }
    if let Some(p) = &args.policy {
        cfg.output.policy = Some(p.clone());
    }
    cfg.validate()?;
    let scoring = ToyScoring {
        weights: cfg.reward,
        clip: cfg.length_clip,
        ngram: cfg.parse.ngram,
        ..ToyScoring::default()
    };
    let task = match args.task {
        TaskArg::TwoAction => ToyTask::two_action(&scoring)?,
        TaskArg::Templated => ToyTask::default_templated(&scoring)?,
    };
    let result = train_toy(ToyPolicy::uniform(task.len())?, &task, &cfg.grpo, args.steps, cfg.seed)?;

    let mut curve = open_output(cfg.output.curve.as_deref())?;
    curve.write_all(result.curve_csv().as_bytes())?;
    curve.flush()?;

    let probs = result.policy.probs();
    let summary = PolicySummary {
        labels: task.actions.iter().map(|a| a.label.as_str()).collect(),
        rewards: task.rewards(),
        logits: result.policy.logits(),
        probs: probs.clone(),
    };
    if let Some(p) = &cfg.output.policy {
        let mut f = open_output(Some(p))?;
        write_json_line(&mut f, &summary)?;
        f.flush()?;
    }
    let (best, p_best) = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least two actions");
    let last = result.curve.last();
    eprintln!(
        "{} steps: most likely action {:?} with p={:.4}, expected reward {:.4}",
        args.steps,
        task.actions[best].label,
        p_best,
        last.map_or(f64::NAN, |s| s.expected_reward)
    );
    Ok(())
}

pub fn metrics(cfg: AppConfig, args: &MetricsArgs) -> Result<()> {
    cfg.validate()?;
    let path = args.io.input.as_deref();
    let reports: Vec<RunReport> = read_jsonl(open_input(path)?, &source_name(path))?;
    if reports.is_empty() {
        return Err(Error::Data(format!("no run reports in {}", source_name(path))));
    }
    let m = compute_metrics(&reports)?;
    let mut out = open_output(args.io.out.as_deref())?;
    write_json_line(&mut out, &m)?;
    out.flush()?;
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{} questions: EGS {} TI {} RR {} avg K {:.3}",
        m.questions,
        show(m.egs),
        show(m.ti),
        show(m.rr),
        m.avg_k
    );
    Ok(())
}
