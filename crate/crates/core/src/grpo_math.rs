//! GRPO objective arithmetic and a desk-scale categorical-policy trainer.
//!
//! ```text
//! A_i   = (r_i - mean(r)) / (std(r) + eps)            population std
//! rho_i = exp(log pi_new(o_i) - log pi_old(o_i))
//! L     = mean_i min(rho_i A_i, clip(rho_i, 1-e, 1+e) A_i)
//! J     = L - beta * KL(pi_new || pi_ref)
//! ```
//!
//! [`GroupBatch`] objectives use the sampled log-ratio KL estimator. The toy
//! trainer holds a full categorical distribution, so it can also evaluate the
//! KL term exactly; that is its default (see [`KlEstimator`]).

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward_kernel::{total_reward, LengthClip, RewardWeights};
use crate::trace_schema::{parse_trace, FrameHorizon, RawOutput, DEFAULT_TAIL_FRACTION};

/// One sampled group with its rewards and log-probabilities under the
/// current, behaviour (old) and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    rewards: Vec<f64>,
    logprob_new: Vec<f64>,
    logprob_old: Vec<f64>,
    logprob_ref: Vec<f64>,
}

impl GroupBatch {
    pub fn new(
        rewards: Vec<f64>,
        logprob_new: Vec<f64>,
        logprob_old: Vec<f64>,
        logprob_ref: Vec<f64>,
    ) -> Result<Self> {
        let g = rewards.len();
        if g < 2 {
            return Err(Error::Usage(format!("group size must be at least 2, got {g}")));
        }
        if logprob_new.len() != g || logprob_old.len() != g || logprob_ref.len() != g {
            return Err(Error::Usage(format!(
                "group lists disagree in length: rewards {g}, new {}, old {}, ref {}",
                logprob_new.len(),
                logprob_old.len(),
                logprob_ref.len()
            )));
        }
        Ok(Self {
            rewards,
            logprob_new,
            logprob_old,
            logprob_ref,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn logprob_new(&self) -> &[f64] {
        &self.logprob_new
    }

    pub fn logprob_old(&self) -> &[f64] {
        &self.logprob_old
    }

    pub fn logprob_ref(&self) -> &[f64] {
        &self.logprob_ref
    }
}

/// KL term used by the toy trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Mean of `log pi_new - log pi_ref` over the sampled group.
    Sampled,
    /// `sum_j pi_j (log pi_j - log ref_j)` over the whole action alphabet.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub epsilon_clip: f64,
    pub beta: f64,
    pub eps_z: f64,
    pub group_size: usize,
    /// Step size of the toy trainer's gradient ascent on the logits.
    pub learning_rate: f64,
    /// Gradient steps taken against each sampled group before the old policy is refreshed.
    pub updates_per_step: usize,
    pub kl_estimator: KlEstimator,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon_clip: 0.2,
            beta: 0.04,
            eps_z: 1e-8,
            group_size: 4,
            learning_rate: 0.1,
            updates_per_step: 1,
            kl_estimator: KlEstimator::Exact,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_clip > 0.0) {
            return Err(Error::config("grpo.epsilon_clip", "must be > 0"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("grpo.beta", "must be a finite value >= 0"));
        }
        if !(self.eps_z > 0.0) {
            return Err(Error::config("grpo.eps_z", "must be > 0"));
        }
        if self.group_size < 2 {
            return Err(Error::config("grpo.group_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("grpo.learning_rate", "must be a finite value > 0"));
        }
        if self.updates_per_step == 0 {
            return Err(Error::config("grpo.updates_per_step", "must be at least 1"));
        }
        Ok(())
    }
}

/// Within-group z-scores using the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps_z: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Usage(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    // Identical rewards carry no signal; rounding in the mean would
    // otherwise be amplified by 1/eps.
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let denom = var.sqrt() + eps_z;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn prob_ratio(logprob_new: f64, logprob_old: f64) -> f64 {
    (logprob_new - logprob_old).exp()
}

fn clip_ratio(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

fn surrogate_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(clip_ratio(ratio, epsilon) * advantage)
}

/// Group mean of `min(rho A, clip(rho) A)`.
pub fn clipped_surrogate(batch: &GroupBatch, cfg: &GrpoConfig) -> f64 {
    let advantages =
        group_advantages(&batch.rewards, cfg.eps_z).expect("GroupBatch holds at least two samples");
    let total: f64 = advantages
        .iter()
        .zip(batch.logprob_new.iter().zip(&batch.logprob_old))
        .map(|(a, (new, old))| surrogate_term(prob_ratio(*new, *old), *a, cfg.epsilon_clip))
        .sum();
    total / batch.len() as f64
}

/// `beta` times the sampled estimate of `KL(pi_new || pi_ref)`.
pub fn kl_penalty(logprob_new: &[f64], logprob_ref: &[f64], beta: f64) -> f64 {
    if logprob_new.is_empty() || beta == 0.0 {
        return 0.0;
    }
    let gap: f64 = logprob_new.iter().zip(logprob_ref).map(|(n, r)| n - r).sum();
    beta * gap / logprob_new.len() as f64
}

pub fn grpo_objective(batch: &GroupBatch, cfg: &GrpoConfig) -> f64 {
    clipped_surrogate(batch, cfg) - kl_penalty(&batch.logprob_new, &batch.logprob_ref, cfg.beta)
}

/// Categorical policy over a finite alphabet of templated actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::Usage("toy policy needs at least 2 actions".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Usage("toy policy logits must be finite".into()));
        }
        Ok(Self { logits })
    }

    pub fn uniform(actions: usize) -> Result<Self> {
        Self::new(vec![0.0; actions])
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - log_z).collect()
}

/// Exact `KL(p || q)` between two categorical distributions given as log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One action of a toy task: a fixed trace text and the reward it earns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAction {
    pub label: String,
    pub text: String,
    pub reward: f64,
}

/// A synthetic task whose actions expand to fixed traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub ground_truth: String,
    pub actions: Vec<ToyAction>,
}

/// Settings used to score the templated traces of a toy task.
#[derive(Debug, Clone, Copy)]
pub struct ToyScoring {
    pub weights: RewardWeights,
    pub clip: LengthClip,
    pub ngram: usize,
    pub horizon: FrameHorizon,
}

impl Default for ToyScoring {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            clip: LengthClip::default(),
            ngram: crate::reward_kernel::DEFAULT_NGRAM,
            horizon: FrameHorizon::new(32).expect("32 frames"),
        }
    }
}

/// Renders a schema-complete trace with `think_len` distinct reasoning tokens.
pub fn templated_trace(answer: &str, think_len: usize, frames: &[u32]) -> String {
    let think = (0..think_len)
        .map(|i| format!("s{i}"))
        .collect::<Vec<_>>()
        .join(" ");
    let frames = frames.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    format!("<think>{think}</think><answer>{answer}</answer><keyframes>{frames}</keyframes>")
}

impl ToyTask {
    const MAX_ACTIONS: usize = 64;

    fn score(ground_truth: &str, labelled: Vec<(String, String)>, scoring: &ToyScoring) -> Result<Self> {
        if labelled.len() < 2 || labelled.len() > Self::MAX_ACTIONS {
            return Err(Error::Usage(format!(
                "toy tasks need 2..={} actions, got {}",
                Self::MAX_ACTIONS,
                labelled.len()
            )));
        }
        let actions = labelled
            .into_iter()
            .map(|(label, text)| {
                let trace = parse_trace(&RawOutput::new(text.clone()), scoring.horizon, DEFAULT_TAIL_FRACTION)?;
                let reward = total_reward(&trace, ground_truth, &scoring.weights, scoring.clip, scoring.ngram)?;
                Ok(ToyAction {
                    label,
                    text,
                    reward: reward.r_total,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ground_truth: ground_truth.to_string(),
            actions,
        })
    }

    /// Two actions: a well-grounded correct trace and a schema-valid wrong one.
    pub fn two_action(scoring: &ToyScoring) -> Result<Self> {
        let labelled = vec![
            ("correct".to_string(), templated_trace("B", 544, &[1, 4])),
            ("wrong".to_string(), templated_trace("C", 544, &[1, 4])),
        ];
        Self::score("B", labelled, scoring)
    }

    /// Cartesian product of answer options, reasoning lengths and citation counts.
    pub fn templated(
        ground_truth: &str,
        options: &[&str],
        think_lengths: &[usize],
        keyframe_counts: &[usize],
        scoring: &ToyScoring,
    ) -> Result<Self> {
        let mut labelled = Vec::new();
        for option in options {
            for &len in think_lengths {
                for &count in keyframe_counts {
                    let frames: Vec<u32> = (1..=count as u32).map(|i| 3 * i).collect();
                    labelled.push((
                        format!("{option}/think{len}/frames{count}"),
                        templated_trace(option, len, &frames),
                    ));
                }
            }
        }
        Self::score(ground_truth, labelled, scoring)
    }

    /// Default 48-action task: options a-d, four lengths, three citation counts.
    pub fn default_templated(scoring: &ToyScoring) -> Result<Self> {
        Self::templated("b", &["a", "b", "c", "d"], &[16, 200, 544, 1000], &[0, 2, 5], scoring)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.actions.iter().map(|a| a.reward).collect()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// The objective optimised during one toy update, as a function of the logits.
///
/// The sampled actions, their rewards and their behaviour log-probabilities are
/// frozen when the group is drawn; only the current logits vary.
#[derive(Debug, Clone)]
pub struct ToyObjective {
    pub samples: Vec<usize>,
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    pub cfg: GrpoConfig,
}

impl ToyObjective {
    fn batch(&self, log_probs: &[f64]) -> Result<GroupBatch> {
        GroupBatch::new(
            self.rewards.clone(),
            self.samples.iter().map(|&a| log_probs[a]).collect(),
            self.old_logprobs.clone(),
            self.samples.iter().map(|&a| self.ref_log_probs[a]).collect(),
        )
    }

    /// Objective value at `logits`.
    pub fn value(&self, logits: &[f64]) -> Result<f64> {
        let log_probs = log_softmax(logits);
        let batch = self.batch(&log_probs)?;
        Ok(match self.cfg.kl_estimator {
            KlEstimator::Sampled => grpo_objective(&batch, &self.cfg),
            KlEstimator::Exact => {
                clipped_surrogate(&batch, &self.cfg)
                    - self.cfg.beta * categorical_kl(&log_probs, &self.ref_log_probs)
            }
        })
    }

    /// Analytic gradient of [`ToyObjective::value`] with respect to the logits.
    pub fn gradient(&self, logits: &[f64]) -> Result<Vec<f64>> {
        let log_probs = log_softmax(logits);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let advantages = group_advantages(&self.rewards, self.cfg.eps_z)?;
        let g = self.samples.len() as f64;
        let eps = self.cfg.epsilon_clip;
        let mut grad = vec![0.0; logits.len()];

        // d log pi(a) / d logit_j = [a == j] - pi_j
        let add_score = |grad: &mut [f64], action: usize, scale: f64| {
            for (j, gj) in grad.iter_mut().enumerate() {
                let indicator = if j == action { 1.0 } else { 0.0 };
                *gj += scale * (indicator - probs[j]);
            }
        };

        for ((&action, &adv), &old) in self.samples.iter().zip(&advantages).zip(&self.old_logprobs) {
            let ratio = prob_ratio(log_probs[action], old);
            let clipped = clip_ratio(ratio, eps);
            // The clipped branch is constant in the logits once it is the active minimum.
            let unclipped_active = clipped == ratio || ratio * adv <= clipped * adv;
            if unclipped_active {
                add_score(&mut grad, action, adv * ratio / g);
            }
        }

        if self.cfg.beta != 0.0 {
            match self.cfg.kl_estimator {
                KlEstimator::Sampled => {
                    for &action in &self.samples {
                        add_score(&mut grad, action, -self.cfg.beta / g);
                    }
                }
                KlEstimator::Exact => {
                    let kl = categorical_kl(&log_probs, &self.ref_log_probs);
                    for (j, gj) in grad.iter_mut().enumerate() {
                        *gj -= self.cfg.beta * probs[j] * (log_probs[j] - self.ref_log_probs[j] - kl);
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Per-step training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean reward of the sampled group.
    pub mean_reward: f64,
    /// Expected reward of the policy after the update.
    pub expected_reward: f64,
    /// Exact KL of the updated policy from the reference snapshot.
    pub kl_to_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub policy: ToyPolicy,
    pub curve: Vec<StepStats>,
}

impl ToyRun {
    /// Reward curve as CSV with a header row.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,expected_reward,kl_to_ref\n");
        for s in &self.curve {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.step, s.mean_reward, s.expected_reward, s.kl_to_ref
            ));
        }
        out
    }
}

/// Applies one gradient-ascent update on a fixed sampled group.
pub fn toy_update(policy: &mut ToyPolicy, objective: &ToyObjective, step: usize) -> Result<()> {
    let grad = objective.gradient(&policy.logits)?;
    if let Some((j, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step,
            detail: format!("d/dlogit[{j}] = {g}"),
        });
    }
    for (l, g) in policy.logits.iter_mut().zip(&grad) {
        *l += objective.cfg.learning_rate * g;
    }
    if let Some(l) = policy.logits.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step,
            detail: format!("update produced logit {l}"),
        });
    }
    Ok(())
}

/// Runs `steps` GRPO updates of a categorical policy on a toy task.
///
/// The behaviour policy is refreshed at the start of every step and the
/// reference policy is the initial snapshot.
pub fn train_toy(policy: ToyPolicy, task: &ToyTask, cfg: &GrpoConfig, steps: usize, seed: u64) -> Result<ToyRun> {
    cfg.validate()?;
    if policy.len() != task.len() {
        return Err(Error::Usage(format!(
            "policy has {} actions but the task has {}",
            policy.len(),
            task.len()
        )));
    }
    let rewards = task.rewards();
    let ref_log_probs = policy.log_probs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = policy;
    let mut curve = Vec::with_capacity(steps);

    for step in 0..steps {
        let old_log_probs = policy.log_probs();
        let old_probs: Vec<f64> = old_log_probs.iter().map(|l| l.exp()).collect();
        let sampler = WeightedIndex::new(&old_probs)
            .map_err(|e| Error::NonFiniteGradient { step, detail: format!("policy collapsed: {e}") })?;
        let samples: Vec<usize> = (0..cfg.group_size).map(|_| sampler.sample(&mut rng)).collect();
        let group_rewards: Vec<f64> = samples.iter().map(|&a| rewards[a]).collect();
        let objective = ToyObjective {
            old_logprobs: samples.iter().map(|&a| old_log_probs[a]).collect(),
            samples,
            rewards: group_rewards,
            ref_log_probs: ref_log_probs.clone(),
            cfg: *cfg,
        };
        for _ in 0..cfg.updates_per_step {
            toy_update(&mut policy, &objective, step)?;
        }
        let log_probs = policy.log_probs();
        curve.push(StepStats {
            step,
            mean_reward: objective.rewards.iter().sum::<f64>() / objective.rewards.len() as f64,
            expected_reward: log_probs.iter().zip(&rewards).map(|(l, r)| l.exp() * r).sum(),
            kl_to_ref: categorical_kl(&log_probs, &ref_log_probs),
        });
    }
    Ok(ToyRun { policy, curve })
}
