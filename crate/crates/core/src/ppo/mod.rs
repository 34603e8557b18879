//! Policy fine-tuning against the KL-penalized toxicity reward.

mod dapt;

pub use dapt::{train_dapt_baseline, DaptConfig, LabeledDocument};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::lm::{Decoding, Lm, TokenSequence};
use crate::reward::{reward_from_toxicity, MtlModel};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, Float, Graph};

/// Toxicity probability for `(prompt, continuation)` token pairs.
pub trait ToxicityJudge {
    fn toxicity(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f64>>;
}

/// Scores the decoded prompt plus continuation with the toxicity head.
impl<F: Float> ToxicityJudge for MtlModel<F> {
    fn toxicity(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f64>> {
        let texts: Vec<String> = items
            .iter()
            .map(|(p, c)| {
                let ids: Vec<usize> = p.iter().chain(c.iter()).copied().collect();
                self.vocab.decode(&ids)
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        self.toxicity_scores(&refs)
    }
}

/// A judge defined directly on token ids, for toy worlds.
pub struct FnJudge<J>(pub J);

impl<J: Fn(&[usize], &[usize]) -> f64> ToxicityJudge for FnJudge<J> {
    fn toxicity(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f64>> {
        Ok(items.iter().map(|(p, c)| (self.0)(p, c)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    /// Total sampled continuations over the run.
    pub episodes: usize,
    /// Prompts per rollout batch.
    pub batch_size: usize,
    pub gamma: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub init_beta: f64,
    pub kl_target: f64,
    /// `false` fixes beta at 0 for the whole run.
    pub kl_penalty: bool,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.1,
            ppo_epochs: 2,
            minibatches: 1,
            episodes: 20_000,
            batch_size: 32,
            gamma: 1.0,
            adam: AdamConfig {
                lr: 1.1e-5,
                ..AdamConfig::default()
            },
            clip_norm: 1.0,
            init_beta: 0.1,
            kl_target: 18.0,
            kl_penalty: true,
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: crate::lm::MAX_NEW_TOKENS,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps <= 0.5) {
            bail!(Config, "ppo.clip_eps {} outside (0, 0.5]", self.clip_eps);
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            bail!(Config, "ppo.gamma {} outside [0, 1]", self.gamma);
        }
        if self.batch_size == 0 || self.ppo_epochs == 0 {
            bail!(Config, "ppo.batch_size and ppo.ppo_epochs must be positive");
        }
        if self.minibatches == 0 || self.minibatches > self.batch_size {
            bail!(Config, "ppo.minibatches must be in 1..={}", self.batch_size);
        }
        if self.init_beta < 0.0 || self.kl_target <= 0.0 {
            bail!(Config, "ppo.init_beta must be >= 0 and ppo.kl_target > 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) || self.temperature <= 0.0 {
            bail!(Config, "ppo.top_p must be in (0, 1] and ppo.temperature positive");
        }
        if self.max_new_tokens == 0 {
            bail!(Config, "ppo.max_new_tokens must be positive");
        }
        Ok(())
    }

    /// Rollout batches in the run.
    pub fn batches(&self) -> usize {
        self.episodes.div_ceil(self.batch_size)
    }

    fn decoding(&self) -> Decoding {
        Decoding::Nucleus {
            top_p: self.top_p,
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlControllerState {
    pub beta: f64,
    pub kl_target: f64,
    pub last_kl: Option<f64>,
}

impl KlControllerState {
    pub fn new(config: &PpoConfig) -> Self {
        KlControllerState {
            beta: if config.kl_penalty { config.init_beta } else { 0.0 },
            kl_target: config.kl_target,
            last_kl: None,
        }
    }
}

/// `beta <- beta (1 + 0.1 e)` with `e = clip(KL / KL_target - 1, -0.1, 0.1)`.
pub fn update_beta(state: &mut KlControllerState, measured_kl: f64) -> f64 {
    let e = (measured_kl / state.kl_target - 1.0).clamp(-0.1, 0.1);
    state.beta *= 1.0 + 0.1 * e;
    state.last_kl = Some(measured_kl);
    state.beta
}

/// `min(ratio A, (1 + eps) A)` for `A >= 0`, `min(ratio A, (1 - eps) A)`
/// otherwise.
pub fn ppo_surrogate(ratio: f64, advantage: f64, eps: f64) -> Result<f64> {
    if !ratio.is_finite() {
        bail!(Numerical, "non-finite probability ratio {ratio}");
    }
    let clipped = if advantage >= 0.0 {
        (1.0 + eps) * advantage
    } else {
        (1.0 - eps) * advantage
    };
    Ok((ratio * advantage).min(clipped))
}

/// Per-token rewards: `-beta (log pi - log pi_init)` at every token, with the
/// toxicity reward added at the last one.
pub fn shaped_reward(toxicity_reward: f64, logp_policy: &[f64], logp_init: &[f64], beta: f64) -> Result<Vec<f64>> {
    if logp_policy.len() != logp_init.len() {
        bail!(
            Data,
            "{} policy log-probs against {} reference log-probs",
            logp_policy.len(),
            logp_init.len()
        );
    }
    if logp_policy.is_empty() {
        bail!(Data, "cannot shape the reward of an empty continuation");
    }
    let mut r: Vec<f64> = logp_policy.iter().zip(logp_init).map(|(p, q)| -beta * (p - q)).collect();
    *r.last_mut().expect("nonempty") += toxicity_reward;
    Ok(r)
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Sampled and greedy continuations of a batch of prompts with everything
/// the update needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub prompts: Vec<Vec<usize>>,
    pub sampled: Vec<Vec<usize>>,
    pub greedy: Vec<Vec<usize>>,
    /// Per-token log-probs of `sampled` under the policy that generated it.
    pub logp_old: Vec<Vec<f64>>,
    /// Per-token log-probs of `sampled` under the frozen initial policy.
    pub logp_init: Vec<Vec<f64>>,
    pub greedy_logp: Vec<Vec<f64>>,
    pub greedy_logp_init: Vec<Vec<f64>>,
    pub toxicity: Vec<f64>,
    pub greedy_toxicity: Vec<f64>,
    pub returns: Vec<f64>,
    pub greedy_returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn sequences(&self) -> Vec<TokenSequence> {
        self.prompts
            .iter()
            .zip(&self.sampled)
            .map(|(p, c)| TokenSequence {
                ids: p.iter().chain(c).copied().collect(),
                prompt_len: p.len(),
            })
            .collect()
    }

    /// Batch mean of the per-sequence mean log-ratio of the sampled tokens.
    pub fn measured_kl(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let per_seq = self.logp_old.iter().zip(&self.logp_init).map(|(p, q)| {
            let n = p.len().max(1) as f64;
            p.iter().zip(q).map(|(a, b)| a - b).sum::<f64>() / n
        });
        per_seq.sum::<f64>() / self.len() as f64
    }

    /// Fills `returns`, `greedy_returns` and `advantages` for penalty `beta`.
    pub fn assign_returns(&mut self, beta: f64, gamma: f64) -> Result<()> {
        let ret = |tox: f64, p: &[f64], q: &[f64]| -> Result<f64> {
            Ok(discounted_return(&shaped_reward(reward_from_toxicity(tox), p, q, beta)?, gamma))
        };
        self.returns = (0..self.len())
            .map(|i| ret(self.toxicity[i], &self.logp_old[i], &self.logp_init[i]))
            .collect::<Result<_>>()?;
        self.greedy_returns = (0..self.len())
            .map(|i| ret(self.greedy_toxicity[i], &self.greedy_logp[i], &self.greedy_logp_init[i]))
            .collect::<Result<_>>()?;
        self.advantages = self_critical_advantage(self);
        Ok(())
    }
}

/// Sampled return minus the return of the greedy decode of the same prompt.
pub fn self_critical_advantage(batch: &TrajectoryBatch) -> Vec<f64> {
    batch.returns.iter().zip(&batch.greedy_returns).map(|(s, g)| s - g).collect()
}

/// One nucleus sample and one greedy decode per prompt, with log-probs
/// under `policy` and `reference` and judged toxicity of prompt plus
/// continuation. Returns and advantages are left empty.
pub fn collect_rollouts<F: Float>(
    policy: &Lm<F>,
    reference: &Lm<F>,
    judge: &dyn ToxicityJudge,
    prompts: &[Vec<usize>],
    config: &PpoConfig,
    rng: &mut Rng,
) -> Result<TrajectoryBatch> {
    if prompts.is_empty() {
        bail!(Data, "no prompts to roll out");
    }
    if policy.config.vocab_size != reference.config.vocab_size {
        bail!(Config, "policy and reference vocabularies differ");
    }
    let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
    let sampled = policy.generate(&refs, config.max_new_tokens, config.decoding(), rng)?;
    let greedy = policy.generate(&refs, config.max_new_tokens, Decoding::Greedy, rng)?;
    let seqs = |conts: &[Vec<usize>]| -> Vec<TokenSequence> {
        prompts
            .iter()
            .zip(conts)
            .map(|(p, c)| TokenSequence {
                ids: p.iter().chain(c).copied().collect(),
                prompt_len: p.len(),
            })
            .collect()
    };
    let (s_seqs, g_seqs) = (seqs(&sampled), seqs(&greedy));
    let judge_all = |conts: &[Vec<usize>]| {
        let items: Vec<(&[usize], &[usize])> = refs.iter().zip(conts).map(|(p, c)| (*p, c.as_slice())).collect();
        judge.toxicity(&items)
    };
    Ok(TrajectoryBatch {
        logp_old: policy.batch_log_probs(&s_seqs)?,
        logp_init: reference.batch_log_probs(&s_seqs)?,
        greedy_logp: policy.batch_log_probs(&g_seqs)?,
        greedy_logp_init: reference.batch_log_probs(&g_seqs)?,
        toxicity: judge_all(&sampled)?,
        greedy_toxicity: judge_all(&greedy)?,
        prompts: prompts.to_vec(),
        sampled,
        greedy,
        returns: Vec::new(),
        greedy_returns: Vec::new(),
        advantages: Vec::new(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub mean_reward: f64,
    pub skipped: bool,
}

/// Clipped-surrogate ascent over `config.ppo_epochs` passes of the batch.
/// Old log-probs are recomputed on the tape before the first step, so the
/// first ratios are exactly 1. With the penalty on, a batch whose KL
/// exceeds four times the target is not trained on (`skipped`).
pub fn ppo_update<F: Float>(
    policy: &mut Lm<F>,
    optimizer: &mut Adam<F>,
    batch: &TrajectoryBatch,
    config: &PpoConfig,
) -> Result<UpdateStats> {
    if batch.advantages.len() != batch.len() {
        bail!(
            Data,
            "advantages missing for {} trajectories",
            batch.len() - batch.advantages.len().min(batch.len())
        );
    }
    let kl = batch.measured_kl();
    let mean_reward = batch.toxicity.iter().map(|&p| reward_from_toxicity(p)).sum::<f64>() / batch.len().max(1) as f64;
    let mut stats = UpdateStats {
        kl,
        mean_reward,
        ..Default::default()
    };
    if config.kl_penalty && kl > 4.0 * config.kl_target {
        stats.skipped = true;
        return Ok(stats);
    }
    let seqs = batch.sequences();
    let n = seqs.len();
    let bounds: Vec<std::ops::Range<usize>> = (0..config.minibatches)
        .map(|m| m * n / config.minibatches..(m + 1) * n / config.minibatches)
        .collect();
    let old: Vec<Vec<F>> = bounds
        .iter()
        .map(|r| -> Result<Vec<F>> {
            let mut g = Graph::new();
            let (lp, _) = policy.continuation_log_probs(&mut g, &seqs[r.clone()])?;
            Ok(g.value(lp).data().to_vec())
        })
        .collect::<Result<_>>()?;
    let eps = F::of(config.clip_eps);
    let (mut ratio_sum, mut clipped, mut tokens) = (0.0, 0usize, 0usize);
    for _ in 0..config.ppo_epochs {
        for (r, old) in bounds.iter().zip(&old) {
            let mb = &seqs[r.clone()];
            let mut adv = Vec::with_capacity(old.len());
            for (s, &a) in mb.iter().zip(&batch.advantages[r.clone()]) {
                adv.extend(std::iter::repeat_n(F::of(a), s.ids.len() - s.prompt_len));
            }
            let weights = vec![F::of(1.0 / mb.len() as f64); old.len()];
            let mut g = Graph::new();
            let (lp, _) = policy.continuation_log_probs(&mut g, mb)?;
            for ((&new, &o), &a) in g.value(lp).data().iter().zip(old).zip(&adv) {
                let ratio = (new - o).exp().f64();
                ratio_sum += ratio;
                clipped += usize::from(ratio * a.f64() > ppo_surrogate(ratio, a.f64(), config.clip_eps)?);
                tokens += 1;
            }
            let objective = g.ppo_clip(lp, old, &adv, &weights, eps)?;
            let loss = g.scale(objective, -F::one());
            let grads = g.backward(loss);
            policy.params.zero_grads();
            g.accumulate(&grads, &mut policy.params);
            if config.clip_norm > 0.0 {
                policy.params.clip_grad_norm(config.clip_norm);
            }
            optimizer.step(&mut policy.params)?;
        }
    }
    stats.mean_ratio = ratio_sum / tokens.max(1) as f64;
    stats.clip_fraction = clipped as f64 / tokens.max(1) as f64;
    Ok(stats)
}

/// One line of the per-batch metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_toxicity: f64,
    pub kl: f64,
    pub beta: f64,
    pub clip_fraction: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct PpoTrainer<F: Float = f32> {
    pub config: PpoConfig,
    pub policy: Lm<F>,
    pub reference: Lm<F>,
    pub optimizer: Adam<F>,
    pub kl: KlControllerState,
    pub rng: Rng,
    /// Completed rollout batches.
    pub step: usize,
}

impl<F: Float> PpoTrainer<F> {
    /// Starts a run; the reference policy is a frozen copy of `policy`.
    pub fn new(policy: Lm<F>, config: PpoConfig, rng: Rng) -> Result<Self> {
        config.validate()?;
        Ok(PpoTrainer {
            optimizer: Adam::new(config.adam, &policy.params),
            kl: KlControllerState::new(&config),
            reference: policy.clone(),
            policy,
            config,
            rng,
            step: 0,
        })
    }

    /// Rollouts, shaping, advantages, update and beta step for one batch of
    /// prompts, drawn without replacement when there are enough of them.
    pub fn train_batch(&mut self, judge: &dyn ToxicityJudge, prompts: &[Vec<usize>]) -> Result<(MetricRecord, UpdateStats)> {
        if prompts.is_empty() {
            bail!(Data, "no training prompts");
        }
        let n = self.config.batch_size;
        let idx: Vec<usize> = if prompts.len() >= n {
            index::sample(&mut self.rng, prompts.len(), n).into_vec()
        } else {
            (0..n).map(|_| self.rng.random_range(0..prompts.len())).collect()
        };
        let picked: Vec<Vec<usize>> = idx.into_iter().map(|i| prompts[i].clone()).collect();
        let mut batch = collect_rollouts(&self.policy, &self.reference, judge, &picked, &self.config, &mut self.rng)?;
        batch.assign_returns(self.kl.beta, self.config.gamma)?;
        let stats = ppo_update(&mut self.policy, &mut self.optimizer, &batch, &self.config)?;
        let beta = update_beta(&mut self.kl, stats.kl);
        let record = MetricRecord {
            step: self.step,
            mean_reward: stats.mean_reward,
            mean_toxicity: batch.toxicity.iter().sum::<f64>() / batch.len() as f64,
            kl: stats.kl,
            beta,
            clip_fraction: stats.clip_fraction,
        };
        self.step += 1;
        Ok((record, stats))
    }
}

/// Runs batches until `trainer.config.batches()` are done, calling
/// `after_batch` once per batch (for logs and checkpoints).
pub fn train_detox<F: Float>(
    trainer: &mut PpoTrainer<F>,
    judge: &dyn ToxicityJudge,
    prompts: &[Vec<usize>],
    mut after_batch: impl FnMut(&PpoTrainer<F>, &MetricRecord) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    let mut log = Vec::new();
    while trainer.step < trainer.config.batches() {
        let (record, _) = trainer.train_batch(judge, prompts)?;
        after_batch(trainer, &record)?;
        log.push(record);
    }
    Ok(log)
}
