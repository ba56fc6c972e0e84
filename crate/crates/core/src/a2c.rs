//! Single-threaded advantage actor-critic over whole episodes.
//!
//! One episode is one rollout and one parameter update. The retrieved memory
//! is offered to the cell exactly once per episode, on the step that first
//! shows the object pair; the final cell state is committed at episode end.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    sample_task, Action, ContextRegistry, EnvConfig, ObsEncoder, Split, StepInfo, Task,
    TraceRecord, WorldState,
};
use crate::error::{Error, Result};
use crate::memory::EpisodicStore;
use crate::model::{
    backward_episode, forward_step, CellMask, EpLstmState, GateBlock, Gradients, HeadGrad,
    ModelParams, StepCache,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes_train: usize,
    pub episodes_test: usize,
    pub gamma: f64,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub value_coef: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub filter_episodes: usize,
    pub filter_top: usize,
    /// Optional absolute floor applied on top of the rank cut.
    pub filter_reward_threshold: Option<f64>,
    /// Number of final training episodes averaged into r*.
    pub r_star_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes_train: 25_000,
            episodes_test: 1_000,
            gamma: 0.9,
            lr: 7e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            value_coef: 0.5,
            entropy_start: 0.05,
            entropy_end: 0.005,
            grad_clip_norm: 40.0,
            seed: 0,
            filter_episodes: 100,
            filter_top: 30,
            filter_reward_threshold: None,
            r_star_window: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gamma,
            self.lr,
            self.rms_alpha,
            self.rms_eps,
            self.value_coef,
            self.entropy_start,
            self.entropy_end,
            self.grad_clip_norm,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("training coefficients must be finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.lr <= 0.0 || self.rms_eps <= 0.0 || !(0.0..1.0).contains(&self.rms_alpha) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.episodes_train == 0 {
            return Err(Error::Config("episodes_train must be positive".into()));
        }
        if self.r_star_window == 0 {
            return Err(Error::Config("r_star_window must be positive".into()));
        }
        Ok(())
    }

    /// Entropy coefficient for `episode`, annealed linearly across training.
    pub fn entropy_coef(&self, episode: usize) -> f64 {
        let span = self.episodes_train.saturating_sub(1).max(1) as f64;
        let frac = (episode as f64 / span).min(1.0);
        self.entropy_start + (self.entropy_end - self.entropy_start) * frac
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    Tasks = 2,
    World = 3,
    Policy = 4,
    EvalTasks = 5,
    EvalWorld = 6,
    EvalPolicy = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-episode knobs for [`run_episode`].
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions<'a> {
    pub mask: Option<&'a CellMask>,
    pub retrieval_enabled: bool,
    /// Write the final cell state into the store.
    pub commit: bool,
}

impl Default for EpisodeOptions<'_> {
    fn default() -> Self {
        EpisodeOptions {
            mask: None,
            retrieval_enabled: true,
            commit: true,
        }
    }
}

/// Everything recorded while playing one episode.
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub task_id: u32,
    pub steps: Vec<StepCache>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub infos: Vec<StepInfo>,
    pub headings: Vec<usize>,
    /// Index of the step that received the retrieved memory.
    pub retrieval_index: Option<usize>,
    /// Memory offered at the retrieval step.
    pub retrieved: Option<Vec<f64>>,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Reinstatement gate at the retrieval step, or at the last step if the
    /// agent never fixated.
    pub fn r_fix(&self) -> &[f64] {
        let t = self.retrieval_index.unwrap_or(self.steps.len() - 1);
        self.steps[t].gate(GateBlock::Reinstate)
    }

    pub fn final_cell(&self) -> &[f64] {
        &self.steps.last().expect("non-empty episode").c
    }

    /// Per trial: correctness of the choice, `None` if the trial was not completed.
    pub fn trial_choices(&self, trials: usize) -> Vec<Option<bool>> {
        let mut out = vec![None; trials];
        for info in &self.infos {
            if let Some(ok) = info.chose_correct {
                out[info.trial_index] = Some(ok);
            }
        }
        out
    }

    /// Per trial: steps from the start of the trial until its fixation completed.
    pub fn trial_fixation_steps(&self, trials: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; trials];
        let mut start = 0;
        for (t, info) in self.infos.iter().enumerate() {
            if info.fixated {
                out[info.trial_index] = Some(t + 1 - start);
            }
            if info.chose_correct.is_some() {
                start = t + 1;
            }
        }
        out
    }

    /// Steps before the first fixation; the episode length if it never happened.
    pub fn steps_to_first_fixation(&self) -> usize {
        self.trial_fixation_steps(1)[0].unwrap_or(self.len())
    }

    pub fn trace_records(&self, episode: usize) -> Vec<TraceRecord> {
        (0..self.len())
            .map(|t| TraceRecord {
                episode,
                step: t,
                trial: self.infos[t].trial_index,
                phase: self.infos[t].phase,
                action: self.actions[t],
                reward: self.rewards[t],
                done: t + 1 == self.len(),
                heading: self.headings[t],
            })
            .collect()
    }
}

/// Plays one episode on `task`, sampling actions from the policy.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R1: Rng, R2: Rng>(
    env: &EnvConfig,
    encoder: &ObsEncoder,
    params: &ModelParams,
    memory: &mut EpisodicStore,
    task: Task,
    world_rng: &mut R1,
    policy_rng: &mut R2,
    opts: EpisodeOptions<'_>,
) -> Result<RolloutTrace> {
    let hidden = params.config().hidden;
    let task_id = task.id();
    let context = task.context.clone();
    let (mut world, first_obs) = WorldState::reset(env, task, world_rng);
    let mut obs = Vec::new();
    encoder.encode_into(&first_obs, &mut obs);

    let mut state = EpLstmState::zeros(hidden);
    let mut prev_reward = 0.0;
    let mut prev_action = None;
    let mut retrieve_now = false;
    let mut trace = RolloutTrace {
        task_id,
        steps: Vec::with_capacity(env.step_cap),
        actions: Vec::with_capacity(env.step_cap),
        rewards: Vec::with_capacity(env.step_cap),
        infos: Vec::with_capacity(env.step_cap),
        headings: Vec::with_capacity(env.step_cap),
        retrieval_index: None,
        retrieved: None,
    };

    loop {
        let m = if retrieve_now {
            trace.retrieval_index = Some(trace.steps.len());
            let m = if opts.retrieval_enabled {
                memory.retrieve(&context)
            } else {
                vec![0.0; hidden]
            };
            trace.retrieved = Some(m.clone());
            Some(m)
        } else {
            None
        };
        let cache = forward_step(
            params,
            &obs,
            prev_reward,
            prev_action,
            &state,
            m.as_deref(),
            opts.mask,
        );
        if !cache.value.is_finite() || cache.log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite model output".into()));
        }
        let u: f64 = policy_rng.random();
        let p_left = cache.log_probs[0].exp();
        let action = if u < p_left { Action::Left } else { Action::Right };
        let out = world.step(env, action, world_rng)?;
        state = cache.state();
        trace.steps.push(cache);
        trace.actions.push(action);
        trace.rewards.push(out.reward);
        trace.infos.push(out.info);
        trace.headings.push(world.heading);
        prev_reward = out.reward;
        prev_action = Some(action);
        retrieve_now = out.info.retrieval_step;
        if out.done {
            break;
        }
        encoder.encode_into(&out.observation, &mut obs);
    }
    if opts.commit {
        memory.store(&context, &state.c)?;
    }
    Ok(trace)
}

/// Discounted returns `R_t = r_t + γ R_{t+1}`, seeded by `bootstrap`.
pub fn compute_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (r_out, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *r_out = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefs {
    pub value_coef: f64,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Entropy of a distribution given by its log-probabilities.
pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|&lp| lp.exp() * lp).sum::<f64>()
}

/// Episode loss from per-step head outputs, with fixed advantages.
///
/// `−Σ log π(a_t) A_t + c_v Σ (R_t − V_t)² − c_H Σ H(π_t)`. The advantages
/// are inputs, so no gradient flows from the policy term into the critic.
pub fn a2c_loss_terms(
    log_probs: &[&[f64]],
    values: &[f64],
    actions: &[Action],
    returns: &[f64],
    advantages: &[f64],
    coefs: LossCoefs,
) -> (LossTerms, Vec<HeadGrad>) {
    let mut terms = LossTerms::default();
    let mut grads = Vec::with_capacity(values.len());
    for t in 0..values.len() {
        let lp = log_probs[t];
        let a = actions[t].index();
        let adv = advantages[t];
        let h = entropy(lp);
        let err = returns[t] - values[t];
        terms.policy -= lp[a] * adv;
        terms.value += coefs.value_coef * err * err;
        terms.entropy += h;
        let dlogits = lp
            .iter()
            .enumerate()
            .map(|(k, &lpk)| {
                let p = lpk.exp();
                let onehot = if k == a { 1.0 } else { 0.0 };
                -adv * (onehot - p) + coefs.entropy_coef * p * (lpk + h)
            })
            .collect();
        grads.push(HeadGrad {
            dlogits,
            dvalue: -2.0 * coefs.value_coef * err,
        });
    }
    terms.total = terms.policy + terms.value - coefs.entropy_coef * terms.entropy;
    (terms, grads)
}

/// A2C loss of a recorded rollout and its gradient with respect to the head outputs.
pub fn a2c_loss(trace: &RolloutTrace, returns: &[f64], coefs: LossCoefs) -> (LossTerms, Vec<HeadGrad>) {
    let values: Vec<f64> = trace.steps.iter().map(|s| s.value).collect();
    let advantages: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| r - v).collect();
    let lps: Vec<&[f64]> = trace.steps.iter().map(|s| s.log_probs.as_slice()).collect();
    a2c_loss_terms(&lps, &values, &trace.actions, returns, &advantages, coefs)
}

/// RMSProp with global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub clip_norm: f64,
    square_avg: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

impl RmsProp {
    pub fn new(config: &TrainConfig, params: usize) -> Self {
        RmsProp {
            lr: config.lr,
            alpha: config.rms_alpha,
            eps: config.rms_eps,
            clip_norm: config.grad_clip_norm,
            square_avg: vec![0.0; params],
        }
    }

    /// Applies one update. Non-finite gradients skip the update entirely.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut Gradients) -> UpdateReport {
        let norm = grads.norm();
        if !norm.is_finite() {
            warn!("skipping update with non-finite gradient norm");
            return UpdateReport {
                grad_norm: norm,
                clipped: false,
                skipped: true,
            };
        }
        let clipped = norm > self.clip_norm;
        if clipped {
            grads.scale(self.clip_norm / norm);
        }
        for ((p, &g), s) in params
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(self.square_avg.iter_mut())
        {
            *s = self.alpha * *s + (1.0 - self.alpha) * g * g;
            *p -= self.lr * g / (s.sqrt() + self.eps);
        }
        UpdateReport {
            grad_norm: norm,
            clipped,
            skipped: false,
        }
    }
}

/// One row of the per-episode training or test log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub task_id: u32,
    /// Earlier episodes of this run that used the same task.
    pub exposure_count: usize,
    pub steps: usize,
    pub total_reward: f64,
    pub choices: Vec<Option<bool>>,
    pub fixation_steps: Vec<Option<usize>>,
    /// Reward collected during each trial (fixation plus choice).
    pub trial_rewards: Vec<f64>,
}

impl EpisodeSummary {
    pub fn from_trace(episode: usize, exposure_count: usize, trace: &RolloutTrace, trials: usize) -> Self {
        let mut trial_rewards = vec![0.0; trials];
        for (info, r) in trace.infos.iter().zip(&trace.rewards) {
            trial_rewards[info.trial_index.min(trials - 1)] += r;
        }
        EpisodeSummary {
            trial_rewards,
            episode,
            task_id: trace.task_id,
            exposure_count,
            steps: trace.len(),
            total_reward: trace.total_reward(),
            choices: trace.trial_choices(trials),
            fixation_steps: trace.trial_fixation_steps(trials),
        }
    }

    /// 1 if the trial's choice was rewarded, 0 otherwise (including not reached).
    pub fn trial_accuracy(&self, trial: usize) -> f64 {
        match self.choices.get(trial) {
            Some(Some(true)) => 1.0,
            _ => 0.0,
        }
    }

    pub fn steps_to_first_fixation(&self) -> usize {
        self.fixation_steps
            .first()
            .copied()
            .flatten()
            .unwrap_or(self.steps)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub memory: EpisodicStore,
    pub log: Vec<EpisodeSummary>,
    /// Row-major `episodes × hidden` reinstatement gates at the retrieval step.
    pub gate_history: Vec<f64>,
    pub skipped_updates: usize,
}

/// Trains from scratch for `train.episodes_train` episodes on the train split.
pub fn train_run(env: &EnvConfig, model: &crate::model::ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    train_run_with(env, model, train, |_, _| {})
}

/// As [`train_run`], calling `on_episode` after every update.
pub fn train_run_with(
    env: &EnvConfig,
    model: &crate::model::ModelConfig,
    train: &TrainConfig,
    mut on_episode: impl FnMut(usize, &RolloutTrace),
) -> Result<TrainOutcome> {
    env.validate()?;
    model.validate()?;
    train.validate()?;
    if model.obs_width != env.obs_width() {
        return Err(Error::Config(format!(
            "model obs_width {} does not match the environment encoding width {}",
            model.obs_width,
            env.obs_width()
        )));
    }
    let encoder = ObsEncoder::new(env);
    let mut params = ModelParams::init(model, &mut stream_rng(train.seed, Stream::Init));
    let mut opt = RmsProp::new(train, params.len());
    let mut memory = EpisodicStore::dense(model.hidden);
    let mut registry = ContextRegistry::new();
    let mut task_rng = stream_rng(train.seed, Stream::Tasks);
    let mut world_rng = stream_rng(train.seed, Stream::World);
    let mut policy_rng = stream_rng(train.seed, Stream::Policy);
    let mut exposures = std::collections::HashMap::<u32, usize>::new();
    let mut log = Vec::with_capacity(train.episodes_train);
    let mut gate_history = Vec::with_capacity(train.episodes_train * model.hidden);
    let mut skipped = 0;
    let mut recent = 0.0;

    for episode in 0..train.episodes_train {
        let task = sample_task(env, &mut task_rng, Split::Train, &mut registry);
        let seen = exposures.entry(task.id()).or_insert(0);
        let exposure = *seen;
        *seen += 1;
        let trace = run_episode(
            env,
            &encoder,
            &params,
            &mut memory,
            task,
            &mut world_rng,
            &mut policy_rng,
            EpisodeOptions::default(),
        )?;
        let returns = compute_returns(&trace.rewards, train.gamma, 0.0);
        let coefs = LossCoefs {
            value_coef: train.value_coef,
            entropy_coef: train.entropy_coef(episode),
        };
        let (_, head_grads) = a2c_loss(&trace, &returns, coefs);
        let mut grads = backward_episode(&params, &trace.steps, &head_grads, None);
        if opt.step(&mut params, &mut grads).skipped {
            skipped += 1;
        }
        gate_history.extend_from_slice(trace.r_fix());
        let summary = EpisodeSummary::from_trace(episode, exposure, &trace, env.trials);
        recent += summary.total_reward;
        if (episode + 1) % 1000 == 0 {
            info!(
                "seed {} episode {}: mean reward {:.3} over last 1000",
                train.seed,
                episode + 1,
                recent / 1000.0
            );
            recent = 0.0;
        }
        on_episode(episode, &trace);
        log.push(summary);
    }
    Ok(TrainOutcome {
        params,
        memory,
        log,
        gate_history,
        skipped_updates: skipped,
    })
}

/// Settings for an evaluation sweep.
#[derive(Debug, Clone, Copy)]
pub struct EvalSpec<'a> {
    pub episodes: usize,
    pub split: Split,
    pub seed: u64,
    pub mask: Option<&'a CellMask>,
    pub retrieval_enabled: bool,
}

/// Evaluates a fixed policy: stochastic actions from fixed eval streams, memory
/// committed after every episode. Returns summaries and calls `inspect` with each trace.
pub fn evaluate(
    env: &EnvConfig,
    params: &ModelParams,
    memory: &mut EpisodicStore,
    spec: EvalSpec<'_>,
    mut inspect: impl FnMut(&EpisodeSummary, &RolloutTrace),
) -> Result<Vec<EpisodeSummary>> {
    let encoder = ObsEncoder::new(env);
    let mut registry = ContextRegistry::new();
    let mut task_rng = stream_rng(spec.seed, Stream::EvalTasks);
    let mut world_rng = stream_rng(spec.seed, Stream::EvalWorld);
    let mut policy_rng = stream_rng(spec.seed, Stream::EvalPolicy);
    let mut exposures = std::collections::HashMap::<u32, usize>::new();
    let mut out = Vec::with_capacity(spec.episodes);
    for episode in 0..spec.episodes {
        let task = sample_task(env, &mut task_rng, spec.split, &mut registry);
        let seen = exposures.entry(task.id()).or_insert(0);
        let exposure = *seen;
        *seen += 1;
        let trace = run_episode(
            env,
            &encoder,
            params,
            memory,
            task,
            &mut world_rng,
            &mut policy_rng,
            EpisodeOptions {
                mask: spec.mask,
                retrieval_enabled: spec.retrieval_enabled,
                commit: true,
            },
        )?;
        let summary = EpisodeSummary::from_trace(episode, exposure, &trace, env.trials);
        inspect(&summary, &trace);
        out.push(summary);
    }
    Ok(out)
}

/// A candidate for seed filtering.
#[derive(Debug, Clone)]
pub struct SeedScore {
    pub index: usize,
    pub seed: u64,
    pub mean_reward: f64,
}

/// Ranks runs by mean episode reward and keeps the best `top` (ties broken by
/// input order). Fewer candidates than `top` are all kept, with a warning.
pub fn rank_seeds(mut scores: Vec<SeedScore>, top: usize, threshold: Option<f64>) -> Vec<SeedScore> {
    if scores.len() < top {
        warn!(
            "only {} runs supplied, fewer than the {} requested; keeping all",
            scores.len(),
            top
        );
    }
    scores.sort_by(|a, b| {
        b.mean_reward
            .partial_cmp(&a.mean_reward)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    scores.truncate(top);
    if let Some(t) = threshold {
        scores.retain(|s| s.mean_reward >= t);
    }
    scores
}

/// Mean episode reward of a trained model over fresh episodes on the train split.
pub fn score_run(
    env: &EnvConfig,
    params: &ModelParams,
    memory: &EpisodicStore,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut memory = memory.clone();
    let summaries = evaluate(
        env,
        params,
        &mut memory,
        EvalSpec {
            episodes,
            split: Split::Train,
            seed,
            mask: None,
            retrieval_enabled: true,
        },
        |_, _| {},
    )?;
    Ok(summaries.iter().map(|s| s.total_reward).sum::<f64>() / episodes.max(1) as f64)
}
