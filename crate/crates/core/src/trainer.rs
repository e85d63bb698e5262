//! Q-learning training loop: epsilon-greedy exploration mixed with replay
//! draws, acceptance sampling that holds the positive-reward rate near a
//! target, clipped bootstrap targets from a lagged target net, and known
//! classification values injected in place of bootstrap estimates.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clip::{Label, LabeledClip, VideoClip};
use crate::env::{self, Action, Env, EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::geom::RegionBox;
use crate::qnet::{
    loss_and_grads, Adam, BatchSample, Checkpoint, LossKind, NetConfig, NetParams, Scalar,
};
use crate::rng::Pcg32;

/// Give up on the accept/reject loop after this many rejects in a row.
pub const EXPLORE_STALL_LIMIT: usize = 10_000;

/// Accepted-reward history window driving the sparsity controller.
pub const REWARD_WINDOW: usize = 1000;

/// Clamp bounds for the positive-reward selection probability.
pub const P_POS_MIN: f64 = 0.05;
pub const P_POS_MAX: f64 = 0.95;

/// Completed-episode window for the mean return reported in the log.
const RETURN_WINDOW: usize = 100;

/// Per-clip flow fields kept alive for replay re-renders.
const FLOW_CACHE_CAP: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync_every: usize,
    pub target_positive_reward_prob: f64,
    pub p_pos_step: f64,
    pub epsilon_init: f64,
    /// Target clip bounds; None derives them from the env reward set.
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    pub seed: u64,
    pub loss: LossKind,
    /// Regress both classification slots every update instead of only the
    /// taken action.
    pub full_vector_targets: bool,
    /// Ablation: region actions are never offered, so the agent classifies
    /// the full frame at step 0.
    pub no_localization: bool,
    /// Emit a training-log line every this many episodes.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_episodes: 1000,
            gamma: 0.9,
            lr: 1e-3,
            batch_size: 32,
            replay_capacity: 50_000,
            target_sync_every: 500,
            target_positive_reward_prob: 0.5,
            p_pos_step: 0.01,
            epsilon_init: 1.0,
            q_min: None,
            q_max: None,
            seed: 0,
            loss: LossKind::Mse,
            full_vector_targets: false,
            no_localization: false,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be nonzero".into()));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::Config(format!(
                "replay_capacity {} below batch_size {}",
                self.replay_capacity, self.batch_size
            )));
        }
        if self.target_sync_every == 0 {
            return Err(Error::Config("target_sync_every must be nonzero".into()));
        }
        if !(self.target_positive_reward_prob > 0.0 && self.target_positive_reward_prob < 1.0) {
            return Err(Error::Config(format!(
                "target_positive_reward_prob {} not in (0, 1)",
                self.target_positive_reward_prob
            )));
        }
        if !(self.p_pos_step > 0.0 && self.p_pos_step <= 0.5) {
            return Err(Error::Config(format!(
                "p_pos_step {} not in (0, 0.5]",
                self.p_pos_step
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon_init) {
            return Err(Error::Config(format!(
                "epsilon_init {} not in [0, 1]",
                self.epsilon_init
            )));
        }
        if let (Some(lo), Some(hi)) = (self.q_min, self.q_max) {
            if !(lo < hi) {
                return Err(Error::Config(format!("q_min {lo} must be below q_max {hi}")));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be nonzero".into()));
        }
        Ok(())
    }

    /// Target clip bounds, falling back to the env's analytic return range.
    pub fn q_bounds(&self, env_cfg: &EnvConfig) -> (f64, f64) {
        let (lo, hi) = env_cfg.q_bounds();
        (self.q_min.unwrap_or(lo), self.q_max.unwrap_or(hi))
    }
}

/// One-step bootstrap target: reward plus the discounted best next-state
/// value (None once the episode is over), clamped into [q_min, q_max].
pub fn bootstrap_target(
    reward: f64,
    max_next_q: Option<f64>,
    gamma: f64,
    q_min: f64,
    q_max: f64,
) -> f64 {
    let y = reward + max_next_q.map_or(0.0, |m| gamma * m);
    y.clamp(q_min, q_max)
}

/// The label-determined targets for the two classification slots.
pub fn known_classify_values(label: Label, cfg: &EnvConfig) -> (f64, f64) {
    match label {
        Label::Violent => (cfg.r_correct, cfg.r_incorrect),
        Label::NonViolent => (cfg.r_incorrect, cfg.r_correct),
    }
}

/// Overwrite the two classification entries of a target vector with their
/// known rewards; region entries pass through untouched. Training on the
/// taken action alone gets the same substitution for free: classification
/// ends the episode, so its terminal target already equals the known value.
pub fn inject_known_q(targets: &mut [f64], label: Label, cfg: &EnvConfig) {
    let k = cfg.num_regions();
    let (violent, nonviolent) = known_classify_values(label, cfg);
    targets[k] = violent;
    targets[k + 1] = nonviolent;
}

/// Acceptance predicate of the sparsity sampler: positives pass below the
/// selection probability, negatives at or above it.
pub fn accepts(reward: f64, u: f64, p_pos: f64) -> bool {
    (reward > 0.0 && u < p_pos) || (reward < 0.0 && u >= p_pos)
}

/// Greedy action over the valid entries, ties to the lowest index.
pub fn argmax_masked<S: Scalar>(q: &[S], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &allowed) in mask.iter().enumerate() {
        if !allowed {
            continue;
        }
        match best {
            Some(b) if !(q[i] > q[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Largest Q value among the valid entries.
pub fn masked_max<S: Scalar>(q: &[S], mask: &[bool]) -> Option<f64> {
    argmax_masked(q, mask).map(|i| q[i].to_f64())
}

/// Valid actions at a step, with the ablation's permanent region ban
/// folded in.
pub fn effective_mask(cfg: &EnvConfig, step: usize, no_localization: bool) -> Vec<bool> {
    let mut mask = env::action_mask(cfg, step);
    if no_localization {
        for slot in mask.iter_mut().take(cfg.num_regions()) {
            *slot = false;
        }
    }
    mask
}

/// Linear epsilon decay kept as integer counters so the schedule is exact:
/// the value after k decays is epsilon_init - k/num_episodes computed in
/// one shot, which reaches 0.0 precisely at k = num_episodes instead of
/// drifting through repeated subtraction.
#[derive(Debug, Clone)]
pub struct EpsilonSchedule {
    epsilon_init: f64,
    num_episodes: usize,
    decays: usize,
}

impl EpsilonSchedule {
    pub fn new(epsilon_init: f64, num_episodes: usize) -> Self {
        EpsilonSchedule { epsilon_init, num_episodes, decays: 0 }
    }

    pub fn value(&self) -> f64 {
        if self.num_episodes == 0 {
            return self.epsilon_init;
        }
        (self.epsilon_init - self.decays as f64 / self.num_episodes as f64).max(0.0)
    }

    pub fn decay(&mut self) {
        self.decays += 1;
    }
}

/// Bounded window of accepted-reward signs plus the adaptive selection
/// probability that the accept/reject loop consults.
#[derive(Debug, Clone)]
pub struct SparsityController {
    history: VecDeque<bool>,
    window: usize,
    p_pos: f64,
}

impl SparsityController {
    pub fn new(initial_p: f64) -> Self {
        Self::with_window(initial_p, REWARD_WINDOW)
    }

    pub fn with_window(initial_p: f64, window: usize) -> Self {
        SparsityController {
            history: VecDeque::with_capacity(window.min(4096)),
            window,
            p_pos: initial_p.clamp(P_POS_MIN, P_POS_MAX),
        }
    }

    pub fn p_pos(&self) -> f64 {
        self.p_pos
    }

    pub fn record(&mut self, reward: f64) {
        self.history.push_back(reward > 0.0);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    /// Positive share of the recorded window; 0 while empty.
    pub fn positive_fraction(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().filter(|&&p| p).count() as f64 / self.history.len() as f64
    }

    /// Nudge the selection probability toward the target positive rate:
    /// down when the window runs hot, up when at or below target.
    pub fn update(&mut self, target_p: f64, step: f64) {
        if self.positive_fraction() > target_p {
            self.p_pos -= step;
        } else {
            self.p_pos += step;
        }
        self.p_pos = self.p_pos.clamp(P_POS_MIN, P_POS_MAX);
    }
}

/// Fixed-capacity FIFO ring.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(4096)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut T {
        &mut self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

/// Replay record holding the render recipe instead of pixels, so a full
/// 50k buffer stays a few megabytes. The bootstrap target is memoized
/// against the target-net version that produced it.
#[derive(Debug, Clone)]
pub struct StoredTransition {
    pub clip_index: usize,
    pub box_before: RegionBox,
    pub box_after: RegionBox,
    pub step_before: usize,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub label: Label,
    cached_target: Option<(u64, f64)>,
}

/// JSON-lines training log record; loss and mean_return are null until the
/// first update and the first completed episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub p_pos: f64,
    pub mean_return: Option<f64>,
    pub buffer: usize,
    pub updates: usize,
}

/// Final state handed back by a training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub episodes: usize,
    pub updates: usize,
    pub final_epsilon: f64,
    pub final_p_pos: f64,
}

struct Rollout {
    env: Env,
    clip_index: usize,
    ret: f64,
}

struct FlowCache {
    map: HashMap<usize, Arc<VideoClip<f32>>>,
    order: VecDeque<usize>,
    cap: usize,
}

impl FlowCache {
    fn new(cap: usize) -> Self {
        FlowCache { map: HashMap::new(), order: VecDeque::new(), cap }
    }

    fn get(
        &mut self,
        clip_index: usize,
        clip: &LabeledClip,
        cfg: &EnvConfig,
    ) -> Result<Arc<VideoClip<f32>>> {
        if let Some(f) = self.map.get(&clip_index) {
            return Ok(f.clone());
        }
        let flow = Arc::new(env::source_flow(cfg, clip)?);
        if self.order.len() == self.cap {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
        self.order.push_back(clip_index);
        self.map.insert(clip_index, flow.clone());
        Ok(flow)
    }
}

/// The full training state: main and target nets, optimizer, replay,
/// exploration bookkeeping, and the rollout in flight.
pub struct Trainer {
    cfg: TrainConfig,
    net_cfg: NetConfig,
    env_cfg: EnvConfig,
    clips: Vec<Arc<LabeledClip>>,
    main: NetParams<f32>,
    target: NetParams<f32>,
    target_version: u64,
    adam: Adam<f32>,
    replay: ReplayBuffer<StoredTransition>,
    sparsity: SparsityController,
    epsilon: EpsilonSchedule,
    rng: Pcg32,
    rollout: Option<Rollout>,
    flow_cache: FlowCache,
    recent_returns: VecDeque<f64>,
    update_count: usize,
    q_min: f64,
    q_max: f64,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        net_cfg: NetConfig,
        env_cfg: EnvConfig,
        clips: Vec<Arc<LabeledClip>>,
    ) -> Result<Trainer> {
        cfg.validate()?;
        net_cfg.validate()?;
        env_cfg.validate()?;
        if clips.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if (env_cfg.t_in, env_cfg.h_in, env_cfg.w_in) != (net_cfg.t_in, net_cfg.h_in, net_cfg.w_in)
        {
            return Err(Error::Config(format!(
                "env observation {}x{}x{} does not match net input {}x{}x{}",
                env_cfg.t_in, env_cfg.h_in, env_cfg.w_in, net_cfg.t_in, net_cfg.h_in, net_cfg.w_in
            )));
        }
        if env_cfg.n_steps != net_cfg.n_steps {
            return Err(Error::Config(format!(
                "env n_steps {} does not match net n_steps {}",
                env_cfg.n_steps, net_cfg.n_steps
            )));
        }
        if env_cfg.num_actions() != net_cfg.num_actions {
            return Err(Error::Config(format!(
                "env has {} actions but the net predicts {}",
                env_cfg.num_actions(),
                net_cfg.num_actions
            )));
        }
        if env_cfg.use_flow != net_cfg.stream.uses_flow() {
            return Err(Error::Config(format!(
                "env use_flow={} does not match stream {:?}",
                env_cfg.use_flow, net_cfg.stream
            )));
        }
        let (q_min, q_max) = cfg.q_bounds(&env_cfg);
        let main = NetParams::<f32>::init(net_cfg.clone(), cfg.seed)?;
        let target = main.clone();
        let adam = Adam::new(&main, cfg.lr);
        let replay = ReplayBuffer::new(cfg.replay_capacity);
        let sparsity = SparsityController::new(cfg.target_positive_reward_prob);
        let epsilon = EpsilonSchedule::new(cfg.epsilon_init, cfg.num_episodes);
        let rng = Pcg32::new(cfg.seed, 17);
        Ok(Trainer {
            cfg,
            net_cfg,
            env_cfg,
            clips,
            main,
            target,
            target_version: 0,
            adam,
            replay,
            sparsity,
            epsilon,
            rng,
            rollout: None,
            flow_cache: FlowCache::new(FLOW_CACHE_CAP),
            recent_returns: VecDeque::new(),
            update_count: 0,
            q_min,
            q_max,
        })
    }

    pub fn params(&self) -> &NetParams<f32> {
        &self.main
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.value()
    }

    pub fn p_pos(&self) -> f64 {
        self.sparsity.p_pos()
    }

    pub fn updates(&self) -> usize {
        self.update_count
    }

    /// Records accepted so far, oldest first.
    pub fn replay_records(&self) -> impl Iterator<Item = &StoredTransition> {
        self.replay.iter()
    }

    fn flow_for(&mut self, clip_index: usize) -> Result<Arc<VideoClip<f32>>> {
        self.flow_cache.get(clip_index, &self.clips[clip_index], &self.env_cfg)
    }

    fn render_at(&mut self, clip_index: usize, b: &RegionBox, step: usize) -> Result<Observation> {
        let flow = if self.env_cfg.use_flow { Some(self.flow_for(clip_index)?) } else { None };
        env::render_observation(&self.env_cfg, &self.clips[clip_index], flow.as_deref(), b, step)
    }

    fn ensure_rollout(&mut self) -> Result<()> {
        if self.rollout.is_none() {
            let clip_index = self.rng.below(self.clips.len());
            let flow =
                if self.env_cfg.use_flow { Some(self.flow_for(clip_index)?) } else { None };
            let (env, _) = Env::reset(self.env_cfg.clone(), self.clips[clip_index].clone(), flow)?;
            self.rollout = Some(Rollout { env, clip_index, ret: 0.0 });
        }
        Ok(())
    }

    /// One epsilon-greedy step of the live rollout.
    fn fresh_candidate(&mut self) -> Result<StoredTransition> {
        self.ensure_rollout()?;
        let mut rollout = self.rollout.take().expect("rollout ready");
        let mask = effective_mask(&self.env_cfg, rollout.env.step_index(), self.cfg.no_localization);
        let index = if self.rng.chance(self.epsilon.value()) {
            let valid: Vec<usize> =
                mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
            valid[self.rng.below(valid.len())]
        } else {
            let obs = rollout.env.observation()?;
            let q = self.main.forward(&obs)?;
            argmax_masked(&q, &mask)
                .ok_or_else(|| Error::InvalidAction("no valid action to take".into()))?
        };
        let action = Action::from_index(index, self.env_cfg.num_regions())?;
        let tr = rollout.env.step(action)?;
        rollout.ret += tr.reward;
        let record = StoredTransition {
            clip_index: rollout.clip_index,
            box_before: tr.box_before,
            box_after: tr.box_after,
            step_before: tr.step_before,
            action: tr.action,
            reward: tr.reward,
            done: tr.done,
            label: tr.label,
            cached_target: None,
        };
        if tr.done {
            self.recent_returns.push_back(rollout.ret);
            while self.recent_returns.len() > RETURN_WINDOW {
                self.recent_returns.pop_front();
            }
        } else {
            self.rollout = Some(rollout);
        }
        Ok(record)
    }

    /// Draw candidates (fresh rollout step or replay resample, even odds)
    /// until one passes the acceptance predicate, then append it to the
    /// buffer and the reward history.
    pub fn explore_step(&mut self) -> Result<()> {
        for _ in 0..EXPLORE_STALL_LIMIT {
            let fresh = self.rng.chance(0.5);
            let candidate = if fresh || self.replay.is_empty() {
                self.fresh_candidate()?
            } else {
                let i = self.rng.below(self.replay.len());
                self.replay.get(i).clone()
            };
            let u = self.rng.uniform();
            if accepts(candidate.reward, u, self.sparsity.p_pos()) {
                self.sparsity.record(candidate.reward);
                self.replay.push(candidate);
                return Ok(());
            }
        }
        Err(Error::ExploreStall(EXPLORE_STALL_LIMIT))
    }

    /// Bootstrap target for one replay record, memoized per target-net
    /// version because the render and forward dominate the cost.
    fn target_for(&mut self, i: usize) -> Result<f64> {
        let record = self.replay.get(i);
        if record.done {
            return Ok(bootstrap_target(record.reward, None, self.cfg.gamma, self.q_min, self.q_max));
        }
        if let Some((version, y)) = record.cached_target {
            if version == self.target_version {
                return Ok(y);
            }
        }
        let (clip_index, box_after, reward, next_step) =
            (record.clip_index, record.box_after, record.reward, record.step_before + 1);
        let obs = self.render_at(clip_index, &box_after, next_step)?;
        let q = self.target.forward(&obs)?;
        let mask = effective_mask(&self.env_cfg, next_step, self.cfg.no_localization);
        let best = masked_max(&q, &mask)
            .ok_or_else(|| Error::InvalidAction("no valid next action".into()))?;
        let y = bootstrap_target(reward, Some(best), self.cfg.gamma, self.q_min, self.q_max);
        self.replay.get_mut(i).cached_target = Some((self.target_version, y));
        Ok(y)
    }

    /// One minibatch update; None while the buffer is still shorter than a
    /// batch.
    pub fn update_step(&mut self) -> Result<Option<f64>> {
        if self.replay.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let n = self.replay.len();
        let picks: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.below(n)).collect();
        let k = self.env_cfg.num_regions();
        let mut rendered: Vec<(Observation, Vec<(usize, f64)>)> = Vec::with_capacity(picks.len());
        for &i in &picks {
            let y = self.target_for(i)?;
            let record = self.replay.get(i);
            let (clip_index, box_before, step_before, action, label) = (
                record.clip_index,
                record.box_before,
                record.step_before,
                record.action,
                record.label,
            );
            let obs = self.render_at(clip_index, &box_before, step_before)?;
            let taken = action.index(k);
            let mut targets = vec![(taken, y)];
            if self.cfg.full_vector_targets {
                let (violent, nonviolent) = known_classify_values(label, &self.env_cfg);
                if taken != k {
                    targets.push((k, violent));
                }
                if taken != k + 1 {
                    targets.push((k + 1, nonviolent));
                }
            }
            rendered.push((obs, targets));
        }
        let batch: Vec<BatchSample> = rendered
            .iter()
            .map(|(obs, targets)| BatchSample { obs, targets: targets.clone() })
            .collect();
        let (loss, grads) = loss_and_grads(&self.main, &batch, self.cfg.loss)?;
        drop(batch);
        self.adam.apply(&mut self.main, &grads)?;
        self.update_count += 1;
        if self.update_count % self.cfg.target_sync_every == 0 {
            self.target = self.main.clone();
            self.target_version += 1;
        }
        Ok(Some(loss))
    }

    fn mean_return(&self) -> Option<f64> {
        if self.recent_returns.is_empty() {
            return None;
        }
        Some(self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64)
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "train": self.cfg,
            "net": self.net_cfg,
            "env": self.env_cfg,
        })
    }

    /// Run the configured number of episodes: accept one transition, take
    /// one minibatch step, adapt the sampler, decay epsilon, log.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<TrainOutput> {
        for episode in 0..self.cfg.num_episodes {
            self.explore_step()?;
            let loss = self.update_step()?;
            self.sparsity.update(self.cfg.target_positive_reward_prob, self.cfg.p_pos_step);
            self.epsilon.decay();
            if episode % self.cfg.log_every == 0 || episode + 1 == self.cfg.num_episodes {
                let record = LogRecord {
                    episode,
                    loss,
                    epsilon: self.epsilon.value(),
                    p_pos: self.sparsity.p_pos(),
                    mean_return: self.mean_return(),
                    buffer: self.replay.len(),
                    updates: self.update_count,
                };
                serde_json::to_writer(&mut *log, &record)?;
                log.write_all(b"\n")?;
            }
        }
        let checkpoint = Checkpoint {
            params: self.main.clone(),
            adam: Some(self.adam.clone()),
            config_echo: self.config_echo(),
        };
        Ok(TrainOutput {
            checkpoint,
            episodes: self.cfg.num_episodes,
            updates: self.update_count,
            final_epsilon: self.epsilon.value(),
            final_p_pos: self.sparsity.p_pos(),
        })
    }
}

/// Train a net on the given clips and hand back the checkpoint; the log
/// receives one JSON line per logged episode.
pub fn train(
    cfg: TrainConfig,
    net_cfg: NetConfig,
    env_cfg: EnvConfig,
    clips: Vec<Arc<LabeledClip>>,
    log: &mut dyn Write,
) -> Result<TrainOutput> {
    Trainer::new(cfg, net_cfg, env_cfg, clips)?.run(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::{encode_checkpoint, StreamKind};
    use crate::synth::{generate_corpus_clips, SynthConfig};

    fn tiny_env_cfg() -> EnvConfig {
        EnvConfig { t_in: 6, h_in: 16, w_in: 16, ..EnvConfig::default() }
    }

    fn tiny_net_cfg() -> NetConfig {
        NetConfig {
            stream: StreamKind::Rgb,
            t_in: 6,
            h_in: 16,
            w_in: 16,
            conv_channels: vec![4, 6],
            fc_units: 24,
            ..NetConfig::default()
        }
    }

    fn tiny_clips(n: usize) -> Vec<Arc<LabeledClip>> {
        let cfg = SynthConfig {
            n_clips: n,
            frame_size: 48,
            t: 12,
            sprites: 4,
            seed: 5,
            ..SynthConfig::default()
        };
        generate_corpus_clips(&cfg).unwrap().into_iter().map(Arc::new).collect()
    }

    #[test]
    fn bootstrap_target_matches_hand_arithmetic() {
        assert_eq!(bootstrap_target(1.0, None, 0.9, -1.0, 3.0), 1.0);
        assert_eq!(bootstrap_target(-1.0, None, 0.9, -1.0, 3.0), -1.0);
        let y = bootstrap_target(0.5, Some(2.0), 0.9, -1.0, 3.0);
        assert!((y - 2.3).abs() < 1e-12, "got {y}");
        assert_eq!(bootstrap_target(0.5, Some(10.0), 0.9, -1.0, 3.0), 3.0);
        assert_eq!(bootstrap_target(-1.0, Some(-5.0), 0.9, -1.0, 3.0), -1.0);
    }

    #[test]
    fn injection_overwrites_classify_slots_only() {
        let cfg = EnvConfig::default();
        let k = cfg.num_regions();
        let mut targets = vec![0.25; cfg.num_actions()];
        inject_known_q(&mut targets, Label::Violent, &cfg);
        assert_eq!(targets[k], 1.0);
        assert_eq!(targets[k + 1], -1.0);
        assert!(targets[..k].iter().all(|&t| t == 0.25));
        let before = targets.clone();
        inject_known_q(&mut targets, Label::Violent, &cfg);
        assert_eq!(targets, before);
        inject_known_q(&mut targets, Label::NonViolent, &cfg);
        assert_eq!(targets[k], -1.0);
        assert_eq!(targets[k + 1], 1.0);
    }

    #[test]
    fn acceptance_predicate_extremes() {
        let mut rng = Pcg32::new(9, 1);
        for _ in 0..200 {
            let u = rng.uniform();
            assert!(accepts(1.0, u, 1.0));
            assert!(!accepts(-1.0, u, 1.0));
            assert!(!accepts(1.0, u, 0.0));
            assert!(accepts(-1.0, u, 0.0));
            assert!(!accepts(0.0, u, 0.5));
        }
        assert!(accepts(0.5, 0.4, 0.5));
        assert!(!accepts(0.5, 0.5, 0.5));
        assert!(accepts(-1.0, 0.5, 0.5));
        assert!(!accepts(-1.0, 0.4, 0.5));
    }

    #[test]
    fn sparsity_update_direction_and_clamps() {
        let mut sc = SparsityController::with_window(0.5, 10);
        for _ in 0..8 {
            sc.record(1.0);
        }
        for _ in 0..2 {
            sc.record(-1.0);
        }
        assert!((sc.positive_fraction() - 0.8).abs() < 1e-12);
        sc.update(0.5, 0.01);
        assert!((sc.p_pos() - 0.49).abs() < 1e-12);

        let mut sc = SparsityController::with_window(0.5, 10);
        for _ in 0..2 {
            sc.record(1.0);
        }
        for _ in 0..8 {
            sc.record(-1.0);
        }
        sc.update(0.5, 0.01);
        assert!((sc.p_pos() - 0.51).abs() < 1e-12);

        let mut sc = SparsityController::with_window(0.5, 4);
        sc.record(1.0);
        sc.record(-1.0);
        sc.update(0.5, 0.01);
        assert!((sc.p_pos() - 0.51).abs() < 1e-12, "tie counts as at-or-below");

        let mut sc = SparsityController::with_window(P_POS_MIN, 4);
        sc.record(1.0);
        sc.update(0.0, 0.01);
        assert_eq!(sc.p_pos(), P_POS_MIN);
        let mut sc = SparsityController::with_window(P_POS_MAX, 4);
        sc.record(-1.0);
        sc.update(1.0, 0.01);
        assert_eq!(sc.p_pos(), P_POS_MAX);
    }

    #[test]
    fn sparsity_window_is_bounded() {
        let mut sc = SparsityController::with_window(0.5, 50);
        for i in 0..500 {
            sc.record(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        assert_eq!(sc.history.len(), 50);
    }

    #[test]
    fn sparse_stream_converges_to_target_mix() {
        let mut rng = Pcg32::new(31, 2);
        let mut sc = SparsityController::new(0.5);
        let mut accepted = Vec::new();
        while accepted.len() < 6000 {
            let reward = if rng.chance(0.1) { 1.0 } else { -1.0 };
            let u = rng.uniform();
            if accepts(reward, u, sc.p_pos()) {
                sc.record(reward);
                sc.update(0.5, 0.01);
                accepted.push(reward > 0.0);
            }
        }
        let tail = &accepted[1000..];
        let frac = tail.iter().filter(|&&p| p).count() as f64 / tail.len() as f64;
        assert!((frac - 0.5).abs() < 0.08, "accepted-positive fraction {frac}");
    }

    #[test]
    fn epsilon_schedule_is_exact_and_monotone() {
        let mut eps = EpsilonSchedule::new(1.0, 100);
        assert_eq!(eps.value(), 1.0);
        eps.decay();
        assert!((eps.value() - 0.99).abs() < 1e-15);
        let mut last = 1.0;
        for _ in 0..150 {
            eps.decay();
            let v = eps.value();
            assert!(v <= last, "schedule must be non-increasing");
            last = v;
        }
        assert_eq!(eps.value(), 0.0, "exact zero after num_episodes decays");

        for n in [1usize, 3, 7, 1000] {
            let mut eps = EpsilonSchedule::new(1.0, n);
            for _ in 0..n {
                eps.decay();
            }
            assert_eq!(eps.value(), 0.0, "n={n}");
        }
        let eps = EpsilonSchedule::new(0.3, 0);
        assert_eq!(eps.value(), 0.3);
    }

    #[test]
    fn argmax_masked_breaks_ties_low_and_respects_mask() {
        let q = [1.0f32, 3.0, 3.0, 2.0];
        assert_eq!(argmax_masked(&q, &[true; 4]), Some(1));
        assert_eq!(argmax_masked(&q, &[true, false, true, true]), Some(2));
        assert_eq!(argmax_masked(&q, &[true, false, false, true]), Some(3));
        assert_eq!(argmax_masked(&q, &[false; 4]), None);
        assert_eq!(masked_max(&q, &[true, false, false, true]), Some(2.0));
    }

    #[test]
    fn effective_mask_ablation_leaves_classify_only() {
        let cfg = EnvConfig::default();
        let k = cfg.num_regions();
        let m = effective_mask(&cfg, 0, false);
        assert!(m[..k].iter().all(|&b| b) && m[k..].iter().all(|&b| b));
        let m = effective_mask(&cfg, 0, true);
        assert!(m[..k].iter().all(|&b| !b) && m[k..].iter().all(|&b| b));
        let m = effective_mask(&cfg, cfg.n_steps - 1, false);
        assert!(m[..k].iter().all(|&b| !b) && m[k..].iter().all(|&b| b));
    }

    #[test]
    fn replay_buffer_evicts_fifo() {
        let mut rb = ReplayBuffer::new(3);
        for i in 0..5 {
            rb.push(i);
        }
        assert_eq!(rb.len(), 3);
        let kept: Vec<i32> = rb.iter().copied().collect();
        assert_eq!(kept, vec![2, 3, 4]);
        assert_eq!(*rb.get(0), 2);
    }

    #[test]
    fn train_run_is_deterministic_and_finite() {
        let clips = tiny_clips(6);
        let cfg = TrainConfig {
            num_episodes: 40,
            batch_size: 6,
            replay_capacity: 200,
            target_sync_every: 10,
            lr: 1e-3,
            seed: 77,
            ..TrainConfig::default()
        };
        let run = |log: &mut Vec<u8>| {
            train(cfg.clone(), tiny_net_cfg(), tiny_env_cfg(), clips.clone(), log).unwrap()
        };
        let mut log_a = Vec::new();
        let out_a = run(&mut log_a);
        let mut log_b = Vec::new();
        let out_b = run(&mut log_b);
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b, "same seed must produce identical logs");
        assert_eq!(
            encode_checkpoint(&out_a.checkpoint).unwrap(),
            encode_checkpoint(&out_b.checkpoint).unwrap()
        );
        assert!(out_a.checkpoint.params.all_finite());
        assert!(out_a.updates > 0);
        for line in log_a.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            let rec: LogRecord = serde_json::from_slice(line).unwrap();
            if let Some(loss) = rec.loss {
                assert!(loss.is_finite());
            }
            assert!((0.0..=1.0).contains(&rec.epsilon));
            assert!((P_POS_MIN..=P_POS_MAX).contains(&rec.p_pos));
        }
        let last: LogRecord =
            serde_json::from_slice(log_a.split(|&b| b == b'\n').filter(|l| !l.is_empty()).last().unwrap())
                .unwrap();
        assert_eq!(last.episode, cfg.num_episodes - 1);
        assert_eq!(last.epsilon, 0.0);
    }

    #[test]
    fn zero_episode_run_returns_initial_params() {
        let clips = tiny_clips(2);
        let cfg = TrainConfig { num_episodes: 0, seed: 3, ..TrainConfig::default() };
        let mut log = Vec::new();
        let out = train(cfg, tiny_net_cfg(), tiny_env_cfg(), clips, &mut log).unwrap();
        assert!(log.is_empty());
        assert_eq!(out.updates, 0);
        let init = NetParams::<f32>::init(tiny_net_cfg(), 3).unwrap();
        for (a, b) in out.checkpoint.params.tensors().iter().zip(init.tensors()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn ablation_run_stays_at_step_zero() {
        let clips = tiny_clips(4);
        let cfg = TrainConfig {
            num_episodes: 25,
            batch_size: 4,
            no_localization: true,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, tiny_net_cfg(), tiny_env_cfg(), clips).unwrap();
        let mut log = Vec::new();
        let out = trainer.run(&mut log).unwrap();
        let k = EnvConfig::default().num_regions();
        for record in trainer.replay_records() {
            assert!(record.action.index(k) >= k, "only classify actions allowed");
            assert_eq!(record.step_before, 0);
            assert!(record.done);
        }
        assert_eq!(out.checkpoint.config_echo["train"]["no_localization"], true);
        assert_eq!(out.checkpoint.config_echo["net"]["stream"], "rgb");
    }

    #[test]
    fn trainer_rejects_mismatched_configs() {
        let clips = tiny_clips(2);
        let bad_net = NetConfig { t_in: 8, ..tiny_net_cfg() };
        assert!(Trainer::new(TrainConfig::default(), bad_net, tiny_env_cfg(), clips.clone()).is_err());
        let bad_env = EnvConfig { n_steps: 3, ..tiny_env_cfg() };
        assert!(Trainer::new(TrainConfig::default(), tiny_net_cfg(), bad_env, clips.clone()).is_err());
        let flow_net = NetConfig { stream: StreamKind::TwoStream, ..tiny_net_cfg() };
        assert!(Trainer::new(TrainConfig::default(), flow_net, tiny_env_cfg(), clips.clone()).is_err());
        assert!(Trainer::new(TrainConfig::default(), tiny_net_cfg(), tiny_env_cfg(), vec![]).is_err());
        let bad_cfg = TrainConfig { gamma: 1.5, ..TrainConfig::default() };
        assert!(Trainer::new(bad_cfg, tiny_net_cfg(), tiny_env_cfg(), clips).is_err());
    }

    #[test]
    fn full_vector_targets_run_trains() {
        let clips = tiny_clips(4);
        let cfg = TrainConfig {
            num_episodes: 20,
            batch_size: 4,
            full_vector_targets: true,
            seed: 23,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let out = train(cfg, tiny_net_cfg(), tiny_env_cfg(), clips, &mut log).unwrap();
        assert!(out.checkpoint.params.all_finite());
        assert!(out.updates > 0);
    }
}
