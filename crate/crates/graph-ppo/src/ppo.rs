//! Proximal policy optimization over mixed-dimension rollout batches.
//!
//! The trainer alternates between collecting rollouts from a set of swimmer
//! environments whose joint counts are resampled every episode, and running
//! minibatched clipped-surrogate updates on the shared graph network. The
//! clipping half-width is applied per sample: with compensation enabled a
//! transition from a `d`-joint body is clipped at `epsilon * sqrt(d)`, so
//! bodies of every size keep roughly the same probability of an unclipped
//! update. Per-dimension clip fractions and their cross-dimension spread are
//! reported with every update.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::env::{sample_dim, EnvConfig, GraphObservation, SwimmerEnv};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, save_checkpoint, AdamState, ForwardPass, GraphBatch, NetConfig, PolicyNet,
    RngSnapshot,
};
use crate::policy::{compensated_epsilon, DiagonalGaussian};

/// ln(2 pi), the normalization constant of the Gaussian log density.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Per-joint entropy offset of a Gaussian: 0.5 * (1 + ln(2 pi)).
pub const ENTROPY_CONST: f64 = 0.5 * (1.0 + LN_2PI);

/// One environment step as stored in the rollout buffer.
#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: GraphObservation,
    pub action: Vec<f64>,
    pub log_prob_old: f64,
    pub value_old: f64,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Number of actuated joints, which is also the action length.
    pub dim: usize,
}

/// Rollout data merged across workers, each worker's steps contiguous.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    /// Value of the state each step landed in: zero where the episode
    /// terminated, a bootstrap estimate where it was truncated or where the
    /// worker's segment ended, the next stored value otherwise.
    pub next_values: Vec<f64>,
    /// Start index of each worker's contiguous segment.
    pub segment_starts: Vec<usize>,
    /// Total rewards of episodes that finished during collection.
    pub completed_episode_returns: Vec<f64>,
}

/// How advantages are standardized before the update phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageNorm {
    /// Mean 0, standard deviation 1 over the whole rollout batch. Cross-dim
    /// statistics stay comparable because the normalization is shared.
    #[default]
    Global,
    /// Leave advantages raw.
    Off,
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Nominal clipping half-width.
    pub epsilon: f64,
    /// Scale the half-width by sqrt(dim) per sample.
    pub compensated: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    /// Parallel environment workers.
    pub num_envs: usize,
    /// Steps collected per worker per update.
    pub rollout_steps: usize,
    pub epochs_per_update: usize,
    /// Whole graphs per minibatch; mixed joint counts are allowed.
    pub minibatch_graphs: usize,
    pub total_timesteps: u64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Joint-count range resampled uniformly at every episode start.
    pub dim_low: usize,
    pub dim_high: usize,
    /// Checkpoint whenever cumulative timesteps cross a multiple of this.
    pub snapshot_interval: u64,
    pub advantage_norm: AdvantageNorm,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.111,
            compensated: true,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            num_envs: 8,
            rollout_steps: 256,
            epochs_per_update: 10,
            minibatch_graphs: 64,
            total_timesteps: 150_000,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            seed: 0,
            dim_low: 2,
            dim_high: 10,
            snapshot_interval: 6000,
            advantage_norm: AdvantageNorm::Global,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::RejectedInput(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::RejectedInput(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::RejectedInput(format!(
                "gae_lambda must lie in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::RejectedInput(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("num_envs", self.num_envs),
            ("rollout_steps", self.rollout_steps),
            ("epochs_per_update", self.epochs_per_update),
            ("minibatch_graphs", self.minibatch_graphs),
            ("dim_low", self.dim_low),
        ] {
            if v == 0 {
                return Err(Error::RejectedInput(format!("{name} must be positive")));
            }
        }
        if self.total_timesteps == 0 || self.snapshot_interval == 0 {
            return Err(Error::RejectedInput(
                "total_timesteps and snapshot_interval must be positive".into(),
            ));
        }
        if self.dim_high < self.dim_low {
            return Err(Error::RejectedInput(format!(
                "dim_high {} is below dim_low {}",
                self.dim_high, self.dim_low
            )));
        }
        for (name, v) in [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::RejectedInput(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.max_grad_norm.is_finite() || self.max_grad_norm <= 0.0 {
            return Err(Error::RejectedInput(format!(
                "max_grad_norm must be positive and finite, got {}",
                self.max_grad_norm
            )));
        }
        self.net.validate()
    }
}

/// Generalized advantage estimation over one contiguous span of steps.
///
/// `next_values[t]` is the value of the state step `t` landed in, already
/// zeroed where the episode terminated; `episode_ends[t]` stops the
/// exponential carry from flowing across episode boundaries. Returned
/// advantages are raw; returns are `advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    episode_ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    for len in [values.len(), next_values.len(), episode_ends.len()] {
        if len != t_len {
            return Err(Error::DimensionMismatch {
                expected: t_len,
                got: len,
            });
        }
    }
    let mut advantages = vec![0.0; t_len];
    let mut returns = vec![0.0; t_len];
    let mut carry = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        carry = delta + gamma * lambda * if episode_ends[t] { 0.0 } else { carry };
        advantages[t] = carry;
        returns[t] = carry + values[t];
    }
    Ok((advantages, returns))
}

/// GAE over a whole buffer, segment by segment so no advantage leaks across
/// worker boundaries.
pub fn buffer_gae(
    buffer: &RolloutBuffer,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = buffer.transitions.len();
    if buffer.next_values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: buffer.next_values.len(),
        });
    }
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut bounds = buffer.segment_starts.clone();
    bounds.push(n);
    for w in 0..bounds.len().saturating_sub(1) {
        let (a, b) = (bounds[w], bounds[w + 1]);
        let span = &buffer.transitions[a..b];
        let rewards: Vec<f64> = span.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = span.iter().map(|t| t.value_old).collect();
        let ends: Vec<bool> = span.iter().map(|t| t.terminated || t.truncated).collect();
        let (adv, ret) = compute_gae(
            &rewards,
            &values,
            &buffer.next_values[a..b],
            &ends,
            gamma,
            lambda,
        )?;
        advantages[a..b].copy_from_slice(&adv);
        returns[a..b].copy_from_slice(&ret);
    }
    Ok((advantages, returns))
}

/// Standardizes advantages in place according to `mode`.
pub fn normalize_advantages(advantages: &mut [f64], mode: AdvantageNorm) {
    match mode {
        AdvantageNorm::Off => {}
        AdvantageNorm::Global => {
            if advantages.is_empty() {
                return;
            }
            let n = advantages.len() as f64;
            let mean = advantages.iter().sum::<f64>() / n;
            let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            for a in advantages.iter_mut() {
                *a = (*a - mean) / (std + 1e-8);
            }
        }
    }
}

/// Loss hyperparameters, split out so tests can drive the loss directly.
#[derive(Debug, Clone)]
pub struct LossSettings {
    pub epsilon: f64,
    pub compensated: bool,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&TrainConfig> for LossSettings {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            epsilon: cfg.epsilon,
            compensated: cfg.compensated,
            value_coef: cfg.value_coef,
            entropy_coef: cfg.entropy_coef,
        }
    }
}

/// Scalar diagnostics of one minibatch pass.
#[derive(Debug, Clone)]
pub struct MinibatchStats {
    pub samples: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub total_loss: f64,
    /// Joint count -> (clip events, samples seen).
    pub clip_counts: BTreeMap<usize, (u64, u64)>,
    pub ratios: Vec<f64>,
    pub log_probs_new: Vec<f64>,
}

/// The recorded loss graph of one minibatch: the scalar node to
/// backpropagate from, the forward pass (for gradient accumulation), and
/// the detached diagnostics.
#[derive(Debug)]
pub struct LossGraph {
    pub total: NodeId,
    pub pass: ForwardPass,
    pub stats: MinibatchStats,
}

/// Builds the clipped-surrogate objective for one minibatch on `tape`.
///
/// Per sample `k` with joint count `d_k`: the new log probability sums over
/// joints (shared log standard deviation), the importance ratio is taken
/// against the stored old log probability, and the surrogate is
/// `min(r * A, clip(r, 1 - e_k, 1 + e_k) * A)` with `e_k = epsilon *
/// sqrt(d_k)` when compensated.
///
/// A clip event is counted only when the ratio leaves the band AND the
/// clipped branch is strictly the smaller one, i.e. when the gradient
/// through the ratio is actually suppressed.
pub fn clipped_surrogate_loss(
    net: &PolicyNet,
    tape: &mut Tape,
    transitions: &[&Transition],
    advantages: &[f64],
    returns: &[f64],
    settings: &LossSettings,
) -> Result<LossGraph> {
    let b = transitions.len();
    if b == 0 {
        return Err(Error::RejectedInput("empty minibatch".into()));
    }
    if advantages.len() != b || returns.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: advantages.len().min(returns.len()),
        });
    }
    for (k, t) in transitions.iter().enumerate() {
        if t.action.len() != t.dim || t.observation.n_nodes() != t.dim {
            return Err(Error::RejectedInput(format!(
                "transition {k}: action length {}, dim {}, nodes {}",
                t.action.len(),
                t.dim,
                t.observation.n_nodes()
            )));
        }
    }

    let observations: Vec<GraphObservation> =
        transitions.iter().map(|t| t.observation.clone()).collect();
    let batch = GraphBatch::from_observations(&observations)?;
    let pass = net.forward(tape, &batch)?;

    let actions: Vec<f64> = transitions.iter().flat_map(|t| t.action.clone()).collect();
    let act = tape.leaf(batch.n_nodes, 1, actions)?;
    let adv = tape.leaf(b, 1, advantages.to_vec())?;
    let ret = tape.leaf(b, 1, returns.to_vec())?;
    let dims: Vec<f64> = transitions.iter().map(|t| t.dim as f64).collect();
    let dims_leaf = tape.leaf(b, 1, dims.clone())?;
    let logp_old: Vec<f64> = transitions.iter().map(|t| t.log_prob_old).collect();
    let lp_old = tape.leaf(b, 1, logp_old)?;

    // log pi_new per sample: -exp(-2s)/2 * sum_i (a_i - m_i)^2 - d*s - d*ln(2pi)/2.
    let diff = tape.sub(act, pass.action_mean)?;
    let sq = tape.mul(diff, diff)?;
    let ssq = tape.segment_sum(sq, &batch.node_graph_ids, b)?;
    let neg2s = tape.scale(pass.log_std, -2.0)?;
    let prec = tape.exp(neg2s)?;
    let prec_b = tape.broadcast_scalar(prec, b)?;
    let quad = tape.mul(prec_b, ssq)?;
    let quad = tape.scale(quad, -0.5)?;
    let s_b = tape.broadcast_scalar(pass.log_std, b)?;
    let ds = tape.mul(dims_leaf, s_b)?;
    let ds = tape.scale(ds, -1.0)?;
    let norm_const: Vec<f64> = dims.iter().map(|d| -0.5 * d * LN_2PI).collect();
    let norm_leaf = tape.leaf(b, 1, norm_const)?;
    let partial = tape.add(quad, ds)?;
    let logp_new = tape.add(partial, norm_leaf)?;

    let log_ratio = tape.sub(logp_new, lp_old)?;
    let ratio = tape.exp(log_ratio)?;
    let surr1 = tape.mul(ratio, adv)?;
    let bounds: Vec<(f64, f64)> = transitions
        .iter()
        .map(|t| {
            let e = if settings.compensated {
                compensated_epsilon(settings.epsilon, t.dim)
            } else {
                settings.epsilon
            };
            (1.0 - e, 1.0 + e)
        })
        .collect();
    let clipped = tape.clamp_rows(ratio, &bounds)?;
    let surr2 = tape.mul(clipped, adv)?;
    let obj = tape.min_elem(surr1, surr2)?;
    let mean_obj = tape.mean(obj)?;
    let policy_loss = tape.scale(mean_obj, -1.0)?;

    let verr = tape.sub(pass.values, ret)?;
    let vsq = tape.mul(verr, verr)?;
    let value_loss = tape.mean(vsq)?;

    let ent_off = tape.leaf(b, 1, vec![ENTROPY_CONST; b])?;
    let s_plus = tape.add(s_b, ent_off)?;
    let ent_rows = tape.mul(dims_leaf, s_plus)?;
    let entropy = tape.mean(ent_rows)?;

    let v_scaled = tape.scale(value_loss, settings.value_coef)?;
    let pv = tape.add(policy_loss, v_scaled)?;
    let e_scaled = tape.scale(entropy, -settings.entropy_coef)?;
    let total = tape.add(pv, e_scaled)?;

    let ratio_vals = tape.value(ratio).to_vec();
    let log_ratio_vals = tape.value(log_ratio).to_vec();
    let surr1_vals = tape.value(surr1).to_vec();
    let surr2_vals = tape.value(surr2).to_vec();
    let log_probs_new = tape.value(logp_new).to_vec();

    let mut clip_counts: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let mut kl_sum = 0.0;
    for k in 0..b {
        let entry = clip_counts.entry(transitions[k].dim).or_insert((0, 0));
        entry.1 += 1;
        let (lo, hi) = bounds[k];
        let outside = ratio_vals[k] < lo || ratio_vals[k] > hi;
        if outside && surr2_vals[k] < surr1_vals[k] {
            entry.0 += 1;
        }
        kl_sum += (ratio_vals[k] - 1.0) - log_ratio_vals[k];
    }

    let stats = MinibatchStats {
        samples: b,
        policy_loss: tape.value(policy_loss)[0],
        value_loss: tape.value(value_loss)[0],
        entropy: tape.value(entropy)[0],
        approx_kl: kl_sum / b as f64,
        total_loss: tape.value(total)[0],
        clip_counts,
        ratios: ratio_vals,
        log_probs_new,
    };

    Ok(LossGraph { total, pass, stats })
}

/// One rollout worker: an environment, its private RNG stream, and the
/// observation it currently sits in.
#[derive(Debug)]
pub struct RolloutWorker {
    env: SwimmerEnv,
    rng: ChaCha8Rng,
    obs: GraphObservation,
    episode_return: f64,
}

/// Builds `num_envs` workers on RNG streams 1..=num_envs of the seed, each
/// starting a fresh episode with a freshly sampled joint count.
pub fn make_workers(env_cfg: &EnvConfig, cfg: &TrainConfig) -> Result<Vec<RolloutWorker>> {
    env_cfg.validate()?;
    let mut workers = Vec::with_capacity(cfg.num_envs);
    for w in 0..cfg.num_envs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(w as u64 + 1);
        let mut env = SwimmerEnv::new(env_cfg.clone())?;
        let dim = sample_dim(&mut rng, cfg.dim_low, cfg.dim_high);
        env.set_n_links(dim + 1)?;
        let obs = env.reset(&mut rng);
        workers.push(RolloutWorker {
            env,
            rng,
            obs,
            episode_return: 0.0,
        });
    }
    Ok(workers)
}

/// Collects `rollout_steps` transitions from every worker with the current
/// policy. Action means for all workers are computed in one batched forward
/// per step; sampling stays per-worker so each stream is self-contained.
/// Workers keep their episodes across calls.
pub fn collect_rollouts(
    net: &PolicyNet,
    cfg: &TrainConfig,
    workers: &mut [RolloutWorker],
) -> Result<RolloutBuffer> {
    if workers.is_empty() {
        return Err(Error::RejectedInput("no rollout workers".into()));
    }
    let log_std = net.params().get("log_std").unwrap().data[0];
    let w_count = workers.len();
    let t_len = cfg.rollout_steps;

    let mut seg_transitions: Vec<Vec<Transition>> = vec![Vec::with_capacity(t_len); w_count];
    let mut seg_bootstrap: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(t_len); w_count];
    let mut completed = Vec::new();

    for _t in 0..t_len {
        let obs_list: Vec<GraphObservation> = workers.iter().map(|w| w.obs.clone()).collect();
        let batch = GraphBatch::from_observations(&obs_list)?;
        let (means, values) = net.infer(&batch)?;

        let mut node_off = 0;
        for (w, worker) in workers.iter_mut().enumerate() {
            let dim = worker.env.action_dim();
            let mean_slice = means[node_off..node_off + dim].to_vec();
            node_off += dim;
            let policy = DiagonalGaussian::with_shared_log_std(mean_slice, log_std)?;
            let action = policy.sample(&mut worker.rng);
            let log_prob_old = policy.log_prob(&action)?;
            let outcome = worker.env.step(&action)?;
            worker.episode_return += outcome.reward;

            let ended = outcome.terminated || outcome.truncated;
            let bootstrap = if outcome.truncated && !outcome.terminated {
                let nb = GraphBatch::from_observations(std::slice::from_ref(
                    &outcome.observation,
                ))?;
                let (_, vs) = net.infer(&nb)?;
                Some(vs[0])
            } else if outcome.terminated {
                Some(0.0)
            } else {
                None
            };

            let pre_obs = if ended {
                completed.push(worker.episode_return);
                worker.episode_return = 0.0;
                let new_dim = sample_dim(&mut worker.rng, cfg.dim_low, cfg.dim_high);
                worker.env.set_n_links(new_dim + 1)?;
                let fresh = worker.env.reset(&mut worker.rng);
                std::mem::replace(&mut worker.obs, fresh)
            } else {
                std::mem::replace(&mut worker.obs, outcome.observation)
            };

            seg_transitions[w].push(Transition {
                observation: pre_obs,
                action,
                log_prob_old,
                value_old: values[w],
                reward: outcome.reward,
                terminated: outcome.terminated,
                truncated: outcome.truncated,
                dim,
            });
            seg_bootstrap[w].push(bootstrap);
        }
    }

    // Bootstrap values for segments whose last step left the episode open.
    let obs_list: Vec<GraphObservation> = workers.iter().map(|w| w.obs.clone()).collect();
    let final_batch = GraphBatch::from_observations(&obs_list)?;
    let (_, final_values) = net.infer(&final_batch)?;

    let mut buffer = RolloutBuffer::default();
    for w in 0..w_count {
        let start = buffer.transitions.len();
        buffer.segment_starts.push(start);
        let seg = std::mem::take(&mut seg_transitions[w]);
        buffer.transitions.extend(seg);
        for (t, &boot) in seg_bootstrap[w].iter().enumerate() {
            let next_value = match boot {
                // The episode ended here: zero or the truncation bootstrap.
                Some(v) => v,
                // Open episode: the next stored value, or the final
                // bootstrap at the segment's edge.
                None if t + 1 < t_len => buffer.transitions[start + t + 1].value_old,
                None => final_values[w],
            };
            buffer.next_values.push(next_value);
        }
    }
    buffer.completed_episode_returns = completed;
    Ok(buffer)
}

/// Per-update diagnostics row.
#[derive(Debug, Clone)]
pub struct UpdateMetrics {
    pub update: usize,
    /// Cumulative environment steps after this update's rollout.
    pub timestep: u64,
    /// Mean over the last 100 completed episodes; absent until one finishes.
    pub mean_ep_reward: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    /// Joint count -> fraction of that count's samples clipped this update.
    pub clip_fractions: BTreeMap<usize, f64>,
    /// Population standard deviation of the fractions over dims present.
    pub clip_spread: f64,
}

/// Streaming events emitted during training.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Update(&'a UpdateMetrics),
    Checkpoint { timestep: u64, bytes: &'a [u8] },
}

/// Final result of a training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub net: PolicyNet,
    pub metrics: Vec<UpdateMetrics>,
    pub final_timestep: u64,
}

fn dump_minibatch(
    indices: &[usize],
    buffer: &RolloutBuffer,
    advantages: &[f64],
    returns: &[f64],
    stats: &MinibatchStats,
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "policy_loss={} value_loss={} entropy={} total={}",
        stats.policy_loss, stats.value_loss, stats.entropy, stats.total_loss
    );
    let _ = writeln!(out, "idx dim advantage return log_prob_old reward ratio");
    for (k, &i) in indices.iter().enumerate() {
        let t = &buffer.transitions[i];
        let _ = writeln!(
            out,
            "{i} {} {} {} {} {} {}",
            t.dim, advantages[k], returns[k], t.log_prob_old, t.reward, stats.ratios[k]
        );
    }
    out
}

/// Runs PPO for `total_timesteps` environment steps, invoking `on_event`
/// for every metrics row and checkpoint. Checkpoints are emitted whenever
/// the cumulative step count crosses a multiple of `snapshot_interval`, and
/// once more at the end if the last update did not land on a crossing.
pub fn train<F>(cfg: &TrainConfig, env_cfg: &EnvConfig, mut on_event: F) -> Result<TrainOutput>
where
    F: FnMut(TrainEvent) -> Result<()>,
{
    cfg.validate()?;
    env_cfg.validate()?;

    let mut net = PolicyNet::new(cfg.net.clone(), cfg.seed)?;
    let mut adam = AdamState::new(net.params());
    let mut workers = make_workers(env_cfg, cfg)?;
    // The shuffle stream is far away from worker streams 1..=num_envs.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(u64::MAX);

    let settings = LossSettings::from(cfg);
    let mut metrics_out: Vec<UpdateMetrics> = Vec::new();
    let mut recent_returns: VecDeque<f64> = VecDeque::new();
    let mut timestep: u64 = 0;
    let mut update_idx = 0usize;
    let mut snapshots_crossed: u64 = 0;
    let mut last_checkpoint_at: Option<u64> = None;

    while timestep < cfg.total_timesteps {
        update_idx += 1;
        let buffer = collect_rollouts(&net, cfg, &mut workers)?;
        timestep += buffer.transitions.len() as u64;

        let (mut advantages, returns) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda)?;
        normalize_advantages(&mut advantages, cfg.advantage_norm);

        let n = buffer.transitions.len();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut agg_policy = 0.0;
        let mut agg_value = 0.0;
        let mut agg_entropy = 0.0;
        let mut agg_kl = 0.0;
        let mut agg_samples = 0usize;
        let mut agg_clips: BTreeMap<usize, (u64, u64)> = BTreeMap::new();

        for _epoch in 0..cfg.epochs_per_update {
            indices.shuffle(&mut shuffle_rng);
            for chunk in indices.chunks(cfg.minibatch_graphs) {
                let mb: Vec<&Transition> =
                    chunk.iter().map(|&i| &buffer.transitions[i]).collect();
                let adv_mb: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
                let ret_mb: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                let mut tape = Tape::new();
                let lg =
                    clipped_surrogate_loss(&net, &mut tape, &mb, &adv_mb, &ret_mb, &settings)?;
                if !lg.stats.total_loss.is_finite() {
                    let dump = dump_minibatch(chunk, &buffer, &adv_mb, &ret_mb, &lg.stats);
                    return Err(Error::NonFiniteLoss {
                        update: update_idx,
                        dump,
                    });
                }
                net.params_mut().zero_grad();
                tape.backward(lg.total)?;
                net.accumulate_grads(&tape, &lg.pass)?;
                net.params_mut().clip_grad_norm(cfg.max_grad_norm);
                adam_step(
                    net.params_mut(),
                    &mut adam,
                    cfg.learning_rate,
                    0.9,
                    0.999,
                    1e-8,
                )?;

                let k = lg.stats.samples as f64;
                agg_policy += lg.stats.policy_loss * k;
                agg_value += lg.stats.value_loss * k;
                agg_entropy += lg.stats.entropy * k;
                agg_kl += lg.stats.approx_kl * k;
                agg_samples += lg.stats.samples;
                for (d, (c, s)) in &lg.stats.clip_counts {
                    let e = agg_clips.entry(*d).or_insert((0, 0));
                    e.0 += c;
                    e.1 += s;
                }
            }
        }

        for &r in &buffer.completed_episode_returns {
            if recent_returns.len() == 100 {
                recent_returns.pop_front();
            }
            recent_returns.push_back(r);
        }
        let mean_ep_reward = if recent_returns.is_empty() {
            None
        } else {
            Some(recent_returns.iter().sum::<f64>() / recent_returns.len() as f64)
        };

        let clip_fractions: BTreeMap<usize, f64> = agg_clips
            .iter()
            .map(|(d, (c, s))| (*d, *c as f64 / (*s).max(1) as f64))
            .collect();
        let clip_spread = {
            let vals: Vec<f64> = clip_fractions.values().copied().collect();
            if vals.is_empty() {
                0.0
            } else {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
            }
        };

        let total = agg_samples.max(1) as f64;
        let row = UpdateMetrics {
            update: update_idx,
            timestep,
            mean_ep_reward,
            policy_loss: agg_policy / total,
            value_loss: agg_value / total,
            entropy: agg_entropy / total,
            approx_kl: agg_kl / total,
            clip_fractions,
            clip_spread,
        };
        on_event(TrainEvent::Update(&row))?;
        metrics_out.push(row);

        let crossed = timestep / cfg.snapshot_interval;
        if crossed > snapshots_crossed {
            snapshots_crossed = crossed;
            let snap = RngSnapshot::capture(&shuffle_rng);
            let bytes = save_checkpoint(&net, Some(&adam), Some(&snap), timestep)?;
            on_event(TrainEvent::Checkpoint {
                timestep,
                bytes: &bytes,
            })?;
            last_checkpoint_at = Some(timestep);
        }
    }

    if last_checkpoint_at != Some(timestep) {
        let snap = RngSnapshot::capture(&shuffle_rng);
        let bytes = save_checkpoint(&net, Some(&adam), Some(&snap), timestep)?;
        on_event(TrainEvent::Checkpoint {
            timestep,
            bytes: &bytes,
        })?;
    }

    Ok(TrainOutput {
        net,
        metrics: metrics_out,
        final_timestep: timestep,
    })
}

/// Deterministic evaluation summary for one joint count.
#[derive(Debug, Clone)]
pub struct DimEval {
    pub dim: usize,
    pub episode_returns: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over episodes (0 for a single episode).
    pub std: f64,
}

/// Evaluates the policy with deterministic mean actions. Episode `ep` of
/// joint count `dim` resets from RNG stream `dim * 10_000 + ep + 1` of
/// `seed`, so every (dim, episode) cell is reproducible in isolation.
pub fn evaluate(
    net: &PolicyNet,
    env_cfg: &EnvConfig,
    dims: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Vec<DimEval>> {
    if episodes == 0 {
        return Err(Error::RejectedInput("episodes must be positive".into()));
    }
    if dims.is_empty() {
        return Err(Error::RejectedInput("no dims to evaluate".into()));
    }
    let mut out = Vec::with_capacity(dims.len());
    for &dim in dims {
        let mut cfg = env_cfg.clone();
        cfg.n_links = dim + 1;
        let mut env = SwimmerEnv::new(cfg)?;
        let mut episode_returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(dim as u64 * 10_000 + ep as u64 + 1);
            let mut obs = env.reset(&mut rng);
            let mut total = 0.0;
            loop {
                let batch = GraphBatch::from_observations(std::slice::from_ref(&obs))?;
                let (means, _) = net.infer(&batch)?;
                let outcome = env.step(&means)?;
                total += outcome.reward;
                if outcome.terminated || outcome.truncated {
                    break;
                }
                obs = outcome.observation;
            }
            episode_returns.push(total);
        }
        let n = episode_returns.len() as f64;
        let mean = episode_returns.iter().sum::<f64>() / n;
        let std = if episode_returns.len() < 2 {
            0.0
        } else {
            (episode_returns
                .iter()
                .map(|r| (r - mean) * (r - mean))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        };
        out.push(DimEval {
            dim,
            episode_returns,
            mean,
            std,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::load_checkpoint;
    use crate::policy::unclipped_prob_exact;
    use rand::RngExt;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            num_envs: 2,
            rollout_steps: 8,
            epochs_per_update: 2,
            minibatch_graphs: 8,
            total_timesteps: 32,
            dim_low: 2,
            dim_high: 4,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn quiet_env() -> EnvConfig {
        EnvConfig {
            max_episode_steps: 5,
            ..EnvConfig::default()
        }
    }

    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        next_values: &[f64],
        ends: &[bool],
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t_len = rewards.len();
        let mut adv = vec![0.0; t_len];
        for (t, slot) in adv.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..t_len {
                let delta = rewards[l] + gamma * next_values[l] - values[l];
                acc += w * delta;
                if ends[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            *slot = acc;
        }
        adv
    }

    #[test]
    fn gae_matches_brute_force_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_len = 50;
        let rewards: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut next_values: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ends = vec![false; t_len];
        for t in 0..t_len {
            if rng.random_range(0.0..1.0) < 0.2 {
                ends[t] = true;
                if rng.random_range(0.0..1.0) < 0.5 {
                    // Terminated episodes carry no bootstrap.
                    next_values[t] = 0.0;
                }
            }
        }
        let (adv, ret) = compute_gae(&rewards, &values, &next_values, &ends, 0.99, 0.95).unwrap();
        let oracle = gae_oracle(&rewards, &values, &next_values, &ends, 0.99, 0.95);
        for t in 0..t_len {
            assert!((adv[t] - oracle[t]).abs() < 1e-10, "t={t}");
            assert!((ret[t] - (oracle[t] + values[t])).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn gae_degenerate_cases() {
        // Single terminated step: advantage is r - V(s).
        let (adv, ret) = compute_gae(&[2.0], &[0.5], &[0.0], &[true], 0.99, 0.95).unwrap();
        assert!((adv[0] - 1.5).abs() < 1e-15);
        assert!((ret[0] - 2.0).abs() < 1e-15);

        // lambda = 0 collapses to one-step TD residuals.
        let rewards = [1.0, -0.5, 0.25];
        let values = [0.3, 0.1, -0.2];
        let next_values = [0.1, -0.2, 0.4];
        let ends = [false, false, false];
        let (adv, _) = compute_gae(&rewards, &values, &next_values, &ends, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let td = rewards[t] + 0.9 * next_values[t] - values[t];
            assert!((adv[t] - td).abs() < 1e-15, "t={t}");
        }

        // Length mismatch is rejected.
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[0.0], &[false], 0.9, 0.9).is_err());
    }

    #[test]
    fn advantage_normalization_centers_and_scales() {
        let mut adv = vec![3.0, -1.0, 4.0, 1.0, -5.0, 9.0];
        normalize_advantages(&mut adv, AdvantageNorm::Global);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);

        let mut raw = vec![3.0, -1.0];
        normalize_advantages(&mut raw, AdvantageNorm::Off);
        assert_eq!(raw, vec![3.0, -1.0]);
    }

    #[test]
    fn rollouts_are_deterministic_and_tagged() {
        let cfg = small_cfg();
        let env_cfg = quiet_env();
        let net = PolicyNet::new(cfg.net.clone(), cfg.seed).unwrap();

        let mut w1 = make_workers(&env_cfg, &cfg).unwrap();
        let b1 = collect_rollouts(&net, &cfg, &mut w1).unwrap();
        let mut w2 = make_workers(&env_cfg, &cfg).unwrap();
        let b2 = collect_rollouts(&net, &cfg, &mut w2).unwrap();

        assert_eq!(b1.transitions.len(), 16);
        assert_eq!(b1.segment_starts, vec![0, 8]);
        for (t1, t2) in b1.transitions.iter().zip(&b2.transitions) {
            assert_eq!(t1.dim, t2.dim);
            assert!(t1.dim >= 2 && t1.dim <= 4);
            assert_eq!(t1.action.len(), t1.dim);
            for (a, b) in t1.action.iter().zip(&t2.action) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(t1.reward.to_bits(), t2.reward.to_bits());
            assert_eq!(t1.log_prob_old.to_bits(), t2.log_prob_old.to_bits());
        }
        assert_eq!(b1.next_values.len(), b1.transitions.len());

        // With max_episode_steps = 5 every worker truncates inside the
        // 8-step segment, so completed episodes were recorded and the
        // truncation steps carry a bootstrap value.
        assert!(!b1.completed_episode_returns.is_empty());
        let trunc_count = b1.transitions.iter().filter(|t| t.truncated).count();
        assert!(trunc_count >= 2);
    }

    #[test]
    fn next_values_stitch_segments_correctly() {
        let cfg = small_cfg();
        let env_cfg = quiet_env();
        let net = PolicyNet::new(cfg.net.clone(), cfg.seed).unwrap();
        let mut workers = make_workers(&env_cfg, &cfg).unwrap();
        let buffer = collect_rollouts(&net, &cfg, &mut workers).unwrap();
        let t_len = cfg.rollout_steps;
        for w in 0..cfg.num_envs {
            let start = buffer.segment_starts[w];
            for t in 0..t_len - 1 {
                let tr = &buffer.transitions[start + t];
                if !(tr.terminated || tr.truncated) {
                    // Open episodes bootstrap from the next stored value.
                    assert_eq!(
                        buffer.next_values[start + t].to_bits(),
                        buffer.transitions[start + t + 1].value_old.to_bits(),
                        "worker {w} step {t}"
                    );
                }
            }
        }
    }

    fn make_test_buffer(cfg: &TrainConfig, env_cfg: &EnvConfig) -> (PolicyNet, RolloutBuffer) {
        let net = PolicyNet::new(cfg.net.clone(), cfg.seed).unwrap();
        let mut workers = make_workers(env_cfg, cfg).unwrap();
        let buffer = collect_rollouts(&net, cfg, &mut workers).unwrap();
        (net, buffer)
    }

    /// Deterministically jiggle every parameter so ratios spread away from 1.
    fn perturb(net: &mut PolicyNet, scale: f64) {
        let mut phase = 0.0f64;
        for name in [
            "conv1.root.weight",
            "conv2.root.weight",
            "global.l2.weight",
            "policy.weight",
            "policy.bias",
            "value.weight",
        ] {
            let t = net.params_mut().get_mut(name).unwrap();
            for v in t.data.iter_mut() {
                phase += 1.0;
                *v += scale * (phase * 0.7).sin();
            }
        }
    }

    #[test]
    fn compensated_identity_on_fixed_dim_buffer() {
        // With every sample at the same joint count d, compensated training
        // at half-width e must equal uncompensated training at e * sqrt(d)
        // bit for bit: the effective bands coincide exactly.
        let cfg = TrainConfig {
            dim_low: 5,
            dim_high: 5,
            num_envs: 2,
            rollout_steps: 16,
            seed: 21,
            ..TrainConfig::default()
        };
        let env_cfg = quiet_env();
        let (mut net, buffer) = make_test_buffer(&cfg, &env_cfg);
        perturb(&mut net, 0.05);

        let (mut adv, ret) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
        normalize_advantages(&mut adv, AdvantageNorm::Global);
        let refs: Vec<&Transition> = buffer.transitions.iter().collect();

        let comp = LossSettings {
            epsilon: 0.111,
            compensated: true,
            value_coef: 0.5,
            entropy_coef: 0.01,
        };
        let uncomp = LossSettings {
            epsilon: compensated_epsilon(0.111, 5),
            compensated: false,
            ..comp.clone()
        };

        let mut tape_a = Tape::new();
        let a = clipped_surrogate_loss(&net, &mut tape_a, &refs, &adv, &ret, &comp).unwrap();
        let mut tape_b = Tape::new();
        let b = clipped_surrogate_loss(&net, &mut tape_b, &refs, &adv, &ret, &uncomp).unwrap();

        assert_eq!(a.stats.total_loss.to_bits(), b.stats.total_loss.to_bits());
        assert_eq!(a.stats.policy_loss.to_bits(), b.stats.policy_loss.to_bits());
        assert_eq!(a.stats.clip_counts, b.stats.clip_counts);
    }

    #[test]
    fn mixed_dim_loss_decomposes_into_per_dim_losses() {
        let cfg = TrainConfig {
            num_envs: 4,
            rollout_steps: 32,
            seed: 33,
            ..TrainConfig::default()
        };
        let env_cfg = quiet_env();
        let (mut net, buffer) = make_test_buffer(&cfg, &env_cfg);
        perturb(&mut net, 0.04);

        let (mut adv, ret) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
        normalize_advantages(&mut adv, AdvantageNorm::Global);
        let settings = LossSettings::from(&cfg);

        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let mut tape = Tape::new();
        let full = clipped_surrogate_loss(&net, &mut tape, &refs, &adv, &ret, &settings).unwrap();

        let dims_present: Vec<usize> = full.stats.clip_counts.keys().copied().collect();
        assert!(dims_present.len() >= 2, "need a mixed-dim buffer");

        let mut acc_total = 0.0;
        let mut acc_policy = 0.0;
        let mut acc_value = 0.0;
        let mut acc_entropy = 0.0;
        let n = buffer.transitions.len() as f64;
        for d in dims_present {
            let idx: Vec<usize> = (0..buffer.transitions.len())
                .filter(|&i| buffer.transitions[i].dim == d)
                .collect();
            let sub_refs: Vec<&Transition> = idx.iter().map(|&i| &buffer.transitions[i]).collect();
            let sub_adv: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let sub_ret: Vec<f64> = idx.iter().map(|&i| ret[i]).collect();
            let mut sub_tape = Tape::new();
            let sub = clipped_surrogate_loss(&net, &mut sub_tape, &sub_refs, &sub_adv, &sub_ret, &settings)
                .unwrap();
            let w = idx.len() as f64 / n;
            acc_total += w * sub.stats.total_loss;
            acc_policy += w * sub.stats.policy_loss;
            acc_value += w * sub.stats.value_loss;
            acc_entropy += w * sub.stats.entropy;
        }
        assert!((full.stats.total_loss - acc_total).abs() < 1e-10);
        assert!((full.stats.policy_loss - acc_policy).abs() < 1e-10);
        assert!((full.stats.value_loss - acc_value).abs() < 1e-10);
        assert!((full.stats.entropy - acc_entropy).abs() < 1e-10);
    }

    #[test]
    fn tape_log_probs_match_closed_form_gaussian() {
        let cfg = small_cfg();
        let env_cfg = quiet_env();
        let (net, buffer) = make_test_buffer(&cfg, &env_cfg);
        let (adv, ret) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let mut tape = Tape::new();
        let lg = clipped_surrogate_loss(&net, &mut tape, &refs, &adv, &ret, &LossSettings::from(&cfg))
            .unwrap();

        // Recompute each sample's log probability with the closed-form
        // density at the same action means.
        let obs: Vec<GraphObservation> = refs.iter().map(|t| t.observation.clone()).collect();
        let batch = GraphBatch::from_observations(&obs).unwrap();
        let (means, _) = net.infer(&batch).unwrap();
        let log_std = net.params().get("log_std").unwrap().data[0];
        let mut off = 0;
        for (k, t) in refs.iter().enumerate() {
            let mean = means[off..off + t.dim].to_vec();
            off += t.dim;
            let g = DiagonalGaussian::with_shared_log_std(mean, log_std).unwrap();
            let lp = g.log_prob(&t.action).unwrap();
            assert!(
                (lp - lg.stats.log_probs_new[k]).abs() < 1e-12,
                "sample {k}: {lp} vs {}",
                lg.stats.log_probs_new[k]
            );
            // The buffer was collected by the same network, so the ratio is
            // 1 up to the arithmetic difference of the two code paths.
            assert!((lg.stats.ratios[k] - 1.0).abs() < 1e-12);
        }
        assert!(lg.stats.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn clip_events_match_hand_count() {
        // Forced ratios via doctored old log probs: with uncompensated
        // epsilon 0.2 the band is [0.8, 1.2] for every dim.
        //   r=1.3, A=+1 -> clipped branch smaller: event
        //   r=1.3, A=-1 -> unclipped branch smaller: no event
        //   r=1.0        -> inside band: no event
        //   r=0.7, A=-1 -> clipped branch smaller: event
        //   r=0.7, A=+1 -> unclipped branch smaller: no event
        let cfg = TrainConfig {
            num_envs: 5,
            rollout_steps: 1,
            dim_low: 2,
            dim_high: 3,
            seed: 44,
            ..TrainConfig::default()
        };
        let env_cfg = quiet_env();
        let (net, mut buffer) = make_test_buffer(&cfg, &env_cfg);
        assert_eq!(buffer.transitions.len(), 5);

        // First forward to read off the current log probs.
        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let settings = LossSettings {
            epsilon: 0.2,
            compensated: false,
            value_coef: 0.0,
            entropy_coef: 0.0,
        };
        let adv_probe = vec![0.0; 5];
        let ret_probe = vec![0.0; 5];
        let mut probe_tape = Tape::new();
        let probe =
            clipped_surrogate_loss(&net, &mut probe_tape, &refs, &adv_probe, &ret_probe, &settings)
                .unwrap();
        let base_lp = probe.stats.log_probs_new.clone();

        let targets = [1.3f64, 1.3, 1.0, 0.7, 0.7];
        let advantages = [1.0f64, -1.0, 1.0, -1.0, 1.0];
        for (k, t) in buffer.transitions.iter_mut().enumerate() {
            t.log_prob_old = base_lp[k] - targets[k].ln();
        }
        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let returns = vec![0.0; 5];
        let mut tape = Tape::new();
        let lg =
            clipped_surrogate_loss(&net, &mut tape, &refs, &advantages, &returns, &settings)
                .unwrap();

        for (k, r) in lg.stats.ratios.iter().enumerate() {
            assert!((r - targets[k]).abs() < 1e-12, "ratio {k}");
        }
        let dims: Vec<usize> = buffer.transitions.iter().map(|t| t.dim).collect();
        let mut expected: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
        let events = [true, false, false, true, false];
        for k in 0..5 {
            let e = expected.entry(dims[k]).or_insert((0, 0));
            e.1 += 1;
            if events[k] {
                e.0 += 1;
            }
        }
        assert_eq!(lg.stats.clip_counts, expected);

        // Hand-computed objective: mean(1.2, -1.3, 1.0, -0.8, 0.7) = 0.16.
        assert!((lg.stats.policy_loss + 0.16).abs() < 1e-9);

        // Entropy identity: mean_k d_k * (s + entropy offset).
        let s = net.params().get("log_std").unwrap().data[0];
        let mean_d = dims.iter().sum::<usize>() as f64 / 5.0;
        assert!((lg.stats.entropy - mean_d * (s + ENTROPY_CONST)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = TrainConfig {
            num_envs: 2,
            rollout_steps: 3,
            dim_low: 2,
            dim_high: 4,
            seed: 55,
            ..TrainConfig::default()
        };
        let env_cfg = quiet_env();
        let (mut net, buffer) = make_test_buffer(&cfg, &env_cfg);
        perturb(&mut net, 0.05);
        let (mut adv, ret) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
        normalize_advantages(&mut adv, AdvantageNorm::Global);
        let settings = LossSettings {
            epsilon: 0.2,
            compensated: true,
            value_coef: 0.5,
            entropy_coef: 0.01,
        };

        let loss_of = |net: &PolicyNet| -> f64 {
            let refs: Vec<&Transition> = buffer.transitions.iter().collect();
            let mut tape = Tape::new();
            let lg = clipped_surrogate_loss(net, &mut tape, &refs, &adv, &ret, &settings).unwrap();
            lg.stats.total_loss
        };

        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let mut tape = Tape::new();
        let lg = clipped_surrogate_loss(&net, &mut tape, &refs, &adv, &ret, &settings).unwrap();
        net.params_mut().zero_grad();
        tape.backward(lg.total).unwrap();
        let mut graded = net.clone();
        graded.accumulate_grads(&tape, &lg.pass).unwrap();

        let probes = [
            ("conv1.edge.l2.weight", 11),
            ("conv1.root.weight", 3),
            ("conv2.root.weight", 57),
            ("global.l1.weight", 100),
            ("policy.weight", 5),
            ("policy.bias", 0),
            ("value.weight", 12),
            ("value.bias", 0),
            ("log_std", 0),
        ];
        let h = 1e-6;
        for (name, idx) in probes {
            let analytic = graded.params().get(name).unwrap().grad[idx];
            let mut up = net.clone();
            up.params_mut().get_mut(name).unwrap().data[idx] += h;
            let mut down = net.clone();
            down.params_mut().get_mut(name).unwrap().data[idx] -= h;
            let numeric = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{name}[{idx}]: analytic {analytic:.8e} vs numeric {numeric:.8e}"
            );
        }
    }

    #[test]
    fn value_loss_gradient_reaches_shared_extractor() {
        let cfg = small_cfg();
        let env_cfg = quiet_env();
        let (mut net, buffer) = make_test_buffer(&cfg, &env_cfg);
        let (adv, ret) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
        let settings = LossSettings {
            epsilon: 0.2,
            compensated: true,
            value_coef: 1.0,
            entropy_coef: 0.0,
        };
        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let mut tape = Tape::new();
        let lg = clipped_surrogate_loss(&net, &mut tape, &refs, &adv, &ret, &settings).unwrap();
        net.params_mut().zero_grad();
        tape.backward(lg.total).unwrap();
        net.accumulate_grads(&tape, &lg.pass).unwrap();
        let conv_grad_norm: f64 = net
            .params()
            .get("conv1.edge.l2.weight")
            .unwrap()
            .grad
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(conv_grad_norm > 0.0, "no gradient in shared extractor");
    }

    #[test]
    fn zero_learning_rate_leaves_everything_bit_identical() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            num_envs: 2,
            rollout_steps: 16,
            epochs_per_update: 2,
            minibatch_graphs: 16,
            total_timesteps: 64,
            dim_low: 2,
            dim_high: 3,
            seed: 7,
            ..TrainConfig::default()
        };
        let env_cfg = quiet_env();
        let out = train(&cfg, &env_cfg, |_| Ok(())).unwrap();
        let fresh = PolicyNet::new(cfg.net.clone(), cfg.seed).unwrap();
        for ((n0, t0), (n1, t1)) in out.net.params().iter().zip(fresh.params().iter()) {
            assert_eq!(n0, n1);
            for (a, b) in t0.data.iter().zip(&t1.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n0}");
            }
        }
        for m in &out.metrics {
            assert!(m.approx_kl.abs() < 1e-12);
            for f in m.clip_fractions.values() {
                assert_eq!(*f, 0.0);
            }
            assert_eq!(m.clip_spread, 0.0);
        }
        let e0 = evaluate(&out.net, &env_cfg, &[2, 3], 2, 5).unwrap();
        let e1 = evaluate(&fresh, &env_cfg, &[2, 3], 2, 5).unwrap();
        for (a, b) in e0.iter().zip(&e1) {
            assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        }
    }

    #[test]
    fn checkpoints_follow_snapshot_cadence() {
        let cfg = TrainConfig {
            num_envs: 2,
            rollout_steps: 128,
            epochs_per_update: 1,
            minibatch_graphs: 256,
            total_timesteps: 12_000,
            snapshot_interval: 6000,
            dim_low: 2,
            dim_high: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let env_cfg = EnvConfig {
            max_episode_steps: 100,
            ..EnvConfig::default()
        };
        let mut checkpoint_steps = Vec::new();
        let mut first_bytes = Vec::new();
        let out = train(&cfg, &env_cfg, |ev| {
            if let TrainEvent::Checkpoint { timestep, bytes } = ev {
                checkpoint_steps.push(timestep);
                if first_bytes.is_empty() {
                    first_bytes = bytes.to_vec();
                }
            }
            Ok(())
        })
        .unwrap();
        // 256 steps per update: the 6000 crossing happens at 6144 and the
        // 12000 crossing at 12032, which is also where the run stops.
        assert_eq!(checkpoint_steps, vec![6144, 12_032]);
        assert_eq!(out.final_timestep, 12_032);
        assert_eq!(out.metrics.len(), 47);
        let restored = load_checkpoint(&first_bytes).unwrap();
        assert_eq!(restored.timestep, 6144);
        assert_eq!(restored.net.config(), out.net.config());
        assert!(restored.adam.is_some());

        // Metrics rows carry monotone timesteps and fractions in range.
        let mut prev = 0;
        for m in &out.metrics {
            assert!(m.timestep > prev);
            prev = m.timestep;
            for f in m.clip_fractions.values() {
                assert!((0.0..=1.0).contains(f));
            }
            assert!(m.clip_spread >= 0.0);
        }
    }

    #[test]
    fn observed_unclipped_fraction_matches_closed_form_after_one_step() {
        // Collect a buffer, take one real gradient step with the scale
        // parameter held fixed (so every eta is exactly 1), and compare the
        // number of samples whose log ratio stays inside the per-dim band
        // with the sum of the closed-form probabilities at each sample's
        // measured drift. Binomial 3-sigma bound on the count.
        let cfg = TrainConfig {
            num_envs: 4,
            rollout_steps: 512,
            seed: 17,
            ..TrainConfig::default()
        };
        let env_cfg = EnvConfig {
            max_episode_steps: 250,
            ..EnvConfig::default()
        };
        let (net_old, buffer) = make_test_buffer(&cfg, &env_cfg);
        let n = buffer.transitions.len();
        assert_eq!(n, 2048);

        let (mut adv, ret) = buffer_gae(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
        normalize_advantages(&mut adv, AdvantageNorm::Global);
        let refs: Vec<&Transition> = buffer.transitions.iter().collect();
        let settings = LossSettings::from(&cfg);

        let mut net_new = net_old.clone();
        let mut tape = Tape::new();
        let lg = clipped_surrogate_loss(&net_new, &mut tape, &refs, &adv, &ret, &settings).unwrap();
        net_new.params_mut().zero_grad();
        tape.backward(lg.total).unwrap();
        net_new.accumulate_grads(&tape, &lg.pass).unwrap();
        // Hold the scale fixed: zero its gradient so eta stays exactly 1.
        net_new
            .params_mut()
            .get_mut("log_std")
            .unwrap()
            .grad
            .fill(0.0);
        let mut adam = AdamState::new(net_new.params());
        // A first Adam step moves every parameter by exactly +-lr; 0.02
        // lands the typical drift in a regime where clipping is live.
        adam_step(net_new.params_mut(), &mut adam, 0.02, 0.9, 0.999, 1e-8).unwrap();

        let log_std = net_old.params().get("log_std").unwrap().data[0];
        assert_eq!(
            net_new.params().get("log_std").unwrap().data[0],
            log_std,
            "scale must not move"
        );
        let sigma = log_std.exp();

        let obs: Vec<GraphObservation> = refs.iter().map(|t| t.observation.clone()).collect();
        let batch = GraphBatch::from_observations(&obs).unwrap();
        let (means_old, _) = net_old.infer(&batch).unwrap();
        let (means_new, _) = net_new.infer(&batch).unwrap();

        let mut expected = 0.0;
        let mut variance = 0.0;
        let mut observed = 0u64;
        let mut off = 0;
        for t in refs.iter() {
            let d = t.dim;
            let eps_eff = compensated_epsilon(settings.epsilon, d);
            let mut nu_sq = 0.0;
            let mut log_r = 0.0;
            for i in 0..d {
                let m_old = means_old[off + i];
                let m_new = means_new[off + i];
                nu_sq += ((m_new - m_old) / sigma).powi(2);
                // eta = 1: log r_i = (a - m_old)^2/(2 s^2) - (a - m_new)^2/(2 s^2)
                let a = t.action[i];
                log_r += ((a - m_old).powi(2) - (a - m_new).powi(2)) / (2.0 * sigma * sigma);
            }
            off += d;
            let p = unclipped_prob_exact(eps_eff, nu_sq.sqrt()).unwrap();
            expected += p;
            variance += p * (1.0 - p);
            if log_r.abs() <= eps_eff {
                observed += 1;
            }
        }

        // The perturbation must be large enough that the bound has teeth.
        assert!(
            expected < 0.995 * n as f64,
            "update too small to test anything: expected {expected:.1} of {n}"
        );
        assert!(
            expected > 0.05 * n as f64,
            "update so large the band is always left: expected {expected:.1} of {n}"
        );
        let sigma_count = variance.sqrt();
        let diff = (observed as f64 - expected).abs();
        assert!(
            diff <= 3.0 * sigma_count,
            "observed {observed}, expected {expected:.1}, 3 sigma {:.1}",
            3.0 * sigma_count
        );
    }

    #[test]
    fn evaluate_is_deterministic_and_zero_for_untrained_zero_noise() {
        let net = PolicyNet::new(NetConfig::default(), 2).unwrap();
        let env_cfg = EnvConfig {
            max_episode_steps: 10,
            reset_noise: 0.0,
            ..EnvConfig::default()
        };
        // Zero-noise resets with an untrained policy: every feature is 0 at
        // the straight rest state, so the policy head outputs exactly its
        // zero bias, nothing moves, and the reward is exactly 0.
        let evals = evaluate(&net, &env_cfg, &[2, 5], 3, 11).unwrap();
        for e in &evals {
            assert_eq!(e.episode_returns.len(), 3);
            for r in &e.episode_returns {
                assert_eq!(*r, 0.0);
            }
            assert_eq!(e.mean, 0.0);
            assert_eq!(e.std, 0.0);
        }

        // Noise on: repeated evaluation is bit-identical.
        let env_cfg = EnvConfig {
            max_episode_steps: 10,
            ..EnvConfig::default()
        };
        let a = evaluate(&net, &env_cfg, &[3], 4, 11).unwrap();
        let b = evaluate(&net, &env_cfg, &[3], 4, 11).unwrap();
        for (x, y) in a[0].episode_returns.iter().zip(&b[0].episode_returns) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a[0].std >= 0.0);
    }

    #[test]
    fn train_config_validation_and_serde() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epsilon: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dim_high: 1,
            dim_low: 4,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());

        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let partial: TrainConfig =
            serde_json::from_str("{\"epsilon\": 0.2, \"advantage_norm\": \"off\"}").unwrap();
        assert_eq!(partial.epsilon, 0.2);
        assert_eq!(partial.advantage_norm, AdvantageNorm::Off);
        assert!(partial.compensated);
        assert!(serde_json::from_str::<TrainConfig>("{\"nope\": 1}").is_err());
    }
}
