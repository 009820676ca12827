//! Latent-space policy learning (clipped-surrogate PPO with GAE) and the
//! online loop that interleaves environment collection, RL updates and
//! contrastive encoder updates.
//!
//! Encoder modes:
//! - `EndToEnd`: RL gradients train the encoder; no contrastive updates.
//! - `DetachedAtc`: the policy consumes codes as constants, so RL gradients
//!   stop at the encoder boundary by construction; only the contrastive
//!   updates touch the encoder.
//! - `AuxAtc`: RL gradients reach the encoder and additional contrastive
//!   updates (loss scaled by `loss_weight`) run each iteration.
//! - `InitOnly`: one burst of contrastive updates on an initial random-policy
//!   buffer initializes the encoder; RL trains it from then on.

use serde::{Deserialize, Serialize};

use crate::augment::{subpixel_random_shift, RandomShiftSpec, SubpixelShiftSpec};
use crate::data::{ReplayBuffer, SamplingMode, Transition};
use crate::env::{obs_batch, GridWorldEnv, Obs, NUM_ACTIONS};
use crate::error::{AtcError, Result};
use crate::model::{atc_update_scaled, linear_inference, AtcModel, LinearLayer, UlMetrics};
use crate::numerics::{Adam, Graph, LrSchedule, NodeId, Tensor};
use crate::rng::Rng;

/// What the policy reads from the encoder: the compressed code, or the
/// flattened latent image (optionally augmented with subpixel shifts during
/// the PPO update, which keeps convolutions out of policy training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyFeatures {
    Code,
    LatentImage {
        #[serde(default)]
        subpixel: Option<SubpixelShiftSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f32,
    pub gae_lambda: f32,
    pub clip_eps: f32,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    /// Clamp rewards to +/- this value before the RL update when set.
    pub reward_clip: Option<f32>,
    pub hidden: usize,
    pub features: PolicyFeatures,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.97,
            clip_eps: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            minibatches: 4,
            lr: 2.5e-4,
            reward_clip: None,
            hidden: 512,
            features: PolicyFeatures::Code,
        }
    }
}

/// MLP over encoder features: shared hidden layer, action-logit head and
/// value head. Never sees pixels directly.
#[derive(Debug, Clone)]
pub struct PolicyHead {
    pub trunk: LinearLayer,
    pub pi: LinearLayer,
    pub value: LinearLayer,
    pub input_dim: usize,
    pub num_actions: usize,
}

impl PolicyHead {
    pub fn new(input_dim: usize, hidden: usize, num_actions: usize, rng: &mut Rng) -> Self {
        PolicyHead {
            trunk: LinearLayer::new(input_dim, hidden, std::f32::consts::SQRT_2, rng),
            pi: LinearLayer::new(hidden, num_actions, 0.01, rng),
            value: LinearLayer::new(hidden, 1, 1.0, rng),
            input_dim,
            num_actions,
        }
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("policy.trunk.w", &self.trunk.weight);
        f("policy.trunk.b", &self.trunk.bias);
        f("policy.pi.w", &self.pi.weight);
        f("policy.pi.b", &self.pi.bias);
        f("policy.v.w", &self.value.weight);
        f("policy.v.b", &self.value.bias);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("policy.trunk.w", &mut self.trunk.weight);
        f("policy.trunk.b", &mut self.trunk.bias);
        f("policy.pi.w", &mut self.pi.weight);
        f("policy.pi.b", &mut self.pi.bias);
        f("policy.v.w", &mut self.value.weight);
        f("policy.v.b", &mut self.value.bias);
    }

    fn wire(&self, g: &mut Graph) -> [(NodeId, NodeId); 3] {
        [self.trunk.wire(g), self.pi.wire(g), self.value.wire(g)]
    }

    fn forward_wired(
        &self,
        g: &mut Graph,
        x: NodeId,
        wired: &[(NodeId, NodeId); 3],
    ) -> Result<(NodeId, NodeId)> {
        let h = g.linear(x, wired[0].0, wired[0].1)?;
        let h = g.relu(h);
        let logits = g.linear(h, wired[1].0, wired[1].1)?;
        let v = g.linear(h, wired[2].0, wired[2].1)?;
        Ok((logits, v))
    }

    /// Tape-free forward for acting: per-row (log-probs, values).
    pub fn forward_inference(&self, features: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut h = linear_inference(features, &self.trunk)?;
        for v in h.data_mut() {
            *v = v.max(0.0);
        }
        let logits = linear_inference(&h, &self.pi)?;
        let values = linear_inference(&h, &self.value)?;
        let n = features.shape()[0];
        let a = self.num_actions;
        let mut logps = vec![0.0f32; n * a];
        for i in 0..n {
            let row = &logits.data()[i * a..(i + 1) * a];
            let m = row.iter().fold(f32::NEG_INFINITY, |x, y| x.max(*y)) as f64;
            let lse = m + row.iter().map(|v| (*v as f64 - m).exp()).sum::<f64>().ln();
            for (o, v) in logps[i * a..(i + 1) * a].iter_mut().zip(row) {
                *o = (*v as f64 - lse) as f32;
            }
        }
        Ok((logps, values.into_data()))
    }

    /// Sample one action from the policy at a single feature row.
    pub fn act(&self, feature: &[f32], rng: &mut Rng) -> Result<ActionSample> {
        let t = Tensor::from_vec(vec![1, self.input_dim], feature.to_vec())?;
        let (logps, values) = self.forward_inference(&t)?;
        let u: f64 = rng.uniform_f64();
        let mut acc = 0.0f64;
        let mut action = self.num_actions - 1;
        for (i, lp) in logps.iter().enumerate() {
            acc += (*lp as f64).exp();
            if u < acc {
                action = i;
                break;
            }
        }
        Ok(ActionSample { action, log_prob: logps[action], value: values[0] })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ActionSample {
    pub action: usize,
    pub log_prob: f32,
    pub value: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderMode {
    EndToEnd,
    DetachedAtc,
    AuxAtc { loss_weight: f32 },
    InitOnly { pretrain_updates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UlAnneal {
    None,
    /// `p(i) = floor(p0 (1 - i/horizon)^2)`: non-increasing, 0 from `horizon` on.
    Quadratic { horizon_iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSchedule {
    /// Environment steps collected per iteration.
    pub minibatch_size: usize,
    /// RL update passes per iteration.
    pub rl_updates: usize,
    /// Contrastive update passes per iteration.
    pub ul_updates: usize,
    pub ul_anneal: UlAnneal,
    /// Environment steps before the first contrastive update.
    pub min_steps_ul: usize,
    /// Environment steps before the first RL update.
    pub min_steps_rl: usize,
}

impl Default for LoopSchedule {
    fn default() -> Self {
        LoopSchedule {
            minibatch_size: 128,
            rl_updates: 1,
            ul_updates: 1,
            ul_anneal: UlAnneal::None,
            min_steps_ul: 1_000,
            min_steps_rl: 1_000,
        }
    }
}

impl LoopSchedule {
    pub fn ul_updates_at(&self, iteration: usize) -> usize {
        match self.ul_anneal {
            UlAnneal::None => self.ul_updates,
            UlAnneal::Quadratic { horizon_iters } => {
                if iteration >= horizon_iters || horizon_iters == 0 {
                    0
                } else {
                    let f = 1.0 - iteration as f64 / horizon_iters as f64;
                    (self.ul_updates as f64 * f * f).floor() as usize
                }
            }
        }
    }

    pub fn validate(&self, mode: &EncoderMode) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(AtcError::config("minibatch_size must be positive"));
        }
        match mode {
            EncoderMode::DetachedAtc | EncoderMode::AuxAtc { .. } => {
                if self.ul_updates == 0 {
                    return Err(AtcError::config(
                        "detached/auxiliary modes need ul_updates >= 1 (the encoder would never train)",
                    ));
                }
            }
            EncoderMode::EndToEnd => {
                if self.ul_updates != 0 {
                    return Err(AtcError::config(
                        "end_to_end runs no contrastive updates; set ul_updates = 0 (or use aux mode)",
                    ));
                }
            }
            EncoderMode::InitOnly { pretrain_updates } => {
                if self.ul_updates != 0 {
                    return Err(AtcError::config("init_only runs its burst once; set ul_updates = 0"));
                }
                if *pretrain_updates == 0 {
                    return Err(AtcError::config("init_only needs pretrain_updates >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Contrastive-update settings shared by the online loop and offline
/// pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UlConfig {
    pub batch_size: usize,
    pub temporal_shift: usize,
    pub sampling: SamplingMode,
    pub shift: RandomShiftSpec,
    pub lr: f64,
    /// Replay buffer transition budget for online runs.
    pub replay_capacity: usize,
}

impl Default for UlConfig {
    fn default() -> Self {
        UlConfig {
            batch_size: 256,
            temporal_shift: 1,
            sampling: SamplingMode::UniformTransitions,
            shift: RandomShiftSpec::default(),
            lr: 1e-3,
            replay_capacity: 100_000,
        }
    }
}

// ── rollouts and GAE ─────────────────────────────────────────────────

struct RolloutStep {
    obs: Obs,
    feature: Vec<f32>,
    action: usize,
    reward: f32,
    log_prob: f32,
    value: f32,
    /// Episode ended at this step with no successor value.
    terminal: bool,
    /// Episode was cut by the step limit; bootstrap from the next state.
    truncation_value: Option<f32>,
}

/// Generalized advantage estimation over a rollout that may span episode
/// boundaries; `next_value` bootstraps the final step when it is neither
/// terminal nor truncated. Returns (advantages, returns).
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    terminals: &[bool],
    truncation_values: &[Option<f32>],
    next_value: f32,
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    let n = rewards.len();
    let mut advantages = vec![0.0f32; n];
    let mut adv_next = 0.0f64;
    for t in (0..n).rev() {
        let (v_next, boundary) = if terminals[t] {
            (0.0f64, true)
        } else if let Some(b) = truncation_values[t] {
            (b as f64, true)
        } else if t + 1 < n {
            (values[t + 1] as f64, false)
        } else {
            (next_value as f64, false)
        };
        if boundary {
            adv_next = 0.0;
        }
        let delta = rewards[t] as f64 + gamma as f64 * v_next - values[t] as f64;
        adv_next = delta + gamma as f64 * lambda as f64 * adv_next;
        advantages[t] = adv_next as f32;
    }
    let returns: Vec<f32> = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoMetrics {
    pub policy_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// What the PPO update trains through: cached feature constants (detached /
/// frozen paths) or pixels re-encoded through the live encoder (end-to-end
/// and auxiliary modes).
enum PpoFeatures<'a> {
    Cached,
    Encoder(&'a mut AtcModel),
}

/// Policy input width for a feature choice.
pub fn policy_input_dim(model: &AtcModel, features: &PolicyFeatures) -> usize {
    match features {
        PolicyFeatures::Code => model.latent_size,
        PolicyFeatures::LatentImage { .. } => model.encoder.latent_len(),
    }
}

fn extract_features(model: &AtcModel, obs: &Tensor, features: &PolicyFeatures) -> Result<Tensor> {
    match features {
        PolicyFeatures::Code => model.codes_inference(obs),
        PolicyFeatures::LatentImage { .. } => {
            let n = obs.shape()[0];
            let z = model.latent_inference(obs)?;
            z.reshaped(vec![n, model.encoder.latent_len()])
        }
    }
}

struct PpoBatch<'a> {
    steps: &'a [RolloutStep],
    advantages: &'a [f32],
    returns: &'a [f32],
}

/// One PPO pass: `epochs` sweeps over the rollout in `minibatches` shuffled
/// slices; clipped-surrogate policy objective, value loss, entropy bonus.
#[allow(clippy::too_many_arguments)]
fn ppo_update(
    policy: &mut PolicyHead,
    features: &mut PpoFeatures<'_>,
    batch: &PpoBatch<'_>,
    cfg: &PpoConfig,
    adam: &mut Adam,
    latent_shape: (usize, usize, usize),
    rng: &mut Rng,
    aug_rng: &mut Rng,
) -> Result<PpoMetrics> {
    let n = batch.steps.len();
    if n == 0 {
        return Err(AtcError::config("empty rollout"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = PpoMetrics::default();
    let mut passes = 0usize;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mb = n.div_ceil(cfg.minibatches.max(1));
        for chunk in order.chunks(mb) {
            let m = ppo_minibatch(policy, features, batch, chunk, cfg, adam, latent_shape, aug_rng)?;
            metrics.policy_objective += m.policy_objective;
            metrics.value_loss += m.value_loss;
            metrics.entropy += m.entropy;
            passes += 1;
        }
    }
    if passes > 0 {
        metrics.policy_objective /= passes as f64;
        metrics.value_loss /= passes as f64;
        metrics.entropy /= passes as f64;
    }
    Ok(metrics)
}

#[allow(clippy::too_many_arguments)]
fn ppo_minibatch(
    policy: &mut PolicyHead,
    features: &mut PpoFeatures<'_>,
    batch: &PpoBatch<'_>,
    idx: &[usize],
    cfg: &PpoConfig,
    adam: &mut Adam,
    latent_shape: (usize, usize, usize),
    aug_rng: &mut Rng,
) -> Result<PpoMetrics> {
    let mb = idx.len();
    let mut g = Graph::new();

    let (feat_node, enc_wired) = match features {
        PpoFeatures::Cached => {
            let d = policy.input_dim;
            let mut data = Vec::with_capacity(mb * d);
            for i in idx {
                data.extend_from_slice(&batch.steps[*i].feature);
            }
            // replaying latent images admits augmentation without touching
            // any convolution
            if let PolicyFeatures::LatentImage { subpixel: Some(spec) } = &cfg.features {
                let (c, h, w) = latent_shape;
                let imgs = Tensor::from_vec(vec![mb, c, h, w], data)?;
                let shifted = subpixel_random_shift(&imgs, spec, aug_rng)?;
                data = shifted.into_data();
            }
            (g.constant(vec![mb, d], data), None)
        }
        PpoFeatures::Encoder(model) => {
            if model.encoder.frozen {
                return Err(AtcError::contract("RL update would write a frozen encoder"));
            }
            let refs: Vec<&Obs> = idx.iter().map(|i| &batch.steps[*i].obs).collect();
            let pixels = obs_batch(&refs)?;
            let x = g.constant_from(pixels);
            let wired = model.wire_learned(&mut g);
            let (_, c) = model.encode_wired(&mut g, x, &wired)?;
            (c, Some(wired))
        }
    };

    let wired = policy.wire(&mut g);
    let (logits, values) = policy.forward_wired(&mut g, feat_node, &wired)?;

    let actions: Vec<usize> = idx.iter().map(|i| batch.steps[*i].action).collect();
    let logp_old: Vec<f32> = idx.iter().map(|i| batch.steps[*i].log_prob).collect();
    let adv: Vec<f32> = idx.iter().map(|i| batch.advantages[*i]).collect();
    let ret: Vec<f32> = idx.iter().map(|i| batch.returns[*i]).collect();

    let lp_all = g.log_softmax(logits)?;
    let lp_taken = g.row_gather(lp_all, actions)?;
    let lp_old_node = g.constant(vec![mb], logp_old);
    let diff = g.sub(lp_taken, lp_old_node)?;
    let ratio = g.exp(diff);
    let adv_node = g.constant(vec![mb], adv);
    let surr1 = g.mul(ratio, adv_node)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let surr2 = g.mul(clipped, adv_node)?;
    let surr = g.min(surr1, surr2)?;
    let policy_objective = g.mean_all(surr);

    let ret_node = g.constant(vec![mb, 1], ret);
    let verr = g.sub(values, ret_node)?;
    let vsq = g.square(verr);
    let value_loss = g.mean_all(vsq);

    let probs = g.exp(lp_all);
    let plp = g.mul(probs, lp_all)?;
    let neg_ent_rows = g.sum_rows(plp)?;
    let rows = g.reshape(neg_ent_rows, vec![1, mb])?;
    let neg_entropy = g.mean_all(rows);

    // loss = -objective + c_v * value_loss - c_e * entropy
    let neg_obj = g.scale(policy_objective, -1.0);
    let v_term = g.scale(value_loss, cfg.value_coef);
    let e_term = g.scale(neg_entropy, cfg.entropy_coef);
    let partial = g.add(neg_obj, v_term)?;
    let loss = g.add(partial, e_term)?;

    g.backward(loss)?;

    let mut tick = adam.begin_step();
    let ids = [wired[0].0, wired[0].1, wired[1].0, wired[1].1, wired[2].0, wired[2].1];
    let mut slot = 0usize;
    let mut result = Ok(());
    policy.visit_params_mut(|name, t| {
        if result.is_err() {
            return;
        }
        match g.grad(ids[slot]) {
            Some(grad) => {
                if let Err(e) = tick.apply(slot, t, grad) {
                    result = Err(e);
                }
            }
            None => result = Err(AtcError::contract(format!("no gradient reached {name}"))),
        }
        slot += 1;
    });
    result?;

    if let (Some(wired_enc), PpoFeatures::Encoder(model)) = (enc_wired, features) {
        // encoder and compressor slots follow the six policy slots
        let mut ids = Vec::new();
        for (w, b) in &wired_enc.enc {
            ids.push(*w);
            ids.push(*b);
        }
        ids.push(wired_enc.comp.0);
        ids.push(wired_enc.comp.1);
        let mut k = 0usize;
        let mut res = Ok(());
        for l in model.encoder.layers.iter_mut() {
            for t in [&mut l.weight, &mut l.bias] {
                if res.is_err() {
                    break;
                }
                match g.grad(ids[k]) {
                    Some(grad) => {
                        if let Err(e) = tick.apply(6 + k, t, grad) {
                            res = Err(e);
                        }
                    }
                    None => res = Err(AtcError::contract("no gradient reached the encoder".to_string())),
                }
                k += 1;
            }
        }
        for t in [&mut model.compressor.weight, &mut model.compressor.bias] {
            if res.is_err() {
                break;
            }
            match g.grad(ids[k]) {
                Some(grad) => {
                    if let Err(e) = tick.apply(6 + k, t, grad) {
                        res = Err(e);
                    }
                }
                None => res = Err(AtcError::contract("no gradient reached the compressor".to_string())),
            }
            k += 1;
        }
        res?;
    }

    Ok(PpoMetrics {
        policy_objective: g.scalar_value(policy_objective) as f64,
        value_loss: g.scalar_value(value_loss) as f64,
        entropy: -(g.scalar_value(neg_entropy) as f64),
    })
}

// ── the online loop ──────────────────────────────────────────────────

/// One CSV-able row per iteration.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub ul_loss: f64,
    pub ul_accuracy: f64,
    pub lr: f64,
    pub ul_updates_done: usize,
    pub encoder_param_hash: u64,
}

pub struct OnlineReport {
    pub log: Vec<TrainLogRow>,
    pub episode_returns: Vec<f64>,
    /// Environment-step count at which each episode finished.
    pub episode_end_steps: Vec<usize>,
}

impl OnlineReport {
    /// Mean return over episodes that finished in the final `frac` of the
    /// run (the scoring window), NaN when none did.
    pub fn final_window_mean(&self, total_steps: usize, frac: f64) -> f64 {
        let cutoff = (total_steps as f64 * (1.0 - frac)) as usize;
        let tail: Vec<f64> = self
            .episode_end_steps
            .iter()
            .zip(&self.episode_returns)
            .filter(|(s, _)| **s >= cutoff)
            .map(|(_, r)| *r)
            .collect();
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

/// Run the decoupled online loop for `total_steps` environment steps.
///
/// Per iteration: collect `m` transitions through the current encoder, run
/// `n` RL update passes, then `p` contrastive updates, each followed by
/// exactly one momentum update.
#[allow(clippy::too_many_arguments)]
pub fn run_online(
    env: &mut GridWorldEnv,
    model: &mut AtcModel,
    policy: &mut PolicyHead,
    mode: &EncoderMode,
    schedule: &LoopSchedule,
    ppo: &PpoConfig,
    ul: &UlConfig,
    buffer: &mut ReplayBuffer,
    total_steps: usize,
    master: &Rng,
    mut on_iteration: impl FnMut(usize, &AtcModel) -> Result<()>,
) -> Result<OnlineReport> {
    schedule.validate(mode)?;
    let rl_trains_encoder =
        matches!(mode, EncoderMode::EndToEnd | EncoderMode::AuxAtc { .. } | EncoderMode::InitOnly { .. });
    if rl_trains_encoder && model.encoder.frozen {
        return Err(AtcError::contract("mode trains the encoder but it is frozen"));
    }
    let env_id = env.config.env_id();
    if policy.input_dim != policy_input_dim(model, &ppo.features) {
        return Err(AtcError::config(format!(
            "policy expects {}-wide features but the configured source provides {}",
            policy.input_dim,
            policy_input_dim(model, &ppo.features)
        )));
    }
    let mut env_rng = master.substream("env");
    let mut policy_rng = master.substream("policy");
    let mut ul_sample_rng = master.substream("ul-sample");
    let mut ul_aug_rng = master.substream("ul-augment");
    let mut ppo_rng = master.substream("ppo-shuffle");
    let mut latent_aug_rng = master.substream("latent-augment");

    let mut rl_adam = Adam::new(ppo.lr, LrSchedule::Constant);
    policy.visit_params(|name, t| {
        rl_adam.register(name, t.numel());
    });
    if rl_trains_encoder {
        for (i, l) in model.encoder.layers.iter().enumerate() {
            rl_adam.register(&format!("rl.enc{i}.w"), l.weight.numel());
            rl_adam.register(&format!("rl.enc{i}.b"), l.bias.numel());
        }
        rl_adam.register("rl.comp.w", model.compressor.weight.numel());
        rl_adam.register("rl.comp.b", model.compressor.bias.numel());
    }

    let mut ul_adam = Adam::new(ul.lr, LrSchedule::Constant);
    model.register_params(&mut ul_adam);
    let ul_loss_scale = match mode {
        EncoderMode::AuxAtc { loss_weight } => *loss_weight,
        _ => 1.0,
    };

    let mut report =
        OnlineReport { log: Vec::new(), episode_returns: Vec::new(), episode_end_steps: Vec::new() };
    let mut steps = 0usize;
    let mut iteration = 0usize;
    let mut episode_return = 0.0f64;
    let mut init_burst_done = false;
    let mut last_ul = UlMetrics { loss: f64::NAN, accuracy: f64::NAN };

    let mut obs = env.reset(&mut env_rng)?;
    while steps < total_steps {
        iteration += 1;
        let mut rollout: Vec<RolloutStep> = Vec::with_capacity(schedule.minibatch_size);
        for _ in 0..schedule.minibatch_size {
            let feature = extract_features(model, &obs.to_tensor(), &ppo.features)?;
            let sample = policy.act(feature.data(), &mut policy_rng)?;
            let cell = env.agent_cell();
            let (next_obs, step) = env.step(sample.action)?;
            let rl_reward = match ppo.reward_clip {
                Some(c) => step.reward.clamp(-c, c),
                None => step.reward,
            };
            episode_return += step.reward as f64;
            buffer.push(
                &env_id,
                Transition {
                    obs: obs.clone(),
                    action: sample.action as u8,
                    reward: step.reward,
                    terminal: step.done,
                    agent_cell: (cell.0 as u8, cell.1 as u8),
                },
            );
            let truncation_value = if step.truncated {
                let f = extract_features(model, &next_obs.to_tensor(), &ppo.features)?;
                let (_, v) = policy.forward_inference(&f)?;
                Some(v[0])
            } else {
                None
            };
            rollout.push(RolloutStep {
                obs,
                feature: feature.into_data(),
                action: sample.action,
                reward: rl_reward,
                log_prob: sample.log_prob,
                value: sample.value,
                terminal: step.done && !step.truncated,
                truncation_value,
            });
            steps += 1;
            if step.done {
                report.episode_returns.push(episode_return);
                report.episode_end_steps.push(steps);
                episode_return = 0.0;
                obs = env.reset(&mut env_rng)?;
            } else {
                obs = next_obs;
            }
        }

        if steps >= schedule.min_steps_rl {
            let next_value = {
                let last = rollout.last().expect("non-empty rollout");
                if last.terminal || last.truncation_value.is_some() {
                    0.0
                } else {
                    let f = extract_features(model, &obs.to_tensor(), &ppo.features)?;
                    let (_, v) = policy.forward_inference(&f)?;
                    v[0]
                }
            };
            let rewards: Vec<f32> = rollout.iter().map(|s| s.reward).collect();
            let values: Vec<f32> = rollout.iter().map(|s| s.value).collect();
            let terminals: Vec<bool> = rollout.iter().map(|s| s.terminal).collect();
            let truncs: Vec<Option<f32>> = rollout.iter().map(|s| s.truncation_value).collect();
            let (advantages, returns) =
                compute_gae(&rewards, &values, &terminals, &truncs, next_value, ppo.gamma, ppo.gae_lambda);
            let batch = PpoBatch { steps: &rollout, advantages: &advantages, returns: &returns };
            let latent_shape = model.encoder.latent_shape();
            for _ in 0..schedule.rl_updates {
                let mut feats =
                    if rl_trains_encoder { PpoFeatures::Encoder(model) } else { PpoFeatures::Cached };
                ppo_update(policy, &mut feats, &batch, ppo, &mut rl_adam, latent_shape, &mut ppo_rng, &mut latent_aug_rng)?;
            }
        }

        let mut ul_done = 0usize;
        if steps >= schedule.min_steps_ul {
            match mode {
                EncoderMode::DetachedAtc | EncoderMode::AuxAtc { .. } => {
                    let p = schedule.ul_updates_at(iteration - 1);
                    for _ in 0..p {
                        let pairs = buffer.sample_pairs(
                            ul.batch_size,
                            ul.temporal_shift,
                            ul.sampling,
                            &mut ul_sample_rng,
                        )?;
                        last_ul = atc_update_scaled(
                            model,
                            &pairs,
                            &ul.shift,
                            &mut ul_adam,
                            &mut ul_aug_rng,
                            ul_loss_scale,
                        )?;
                        ul_done += 1;
                    }
                }
                EncoderMode::InitOnly { pretrain_updates } => {
                    if !init_burst_done {
                        for _ in 0..*pretrain_updates {
                            let pairs = buffer.sample_pairs(
                                ul.batch_size,
                                ul.temporal_shift,
                                ul.sampling,
                                &mut ul_sample_rng,
                            )?;
                            last_ul = atc_update_scaled(
                                model,
                                &pairs,
                                &ul.shift,
                                &mut ul_adam,
                                &mut ul_aug_rng,
                                1.0,
                            )?;
                            ul_done += 1;
                        }
                        init_burst_done = true;
                    }
                }
                EncoderMode::EndToEnd => {}
            }
        }

        let window = report.episode_returns.len().min(10);
        let mean_return = if window == 0 {
            f64::NAN
        } else {
            report.episode_returns[report.episode_returns.len() - window..].iter().sum::<f64>()
                / window as f64
        };
        report.log.push(TrainLogRow {
            iteration,
            env_steps: steps,
            mean_return,
            ul_loss: last_ul.loss,
            ul_accuracy: last_ul.accuracy,
            lr: ul_adam.effective_lr(ul_adam.step_count()),
            ul_updates_done: ul_done,
            encoder_param_hash: model.encoder_param_hash(),
        });
        on_iteration(iteration, model)?;
    }
    Ok(report)
}

/// Offline pretraining on a fixed dataset: `ul_updates` contrastive steps
/// with cosine learning-rate annealing, then the encoder is frozen. Returns
/// the per-update metrics trace.
pub fn pretrain_then_freeze(
    buffer: &ReplayBuffer,
    model: &mut AtcModel,
    ul_updates: usize,
    ul: &UlConfig,
    master: &Rng,
) -> Result<Vec<UlMetrics>> {
    if buffer.len_steps() == 0 {
        return Err(AtcError::config("empty dataset"));
    }
    let mut adam = Adam::new(ul.lr, LrSchedule::Cosine { total_steps: ul_updates.max(1) });
    model.register_params(&mut adam);
    let mut sample_rng = master.substream("ul-sample");
    let mut aug_rng = master.substream("ul-augment");
    let mut trace = Vec::with_capacity(ul_updates);
    for _ in 0..ul_updates {
        let pairs = buffer.sample_pairs(ul.batch_size, ul.temporal_shift, ul.sampling, &mut sample_rng)?;
        trace.push(atc_update_scaled(model, &pairs, &ul.shift, &mut adam, &mut aug_rng, 1.0)?);
    }
    model.encoder.frozen = true;
    Ok(trace)
}

/// Policy training against a fixed feature extractor: the frozen-encoder
/// evaluation path. Identical PPO configuration across objectives makes the
/// returned curves comparable.
#[allow(clippy::too_many_arguments)]
pub fn run_frozen_rl(
    env: &mut GridWorldEnv,
    model: &AtcModel,
    ppo: &PpoConfig,
    schedule_m: usize,
    total_steps: usize,
    master: &Rng,
) -> Result<OnlineReport> {
    if !model.encoder.frozen {
        return Err(AtcError::contract("frozen-encoder evaluation requires a frozen encoder"));
    }
    let mut policy = PolicyHead::new(
        policy_input_dim(model, &ppo.features),
        ppo.hidden,
        NUM_ACTIONS,
        &mut master.substream("policy-init"),
    );
    let mut env_rng = master.substream("env");
    let mut policy_rng = master.substream("policy");
    let mut ppo_rng = master.substream("ppo-shuffle");
    let mut latent_aug_rng = master.substream("latent-augment");
    let mut rl_adam = Adam::new(ppo.lr, LrSchedule::Constant);
    policy.visit_params(|name, t| {
        rl_adam.register(name, t.numel());
    });

    let mut report =
        OnlineReport { log: Vec::new(), episode_returns: Vec::new(), episode_end_steps: Vec::new() };
    let mut steps = 0usize;
    let mut iteration = 0usize;
    let mut episode_return = 0.0f64;
    let mut obs = env.reset(&mut env_rng)?;
    while steps < total_steps {
        iteration += 1;
        let mut rollout: Vec<RolloutStep> = Vec::with_capacity(schedule_m);
        for _ in 0..schedule_m {
            let feature = extract_features(model, &obs.to_tensor(), &ppo.features)?;
            let sample = policy.act(feature.data(), &mut policy_rng)?;
            let (next_obs, step) = env.step(sample.action)?;
            episode_return += step.reward as f64;
            let truncation_value = if step.truncated {
                let f = extract_features(model, &next_obs.to_tensor(), &ppo.features)?;
                let (_, v) = policy.forward_inference(&f)?;
                Some(v[0])
            } else {
                None
            };
            rollout.push(RolloutStep {
                obs: obs.clone(),
                feature: feature.into_data(),
                action: sample.action,
                reward: match ppo.reward_clip {
                    Some(c) => step.reward.clamp(-c, c),
                    None => step.reward,
                },
                log_prob: sample.log_prob,
                value: sample.value,
                terminal: step.done && !step.truncated,
                truncation_value,
            });
            steps += 1;
            if step.done {
                report.episode_returns.push(episode_return);
                report.episode_end_steps.push(steps);
                episode_return = 0.0;
                obs = env.reset(&mut env_rng)?;
            } else {
                obs = next_obs;
            }
        }
        let next_value = {
            let last = rollout.last().expect("non-empty");
            if last.terminal || last.truncation_value.is_some() {
                0.0
            } else {
                let f = extract_features(model, &obs.to_tensor(), &ppo.features)?;
                let (_, v) = policy.forward_inference(&f)?;
                v[0]
            }
        };
        let rewards: Vec<f32> = rollout.iter().map(|s| s.reward).collect();
        let values: Vec<f32> = rollout.iter().map(|s| s.value).collect();
        let terminals: Vec<bool> = rollout.iter().map(|s| s.terminal).collect();
        let truncs: Vec<Option<f32>> = rollout.iter().map(|s| s.truncation_value).collect();
        let (advantages, returns) =
            compute_gae(&rewards, &values, &terminals, &truncs, next_value, ppo.gamma, ppo.gae_lambda);
        let batch = PpoBatch { steps: &rollout, advantages: &advantages, returns: &returns };
        let mut feats = PpoFeatures::Cached;
        ppo_update(
            &mut policy,
            &mut feats,
            &batch,
            ppo,
            &mut rl_adam,
            model.encoder.latent_shape(),
            &mut ppo_rng,
            &mut latent_aug_rng,
        )?;

        let window = report.episode_returns.len().min(10);
        let mean_return = if window == 0 {
            f64::NAN
        } else {
            report.episode_returns[report.episode_returns.len() - window..].iter().sum::<f64>()
                / window as f64
        };
        report.log.push(TrainLogRow {
            iteration,
            env_steps: steps,
            mean_return,
            ul_loss: f64::NAN,
            ul_accuracy: f64::NAN,
            lr: rl_adam.effective_lr(rl_adam.step_count()),
            ul_updates_done: 0,
            encoder_param_hash: model.encoder_param_hash(),
        });
    }
    Ok(report)
}
