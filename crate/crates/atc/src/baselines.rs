//! Competing unsupervised objectives sharing the contrastive model's
//! encoder, data pipeline and evaluation plumbing.
//!
//! Every variant trains the identical convolutional encoder and a linear
//! code head, exposes the same offline `train -> frozen encoder` contract,
//! and differs only in its loss: temporal-contrastive variants reuse the
//! main update; the reconstruction objective decodes the time-shifted
//! target from a sampled latent (with the action as decoder input); the
//! inverse model predicts the action between paired codes; the similarity
//! variant keeps the momentum target and predictor but drops the negatives.

use serde::{Deserialize, Serialize};

use crate::augment::{random_shift, RandomShiftSpec};
use crate::data::ReplayBuffer;
use crate::env::NUM_ACTIONS;
use crate::error::{AtcError, Result};
use crate::model::{atc_update_scaled, AtcBatch, AtcConfig, AtcModel, LinearLayer, UlMetrics};
use crate::numerics::{Adam, AdamTick, Graph, LrSchedule, NodeId, Tensor};
use crate::rl::UlConfig;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    /// The full temporal-contrastive objective.
    Atc,
    /// Temporal contrast with augmentation disabled.
    AtcNoShift,
    /// Temporal contrast with a reduced shift probability.
    AtcShiftProb { p: f32 },
    /// Contrast against the same observation (temporal shift 0).
    AugmentedContrast,
    /// Time-shifted reconstruction with a KL-regularized sampled latent.
    VaeT { temporal_shift: usize, kl_weight: f32 },
    /// Predict the action between a pair of observations.
    InverseModel { temporal_shift: usize },
    /// Momentum target and predictor, cosine similarity loss, no negatives.
    SimilarityLoss,
}

impl BaselineSpec {
    /// How this objective adjusts the shared contrastive settings. Variants
    /// that are "the main objective with one knob turned" stay on the same
    /// code path with the knob applied here.
    pub fn adjust_ul(&self, base: &UlConfig) -> UlConfig {
        let mut ul = *base;
        match self {
            BaselineSpec::Atc | BaselineSpec::SimilarityLoss => {}
            BaselineSpec::AtcNoShift => ul.shift.apply_probability = 0.0,
            BaselineSpec::AtcShiftProb { p } => ul.shift.apply_probability = *p,
            BaselineSpec::AugmentedContrast => ul.temporal_shift = 0,
            BaselineSpec::VaeT { temporal_shift, .. } | BaselineSpec::InverseModel { temporal_shift } => {
                ul.temporal_shift = *temporal_shift;
            }
        }
        ul
    }
}

pub struct BaselineOutcome {
    /// Model with the frozen trained encoder (and code head).
    pub model: AtcModel,
    /// Per-update loss/accuracy; accuracy is NaN for objectives without a
    /// classification readout.
    pub trace: Vec<UlMetrics>,
}

/// Offline training entry point shared by every objective: `updates` steps
/// with cosine annealing, returning the model with its encoder frozen.
pub fn train_offline(
    spec: &BaselineSpec,
    config: &AtcConfig,
    buffer: &ReplayBuffer,
    updates: usize,
    base_ul: &UlConfig,
    master: &Rng,
) -> Result<BaselineOutcome> {
    let ul = spec.adjust_ul(base_ul);
    let mut init_rng = master.substream("init");
    let mut sample_rng = master.substream("ul-sample");
    let mut aug_rng = master.substream("ul-augment");
    let mut model = AtcModel::new(config, &mut init_rng)?;
    let mut trace = Vec::with_capacity(updates);

    match spec {
        BaselineSpec::Atc
        | BaselineSpec::AtcNoShift
        | BaselineSpec::AtcShiftProb { .. }
        | BaselineSpec::AugmentedContrast => {
            let mut adam = Adam::new(ul.lr, LrSchedule::Cosine { total_steps: updates.max(1) });
            model.register_params(&mut adam);
            for _ in 0..updates {
                let batch =
                    buffer.sample_pairs(ul.batch_size, ul.temporal_shift, ul.sampling, &mut sample_rng)?;
                trace.push(atc_update_scaled(&mut model, &batch, &ul.shift, &mut adam, &mut aug_rng, 1.0)?);
            }
        }
        BaselineSpec::SimilarityLoss => {
            let mut adam = Adam::new(ul.lr, LrSchedule::Cosine { total_steps: updates.max(1) });
            model.register_params(&mut adam);
            for _ in 0..updates {
                let batch =
                    buffer.sample_pairs(ul.batch_size, ul.temporal_shift, ul.sampling, &mut sample_rng)?;
                trace.push(similarity_update(&mut model, &batch, &ul.shift, &mut adam, &mut aug_rng)?);
            }
        }
        BaselineSpec::VaeT { kl_weight, .. } => {
            let mut vae = VaeT::new(model, *kl_weight, &mut init_rng)?;
            let mut adam = Adam::new(ul.lr, LrSchedule::Cosine { total_steps: updates.max(1) });
            vae.register_params(&mut adam);
            for _ in 0..updates {
                let (batch, actions) = buffer.sample_pairs_with_actions(
                    ul.batch_size,
                    ul.temporal_shift,
                    ul.sampling,
                    &mut sample_rng,
                )?;
                trace.push(vae.update(&batch, &actions, &ul.shift, &mut adam, &mut aug_rng)?);
            }
            model = vae.model;
        }
        BaselineSpec::InverseModel { .. } => {
            let mut inv = InverseModel::new(model, &mut init_rng);
            let mut adam = Adam::new(ul.lr, LrSchedule::Cosine { total_steps: updates.max(1) });
            inv.register_params(&mut adam);
            for _ in 0..updates {
                let (batch, actions) = buffer.sample_pairs_with_actions(
                    ul.batch_size,
                    ul.temporal_shift,
                    ul.sampling,
                    &mut sample_rng,
                )?;
                trace.push(inv.update(&batch, &actions, &ul.shift, &mut adam, &mut aug_rng)?);
            }
            model = inv.model;
        }
    }
    model.encoder.frozen = true;
    Ok(BaselineOutcome { model, trace })
}

// ── similarity loss ──────────────────────────────────────────────────

/// One gradient step with the similarity loss `mean(2 - 2 cos(p_i, cbar_i))`
/// in place of the contrastive loss; momentum path and predictor unchanged.
/// The contrast matrix plays no part and receives no update.
pub fn similarity_update(
    model: &mut AtcModel,
    batch: &AtcBatch,
    shift: &RandomShiftSpec,
    adam: &mut Adam,
    rng: &mut Rng,
) -> Result<UlMetrics> {
    if model.encoder.frozen {
        return Err(AtcError::contract("attempted update of a frozen encoder"));
    }
    let anchors = random_shift(&batch.anchors, shift, rng)?;
    let positives = random_shift(&batch.positives, shift, rng)?;
    let mut g = Graph::new();
    let a = g.constant_from(anchors);
    let pos = g.constant_from(positives);
    let wired = model.wire_learned(&mut g);
    let (_, c) = model.encode_wired(&mut g, a, &wired)?;
    let p = model.predict_wired(&mut g, c, &wired)?;
    let (_, cbar) = model.encode_momentum(&mut g, pos)?;
    let dist = g.cosine_distance(p, cbar)?;
    let n = g.shape(dist)[0];
    let rows = g.reshape(dist, vec![1, n])?;
    let loss = g.mean_all(rows);
    let loss_value = g.scalar_value(loss) as f64;
    if !loss_value.is_finite() {
        return Err(AtcError::NonFinite(format!("similarity loss = {loss_value}")));
    }
    g.backward(loss)?;

    let ids = [
        &wired.enc.iter().flat_map(|(w, b)| [*w, *b]).collect::<Vec<_>>()[..],
        &[wired.comp.0, wired.comp.1, wired.pred_in.0, wired.pred_in.1, wired.pred_out.0, wired.pred_out.1],
    ]
    .concat();
    let mut tick = adam.begin_step();
    let mut slot = 0usize;
    let mut result = Ok(());
    model.visit_params_mut(|name, t| {
        if result.is_err() || name == "contrast.w" {
            if name == "contrast.w" {
                slot += 1;
            }
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
    model.momentum_update();
    Ok(UlMetrics { loss: loss_value, accuracy: f64::NAN })
}

// ── time-shifted reconstruction ──────────────────────────────────────

/// Encoder plus a sampled latent head and an action-conditioned MLP decoder
/// reconstructing the observation `temporal_shift` steps ahead. The code
/// head (`model.compressor`) doubles as the posterior mean, so the frozen
/// feature extractor has the same shape as every other objective's.
pub struct VaeT {
    pub model: AtcModel,
    pub logvar_head: LinearLayer,
    pub dec_hidden: LinearLayer,
    pub dec_out: LinearLayer,
    pub kl_weight: f32,
}

impl VaeT {
    pub fn new(model: AtcModel, kl_weight: f32, rng: &mut Rng) -> Result<Self> {
        let flat = model.encoder.latent_len();
        let latent = model.latent_size;
        let (c, h, w) =
            (model.encoder.config.in_channels, model.encoder.config.height, model.encoder.config.width);
        let obs_len = c * h * w;
        let hidden = 512;
        Ok(VaeT {
            logvar_head: LinearLayer::new(flat, latent, 1.0, rng),
            dec_hidden: LinearLayer::new(latent + NUM_ACTIONS, hidden, std::f32::consts::SQRT_2, rng),
            dec_out: LinearLayer::new(hidden, obs_len, 1.0, rng),
            kl_weight,
            model,
        })
    }

    pub fn register_params(&self, adam: &mut Adam) {
        for (i, l) in self.model.encoder.layers.iter().enumerate() {
            adam.register(&format!("vae.enc{i}.w"), l.weight.numel());
            adam.register(&format!("vae.enc{i}.b"), l.bias.numel());
        }
        adam.register("vae.mu.w", self.model.compressor.weight.numel());
        adam.register("vae.mu.b", self.model.compressor.bias.numel());
        adam.register("vae.logvar.w", self.logvar_head.weight.numel());
        adam.register("vae.logvar.b", self.logvar_head.bias.numel());
        adam.register("vae.dec_h.w", self.dec_hidden.weight.numel());
        adam.register("vae.dec_h.b", self.dec_hidden.bias.numel());
        adam.register("vae.dec_o.w", self.dec_out.weight.numel());
        adam.register("vae.dec_o.b", self.dec_out.bias.numel());
    }

    /// One gradient step; anchors reconstruct the (un-augmented) positives.
    pub fn update(
        &mut self,
        batch: &AtcBatch,
        actions: &[u8],
        shift: &RandomShiftSpec,
        adam: &mut Adam,
        rng: &mut Rng,
    ) -> Result<UlMetrics> {
        if self.model.encoder.frozen {
            return Err(AtcError::contract("attempted update of a frozen encoder"));
        }
        let n = batch.len();
        let anchors = random_shift(&batch.anchors, shift, rng)?;
        let eps: Vec<f32> = (0..n * self.model.latent_size).map(|_| rng.normal_f32()).collect();

        let mut g = Graph::new();
        let x = g.constant_from(anchors);
        let obs_len = batch.positives.numel() / n;
        let target_flat = g.constant(vec![n, obs_len], batch.positives.data().to_vec());

        let enc = self.model.encoder.wire(&mut g);
        let mu_w = self.model.compressor.wire(&mut g);
        let lv_w = self.logvar_head.wire(&mut g);
        let dh_w = self.dec_hidden.wire(&mut g);
        let do_w = self.dec_out.wire(&mut g);

        let z_img = self.model.encoder.forward_wired(&mut g, x, &enc)?;
        let flat = g.reshape(z_img, vec![n, self.model.encoder.latent_len()])?;
        let mu = g.linear(flat, mu_w.0, mu_w.1)?;
        let logvar = g.linear(flat, lv_w.0, lv_w.1)?;

        // z = mu + exp(0.5 logvar) * eps  (variance parameterized as its log,
        // so a non-positive variance cannot be expressed)
        let half_lv = g.scale(logvar, 0.5);
        let std = g.exp(half_lv);
        let eps_node = g.constant(vec![n, self.model.latent_size], eps);
        let noise = g.mul(std, eps_node)?;
        let z = g.add(mu, noise)?;

        let onehot = action_one_hot(&mut g, actions, n)?;
        let dec_in = g.concat_cols(z, onehot)?;
        let h = g.linear(dec_in, dh_w.0, dh_w.1)?;
        let h = g.relu(h);
        let recon = g.linear(h, do_w.0, do_w.1)?;

        let (loss, _) = vae_t_loss_nodes(&mut g, recon, target_flat, mu, logvar, self.kl_weight)?;
        let loss_value = g.scalar_value(loss) as f64;
        if !loss_value.is_finite() {
            return Err(AtcError::NonFinite(format!("reconstruction loss = {loss_value}")));
        }
        g.backward(loss)?;

        let mut ids = Vec::new();
        for (w, b) in &enc {
            ids.push(*w);
            ids.push(*b);
        }
        for (w, b) in [mu_w, lv_w, dh_w, do_w] {
            ids.push(w);
            ids.push(b);
        }
        let mut tick = adam.begin_step();
        let mut slot = 0usize;
        for (i, l) in self.model.encoder.layers.iter_mut().enumerate() {
            apply_slot(&g, &mut tick, ids[slot], slot, &mut l.weight, &format!("vae.enc{i}.w"))?;
            slot += 1;
            apply_slot(&g, &mut tick, ids[slot], slot, &mut l.bias, &format!("vae.enc{i}.b"))?;
            slot += 1;
        }
        for (t, name) in [
            (&mut self.model.compressor.weight, "vae.mu.w"),
            (&mut self.model.compressor.bias, "vae.mu.b"),
            (&mut self.logvar_head.weight, "vae.logvar.w"),
            (&mut self.logvar_head.bias, "vae.logvar.b"),
            (&mut self.dec_hidden.weight, "vae.dec_h.w"),
            (&mut self.dec_hidden.bias, "vae.dec_h.b"),
            (&mut self.dec_out.weight, "vae.dec_o.w"),
            (&mut self.dec_out.bias, "vae.dec_o.b"),
        ] {
            apply_slot(&g, &mut tick, ids[slot], slot, t, name)?;
            slot += 1;
        }
        Ok(UlMetrics { loss: loss_value, accuracy: f64::NAN })
    }
}

/// Loss assembly shared with tests: per-sample pixel-sum squared error plus
/// `kl_weight` times the per-sample KL of N(mu, exp(logvar)) from N(0, I),
/// both averaged over the batch. Returns `(loss, (mse, kl))`.
pub fn vae_t_loss_nodes(
    g: &mut Graph,
    recon: NodeId,
    target: NodeId,
    mu: NodeId,
    logvar: NodeId,
    kl_weight: f32,
) -> Result<(NodeId, (NodeId, NodeId))> {
    let n = g.shape(recon)[0];
    let err = g.sub(recon, target)?;
    let sq = g.square(err);
    let mse_rows = g.sum_rows(sq)?;
    let mse_mat = g.reshape(mse_rows, vec![1, n])?;
    let mse = g.mean_all(mse_mat);
    let kl_rows = g.gaussian_kl(mu, logvar)?;
    let kl_mat = g.reshape(kl_rows, vec![1, n])?;
    let kl = g.mean_all(kl_mat);
    let kl_term = g.scale(kl, kl_weight);
    let loss = g.add(mse, kl_term)?;
    Ok((loss, (mse, kl)))
}

fn action_one_hot(g: &mut Graph, actions: &[u8], n: usize) -> Result<NodeId> {
    if actions.len() != n {
        return Err(AtcError::config("action list does not match batch"));
    }
    let mut data = vec![0.0f32; n * NUM_ACTIONS];
    for (i, a) in actions.iter().enumerate() {
        let a = *a as usize;
        if a >= NUM_ACTIONS {
            return Err(AtcError::data(format!("action index {a} out of range")));
        }
        data[i * NUM_ACTIONS + a] = 1.0;
    }
    Ok(g.constant(vec![n, NUM_ACTIONS], data))
}

fn apply_slot(
    g: &Graph,
    tick: &mut AdamTick<'_>,
    id: NodeId,
    slot: usize,
    t: &mut Tensor,
    name: &str,
) -> Result<()> {
    match g.grad(id) {
        Some(grad) => tick.apply(slot, t, grad),
        None => Err(AtcError::contract(format!("no gradient reached {name}"))),
    }
}

// ── inverse model ────────────────────────────────────────────────────

/// Predicts the action between a pair of observations from their
/// concatenated codes; both observations are augmented.
pub struct InverseModel {
    pub model: AtcModel,
    pub head_hidden: LinearLayer,
    pub head_out: LinearLayer,
}

impl InverseModel {
    pub fn new(model: AtcModel, rng: &mut Rng) -> Self {
        let d = model.latent_size;
        InverseModel {
            head_hidden: LinearLayer::new(2 * d, 256, std::f32::consts::SQRT_2, rng),
            head_out: LinearLayer::new(256, NUM_ACTIONS, 0.01, rng),
            model,
        }
    }

    pub fn register_params(&self, adam: &mut Adam) {
        for (i, l) in self.model.encoder.layers.iter().enumerate() {
            adam.register(&format!("inv.enc{i}.w"), l.weight.numel());
            adam.register(&format!("inv.enc{i}.b"), l.bias.numel());
        }
        adam.register("inv.comp.w", self.model.compressor.weight.numel());
        adam.register("inv.comp.b", self.model.compressor.bias.numel());
        adam.register("inv.head_h.w", self.head_hidden.weight.numel());
        adam.register("inv.head_h.b", self.head_hidden.bias.numel());
        adam.register("inv.head_o.w", self.head_out.weight.numel());
        adam.register("inv.head_o.b", self.head_out.bias.numel());
    }

    /// One gradient step: cross-entropy on the connecting action. Returns
    /// loss and top-1 accuracy.
    pub fn update(
        &mut self,
        batch: &AtcBatch,
        actions: &[u8],
        shift: &RandomShiftSpec,
        adam: &mut Adam,
        rng: &mut Rng,
    ) -> Result<UlMetrics> {
        if self.model.encoder.frozen {
            return Err(AtcError::contract("attempted update of a frozen encoder"));
        }
        let n = batch.len();
        let obs_a = random_shift(&batch.anchors, shift, rng)?;
        let obs_b = random_shift(&batch.positives, shift, rng)?;
        let mut g = Graph::new();
        let a = g.constant_from(obs_a);
        let b = g.constant_from(obs_b);
        let enc = self.model.encoder.wire(&mut g);
        let comp = self.model.compressor.wire(&mut g);
        let hh = self.head_hidden.wire(&mut g);
        let ho = self.head_out.wire(&mut g);

        let za = self.model.encoder.forward_wired(&mut g, a, &enc)?;
        let fa = g.reshape(za, vec![n, self.model.encoder.latent_len()])?;
        let ca = g.linear(fa, comp.0, comp.1)?;
        let zb = self.model.encoder.forward_wired(&mut g, b, &enc)?;
        let fb = g.reshape(zb, vec![n, self.model.encoder.latent_len()])?;
        let cb = g.linear(fb, comp.0, comp.1)?;

        let joint = g.concat_cols(ca, cb)?;
        let h = g.linear(joint, hh.0, hh.1)?;
        let h = g.relu(h);
        let logits = g.linear(h, ho.0, ho.1)?;

        let targets: Vec<usize> = actions.iter().map(|a| *a as usize).collect();
        if targets.iter().any(|t| *t >= NUM_ACTIONS) {
            return Err(AtcError::data("action index out of range".to_string()));
        }
        let accuracy = {
            let am = crate::numerics::argmax_rows(g.value(logits), n, NUM_ACTIONS);
            am.iter().zip(&targets).filter(|(p, t)| p == t).count() as f64 / n as f64
        };
        let losses = g.cross_entropy_rows(logits, targets)?;
        let mat = g.reshape(losses, vec![1, n])?;
        let loss = g.mean_all(mat);
        let loss_value = g.scalar_value(loss) as f64;
        g.backward(loss)?;

        let mut ids = Vec::new();
        for (w, b) in &enc {
            ids.push(*w);
            ids.push(*b);
        }
        for (w, b) in [comp, hh, ho] {
            ids.push(w);
            ids.push(b);
        }
        let mut tick = adam.begin_step();
        let mut slot = 0usize;
        for (i, l) in self.model.encoder.layers.iter_mut().enumerate() {
            apply_slot(&g, &mut tick, ids[slot], slot, &mut l.weight, &format!("inv.enc{i}.w"))?;
            slot += 1;
            apply_slot(&g, &mut tick, ids[slot], slot, &mut l.bias, &format!("inv.enc{i}.b"))?;
            slot += 1;
        }
        for (t, name) in [
            (&mut self.model.compressor.weight, "inv.comp.w"),
            (&mut self.model.compressor.bias, "inv.comp.b"),
            (&mut self.head_hidden.weight, "inv.head_h.w"),
            (&mut self.head_hidden.bias, "inv.head_h.b"),
            (&mut self.head_out.weight, "inv.head_o.w"),
            (&mut self.head_out.bias, "inv.head_o.b"),
        ] {
            apply_slot(&g, &mut tick, ids[slot], slot, t, name)?;
            slot += 1;
        }
        Ok(UlMetrics { loss: loss_value, accuracy })
    }
}
