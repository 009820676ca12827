//! The contrastive model: convolutional encoder, linear global compressor,
//! residual predictor MLP, bilinear contrast matrix, and momentum copies of
//! the encoder and compressor.
//!
//! Anchors flow through the learned path (encoder -> compressor ->
//! predictor); positives flow through the momentum path (EMA copies, no
//! gradients). Batch logits are bilinear, `l[i][j] = p_i W cbar_j`, and the
//! loss is per-row softmax cross-entropy against the diagonal: every other
//! anchor's positive serves as a negative.

use serde::{Deserialize, Serialize};

use crate::augment::{self, RandomShiftSpec};
use crate::error::{AtcError, Result};
use crate::numerics::{argmax_rows, orthogonal, Adam, ConvSpec, Graph, NodeId, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input image layout (channels, height, width).
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels per conv layer.
    pub channels: Vec<usize>,
    /// Kernel size per conv layer; must match `channels` in length.
    pub kernels: Vec<usize>,
    /// Stride per conv layer; must match `channels` in length.
    pub strides: Vec<usize>,
    #[serde(default)]
    pub padding: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty()
            || self.channels.len() != self.strides.len()
            || self.channels.len() != self.kernels.len()
        {
            return Err(AtcError::config(
                "encoder channels/kernels/strides lengths must match and be non-empty",
            ));
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> Result<Vec<ConvSpec>> {
        self.validate()?;
        let mut specs = Vec::new();
        let mut c = self.in_channels;
        for ((oc, k), s) in self.channels.iter().zip(&self.kernels).zip(&self.strides) {
            specs.push(ConvSpec {
                in_channels: c,
                out_channels: *oc,
                kernel_size: *k,
                stride: *s,
                padding: self.padding,
            });
            c = *oc;
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn new(spec: ConvSpec, rng: &mut Rng) -> Self {
        let k = spec.kernel_size;
        let fan_in = spec.in_channels * k * k;
        let mut weight = Tensor::from_vec(
            vec![spec.out_channels, spec.in_channels, k, k],
            orthogonal(spec.out_channels, fan_in, std::f32::consts::SQRT_2, rng),
        )
        .expect("sized by construction");
        weight.requires_grad = true;
        let mut bias = Tensor::zeros(vec![spec.out_channels]);
        bias.requires_grad = true;
        ConvLayer { spec, weight, bias }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, gain: f32, rng: &mut Rng) -> Self {
        let mut weight =
            Tensor::from_vec(vec![out_dim, in_dim], orthogonal(out_dim, in_dim, gain, rng)).expect("sized");
        weight.requires_grad = true;
        let mut bias = Tensor::zeros(vec![out_dim]);
        bias.requires_grad = true;
        LinearLayer { weight, bias }
    }

    pub fn wire(&self, g: &mut Graph) -> (NodeId, NodeId) {
        (g.input(&self.weight), g.input(&self.bias))
    }

    pub fn wire_frozen(&self, g: &mut Graph) -> (NodeId, NodeId) {
        (
            g.constant(self.weight.shape().to_vec(), self.weight.data().to_vec()),
            g.constant(self.bias.shape().to_vec(), self.bias.data().to_vec()),
        )
    }
}

/// Convolutional encoder `f`: conv + ReLU per layer, producing the latent
/// image. Once `frozen` is set, any training path that would write its
/// parameters is a contract violation.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub layers: Vec<ConvLayer>,
    pub config: EncoderConfig,
    pub frozen: bool,
    latent_shape: (usize, usize, usize),
}

impl ConvEncoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let specs = config.conv_specs()?;
        let mut h = config.height;
        let mut w = config.width;
        for spec in &specs {
            h = spec.out_dim(h)?;
            w = spec.out_dim(w)?;
        }
        let latent_shape = (*config.channels.last().expect("non-empty"), h, w);
        let layers = specs.into_iter().map(|s| ConvLayer::new(s, rng)).collect();
        Ok(ConvEncoder { layers, config, frozen: false, latent_shape })
    }

    /// (channels, height, width) of the latent image.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent_shape
    }

    pub fn latent_len(&self) -> usize {
        let (c, h, w) = self.latent_shape;
        c * h * w
    }

    /// Forward through provided parameter nodes; `params[i]` = (weight, bias)
    /// of layer i.
    pub fn forward_wired(&self, g: &mut Graph, x: NodeId, params: &[(NodeId, NodeId)]) -> Result<NodeId> {
        let mut cur = x;
        for (layer, (w, b)) in self.layers.iter().zip(params) {
            cur = g.conv2d_relu(cur, *w, *b, &layer.spec)?;
        }
        Ok(cur)
    }

    pub fn wire(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.layers.iter().map(|l| (g.input(&l.weight), g.input(&l.bias))).collect()
    }

    pub fn wire_frozen(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    g.constant(l.weight.shape().to_vec(), l.weight.data().to_vec()),
                    g.constant(l.bias.shape().to_vec(), l.bias.data().to_vec()),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtcConfig {
    pub encoder: EncoderConfig,
    pub latent_size: usize,
    pub predictor_hidden: usize,
    /// Momentum coefficient: `target <- (1 - tau) target + tau learned`.
    pub tau: f32,
}

impl AtcConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.latent_size == 0 || self.predictor_hidden == 0 {
            return Err(AtcError::config("latent_size and predictor_hidden must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(AtcError::config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Learned parameters plus momentum copies; see module docs.
#[derive(Debug, Clone)]
pub struct AtcModel {
    pub encoder: ConvEncoder,
    pub compressor: LinearLayer,
    pub predictor_in: LinearLayer,
    pub predictor_out: LinearLayer,
    pub contrast: Tensor,
    /// EMA copies of encoder (weight, bias) pairs; never receive gradients.
    pub momentum_encoder: Vec<(Tensor, Tensor)>,
    pub momentum_compressor: (Tensor, Tensor),
    pub tau: f32,
    pub latent_size: usize,
}

pub struct WiredLearned {
    pub enc: Vec<(NodeId, NodeId)>,
    pub comp: (NodeId, NodeId),
    pub pred_in: (NodeId, NodeId),
    pub pred_out: (NodeId, NodeId),
    pub contrast: NodeId,
}

/// One ATC training step's numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UlMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Anchors paired with observations from `k` steps later (after independent
/// augmentation).
#[derive(Debug, Clone)]
pub struct AtcBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
}

impl AtcBatch {
    pub fn new(anchors: Tensor, positives: Tensor) -> Result<Self> {
        if anchors.shape() != positives.shape() {
            return Err(AtcError::config(format!(
                "anchor/positive shapes differ: {:?} vs {:?}",
                anchors.shape(),
                positives.shape()
            )));
        }
        Ok(AtcBatch { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AtcModel {
    pub fn new(config: &AtcConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = ConvEncoder::new(config.encoder.clone(), rng)?;
        let flat = encoder.latent_len();
        let compressor = LinearLayer::new(flat, config.latent_size, 1.0, rng);
        let predictor_in = LinearLayer::new(config.latent_size, config.predictor_hidden, std::f32::consts::SQRT_2, rng);
        let predictor_out = LinearLayer::new(config.predictor_hidden, config.latent_size, 1.0, rng);
        // near-identity start so early logits correlate with code similarity
        let d = config.latent_size;
        let mut w = vec![0.0f32; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        for v in w.iter_mut() {
            *v += 0.01 * rng.normal_f32();
        }
        let mut contrast = Tensor::from_vec(vec![d, d], w)?;
        contrast.requires_grad = true;

        // momentum copies start equal to the learned parameters
        let momentum_encoder = encoder
            .layers
            .iter()
            .map(|l| {
                let mut w = l.weight.clone();
                w.requires_grad = false;
                w.grad = None;
                let mut b = l.bias.clone();
                b.requires_grad = false;
                b.grad = None;
                (w, b)
            })
            .collect();
        let mut mcw = compressor.weight.clone();
        mcw.requires_grad = false;
        mcw.grad = None;
        let mut mcb = compressor.bias.clone();
        mcb.requires_grad = false;
        mcb.grad = None;

        Ok(AtcModel {
            encoder,
            compressor,
            predictor_in,
            predictor_out,
            contrast,
            momentum_encoder,
            momentum_compressor: (mcw, mcb),
            tau: config.tau,
            latent_size: config.latent_size,
        })
    }

    /// Fixed parameter visit order shared by the optimizer, checkpoints and
    /// hashes.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, l) in self.encoder.layers.iter().enumerate() {
            f(&format!("enc{i}.w"), &l.weight);
            f(&format!("enc{i}.b"), &l.bias);
        }
        f("comp.w", &self.compressor.weight);
        f("comp.b", &self.compressor.bias);
        f("pred_in.w", &self.predictor_in.weight);
        f("pred_in.b", &self.predictor_in.bias);
        f("pred_out.w", &self.predictor_out.weight);
        f("pred_out.b", &self.predictor_out.bias);
        f("contrast.w", &self.contrast);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            f(&format!("enc{i}.w"), &mut l.weight);
            f(&format!("enc{i}.b"), &mut l.bias);
        }
        f("comp.w", &mut self.compressor.weight);
        f("comp.b", &mut self.compressor.bias);
        f("pred_in.w", &mut self.predictor_in.weight);
        f("pred_in.b", &mut self.predictor_in.bias);
        f("pred_out.w", &mut self.predictor_out.weight);
        f("pred_out.b", &mut self.predictor_out.bias);
        f("contrast.w", &mut self.contrast);
    }

    /// Momentum copies in the same naming scheme, prefixed "momentum.".
    pub fn visit_momentum(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, (w, b)) in self.momentum_encoder.iter().enumerate() {
            f(&format!("momentum.enc{i}.w"), w);
            f(&format!("momentum.enc{i}.b"), b);
        }
        f("momentum.comp.w", &self.momentum_compressor.0);
        f("momentum.comp.b", &self.momentum_compressor.1);
    }

    pub fn visit_momentum_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, (w, b)) in self.momentum_encoder.iter_mut().enumerate() {
            f(&format!("momentum.enc{i}.w"), w);
            f(&format!("momentum.enc{i}.b"), b);
        }
        f("momentum.comp.w", &mut self.momentum_compressor.0);
        f("momentum.comp.b", &mut self.momentum_compressor.1);
    }

    /// Register every parameter with the optimizer in visit order; slot i
    /// then corresponds to visit position i.
    pub fn register_params(&self, adam: &mut Adam) {
        self.visit_params(|name, t| {
            adam.register(name, t.numel());
        });
    }

    /// Hash of the parameters shared with the RL agent (encoder and
    /// compressor): the stop-gradient witness.
    pub fn encoder_param_hash(&self) -> u64 {
        let mut tensors: Vec<&Tensor> = Vec::new();
        for l in &self.encoder.layers {
            tensors.push(&l.weight);
            tensors.push(&l.bias);
        }
        tensors.push(&self.compressor.weight);
        tensors.push(&self.compressor.bias);
        crate::numerics::param_hash(tensors)
    }

    pub fn wire_learned(&self, g: &mut Graph) -> WiredLearned {
        WiredLearned {
            enc: self.encoder.wire(g),
            comp: self.compressor.wire(g),
            pred_in: self.predictor_in.wire(g),
            pred_out: self.predictor_out.wire(g),
            contrast: g.input(&self.contrast),
        }
    }

    /// Learned path: latent image `z` and code `c = compressor(flatten(z))`.
    pub fn encode_wired(&self, g: &mut Graph, obs: NodeId, wired: &WiredLearned) -> Result<(NodeId, NodeId)> {
        let n = g.shape(obs)[0];
        let z = self.encoder.forward_wired(g, obs, &wired.enc)?;
        let flat = g.reshape(z, vec![n, self.encoder.latent_len()])?;
        let c = g.linear(flat, wired.comp.0, wired.comp.1)?;
        Ok((z, c))
    }

    /// Momentum path: parameters enter the graph as constants, so no
    /// gradient can reach them by construction.
    pub fn encode_momentum(&self, g: &mut Graph, obs: NodeId) -> Result<(NodeId, NodeId)> {
        let n = g.shape(obs)[0];
        let mut cur = obs;
        for (layer, (w, b)) in self.encoder.layers.iter().zip(&self.momentum_encoder) {
            let wi = g.constant(w.shape().to_vec(), w.data().to_vec());
            let bi = g.constant(b.shape().to_vec(), b.data().to_vec());
            cur = g.conv2d_relu(cur, wi, bi, &layer.spec)?;
        }
        let flat = g.reshape(cur, vec![n, self.encoder.latent_len()])?;
        let wi = g.constant(self.momentum_compressor.0.shape().to_vec(), self.momentum_compressor.0.data().to_vec());
        let bi = g.constant(self.momentum_compressor.1.shape().to_vec(), self.momentum_compressor.1.data().to_vec());
        let c = g.linear(flat, wi, bi)?;
        Ok((cur, c))
    }

    /// Residual predictor: `p = predictor(c) + c`.
    pub fn predict_wired(&self, g: &mut Graph, c: NodeId, wired: &WiredLearned) -> Result<NodeId> {
        let h = g.linear(c, wired.pred_in.0, wired.pred_in.1)?;
        let h = g.relu(h);
        let delta = g.linear(h, wired.pred_out.0, wired.pred_out.1)?;
        g.add(delta, c)
    }

    /// Tape-free inference: codes for a batch through the learned path,
    /// borrowing parameters instead of wiring a graph. Used on the acting
    /// and evaluation paths where no gradients are ever needed.
    pub fn codes_inference(&self, obs: &Tensor) -> Result<Tensor> {
        let z = self.latent_inference(obs)?;
        let n = obs.shape()[0];
        let flat = z.reshaped(vec![n, self.encoder.latent_len()])?;
        linear_inference(&flat, &self.compressor)
    }

    /// Tape-free forward collecting every post-activation conv output
    /// (analysis paths: attention maps).
    pub fn encoder_activations(&self, obs: &Tensor) -> Result<Vec<Tensor>> {
        let [n, c, h, w] = obs.shape()[..] else {
            return Err(AtcError::config(format!("expected [n, c, h, w], got {:?}", obs.shape())));
        };
        let mut acts = Vec::with_capacity(self.encoder.layers.len());
        let mut cur = obs.data().to_vec();
        let (mut cc, mut ch, mut cw) = (c, h, w);
        for layer in &self.encoder.layers {
            let fwd = crate::numerics::conv::conv2d_forward(
                &cur,
                n,
                cc,
                ch,
                cw,
                layer.weight.data(),
                layer.bias.data(),
                &layer.spec,
                true,
            )?;
            cur = fwd.y;
            cc = layer.spec.out_channels;
            ch = fwd.oh;
            cw = fwd.ow;
            acts.push(Tensor::from_vec(vec![n, cc, ch, cw], cur.clone())?);
        }
        Ok(acts)
    }

    /// Tape-free latent image through the learned path.
    pub fn latent_inference(&self, obs: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = obs.shape()[..] else {
            return Err(AtcError::config(format!("expected [n, c, h, w], got {:?}", obs.shape())));
        };
        let mut cur = obs.data().to_vec();
        let (mut cc, mut ch, mut cw) = (c, h, w);
        for layer in &self.encoder.layers {
            let fwd = crate::numerics::conv::conv2d_forward(
                &cur,
                n,
                cc,
                ch,
                cw,
                layer.weight.data(),
                layer.bias.data(),
                &layer.spec,
                true,
            )?;
            cur = fwd.y;
            cc = layer.spec.out_channels;
            ch = fwd.oh;
            cw = fwd.ow;
        }
        Tensor::from_vec(vec![n, cc, ch, cw], cur)
    }

    /// Convenience forward outside any training graph: returns the latent
    /// image and code for a batch, via either path.
    pub fn encode(&self, obs: &Tensor, use_momentum: bool) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(obs.shape().to_vec(), obs.data().to_vec());
        let (z, c) = if use_momentum {
            self.encode_momentum(&mut g, x)?
        } else {
            let enc = self.encoder.wire_frozen(&mut g);
            let comp = self.compressor.wire_frozen(&mut g);
            let n = obs.shape()[0];
            let zi = self.encoder.forward_wired(&mut g, x, &enc)?;
            let flat = g.reshape(zi, vec![n, self.encoder.latent_len()])?;
            let ci = g.linear(flat, comp.0, comp.1)?;
            (zi, ci)
        };
        let zt = Tensor::from_vec(g.shape(z).to_vec(), g.value(z).to_vec())?;
        let ct = Tensor::from_vec(g.shape(c).to_vec(), g.value(c).to_vec())?;
        Ok((zt, ct))
    }

    /// Code prediction outside a training graph.
    pub fn predict_code(&self, c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let ci = g.constant(c.shape().to_vec(), c.data().to_vec());
        let (w1, b1) = self.predictor_in.wire_frozen(&mut g);
        let (w2, b2) = self.predictor_out.wire_frozen(&mut g);
        let h = g.linear(ci, w1, b1)?;
        let h = g.relu(h);
        let delta = g.linear(h, w2, b2)?;
        let p = g.add(delta, ci)?;
        Tensor::from_vec(g.shape(p).to_vec(), g.value(p).to_vec())
    }

    /// One EMA update of the momentum encoder and compressor.
    pub fn momentum_update(&mut self) {
        let tau = self.tau;
        for (layer, (mw, mb)) in self.encoder.layers.iter().zip(self.momentum_encoder.iter_mut()) {
            ema_into(mw.data_mut(), layer.weight.data(), tau);
            ema_into(mb.data_mut(), layer.bias.data(), tau);
        }
        ema_into(self.momentum_compressor.0.data_mut(), self.compressor.weight.data(), tau);
        ema_into(self.momentum_compressor.1.data_mut(), self.compressor.bias.data(), tau);
    }

    /// Apply accumulated gradients to every learned parameter, in visit
    /// order, under one optimizer tick.
    pub fn apply_grads(&mut self, g: &Graph, wired: &WiredLearned, adam: &mut Adam) -> Result<()> {
        let ids = wired_flat(wired);
        let mut tick = adam.begin_step();
        let mut slot = 0usize;
        let mut result = Ok(());
        self.visit_params_mut(|name, t| {
            if result.is_err() {
                return;
            }
            let id = ids[slot];
            match g.grad(id) {
                Some(grad) => {
                    if let Err(e) = tick.apply(slot, t, grad) {
                        result = Err(e);
                    }
                }
                None => {
                    result = Err(AtcError::contract(format!("no gradient reached parameter {name}")));
                }
            }
            slot += 1;
        });
        result
    }
}

fn wired_flat(w: &WiredLearned) -> Vec<NodeId> {
    let mut ids = Vec::with_capacity(w.enc.len() * 2 + 7);
    for (wi, bi) in &w.enc {
        ids.push(*wi);
        ids.push(*bi);
    }
    ids.push(w.comp.0);
    ids.push(w.comp.1);
    ids.push(w.pred_in.0);
    ids.push(w.pred_in.1);
    ids.push(w.pred_out.0);
    ids.push(w.pred_out.1);
    ids.push(w.contrast);
    ids
}

fn ema_into(target: &mut [f32], source: &[f32], tau: f32) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = (1.0 - tau) * *t + tau * *s;
    }
}

/// Tape-free affine map `x @ w^T + b` for inference paths.
pub fn linear_inference(x: &Tensor, layer: &LinearLayer) -> Result<Tensor> {
    let [n, xin] = x.shape()[..] else {
        return Err(AtcError::config(format!("expected [n, in], got {:?}", x.shape())));
    };
    let [out, win] = layer.weight.shape()[..] else {
        return Err(AtcError::config("malformed linear weight".to_string()));
    };
    if xin != win {
        return Err(AtcError::config(format!("linear inference dims {xin} vs {win}")));
    }
    let mut y = vec![0.0f32; n * out];
    crate::numerics::conv::sgemm_rows(
        n,
        xin,
        out,
        x.data(),
        xin as isize,
        1,
        layer.weight.data(),
        1,
        win as isize,
        &mut y,
        n.max(1),
    );
    for row in y.chunks_exact_mut(out) {
        for (v, b) in row.iter_mut().zip(layer.bias.data()) {
            *v += *b;
        }
    }
    Tensor::from_vec(vec![n, out], y)
}

/// Batch-contrastive loss on wired nodes. Returns the scalar loss node and
/// the top-1 accuracy of the logits (fraction of rows whose argmax is the
/// diagonal).
pub fn infonce_loss(g: &mut Graph, p: NodeId, cbar: NodeId, contrast: NodeId) -> Result<(NodeId, f64)> {
    let b = g.shape(p)[0];
    if b < 2 {
        return Err(AtcError::config(format!("contrastive batch needs at least 2 rows, got {b}")));
    }
    if g.shape(p) != g.shape(cbar) {
        return Err(AtcError::config(format!(
            "predicted/target code shapes differ: {:?} vs {:?}",
            g.shape(p),
            g.shape(cbar)
        )));
    }
    let t = g.matmul(p, contrast)?;
    let logits = g.matmul_nt(t, cbar)?;
    let targets: Vec<usize> = (0..b).collect();
    let acc = {
        let am = argmax_rows(g.value(logits), b, b);
        am.iter().enumerate().filter(|(i, j)| i == *j).count() as f64 / b as f64
    };
    let losses = g.cross_entropy_rows(logits, targets)?;
    let rows = g.reshape(losses, vec![1, b])?;
    let loss = g.mean_all(rows);
    Ok((loss, acc))
}

/// One gradient step on the full model from an (anchor, positive) batch:
/// augment both sides independently, contrast, backprop, Adam, then exactly
/// one momentum update.
pub fn atc_update(
    model: &mut AtcModel,
    batch: &AtcBatch,
    shift: &RandomShiftSpec,
    adam: &mut Adam,
    rng: &mut Rng,
) -> Result<UlMetrics> {
    atc_update_scaled(model, batch, shift, adam, rng, 1.0)
}

/// [`atc_update`] with the loss scaled by `loss_scale` before backprop
/// (auxiliary-mode weighting). Reported metrics are unscaled.
pub fn atc_update_scaled(
    model: &mut AtcModel,
    batch: &AtcBatch,
    shift: &RandomShiftSpec,
    adam: &mut Adam,
    rng: &mut Rng,
    loss_scale: f32,
) -> Result<UlMetrics> {
    if model.encoder.frozen {
        return Err(AtcError::contract("attempted update of a frozen encoder"));
    }
    let anchors = augment::random_shift(&batch.anchors, shift, rng)?;
    let positives = augment::random_shift(&batch.positives, shift, rng)?;

    let mut g = Graph::new();
    let a = g.constant_from(anchors);
    let pos = g.constant_from(positives);

    let wired = model.wire_learned(&mut g);
    let (_, c) = model.encode_wired(&mut g, a, &wired)?;
    let p = model.predict_wired(&mut g, c, &wired)?;
    let (_, cbar) = model.encode_momentum(&mut g, pos)?;
    let (loss, accuracy) = infonce_loss(&mut g, p, cbar, wired.contrast)?;

    let loss_value = g.scalar_value(loss) as f64;
    if !loss_value.is_finite() {
        return Err(AtcError::NonFinite(format!("contrastive loss = {loss_value}")));
    }
    let scaled = if loss_scale == 1.0 { loss } else { g.scale(loss, loss_scale) };
    g.backward(scaled)?;
    model.apply_grads(&g, &wired, adam)?;
    model.momentum_update();
    Ok(UlMetrics { loss: loss_value, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LrSchedule;
    use crate::oracles;

    pub(crate) fn tiny_config() -> AtcConfig {
        AtcConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                height: 8,
                width: 8,
                channels: vec![4, 8],
                kernels: vec![3, 3],
                strides: vec![2, 2],
                padding: 0,
            },
            latent_size: 16,
            predictor_hidden: 32,
            tau: 0.01,
        }
    }

    fn random_batch(n: usize, rng: &mut Rng) -> Tensor {
        let data: Vec<f32> = (0..n * 3 * 8 * 8).map(|_| rng.uniform_f32()).collect();
        Tensor::from_vec(vec![n, 3, 8, 8], data).unwrap()
    }

    #[test]
    fn momentum_path_equals_learned_path_at_init() {
        let mut rng = Rng::from_seed(1);
        let model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let obs = random_batch(3, &mut rng);
        let (_, c_learned) = model.encode(&obs, false).unwrap();
        let (_, c_momentum) = model.encode(&obs, true).unwrap();
        assert_eq!(c_learned.data(), c_momentum.data());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_code() {
        let mut rng = Rng::from_seed(2);
        let model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let obs = Tensor::zeros(vec![1, 3, 8, 8]);
        let (_, c) = model.encode(&obs, false).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_deterministic_for_fixed_seed() {
        let mut r1 = Rng::from_seed(33);
        let m1 = AtcModel::new(&tiny_config(), &mut r1).unwrap();
        let mut r2 = Rng::from_seed(33);
        let m2 = AtcModel::new(&tiny_config(), &mut r2).unwrap();
        let obs = random_batch(2, &mut Rng::from_seed(4));
        let (_, c1) = m1.encode(&obs, false).unwrap();
        let (_, c2) = m2.encode(&obs, false).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn predictor_with_zero_weights_is_identity() {
        let mut rng = Rng::from_seed(5);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        model.predictor_out.weight.data_mut().fill(0.0);
        model.predictor_out.bias.data_mut().fill(0.0);
        let c = Tensor::from_vec(vec![2, 16], (0..32).map(|i| i as f32 * 0.1).collect()).unwrap();
        let p = model.predict_code(&c).unwrap();
        assert_eq!(p.data(), c.data());
    }

    #[test]
    fn predictor_matches_mlp_oracle() {
        let mut rng = Rng::from_seed(6);
        let model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let c_data: Vec<f32> = (0..16).map(|_| rng.normal_f32()).collect();
        let c = Tensor::from_vec(vec![1, 16], c_data.clone()).unwrap();
        let p = model.predict_code(&c).unwrap();

        let c64: Vec<f64> = c_data.iter().map(|v| *v as f64).collect();
        let w1: Vec<f64> = model.predictor_in.weight.data().iter().map(|v| *v as f64).collect();
        let b1: Vec<f64> = model.predictor_in.bias.data().iter().map(|v| *v as f64).collect();
        let w2: Vec<f64> = model.predictor_out.weight.data().iter().map(|v| *v as f64).collect();
        let b2: Vec<f64> = model.predictor_out.bias.data().iter().map(|v| *v as f64).collect();
        let mut h = oracles::linear_ref(&c64, 1, 16, &w1, 32, &b1);
        oracles::relu_ref(&mut h);
        let out = oracles::linear_ref(&h, 1, 32, &w2, 16, &b2);
        for i in 0..16 {
            let want = out[i] + c64[i];
            assert!((p.data()[i] as f64 - want).abs() < 1e-4, "{} vs {}", p.data()[i], want);
        }
    }

    #[test]
    fn infonce_identical_codes_is_log_b() {
        let mut g = Graph::new();
        let b = 8;
        let d = 4;
        let code = vec![0.5f32; d];
        let mut all = Vec::new();
        for _ in 0..b {
            all.extend_from_slice(&code);
        }
        let p = g.constant(vec![b, d], all.clone());
        let cbar = g.constant(vec![b, d], all);
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w = g.constant(vec![d, d], eye);
        let (loss, _) = infonce_loss(&mut g, p, cbar, w).unwrap();
        assert!((g.scalar_value(loss) as f64 - (b as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn infonce_orthonormal_scaled_closed_form() {
        // orthonormal codes scaled so the diagonal logit is 10, rest 0:
        // loss = ln(1 + 7 e^-10)
        let mut g = Graph::new();
        let b = 8;
        let d = 8;
        let mut p_data = vec![0.0f32; b * d];
        let mut c_data = vec![0.0f32; b * d];
        let s = 10.0f32.sqrt();
        for i in 0..b {
            p_data[i * d + i] = s;
            c_data[i * d + i] = s;
        }
        let p = g.constant(vec![b, d], p_data);
        let cbar = g.constant(vec![b, d], c_data);
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w = g.constant(vec![d, d], eye);
        let (loss, acc) = infonce_loss(&mut g, p, cbar, w).unwrap();
        let want = (1.0f64 + 7.0 * (-10.0f64).exp()).ln();
        assert!((g.scalar_value(loss) as f64 - want).abs() < 1e-6);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn infonce_matches_direct_oracle() {
        let mut rng = Rng::from_seed(7);
        let b = 6;
        let d = 5;
        let p_data: Vec<f32> = (0..b * d).map(|_| rng.normal_f32()).collect();
        let c_data: Vec<f32> = (0..b * d).map(|_| rng.normal_f32()).collect();
        let w_data: Vec<f32> = (0..d * d).map(|_| rng.normal_f32() * 0.3).collect();
        let mut g = Graph::new();
        let p = g.constant(vec![b, d], p_data.clone());
        let cbar = g.constant(vec![b, d], c_data.clone());
        let w = g.constant(vec![d, d], w_data.clone());
        let (loss, acc) = infonce_loss(&mut g, p, cbar, w).unwrap();
        let (want_loss, want_acc) = oracles::infonce_ref(
            &p_data.iter().map(|v| *v as f64).collect::<Vec<_>>(),
            &c_data.iter().map(|v| *v as f64).collect::<Vec<_>>(),
            &w_data.iter().map(|v| *v as f64).collect::<Vec<_>>(),
            b,
            d,
        );
        assert!((g.scalar_value(loss) as f64 - want_loss).abs() < 1e-5);
        assert_eq!(acc, want_acc);
    }

    #[test]
    fn infonce_rejects_batch_of_one() {
        let mut g = Graph::new();
        let p = g.constant(vec![1, 4], vec![0.0; 4]);
        let c = g.constant(vec![1, 4], vec![0.0; 4]);
        let w = g.constant(vec![4, 4], vec![0.0; 16]);
        assert!(infonce_loss(&mut g, p, c, w).is_err());
    }

    #[test]
    fn momentum_update_tau_one_copies() {
        let mut rng = Rng::from_seed(8);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        model.tau = 1.0;
        model.encoder.layers[0].weight.data_mut()[0] = 9.0;
        model.momentum_update();
        assert_eq!(model.momentum_encoder[0].0.data()[0], 9.0);
    }

    #[test]
    fn momentum_update_direct_value() {
        let mut rng = Rng::from_seed(9);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        model.tau = 0.01;
        model.momentum_encoder[0].0.data_mut()[0] = 1.0;
        model.encoder.layers[0].weight.data_mut()[0] = 0.0;
        model.momentum_update();
        assert!((model.momentum_encoder[0].0.data()[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn momentum_converges_geometrically() {
        let mut rng = Rng::from_seed(10);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        model.tau = 0.05;
        model.momentum_encoder[0].0.data_mut()[0] = 1.0;
        model.encoder.layers[0].weight.data_mut()[0] = 0.0;
        let mut expected = 1.0f32;
        for _ in 0..50 {
            model.momentum_update();
            expected = oracles::ema_scalar_ref(expected, 0.0, 0.05, 1);
            assert_eq!(model.momentum_encoder[0].0.data()[0], expected);
        }
    }

    #[test]
    fn update_reduces_loss_on_repeated_batch() {
        let mut rng = Rng::from_seed(11);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let mut adam = Adam::new(1e-3, LrSchedule::Constant);
        model.register_params(&mut adam);
        let anchors = random_batch(8, &mut rng);
        let positives = random_batch(8, &mut rng);
        let batch = AtcBatch::new(anchors, positives).unwrap();
        let shift = RandomShiftSpec { pad: 1, apply_probability: 0.0 };
        let first = atc_update(&mut model, &batch, &shift, &mut adam, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..20 {
            last = atc_update(&mut model, &batch, &shift, &mut adam, &mut rng).unwrap();
        }
        assert!(last.loss < first.loss, "loss {} -> {}", first.loss, last.loss);
    }

    #[test]
    fn update_rejects_frozen_encoder() {
        let mut rng = Rng::from_seed(12);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        model.encoder.frozen = true;
        let mut adam = Adam::new(1e-3, LrSchedule::Constant);
        model.register_params(&mut adam);
        let batch = AtcBatch::new(random_batch(4, &mut rng), random_batch(4, &mut rng)).unwrap();
        let shift = RandomShiftSpec::default();
        assert!(matches!(
            atc_update(&mut model, &batch, &shift, &mut adam, &mut rng),
            Err(AtcError::Contract(_))
        ));
    }

    #[test]
    fn no_gradient_reaches_momentum_parameters() {
        let mut rng = Rng::from_seed(13);
        let mut model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let mut adam = Adam::new(1e-2, LrSchedule::Constant);
        model.register_params(&mut adam);
        let batch = AtcBatch::new(random_batch(4, &mut rng), random_batch(4, &mut rng)).unwrap();
        let shift = RandomShiftSpec { pad: 1, apply_probability: 1.0 };
        // tau = 0: momentum parameters must stay numerically frozen across updates
        model.tau = 0.0;
        let before: Vec<Vec<f32>> = model.momentum_encoder.iter().map(|(w, _)| w.data().to_vec()).collect();
        for _ in 0..5 {
            atc_update(&mut model, &batch, &shift, &mut adam, &mut rng).unwrap();
        }
        for ((w, _), b) in model.momentum_encoder.iter().zip(&before) {
            assert_eq!(w.data(), &b[..]);
        }
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        // batch of 4 8x8 images through the 2-layer model: every parameter
        // gradient against central differences of the f64 reference forward
        let mut rng = Rng::from_seed(21);
        let model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let n = 4;
        let anchors = random_batch(n, &mut rng);
        let positives = random_batch(n, &mut rng);

        let mut g = Graph::new();
        let a = g.constant(anchors.shape().to_vec(), anchors.data().to_vec());
        let pos = g.constant(positives.shape().to_vec(), positives.data().to_vec());
        let wired = model.wire_learned(&mut g);
        let (_, c) = model.encode_wired(&mut g, a, &wired).unwrap();
        let p = model.predict_wired(&mut g, c, &wired).unwrap();
        let (_, cbar) = model.encode_momentum(&mut g, pos).unwrap();
        let (loss, _) = infonce_loss(&mut g, p, cbar, wired.contrast).unwrap();
        g.backward(loss).unwrap();

        let ids = {
            let mut v = Vec::new();
            for (w, b) in &wired.enc {
                v.push(*w);
                v.push(*b);
            }
            v.extend([
                wired.comp.0,
                wired.comp.1,
                wired.pred_in.0,
                wired.pred_in.1,
                wired.pred_out.0,
                wired.pred_out.1,
                wired.contrast,
            ]);
            v
        };

        let mut reference = oracles::RefAtc::from_model(&model);
        let a64: Vec<f64> = anchors.data().iter().map(|v| *v as f64).collect();
        let p64: Vec<f64> = positives.data().iter().map(|v| *v as f64).collect();
        let h = 1e-3;
        let mut fd_rng = Rng::from_seed(22);
        let mut checked = 0usize;
        for (gi, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).expect("gradient present").to_vec();
            let len = reference.groups[gi].1.len();
            // a handful of random coordinates per group keeps this fast while
            // covering every parameter tensor
            for _ in 0..6.min(len) {
                let j = fd_rng.below(len);
                let orig = reference.groups[gi].1[j];
                reference.groups[gi].1[j] = orig + h;
                let up = reference.loss(&a64, &p64, n, 3, 8, 8);
                reference.groups[gi].1[j] = orig - h;
                let down = reference.loss(&a64, &p64, n, 3, 8, 8);
                reference.groups[gi].1[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = oracles::rel_err(analytic[j] as f64, fd, 1e-3);
                assert!(
                    err <= 1e-3,
                    "group {} coord {j}: analytic {} vs fd {fd} (rel {err})",
                    reference.groups[gi].0,
                    analytic[j]
                );
                checked += 1;
            }
        }
        assert!(checked >= 60, "checked {checked} coordinates");
    }

    #[test]
    fn loss_is_permutation_equivariant() {
        let mut rng = Rng::from_seed(14);
        let b = 6;
        let d = 16;
        let model = AtcModel::new(&tiny_config(), &mut rng).unwrap();
        let p_data: Vec<f32> = (0..b * d).map(|_| rng.normal_f32()).collect();
        let c_data: Vec<f32> = (0..b * d).map(|_| rng.normal_f32()).collect();

        let loss_of = |perm: &[usize]| -> f64 {
            let mut g = Graph::new();
            let mut pp = vec![0.0f32; b * d];
            let mut cc = vec![0.0f32; b * d];
            for (dst, src) in perm.iter().enumerate() {
                pp[dst * d..(dst + 1) * d].copy_from_slice(&p_data[src * d..(src + 1) * d]);
                cc[dst * d..(dst + 1) * d].copy_from_slice(&c_data[src * d..(src + 1) * d]);
            }
            let p = g.constant(vec![b, d], pp);
            let c = g.constant(vec![b, d], cc);
            let w = g.constant(vec![d, d], model.contrast.data().to_vec());
            let (loss, _) = infonce_loss(&mut g, p, c, w).unwrap();
            g.scalar_value(loss) as f64
        };

        let id: Vec<usize> = (0..b).collect();
        let mut perm = id.clone();
        let mut r = Rng::from_seed(15);
        r.shuffle(&mut perm);
        assert!((loss_of(&id) - loss_of(&perm)).abs() < 1e-6);
    }
}
