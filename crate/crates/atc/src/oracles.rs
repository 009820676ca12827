//! Independent brute-force reference implementations, used only by tests.
//!
//! Everything here is written naively in f64, shares no code with the
//! production paths it checks, and is intentionally slow. Release binaries
//! never call into this module.

use crate::numerics::ConvSpec;

/// Triple-loop convolution over one image `[c, h, w]` -> `[oc, oh, ow]`.
pub fn conv2d_ref(x: &[f64], c: usize, h: usize, w: usize, wgt: &[f64], bias: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let k = spec.kernel_size;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
    let mut y = vec![0.0f64; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                let xv = x[(ci * h + iy as usize) * w + ix as usize];
                                let wv = wgt[((o * c + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

/// `x [n, in] @ w[out, in]^T + b`.
pub fn linear_ref(x: &[f64], n: usize, xin: usize, w: &[f64], out: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; n * out];
    for i in 0..n {
        for o in 0..out {
            let mut acc = b[o];
            for k in 0..xin {
                acc += x[i * xin + k] * w[o * xin + k];
            }
            y[i * out + o] = acc;
        }
    }
    y
}

pub fn relu_ref(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn log_sum_exp_ref(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Direct evaluation of the batch-contrastive loss: logits
/// `l[i][j] = p_i . W . cbar_j`, per-row softmax cross-entropy against the
/// diagonal, mean over rows. Returns (loss, top-1 accuracy).
pub fn infonce_ref(p: &[f64], cbar: &[f64], w: &[f64], b: usize, d: usize) -> (f64, f64) {
    let mut logits = vec![0.0f64; b * b];
    for i in 0..b {
        // t = p_i W
        let mut t = vec![0.0f64; d];
        for a in 0..d {
            for c in 0..d {
                t[c] += p[i * d + a] * w[a * d + c];
            }
        }
        for j in 0..b {
            let mut acc = 0.0f64;
            for c in 0..d {
                acc += t[c] * cbar[j * d + c];
            }
            logits[i * b + j] = acc;
        }
    }
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for i in 0..b {
        let row = &logits[i * b..(i + 1) * b];
        loss += log_sum_exp_ref(row) - row[i];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == i {
            correct += 1;
        }
    }
    (loss / b as f64, correct as f64 / b as f64)
}

/// Integer shift with edge replication, done the slow explicit way: pad the
/// image by `pad` replicated pixels on every side, then crop at the offset.
pub fn shift_pad_crop_ref(img: &[f32], h: usize, w: usize, pad: usize, dy: i32, dx: i32) -> Vec<f32> {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let mut padded = vec![0.0f32; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
            padded[y * pw + x] = img[sy * w + sx];
        }
    }
    let oy = (pad as i32 + dy) as usize;
    let ox = (pad as i32 + dx) as usize;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = padded[(y + oy) * pw + (x + ox)];
        }
    }
    out
}

/// Bilinear sample of one plane at continuous offset (dy, dx) with 1-pixel
/// edge padding: each output pixel is the weighted average of the four
/// nearest input pixels around (y + dy, x + dx).
pub fn bilinear_shift_ref(img: &[f32], h: usize, w: usize, dy: f64, dx: f64) -> Vec<f32> {
    let fetch = |y: isize, x: isize| -> f64 {
        let cy = y.clamp(0, h as isize - 1) as usize;
        let cx = x.clamp(0, w as isize - 1) as usize;
        img[cy * w + cx] as f64
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + dy;
            let sx = x as f64 + dx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let wy = sy - y0;
            let wx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - wy) * (1.0 - wx) * fetch(y0, x0)
                + (1.0 - wy) * wx * fetch(y0, x0 + 1)
                + wy * (1.0 - wx) * fetch(y0 + 1, x0)
                + wy * wx * fetch(y0 + 1, x0 + 1);
            out[y * w + x] = v as f32;
        }
    }
    out
}

/// Scalar EMA recursion `target <- (1 - tau) target + tau source`, in the
/// same f32 arithmetic the production update uses.
pub fn ema_scalar_ref(mut target: f32, source: f32, tau: f32, steps: usize) -> f32 {
    for _ in 0..steps {
        target = (1.0 - tau) * target + tau * source;
    }
    target
}

/// Scalar Adam reference with f32 state rounding at every step, mirroring
/// the production quantization points.
#[allow(clippy::too_many_arguments)]
pub struct AdamScalarRef {
    pub m: f32,
    pub v: f32,
    pub t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamScalarRef {
    pub fn new() -> Self {
        AdamScalarRef { m: 0.0, v: 0.0, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, p: f32, g: f32, lr: f64) -> f32 {
        self.t += 1;
        self.m = (self.beta1 * self.m as f64 + (1.0 - self.beta1) * g as f64) as f32;
        self.v = (self.beta2 * self.v as f64 + (1.0 - self.beta2) * (g as f64) * (g as f64)) as f32;
        let mhat = self.m as f64 / (1.0 - self.beta1.powi(self.t));
        let vhat = self.v as f64 / (1.0 - self.beta2.powi(self.t));
        (p as f64 - lr * mhat / (vhat.sqrt() + self.eps)) as f32
    }
}

impl Default for AdamScalarRef {
    fn default() -> Self {
        Self::new()
    }
}

/// Central finite differences of `f` at `x`, step `h` per coordinate.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor: exact relative error for magnitudes above
/// `floor`, absolute error scaled by `1/floor` below it (so near-zero pairs
/// compare on an absolute scale).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// f64 snapshot of a contrastive model for finite-difference checks: the
/// whole forward pass (conv stack, compressor, residual predictor, bilinear
/// logits, per-row cross-entropy, mean) reimplemented naively in f64.
/// Parameter groups follow the model's visit order.
pub struct RefAtc {
    pub conv_specs: Vec<ConvSpec>,
    /// Groups in visit order: enc{i}.w, enc{i}.b, ..., comp.w, comp.b,
    /// pred_in.w, pred_in.b, pred_out.w, pred_out.b, contrast.w.
    pub groups: Vec<(String, Vec<f64>)>,
    pub momentum: Vec<Vec<f64>>,
    pub latent_size: usize,
    pub predictor_hidden: usize,
    pub latent_len: usize,
}

impl RefAtc {
    pub fn from_model(model: &crate::model::AtcModel) -> Self {
        let mut groups = Vec::new();
        model.visit_params(|name, t| {
            groups.push((name.to_string(), t.data().iter().map(|v| *v as f64).collect()));
        });
        let mut momentum = Vec::new();
        model.visit_momentum(|_, t| momentum.push(t.data().iter().map(|v| *v as f64).collect()));
        RefAtc {
            conv_specs: model.encoder.layers.iter().map(|l| l.spec).collect(),
            groups,
            momentum,
            latent_size: model.latent_size,
            predictor_hidden: model.predictor_in.weight.shape()[0],
            latent_len: model.encoder.latent_len(),
        }
    }

    fn group(&self, name: &str) -> &[f64] {
        &self.groups.iter().find(|(n, _)| n == name).expect("group exists").1
    }

    fn encode_learned(&self, img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut cur = img.to_vec();
        let (mut cc, mut ch, mut cw) = (c, h, w);
        for (i, spec) in self.conv_specs.iter().enumerate() {
            let wgt = self.group(&format!("enc{i}.w"));
            let bias = self.group(&format!("enc{i}.b"));
            let mut y = conv2d_ref(&cur, cc, ch, cw, wgt, bias, spec);
            relu_ref(&mut y);
            cur = y;
            cc = spec.out_channels;
            ch = (ch + 2 * spec.padding - spec.kernel_size) / spec.stride + 1;
            cw = (cw + 2 * spec.padding - spec.kernel_size) / spec.stride + 1;
        }
        let cw_ = self.group("comp.w");
        let cb = self.group("comp.b");
        linear_ref(&cur, 1, self.latent_len, cw_, self.latent_size, cb)
    }

    fn encode_momentum(&self, img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut cur = img.to_vec();
        let (mut cc, mut ch, mut cw) = (c, h, w);
        for (i, spec) in self.conv_specs.iter().enumerate() {
            let wgt = &self.momentum[2 * i];
            let bias = &self.momentum[2 * i + 1];
            let mut y = conv2d_ref(&cur, cc, ch, cw, wgt, bias, spec);
            relu_ref(&mut y);
            cur = y;
            cc = spec.out_channels;
            ch = (ch + 2 * spec.padding - spec.kernel_size) / spec.stride + 1;
            cw = (cw + 2 * spec.padding - spec.kernel_size) / spec.stride + 1;
        }
        let n = self.momentum.len();
        let cw_ = &self.momentum[n - 2];
        let cb = &self.momentum[n - 1];
        linear_ref(&cur, 1, self.latent_len, cw_, self.latent_size, cb)
    }

    fn predict(&self, code: &[f64]) -> Vec<f64> {
        let mut h = linear_ref(code, 1, self.latent_size, self.group("pred_in.w"), self.predictor_hidden, self.group("pred_in.b"));
        relu_ref(&mut h);
        let out = linear_ref(&h, 1, self.predictor_hidden, self.group("pred_out.w"), self.latent_size, self.group("pred_out.b"));
        out.iter().zip(code).map(|(o, c)| o + c).collect()
    }

    /// Mean per-row cross-entropy of the bilinear logits against the
    /// diagonal, matching the production loss bit for bit in structure.
    pub fn loss(&self, anchors: &[f64], positives: &[f64], n: usize, c: usize, h: usize, w: usize) -> f64 {
        let img = c * h * w;
        let d = self.latent_size;
        let mut p = vec![0.0f64; n * d];
        let mut cbar = vec![0.0f64; n * d];
        for i in 0..n {
            let code = self.encode_learned(&anchors[i * img..(i + 1) * img], c, h, w);
            p[i * d..(i + 1) * d].copy_from_slice(&self.predict(&code));
            let m = self.encode_momentum(&positives[i * img..(i + 1) * img], c, h, w);
            cbar[i * d..(i + 1) * d].copy_from_slice(&m);
        }
        infonce_ref(&p, &cbar, self.group("contrast.w"), n, d).0
    }
}

/// Breadth-first distances on a wall grid; -1 where unreachable. Written
/// independently of the environment's own search.
pub fn bfs_ref(walls: &[bool], w: usize, h: usize, start: (usize, usize)) -> Vec<i32> {
    let mut dist = vec![-1i32; w * h];
    let mut queue = std::collections::VecDeque::new();
    let idx = start.1 * w + start.0;
    if walls[idx] {
        return dist;
    }
    dist[idx] = 0;
    queue.push_back(start);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y * w + x];
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx < w && ny < h && !walls[ny * w + nx] && dist[ny * w + nx] < 0 {
                dist[ny * w + nx] = d + 1;
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}
