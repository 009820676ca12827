//! Browser playground for the temporal-contrastive gridworld stack.
//!
//! Three interactive panels, all driving the same core crate that the CLI
//! uses: stepping the maze (by hand or with the scripted expert), exploring
//! the two augmentations with sliders, and watching a miniature encoder
//! train in the browser with a live attention-map overlay.
//!
//! Build with `wasm-pack build --target web crates/atc-demo` and serve
//! `crates/atc-demo/www/`.

use wasm_bindgen::prelude::*;

use atc::augment::{bilinear_shift_plane, shift_plane, RandomShiftSpec};
use atc::data::{ReplayBuffer, SamplingMode, Transition};
use atc::env::{scripted_expert, GridWorldConfig, GridWorldEnv, LayoutMode, Obs};
use atc::eval::attention_map;
use atc::model::{atc_update, AtcConfig, AtcModel, EncoderConfig};
use atc::numerics::{Adam, LrSchedule};
use atc::rng::Rng;

const RENDER: usize = 48;

fn demo_env_config() -> GridWorldConfig {
    GridWorldConfig {
        grid: 9,
        render: RENDER,
        layout: LayoutMode::PerEpisode,
        max_episode_len: 200,
        ..Default::default()
    }
}

fn demo_model_config() -> AtcConfig {
    AtcConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            height: RENDER,
            width: RENDER,
            channels: vec![8, 16, 16],
            kernels: vec![4, 3, 3],
            strides: vec![4, 2, 2],
            padding: 0,
        },
        latent_size: 64,
        predictor_hidden: 128,
        tau: 0.01,
    }
}

/// Planar RGB u8 -> interleaved RGBA for `putImageData`.
fn obs_to_rgba(obs: &Obs) -> Vec<u8> {
    let plane = obs.height * obs.width;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        out.push(obs.pixels[i]);
        out.push(obs.pixels[plane + i]);
        out.push(obs.pixels[2 * plane + i]);
        out.push(255);
    }
    out
}

fn planes_to_rgba(planes: &[f32], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            out.push((planes[c * plane + i].clamp(0.0, 1.0) * 255.0) as u8);
        }
        out.push(255);
    }
    out
}

/// Interactive maze with a scripted shortest-path expert.
#[wasm_bindgen]
pub struct GridworldSim {
    env: GridWorldEnv,
    rng: Rng,
    obs: Obs,
    episode_return: f32,
    episodes: u32,
}

#[wasm_bindgen]
impl GridworldSim {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<GridworldSim, JsError> {
        let master = Rng::from_seed(seed);
        let mut env = GridWorldEnv::new(demo_env_config(), &mut master.substream("layout"))
            .map_err(|e| JsError::new(&e.to_string()))?;
        let mut rng = master.substream("env");
        let obs = env.reset(&mut rng).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(GridworldSim { env, rng, obs, episode_return: 0.0, episodes: 0 })
    }

    pub fn width(&self) -> usize {
        self.obs.width
    }

    pub fn height(&self) -> usize {
        self.obs.height
    }

    /// Current observation as RGBA bytes.
    pub fn render_rgba(&self) -> Vec<u8> {
        obs_to_rgba(&self.obs)
    }

    /// Apply one action (0 up, 1 down, 2 left, 3 right); returns the reward.
    /// Finished episodes reset automatically.
    pub fn step(&mut self, action: usize) -> Result<f32, JsError> {
        if self.env.is_done() {
            self.obs = self.env.reset(&mut self.rng).map_err(|e| JsError::new(&e.to_string()))?;
            self.episode_return = 0.0;
        }
        let (obs, step) = self.env.step(action).map_err(|e| JsError::new(&e.to_string()))?;
        self.obs = obs;
        self.episode_return += step.reward;
        if step.done {
            self.episodes += 1;
        }
        Ok(step.reward)
    }

    /// One step chosen by the scripted expert at the given noise level.
    pub fn expert_step(&mut self, noise: f32) -> Result<f32, JsError> {
        if self.env.is_done() {
            self.obs = self.env.reset(&mut self.rng).map_err(|e| JsError::new(&e.to_string()))?;
            self.episode_return = 0.0;
        }
        let a = scripted_expert(&self.env, noise.clamp(0.0, 1.0), &mut self.rng);
        self.step(a)
    }

    pub fn episode_return(&self) -> f32 {
        self.episode_return
    }

    pub fn episodes_finished(&self) -> u32 {
        self.episodes
    }

    pub fn new_episode(&mut self) -> Result<(), JsError> {
        self.obs = self.env.reset(&mut self.rng).map_err(|e| JsError::new(&e.to_string()))?;
        self.episode_return = 0.0;
        Ok(())
    }
}

/// Augmentation explorer over a fixed observation.
#[wasm_bindgen]
pub struct AugmentLab {
    obs_planes: Vec<f32>,
    h: usize,
    w: usize,
}

#[wasm_bindgen]
impl AugmentLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<AugmentLab, JsError> {
        let master = Rng::from_seed(seed);
        let mut env = GridWorldEnv::new(demo_env_config(), &mut master.substream("layout"))
            .map_err(|e| JsError::new(&e.to_string()))?;
        let obs = env.reset(&mut master.substream("env")).map_err(|e| JsError::new(&e.to_string()))?;
        let t = obs.to_tensor();
        Ok(AugmentLab { obs_planes: t.data().to_vec(), h: obs.height, w: obs.width })
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn original_rgba(&self) -> Vec<u8> {
        planes_to_rgba(&self.obs_planes, self.h, self.w)
    }

    /// Whole-pixel shift with edge replication at an explicit offset.
    pub fn integer_shift_rgba(&self, dy: i32, dx: i32) -> Vec<u8> {
        let plane = self.h * self.w;
        let mut out = vec![0.0f32; 3 * plane];
        for c in 0..3 {
            shift_plane(&self.obs_planes[c * plane..(c + 1) * plane], self.h, self.w, dy, dx, &mut out[c * plane..(c + 1) * plane]);
        }
        planes_to_rgba(&out, self.h, self.w)
    }

    /// Continuous shift via the four-nearest-pixel weighted average.
    pub fn subpixel_shift_rgba(&self, dy: f32, dx: f32) -> Vec<u8> {
        let plane = self.h * self.w;
        let mut out = vec![0.0f32; 3 * plane];
        for c in 0..3 {
            bilinear_shift_plane(&self.obs_planes[c * plane..(c + 1) * plane], self.h, self.w, dy, dx, &mut out[c * plane..(c + 1) * plane]);
        }
        planes_to_rgba(&out, self.h, self.w)
    }

    /// A fresh random draw of the training augmentation at the given pad.
    pub fn random_shift_rgba(&self, pad: usize, seed: u64) -> Vec<u8> {
        let mut rng = Rng::from_seed(seed);
        let pad = pad.min((self.h.min(self.w) - 1) / 2);
        let dy = rng.range_i32(-(pad as i32), pad as i32);
        let dx = rng.range_i32(-(pad as i32), pad as i32);
        self.integer_shift_rgba(dy, dx)
    }
}

/// Miniature in-browser contrastive training on expert data.
#[wasm_bindgen]
pub struct MiniTrainer {
    model: AtcModel,
    adam: Adam,
    buffer: ReplayBuffer,
    shift: RandomShiftSpec,
    sample_rng: Rng,
    aug_rng: Rng,
    view_obs: Obs,
    updates: u32,
    last_loss: f64,
    last_accuracy: f64,
}

#[wasm_bindgen]
impl MiniTrainer {
    /// Collects `episodes` expert episodes up front, then trains on demand.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, episodes: usize) -> Result<MiniTrainer, JsError> {
        let master = Rng::from_seed(seed);
        let cfg = demo_env_config();
        let mut env = GridWorldEnv::new(cfg.clone(), &mut master.substream("layout"))
            .map_err(|e| JsError::new(&e.to_string()))?;
        let mut env_rng = master.substream("env");
        let mut buffer = ReplayBuffer::new(usize::MAX, 0.99);
        let mut view_obs = None;
        for _ in 0..episodes.clamp(2, 200) {
            let mut obs = env.reset(&mut env_rng).map_err(|e| JsError::new(&e.to_string()))?;
            if view_obs.is_none() {
                view_obs = Some(obs.clone());
            }
            loop {
                let a = scripted_expert(&env, 0.25, &mut env_rng);
                let cell = env.agent_cell();
                let (next, s) = env.step(a).map_err(|e| JsError::new(&e.to_string()))?;
                buffer.push(
                    &cfg.env_id(),
                    Transition {
                        obs,
                        action: a as u8,
                        reward: s.reward,
                        terminal: s.done,
                        agent_cell: (cell.0 as u8, cell.1 as u8),
                    },
                );
                obs = next;
                if s.done {
                    break;
                }
            }
        }
        let mut init = master.substream("init");
        let model = AtcModel::new(&demo_model_config(), &mut init).map_err(|e| JsError::new(&e.to_string()))?;
        let mut adam = Adam::new(1e-3, LrSchedule::Constant);
        model.register_params(&mut adam);
        Ok(MiniTrainer {
            model,
            adam,
            buffer,
            shift: RandomShiftSpec::default(),
            sample_rng: master.substream("ul-sample"),
            aug_rng: master.substream("ul-augment"),
            view_obs: view_obs.expect("at least one episode"),
            updates: 0,
            last_loss: f64::NAN,
            last_accuracy: f64::NAN,
        })
    }

    /// Run `n` contrastive updates (batch 32, temporal shift 1).
    pub fn train(&mut self, n: usize) -> Result<(), JsError> {
        for _ in 0..n.clamp(1, 50) {
            let batch = self
                .buffer
                .sample_pairs(32, 1, SamplingMode::UniformTransitions, &mut self.sample_rng)
                .map_err(|e| JsError::new(&e.to_string()))?;
            let m = atc_update(&mut self.model, &batch, &self.shift, &mut self.adam, &mut self.aug_rng)
                .map_err(|e| JsError::new(&e.to_string()))?;
            self.updates += 1;
            self.last_loss = m.loss;
            self.last_accuracy = m.accuracy;
        }
        Ok(())
    }

    pub fn updates(&self) -> u32 {
        self.updates
    }

    pub fn loss(&self) -> f64 {
        self.last_loss
    }

    pub fn accuracy(&self) -> f64 {
        self.last_accuracy
    }

    pub fn view_width(&self) -> usize {
        self.view_obs.width
    }

    pub fn view_height(&self) -> usize {
        self.view_obs.height
    }

    pub fn view_rgba(&self) -> Vec<u8> {
        obs_to_rgba(&self.view_obs)
    }

    /// Red-channel attention overlay of the chosen encoder layer on the
    /// fixed viewing observation.
    pub fn attention_rgba(&self, layer: usize) -> Result<Vec<u8>, JsError> {
        let layer = layer.min(self.model.encoder.layers.len() - 1);
        let map = attention_map(&self.model, &self.view_obs, layer).map_err(|e| JsError::new(&e.to_string()))?;
        let (h, w) = (self.view_obs.height, self.view_obs.width);
        let plane = h * w;
        let peak = map.values.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
        let mut out = Vec::with_capacity(plane * 4);
        for y in 0..h {
            let my = y * map.height / h;
            for x in 0..w {
                let mx = x * map.width / w;
                let heat = map.values[my * map.width + mx] / peak;
                let r = self.view_obs.pixels[y * w + x] as f32;
                let g = self.view_obs.pixels[plane + y * w + x] as f32;
                let b = self.view_obs.pixels[2 * plane + y * w + x] as f32;
                out.push((r * 0.4 + heat * 153.0).min(255.0) as u8);
                out.push((g * 0.4) as u8);
                out.push((b * 0.4) as u8);
                out.push(255);
            }
        }
        Ok(out)
    }

    /// Pick a new viewing observation from the buffer.
    pub fn next_view(&mut self) {
        let trajs: Vec<_> = self.buffer.trajectories().collect();
        if trajs.is_empty() {
            return;
        }
        let ti = self.sample_rng.below(trajs.len());
        let t = trajs[ti];
        let si = self.sample_rng.below(t.observations.len());
        self.view_obs = t.observations[si].clone();
    }
}
