//! Experiment configuration: one JSON file with explicit schema versioning.
//!
//! Unknown keys anywhere in the tree are hard errors (a typo must fail, not
//! silently fall back to a default). Every run writes its fully resolved
//! config next to its outputs, and rerunning from that file reproduces the
//! run byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::SubpixelShiftSpec;
use crate::baselines::BaselineSpec;
use crate::env::GridWorldConfig;
use crate::error::{AtcError, Result};
use crate::model::{AtcConfig, EncoderConfig};
use crate::rl::{EncoderMode, LoopSchedule, PpoConfig, UlAnneal, UlConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    /// Transition budget for demonstration datasets.
    pub transitions: usize,
    /// Expert noise level: probability of a uniformly random action.
    pub expert_noise: f32,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { transitions: 125_000, expert_noise: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Batches of the contrastive-accuracy readout.
    pub contrast_batches: usize,
    pub probe_samples: usize,
    pub probe_epochs: usize,
    /// Environment steps per frozen-encoder RL evaluation run.
    pub frozen_rl_steps: usize,
    /// Rollout length for frozen-encoder RL evaluation.
    pub frozen_rl_rollout: usize,
    pub seeds: Vec<u64>,
    pub subpixel: SubpixelShiftSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            contrast_batches: 20,
            probe_samples: 4_000,
            probe_epochs: 8,
            frozen_rl_steps: 30_000,
            frozen_rl_rollout: 128,
            seeds: vec![1, 2, 3, 4, 5],
            subpixel: SubpixelShiftSpec::default(),
        }
    }
}

/// The whole experiment in one serializable value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub env: GridWorldConfig,
    pub model: AtcConfig,
    pub ul: UlConfig,
    pub rl: PpoConfig,
    pub mode: EncoderMode,
    pub schedule: LoopSchedule,
    pub objective: BaselineSpec,
    /// Environment steps for online training runs.
    pub total_steps: usize,
    /// Contrastive updates for offline pretraining runs.
    pub pretrain_updates: usize,
    /// Checkpoints are written every this many iterations (and at the end).
    pub checkpoint_interval: usize,
    pub collect: CollectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = GridWorldConfig::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            model: AtcConfig {
                encoder: EncoderConfig {
                    in_channels: 3,
                    height: env.render,
                    width: env.render,
                    channels: vec![12, 24, 32],
                    kernels: vec![4, 3, 3],
                    strides: vec![4, 2, 2],
                    padding: 0,
                },
                latent_size: 128,
                predictor_hidden: 512,
                tau: 0.01,
            },
            env,
            ul: UlConfig::default(),
            rl: PpoConfig::default(),
            mode: EncoderMode::DetachedAtc,
            schedule: LoopSchedule::default(),
            objective: BaselineSpec::Atc,
            total_steps: 50_000,
            pretrain_updates: 20_000,
            checkpoint_interval: 100,
            collect: CollectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(AtcError::config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.env.validate()?;
        self.model.validate()?;
        self.ul.shift.validate()?;
        self.eval.subpixel.validate()?;
        self.schedule.validate(&self.mode)?;
        if self.model.encoder.height != self.env.render || self.model.encoder.width != self.env.render {
            return Err(AtcError::config(format!(
                "encoder input {}x{} does not match env render {}",
                self.model.encoder.height, self.model.encoder.width, self.env.render
            )));
        }
        let mut h = self.env.render;
        for spec in self.model.encoder.conv_specs()? {
            h = spec.out_dim(h)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| AtcError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully resolved config (defaults expanded).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| AtcError::config(e.to_string()))?;
        std::fs::write(path, text.as_bytes())?;
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding; ties checkpoints to configs.
    pub fn digest(&self) -> u64 {
        let text = serde_json::to_string(self).expect("serializable by construction");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Keep `--mode` overrides valid out of the box: modes that train via the
/// contrastive loss need a nonzero update count, the others need zero.
pub fn reconcile_mode_schedule(cfg: &mut RunConfig) {
    let want_ul = matches!(cfg.mode, EncoderMode::DetachedAtc | EncoderMode::AuxAtc { .. });
    if want_ul && cfg.schedule.ul_updates == 0 {
        cfg.schedule.ul_updates = 1;
    }
    if !want_ul && cfg.schedule.ul_updates != 0 {
        cfg.schedule.ul_updates = 0;
    }
    if let UlAnneal::Quadratic { horizon_iters } = cfg.schedule.ul_anneal {
        if horizon_iters == 0 {
            cfg.schedule.ul_anneal = UlAnneal::None;
        }
    }
}
