//! Augmented temporal contrast (ATC) at desk scale.
//!
//! An unsupervised representation-learning task for pixel RL: a convolutional
//! encoder is trained to associate an observation with one from a few steps
//! later in the same trajectory, under random-shift augmentation, using a
//! contrastive loss with a momentum-encoded target. The encoder can then be
//! trained fully decoupled from the RL agent, used as an auxiliary loss, or
//! pre-trained offline and frozen.
//!
//! The crate bundles everything needed to run the protocols end to end on a
//! built-in pixel gridworld: a minimal reverse-mode autodiff engine
//! ([`numerics`]), the augmentations ([`augment`]), the contrastive model
//! ([`model`]), replay and pair sampling ([`data`]), the environment and a
//! scripted expert ([`env`]), a PPO learner with decoupled-encoder modes
//! ([`rl`]), competing unsupervised objectives ([`baselines`]), evaluation
//! tools ([`eval`]), and the experiment driver ([`cli`]).

pub mod augment;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod oracles;
pub mod rl;
pub mod rng;

pub use error::{AtcError, Result};
