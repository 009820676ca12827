//! Trajectories, the replay buffer, (anchor, positive) pair sampling, and
//! the on-disk demonstration format.
//!
//! Pairs always stay inside one episode: an anchor at step t is matched with
//! the observation at t + k of the same trajectory, so no pair ever spans an
//! episode boundary. Prioritized sampling weights fixed-length segments by
//! `1 + sum_t gamma^t |r_t|` (priority >= 1 keeps every segment supported).
//!
//! Dataset files ("ATCD"): magic, u32 version, u32 header length, JSON
//! header (counts, image shape, dtype, env-id table), then per-episode
//! blocks of `u32 steps | u32 env_id index | observations u8 | actions u8 |
//! rewards f32`, each followed by its CRC32. All integers little-endian.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Obs;
use crate::error::{AtcError, Result};
use crate::model::AtcBatch;
use crate::numerics::Tensor;
use crate::rng::Rng;

pub const DATASET_MAGIC: &[u8; 4] = b"ATCD";
pub const DATASET_VERSION: u32 = 1;

/// Default length of the fixed segments that carry priorities.
pub const DEFAULT_SEGMENT_LEN: usize = 16;

/// One episode: equal-length step lists plus the source environment id.
/// `agent_cells` is ground truth kept for probe evaluation when the
/// trajectory was generated in-process; it is not part of the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env_id: String,
    pub observations: Vec<Obs>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    /// Per-step episode-end flags; true only on the final step.
    pub terminals: Vec<bool>,
    pub agent_cells: Vec<(u8, u8)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.observations.len();
        if self.actions.len() != n || self.rewards.len() != n || self.terminals.len() != n {
            return Err(AtcError::data("trajectory step lists have unequal lengths"));
        }
        Ok(())
    }
}

/// Discounted absolute return of each fixed-length segment, offset by 1.
pub fn segment_priorities(rewards: &[f32], gamma: f32, segment_len: usize) -> Vec<f32> {
    rewards
        .chunks(segment_len.max(1))
        .map(|seg| {
            let mut acc = 0.0f64;
            let mut disc = 1.0f64;
            for r in seg {
                acc += disc * r.abs() as f64;
                disc *= gamma as f64;
            }
            1.0 + acc as f32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingMode {
    UniformTransitions,
    PrioritizedTransitions,
    /// Contiguous runs: every step of each run is an anchor, so neighboring
    /// steps serve as each other's (hard) negatives.
    TrajectorySegments { num_trajectories: usize, segment_length: usize },
}

#[derive(Debug, Clone)]
struct Stored {
    traj: Trajectory,
    priorities: Vec<f32>,
}

/// Ring of whole trajectories bounded by a transition budget; one writer,
/// sampling only ever sees closed episodes.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    gamma: f32,
    segment_len: usize,
    closed: VecDeque<Stored>,
    open: Option<Trajectory>,
    stored_steps: usize,
}

/// One step pushed into the buffer.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Obs,
    pub action: u8,
    pub reward: f32,
    pub terminal: bool,
    pub agent_cell: (u8, u8),
}

impl ReplayBuffer {
    pub fn new(capacity: usize, gamma: f32) -> Self {
        ReplayBuffer {
            capacity,
            gamma,
            segment_len: DEFAULT_SEGMENT_LEN,
            closed: VecDeque::new(),
            open: None,
            stored_steps: 0,
        }
    }

    /// Preloaded buffer over a fixed dataset (offline training).
    pub fn from_trajectories(trajectories: Vec<Trajectory>, gamma: f32) -> Result<Self> {
        let mut buf = ReplayBuffer::new(usize::MAX, gamma);
        for t in trajectories {
            t.validate()?;
            buf.stored_steps += t.len();
            let priorities = segment_priorities(&t.rewards, gamma, buf.segment_len);
            buf.closed.push_back(Stored { traj: t, priorities });
        }
        Ok(buf)
    }

    pub fn len_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn len_trajectories(&self) -> usize {
        self.closed.len()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.closed.iter().map(|s| &s.traj)
    }

    /// Consume the buffer into its closed trajectories, closing any open
    /// episode first.
    pub fn into_trajectories(mut self) -> Vec<Trajectory> {
        self.close_episode();
        self.closed.into_iter().map(|s| s.traj).collect()
    }

    /// Append one step of the given environment; closes the episode on a
    /// terminal step, evicting the oldest episodes while over capacity.
    pub fn push(&mut self, env_id: &str, t: Transition) {
        let open = self.open.get_or_insert_with(|| Trajectory {
            env_id: env_id.to_string(),
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            agent_cells: Vec::new(),
        });
        open.observations.push(t.obs);
        open.actions.push(t.action);
        open.rewards.push(t.reward);
        open.terminals.push(t.terminal);
        open.agent_cells.push(t.agent_cell);
        if t.terminal {
            self.close_episode();
        }
    }

    /// Close the open episode (used on truncation as well as terminals).
    pub fn close_episode(&mut self) {
        if let Some(mut traj) = self.open.take() {
            if traj.is_empty() {
                return;
            }
            if let Some(last) = traj.terminals.last_mut() {
                *last = true;
            }
            self.stored_steps += traj.len();
            let priorities = segment_priorities(&traj.rewards, self.gamma, self.segment_len);
            self.closed.push_back(Stored { traj, priorities });
            while self.stored_steps > self.capacity && self.closed.len() > 1 {
                if let Some(old) = self.closed.pop_front() {
                    self.stored_steps -= old.traj.len();
                }
            }
        }
    }

    /// Sample an (anchor, positive) batch with temporal shift `k`.
    pub fn sample_pairs(&self, batch_size: usize, k: usize, mode: SamplingMode, rng: &mut Rng) -> Result<AtcBatch> {
        if batch_size < 2 {
            return Err(AtcError::config("batch_size must be at least 2"));
        }
        let picks = match mode {
            SamplingMode::UniformTransitions => self.pick_uniform(batch_size, k, rng)?,
            SamplingMode::PrioritizedTransitions => self.pick_prioritized(batch_size, k, rng)?,
            SamplingMode::TrajectorySegments { num_trajectories, segment_length } => {
                if num_trajectories * segment_length != batch_size {
                    return Err(AtcError::config(format!(
                        "segment sampling: {num_trajectories} x {segment_length} != batch {batch_size}"
                    )));
                }
                self.pick_segments(num_trajectories, segment_length, k, rng)?
            }
        };
        self.assemble(&picks, k)
    }

    fn valid_anchors(&self, ti: usize, k: usize) -> usize {
        self.closed[ti].traj.len().saturating_sub(k)
    }

    fn pick_uniform(&self, batch: usize, k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        let counts: Vec<usize> = (0..self.closed.len()).map(|ti| self.valid_anchors(ti, k)).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(AtcError::Sampling(format!(
                "no anchor admits a positive {k} steps ahead (episodes too short)"
            )));
        }
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut idx = rng.below(total);
            let mut ti = 0;
            while idx >= counts[ti] {
                idx -= counts[ti];
                ti += 1;
            }
            picks.push((ti, idx));
        }
        Ok(picks)
    }

    fn pick_prioritized(&self, batch: usize, k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        // flat list of segments with at least one valid anchor
        let mut weights: Vec<f64> = Vec::new();
        let mut spans: Vec<(usize, usize, usize)> = Vec::new(); // (traj, start, count)
        for ti in 0..self.closed.len() {
            let s = &self.closed[ti];
            let valid = self.valid_anchors(ti, k);
            for (si, p) in s.priorities.iter().enumerate() {
                let start = si * self.segment_len;
                let count = valid.saturating_sub(start).min(self.segment_len);
                if count > 0 {
                    weights.push(*p as f64);
                    spans.push((ti, start, count));
                }
            }
        }
        if spans.is_empty() {
            return Err(AtcError::Sampling("no segment admits a valid anchor".to_string()));
        }
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = rng.weighted(&weights);
            let (ti, start, count) = spans[s];
            picks.push((ti, start + rng.below(count)));
        }
        Ok(picks)
    }

    fn pick_segments(&self, num_traj: usize, seg_len: usize, k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        let eligible: Vec<usize> =
            (0..self.closed.len()).filter(|ti| self.closed[*ti].traj.len() >= seg_len + k).collect();
        if eligible.is_empty() {
            return Err(AtcError::Sampling(format!(
                "no trajectory long enough for segments of {seg_len} with shift {k}"
            )));
        }
        let mut picks = Vec::with_capacity(num_traj * seg_len);
        for _ in 0..num_traj {
            let ti = eligible[rng.below(eligible.len())];
            let max_start = self.closed[ti].traj.len() - seg_len - k;
            let start = rng.below(max_start + 1);
            for t in start..start + seg_len {
                picks.push((ti, t));
            }
        }
        Ok(picks)
    }

    fn assemble(&self, picks: &[(usize, usize)], k: usize) -> Result<AtcBatch> {
        let mut anchors: Vec<&Obs> = Vec::with_capacity(picks.len());
        let mut positives: Vec<&Obs> = Vec::with_capacity(picks.len());
        for (ti, t) in picks {
            let traj = &self.closed[*ti].traj;
            anchors.push(&traj.observations[*t]);
            positives.push(&traj.observations[*t + k]);
        }
        let a = crate::env::obs_batch(&anchors)?;
        let p = crate::env::obs_batch(&positives)?;
        AtcBatch::new(a, p)
    }

    /// Like [`ReplayBuffer::sample_pairs`], also returning the action taken
    /// at each anchor step (used by reconstruction and inverse objectives).
    pub fn sample_pairs_with_actions(
        &self,
        batch_size: usize,
        k: usize,
        mode: SamplingMode,
        rng: &mut Rng,
    ) -> Result<(AtcBatch, Vec<u8>)> {
        if batch_size < 2 {
            return Err(AtcError::config("batch_size must be at least 2"));
        }
        let picks = match mode {
            SamplingMode::UniformTransitions => self.pick_uniform(batch_size, k, rng)?,
            SamplingMode::PrioritizedTransitions => self.pick_prioritized(batch_size, k, rng)?,
            SamplingMode::TrajectorySegments { num_trajectories, segment_length } => {
                if num_trajectories * segment_length != batch_size {
                    return Err(AtcError::config("segment sampling shape must factor the batch"));
                }
                self.pick_segments(num_trajectories, segment_length, k, rng)?
            }
        };
        let actions = picks.iter().map(|(ti, t)| self.closed[*ti].traj.actions[*t]).collect();
        Ok((self.assemble(&picks, k)?, actions))
    }

    /// Anchor picks for evaluation protocols that need labels alongside
    /// observations.
    pub fn sample_labeled(&self, batch_size: usize, rng: &mut Rng) -> Result<(Tensor, Vec<(u8, u8)>)> {
        let picks = self.pick_uniform(batch_size, 0, rng)?;
        let mut obs: Vec<&Obs> = Vec::with_capacity(picks.len());
        let mut labels = Vec::with_capacity(picks.len());
        for (ti, t) in picks {
            let traj = &self.closed[ti].traj;
            obs.push(&traj.observations[t]);
            labels.push(traj.agent_cells[t]);
        }
        Ok((crate::env::obs_batch(&obs)?, labels))
    }
}

// ── dataset file format ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub episodes: u64,
    pub transitions: u64,
    pub image_shape: (usize, usize, usize),
    pub dtype: String,
    pub env_ids: Vec<String>,
    /// Free-form description of the generating environment.
    pub env: String,
}

pub fn save_dataset(path: &Path, trajectories: &[Trajectory], env_desc: &str) -> Result<DatasetHeader> {
    let first = trajectories
        .first()
        .ok_or_else(|| AtcError::config("refusing to write an empty dataset"))?;
    let o = &first.observations[0];
    let image_shape = (o.channels, o.height, o.width);

    let mut env_ids: Vec<String> = Vec::new();
    for t in trajectories {
        if !env_ids.contains(&t.env_id) {
            env_ids.push(t.env_id.clone());
        }
    }
    let header = DatasetHeader {
        episodes: trajectories.len() as u64,
        transitions: trajectories.iter().map(|t| t.len() as u64).sum(),
        image_shape,
        dtype: "u8".to_string(),
        env_ids: env_ids.clone(),
        env: env_desc.to_string(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| AtcError::data(e.to_string()))?;

    let file = std::fs::File::create(path)?;
    let mut wtr = BufWriter::new(file);
    wtr.write_all(DATASET_MAGIC)?;
    wtr.write_all(&DATASET_VERSION.to_le_bytes())?;
    wtr.write_all(&(header_json.len() as u32).to_le_bytes())?;
    wtr.write_all(&header_json)?;

    for t in trajectories {
        t.validate()?;
        let env_idx = env_ids.iter().position(|e| *e == t.env_id).expect("in table") as u32;
        let mut block: Vec<u8> = Vec::new();
        block.extend_from_slice(&(t.len() as u32).to_le_bytes());
        block.extend_from_slice(&env_idx.to_le_bytes());
        for o in &t.observations {
            if (o.channels, o.height, o.width) != image_shape {
                return Err(AtcError::data("inconsistent observation shapes across episodes"));
            }
            block.extend_from_slice(&o.pixels);
        }
        block.extend_from_slice(&t.actions);
        for r in &t.rewards {
            block.extend_from_slice(&r.to_le_bytes());
        }
        let crc = crc32fast::hash(&block);
        wtr.write_all(&block)?;
        wtr.write_all(&crc.to_le_bytes())?;
    }
    wtr.flush()?;
    Ok(header)
}

fn read_exact_at(rdr: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    rdr.read_exact(buf).map_err(|e| {
        AtcError::data(format!("truncated dataset at offset {offset} while reading {what}: {e}"))
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let file = std::fs::File::open(path)?;
    let mut rdr = BufReader::new(file);
    let mut offset = 0u64;

    let mut magic = [0u8; 4];
    read_exact_at(&mut rdr, &mut magic, &mut offset, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(AtcError::data(format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}")));
    }
    let mut u32buf = [0u8; 4];
    read_exact_at(&mut rdr, &mut u32buf, &mut offset, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != DATASET_VERSION {
        return Err(AtcError::data(format!("unsupported dataset version {version}")));
    }
    read_exact_at(&mut rdr, &mut u32buf, &mut offset, "header length")?;
    let hlen = u32::from_le_bytes(u32buf) as usize;
    let mut hbuf = vec![0u8; hlen];
    read_exact_at(&mut rdr, &mut hbuf, &mut offset, "header")?;
    let header: DatasetHeader =
        serde_json::from_slice(&hbuf).map_err(|e| AtcError::data(format!("bad header JSON: {e}")))?;
    let (c, h, w) = header.image_shape;
    let obs_len = c * h * w;

    let mut trajectories = Vec::with_capacity(header.episodes as usize);
    for ep in 0..header.episodes {
        let block_start = offset;
        read_exact_at(&mut rdr, &mut u32buf, &mut offset, &format!("episode {ep} length"))?;
        let steps = u32::from_le_bytes(u32buf) as usize;
        let mut env_buf = [0u8; 4];
        read_exact_at(&mut rdr, &mut env_buf, &mut offset, &format!("episode {ep} env id"))?;
        let env_idx = u32::from_le_bytes(env_buf) as usize;
        let env_id = header
            .env_ids
            .get(env_idx)
            .ok_or_else(|| AtcError::data(format!("episode {ep}: env id index {env_idx} out of table")))?
            .clone();

        let mut obs_bytes = vec![0u8; steps * obs_len];
        read_exact_at(&mut rdr, &mut obs_bytes, &mut offset, &format!("episode {ep} observations"))?;
        let mut actions = vec![0u8; steps];
        read_exact_at(&mut rdr, &mut actions, &mut offset, &format!("episode {ep} actions"))?;
        let mut reward_bytes = vec![0u8; steps * 4];
        read_exact_at(&mut rdr, &mut reward_bytes, &mut offset, &format!("episode {ep} rewards"))?;
        let mut crc_buf = [0u8; 4];
        read_exact_at(&mut rdr, &mut crc_buf, &mut offset, &format!("episode {ep} checksum"))?;

        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&(steps as u32).to_le_bytes());
        hasher.update(&env_buf);
        hasher.update(&obs_bytes);
        hasher.update(&actions);
        hasher.update(&reward_bytes);
        if hasher.finalize() != u32::from_le_bytes(crc_buf) {
            return Err(AtcError::data(format!(
                "checksum mismatch in episode {ep} starting at offset {block_start}"
            )));
        }

        let observations: Vec<Obs> = obs_bytes
            .chunks_exact(obs_len)
            .map(|px| Obs { channels: c, height: h, width: w, pixels: px.to_vec() })
            .collect();
        let rewards: Vec<f32> =
            reward_bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut terminals = vec![false; steps];
        if let Some(last) = terminals.last_mut() {
            *last = true;
        }
        trajectories.push(Trajectory {
            env_id,
            observations,
            actions,
            rewards,
            terminals,
            agent_cells: Vec::new(),
        });
    }
    Ok((header, trajectories))
}
