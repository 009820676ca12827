//! Experiment driver: the functions behind the command-line subcommands,
//! the run-log CSV schema, and a tiny stderr logger controlled by
//! `ATC_LOG_LEVEL` (error | info | debug).
//!
//! Every command resolves its configuration, writes it next to its outputs
//! as `config.resolved.json`, and produces byte-identical artifacts when
//! rerun with the same config and seed.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::baselines::{train_offline, BaselineSpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{load_dataset, save_dataset, ReplayBuffer, Transition, Trajectory};
use crate::env::{scripted_expert, GridWorldEnv, NUM_ACTIONS};
use crate::error::Result;
use crate::eval::{
    attention_map, contrast_accuracy, frozen_rl_score, linear_probe, write_attention_overlay_ppm,
    write_attention_pgm, write_score_csv, ScoreRow,
};
use crate::model::AtcModel;
use crate::rl::{run_online, PolicyHead, TrainLogRow};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Error,
    Info,
    Debug,
}

static LOG_LEVEL: OnceLock<LogLevel> = OnceLock::new();

pub fn log_level() -> LogLevel {
    *LOG_LEVEL.get_or_init(|| match std::env::var("ATC_LOG_LEVEL").as_deref() {
        Ok("error") => LogLevel::Error,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    })
}

pub fn log(level: LogLevel, msg: &str) {
    if level <= log_level() {
        let tag = match level {
            LogLevel::Error => "error",
            LogLevel::Info => "info",
            LogLevel::Debug => "debug",
        };
        eprintln!("[{tag}] {msg}");
    }
}

macro_rules! info {
    ($($arg:tt)*) => { crate::cli::log(crate::cli::LogLevel::Info, &format!($($arg)*)) };
}

/// Roll out the scripted expert until the transition budget is met.
pub fn collect_demonstrations(cfg: &RunConfig, master: &Rng) -> Result<Vec<Trajectory>> {
    let mut env = GridWorldEnv::new(cfg.env.clone(), &mut master.substream("layout"))?;
    let mut rng = master.substream("env");
    let env_id = cfg.env.env_id();
    let mut buffer = ReplayBuffer::new(usize::MAX, cfg.rl.gamma);
    let mut steps = 0usize;
    while steps < cfg.collect.transitions {
        let mut obs = env.reset(&mut rng)?;
        loop {
            let a = scripted_expert(&env, cfg.collect.expert_noise, &mut rng);
            let cell = env.agent_cell();
            let (next, s) = env.step(a)?;
            buffer.push(
                &env_id,
                Transition {
                    obs,
                    action: a as u8,
                    reward: s.reward,
                    terminal: s.done,
                    agent_cell: (cell.0 as u8, cell.1 as u8),
                },
            );
            obs = next;
            steps += 1;
            if s.done || steps >= cfg.collect.transitions {
                buffer.close_episode();
                break;
            }
        }
    }
    Ok(buffer.into_trajectories())
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.resolved.json"))
}

/// `collect`: write a demonstration dataset and report its statistics.
pub fn cmd_collect(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let master = Rng::from_seed(cfg.seed);
    let trajectories = collect_demonstrations(cfg, &master)?;
    let path = out.join("dataset.atcd");
    let header = save_dataset(&path, &trajectories, &cfg.env.env_id())?;
    let mean_return: f64 = trajectories
        .iter()
        .map(|t| t.rewards.iter().map(|r| *r as f64).sum::<f64>())
        .sum::<f64>()
        / trajectories.len().max(1) as f64;
    println!(
        "collected {} episodes / {} transitions, mean return {:.3} -> {}",
        header.episodes,
        header.transitions,
        mean_return,
        path.display()
    );
    Ok(path)
}

/// `pretrain`: offline encoder training with the configured objective,
/// frozen at the end and checkpointed.
pub fn cmd_pretrain(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let (header, trajectories) = load_dataset(dataset)?;
    info!("loaded {} episodes / {} transitions", header.episodes, header.transitions);
    let buffer = ReplayBuffer::from_trajectories(trajectories, cfg.rl.gamma)?;
    let master = Rng::from_seed(cfg.seed);
    let outcome = train_offline(&cfg.objective, &cfg.model, &buffer, cfg.pretrain_updates, &cfg.ul, &master)?;

    let log_path = out.join("pretrain_log.csv");
    let mut f = std::fs::File::create(&log_path)?;
    writeln!(f, "update,loss,accuracy")?;
    for (i, m) in outcome.trace.iter().enumerate() {
        writeln!(f, "{},{},{}", i + 1, m.loss, m.accuracy)?;
    }
    let ckpt = out.join("encoder.atck");
    save_checkpoint(&ckpt, &outcome.model, cfg.digest())?;
    let last = outcome.trace.last();
    println!(
        "pretrained {} updates (final loss {}, accuracy {}) -> {}",
        outcome.trace.len(),
        last.map(|m| m.loss).unwrap_or(f64::NAN),
        last.map(|m| m.accuracy).unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(ckpt)
}

pub fn write_train_csv(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,env_steps,mean_return,ul_loss,ul_accuracy,lr,p_ul_updates,encoder_param_hash")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{:016x}",
            r.iteration, r.env_steps, r.mean_return, r.ul_loss, r.ul_accuracy, r.lr, r.ul_updates_done, r.encoder_param_hash
        )?;
    }
    Ok(())
}

/// `train`: the online loop under the configured encoder mode.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let master = Rng::from_seed(cfg.seed);
    let mut env = GridWorldEnv::new(cfg.env.clone(), &mut master.substream("layout"))?;
    let mut model = AtcModel::new(&cfg.model, &mut master.substream("init"))?;
    let mut policy =
        PolicyHead::new(cfg.model.latent_size, cfg.rl.hidden, NUM_ACTIONS, &mut master.substream("policy-init"));
    let mut buffer = ReplayBuffer::new(cfg.ul.replay_capacity, cfg.rl.gamma);
    let digest = cfg.digest();
    let interval = cfg.checkpoint_interval.max(1);
    let report = run_online(
        &mut env,
        &mut model,
        &mut policy,
        &cfg.mode,
        &cfg.schedule,
        &cfg.rl,
        &cfg.ul,
        &mut buffer,
        cfg.total_steps,
        &master,
        |iteration, snapshot| {
            if iteration % interval == 0 {
                save_checkpoint(&out.join(format!("model_iter{iteration:06}.atck")), snapshot, digest)?;
            }
            Ok(())
        },
    )?;
    write_train_csv(&out.join("train_log.csv"), &report.log)?;
    save_checkpoint(&out.join("model.atck"), &model, cfg.digest())?;
    let final_window = report.final_window_mean(cfg.total_steps, 0.1);
    println!(
        "trained {} steps, {} episodes, final-window mean return {final_window}",
        cfg.total_steps,
        report.episode_returns.len()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<AtcModel> {
    let mut master = Rng::from_seed(cfg.seed).substream("init");
    let mut model = AtcModel::new(&cfg.model, &mut master)?;
    let warnings = load_checkpoint(ckpt, &mut model, cfg.digest())?;
    if let Some((found, expected)) = warnings.digest_mismatch {
        log(
            LogLevel::Error,
            &format!("checkpoint digest {found:016x} differs from config digest {expected:016x} (continuing)"),
        );
    }
    Ok(model)
}

/// `eval`: contrastive accuracy of a checkpoint plus frozen-encoder RL
/// scores across the configured seeds.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let mut model = load_model(cfg, ckpt)?;
    model.encoder.frozen = true;
    let master = Rng::from_seed(cfg.seed);

    // fresh evaluation data from the same environment family
    let mut eval_cfg = cfg.clone();
    eval_cfg.collect.transitions = (cfg.ul.batch_size * 40).max(5_000);
    let trajectories = collect_demonstrations(&eval_cfg, &master.substream("eval-data"))?;
    let buffer = ReplayBuffer::from_trajectories(trajectories, cfg.rl.gamma)?;
    let mut rng = master.substream("eval");
    let acc_aug = contrast_accuracy(
        &model,
        &buffer,
        cfg.ul.batch_size,
        cfg.ul.temporal_shift,
        cfg.eval.contrast_batches,
        Some(&cfg.ul.shift),
        &mut rng,
    )?;
    let acc_clean = contrast_accuracy(
        &model,
        &buffer,
        cfg.ul.batch_size,
        cfg.ul.temporal_shift,
        cfg.eval.contrast_batches,
        None,
        &mut rng,
    )?;
    println!("contrast accuracy: {acc_aug:.4} augmented, {acc_clean:.4} clean (batch {})", cfg.ul.batch_size);

    let score = frozen_rl_score(
        &model,
        objective_name(&cfg.objective),
        &cfg.env,
        &cfg.rl,
        cfg.eval.frozen_rl_rollout,
        cfg.eval.frozen_rl_steps,
        &cfg.eval.seeds,
    )?;
    write_score_csv(&out.join("scores.csv"), &score.rows)?;
    for row in &score.rows {
        println!(
            "seed {}: final-window mean return {} over {} episodes",
            row.seed, row.final_window_mean, row.episodes
        );
    }
    Ok(())
}

pub fn objective_name(spec: &BaselineSpec) -> &'static str {
    match spec {
        BaselineSpec::Atc => "atc",
        BaselineSpec::AtcNoShift => "atc_no_shift",
        BaselineSpec::AtcShiftProb { .. } => "atc_shift_prob",
        BaselineSpec::AugmentedContrast => "ac",
        BaselineSpec::VaeT { .. } => "vae_t",
        BaselineSpec::InverseModel { .. } => "inverse",
        BaselineSpec::SimilarityLoss => "similarity",
    }
}

/// `attn`: attention maps of every encoder layer on a fresh observation,
/// dumped as PGM grids and PPM overlays.
pub fn cmd_attn(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let model = load_model(cfg, ckpt)?;
    let master = Rng::from_seed(cfg.seed);
    let mut env = GridWorldEnv::new(cfg.env.clone(), &mut master.substream("layout"))?;
    let obs = env.reset(&mut master.substream("attn"))?;
    for layer in 0..model.encoder.layers.len() {
        let map = attention_map(&model, &obs, layer)?;
        let pgm = out.join(format!("attention_layer{layer}.pgm"));
        let ppm = out.join(format!("attention_layer{layer}_overlay.ppm"));
        write_attention_pgm(&pgm, &map)?;
        write_attention_overlay_ppm(&ppm, &obs, &map)?;
        println!("layer {layer}: {} / {}", pgm.display(), ppm.display());
    }
    Ok(())
}

/// `probe`: linear probe of the checkpointed encoder against ground-truth
/// agent cells, with a frozen-random-encoder control.
pub fn cmd_probe(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let model = load_model(cfg, ckpt)?;
    let master = Rng::from_seed(cfg.seed);
    let mut data_cfg = cfg.clone();
    data_cfg.collect.transitions = cfg.eval.probe_samples.max(1000);
    let trajectories = collect_demonstrations(&data_cfg, &master.substream("probe-data"))?;
    let buffer = ReplayBuffer::from_trajectories(trajectories, cfg.rl.gamma)?;

    let trained = linear_probe(&model, &buffer, cfg.eval.probe_samples, cfg.eval.probe_epochs, false, &master)?;
    let random_model = AtcModel::new(&cfg.model, &mut master.substream("random-encoder"))?;
    let random =
        linear_probe(&random_model, &buffer, cfg.eval.probe_samples, cfg.eval.probe_epochs, false, &master)?;

    let path = out.join("probe.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "encoder,train_accuracy,test_accuracy,classes,samples")?;
    writeln!(f, "checkpoint,{},{},{},{}", trained.train_accuracy, trained.test_accuracy, trained.classes, trained.samples)?;
    writeln!(f, "random,{},{},{},{}", random.train_accuracy, random.test_accuracy, random.classes, random.samples)?;
    println!(
        "probe test accuracy: checkpoint {:.4} vs random {:.4} ({} classes)",
        trained.test_accuracy, random.test_accuracy, trained.classes
    );
    Ok(())
}

/// Rows for comparison tables assembled by callers (benchmark harnesses).
pub fn score_rows_to_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_score_csv(path, rows)
}
