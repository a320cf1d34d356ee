//! Training and evaluation loops.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{self, ResumeState, TrainerTensors};
use crate::harness::metrics::{self, MetricsRow, TimingRow};
use crate::numerics::rng::Purpose;
use crate::numerics::{ParameterSet, RngStream};
use crate::training::episode::{epsilon_at, run_episode};
use crate::training::{init_model, EpisodeRngs, Learner, LossReport, ReplayBuffer};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    /// Prey captured over prey available.
    pub capture_rate: f64,
    pub mean_length: f64,
}

/// Rolls out `episodes` evaluation episodes at a fixed exploration rate.
/// Episode `i` always uses the same evaluation streams of `seed`.
pub fn evaluate_policy(
    run: &RunConfig,
    params: &ParameterSet,
    episodes: usize,
    seed: u64,
    epsilon: f64,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Parameter("episodes must be positive".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut captured = 0;
    let mut steps = 0;
    for i in 0..episodes {
        let mut rngs = EpisodeRngs::evaluation(seed, i as u64);
        let ep = run_episode(run, params, &mut rngs, &|_| epsilon)?;
        returns.push(ep.total_return());
        captured += ep.prey_captured();
        steps += ep.len();
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalSummary {
        episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        capture_rate: captured as f64 / (n * run.env.n_prey as f64),
        mean_length: steps as f64 / n,
    })
}

/// Evaluates a saved checkpoint; `random_policy` ignores the Q values.
pub fn evaluate_checkpoint(
    dir: &Path,
    episodes: usize,
    seed: u64,
    random_policy: bool,
) -> Result<EvalSummary> {
    let (params, run, _) = checkpoint::load_checkpoint(dir)?;
    let epsilon = if random_policy { 1.0 } else { 0.0 };
    evaluate_policy(&run, &params, episodes, seed, epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
    pub final_capture_rate: f64,
    pub wallclock_s: f64,
}

fn mean_of(reports: &[LossReport], field: impl Fn(&LossReport) -> f64) -> Option<f64> {
    (!reports.is_empty())
        .then(|| reports.iter().map(&field).sum::<f64>() / reports.len() as f64)
}

/// Next multiple of `interval` strictly above `step`.
fn next_multiple(step: u64, interval: u64) -> u64 {
    (step / interval + 1) * interval
}

struct Loop {
    learner: Learner,
    state: ResumeState,
    elapsed_before: f64,
}

fn fresh(run: &RunConfig, dir: &Path) -> Result<Loop> {
    for f in [METRICS_FILE, TIMING_FILE] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    let params = init_model(run, &mut RngStream::for_purpose(run.seed, Purpose::Init, 0))?;
    let eval = run.train.eval_interval as u64;
    let ckpt = run.train.checkpoint_interval as u64;
    Ok(Loop {
        learner: Learner::new(params, run),
        state: ResumeState {
            env_steps: 0,
            episodes: 0,
            train_steps: 0,
            adam_t: 0,
            next_eval: eval,
            next_checkpoint: ckpt,
            pending: Vec::new(),
            buffer: ReplayBuffer::new(run.train.buffer_capacity)?,
        },
        elapsed_before: 0.0,
    })
}

fn resumed(run: &RunConfig, dir: &Path, from: &Path) -> Result<Loop> {
    let (online, saved, _) = checkpoint::load_checkpoint(from)?;
    if saved != *run {
        return Err(Error::Refused(format!(
            "{} was written by a different config",
            from.display()
        )));
    }
    let (tensors, state) = checkpoint::load_resume_state(from)?;
    let mut learner = Learner::new(online, run);
    learner.target = tensors.target;
    learner.optimizer.m = tensors.adam_m;
    learner.optimizer.v = tensors.adam_v;
    learner.optimizer.t = state.adam_t;
    learner.train_steps = state.train_steps;
    learner.optimizer.m.check_same_layout(&learner.online)?;
    learner.target.check_same_layout(&learner.online)?;

    let step = state.env_steps;
    metrics::retain_rows::<MetricsRow>(&dir.join(METRICS_FILE), |r| r.step <= step)?;
    metrics::retain_rows::<TimingRow>(&dir.join(TIMING_FILE), |r| r.step <= step)?;
    let timing = dir.join(TIMING_FILE);
    let elapsed_before = if timing.exists() && fs::metadata(&timing)?.len() > 0 {
        metrics::read_rows::<TimingRow>(&timing)?
            .last()
            .map_or(0.0, |r| r.wallclock_s)
    } else {
        0.0
    };
    info!("resuming from {} at env step {step}", from.display());
    Ok(Loop {
        learner,
        state,
        elapsed_before,
    })
}

fn save_all(run: &RunConfig, dir: &Path, lp: &Loop) -> Result<()> {
    let s = &lp.state;
    let ckpt = checkpoint::checkpoint_dir(dir, s.env_steps);
    checkpoint::save_checkpoint(&lp.learner.online, run, s.env_steps, &ckpt)?;
    let tensors = TrainerTensors {
        target: lp.learner.target.clone(),
        adam_m: lp.learner.optimizer.m.clone(),
        adam_v: lp.learner.optimizer.v.clone(),
    };
    checkpoint::save_resume_state(&ckpt, run, &tensors, s)?;
    debug!("checkpoint written to {}", ckpt.display());
    Ok(())
}

/// Trains `run` into `dir`: `config.json`, `metrics.csv`, `timing.csv` and
/// `checkpoints/`. With `resume`, continues from the newest resumable
/// checkpoint in `dir` if there is one.
pub fn run_training(run: &RunConfig, dir: &Path, resume: bool) -> Result<TrainingSummary> {
    run.validate()?;
    fs::create_dir_all(dir)?;
    let config_path = dir.join(CONFIG_FILE);
    let from = if resume {
        checkpoint::latest_resumable(dir)?
    } else {
        None
    };
    let mut lp = match &from {
        Some(ckpt) => resumed(run, dir, ckpt)?,
        None => fresh(run, dir)?,
    };
    fs::write(&config_path, run.to_pretty_json())?;

    let started = Instant::now();
    let total = run.train.total_steps as u64;
    let eval_interval = run.train.eval_interval as u64;
    let ckpt_interval = run.train.checkpoint_interval as u64;
    let mut last_capture = f64::NAN;

    while lp.state.env_steps < total {
        let s = &mut lp.state;
        let base = s.env_steps;
        let mut rngs = EpisodeRngs::training(run.seed, s.episodes);
        let record = run_episode(run, &lp.learner.online, &mut rngs, &|t| {
            epsilon_at(run, base + t as u64)
        })?;
        s.env_steps += record.len() as u64;
        s.episodes += 1;
        s.buffer.push(record);

        if s.buffer.len() >= run.train.batch_episodes {
            let mut rng = RngStream::for_purpose(run.seed, Purpose::Replay, lp.learner.train_steps);
            let report = lp
                .learner
                .train_step(&s.buffer, run, &mut rng)
                .map_err(|e| match e {
                    Error::Numerical { param, detail } => Error::Numerical {
                        param,
                        detail: format!("{detail} (env step {})", s.env_steps),
                    },
                    other => other,
                })?;
            s.pending.push(report);
            s.train_steps = lp.learner.train_steps;
            s.adam_t = lp.learner.optimizer.t;
        }

        if s.env_steps >= s.next_eval {
            let eval = evaluate_policy(run, &lp.learner.online, run.train.eval_episodes, run.seed, 0.0)?;
            let row = MetricsRow {
                step: s.env_steps,
                episode: s.episodes,
                mean_return: eval.mean_return,
                capture_rate: eval.capture_rate,
                epsilon: epsilon_at(run, s.env_steps),
                loss_total: mean_of(&s.pending, |r| r.total),
                loss_td: mean_of(&s.pending, |r| r.td),
                group_raw: mean_of(&s.pending, |r| r.group_raw),
                group_reg: mean_of(&s.pending, |r| r.group_reg),
            };
            metrics::append_row(&dir.join(METRICS_FILE), &row)?;
            let wallclock_s = lp.elapsed_before + started.elapsed().as_secs_f64();
            metrics::append_row(
                &dir.join(TIMING_FILE),
                &TimingRow {
                    step: s.env_steps,
                    wallclock_s,
                },
            )?;
            info!(
                "step {} episode {} capture_rate {:.3} return {:.2} loss {:?}",
                row.step, row.episode, row.capture_rate, row.mean_return, row.loss_total
            );
            last_capture = eval.capture_rate;
            s.pending.clear();
            s.next_eval = next_multiple(s.env_steps, eval_interval);
        }

        if lp.state.env_steps >= lp.state.next_checkpoint || lp.state.env_steps >= total {
            lp.state.next_checkpoint = next_multiple(lp.state.env_steps, ckpt_interval);
            save_all(run, dir, &lp)?;
        }
    }

    if last_capture.is_nan() {
        let path = dir.join(METRICS_FILE);
        if path.exists() {
            last_capture = metrics::read_rows::<MetricsRow>(&path)?
                .last()
                .map_or(f64::NAN, |r| r.capture_rate);
        }
    }
    Ok(TrainingSummary {
        env_steps: lp.state.env_steps,
        episodes: lp.state.episodes,
        train_steps: lp.learner.train_steps,
        final_capture_rate: last_capture,
        wallclock_s: lp.elapsed_before + started.elapsed().as_secs_f64(),
    })
}

/// Reads a run's effective config back.
pub fn load_effective_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::from_json_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_multiple_is_strictly_above() {
        assert_eq!(next_multiple(0, 500), 500);
        assert_eq!(next_multiple(499, 500), 500);
        assert_eq!(next_multiple(500, 500), 1000);
        assert_eq!(next_multiple(1234, 500), 1500);
    }

    #[test]
    fn zero_episodes_is_rejected() {
        let run = RunConfig::default();
        let params = init_model(&run, &mut RngStream::new(0, 0)).unwrap();
        assert!(matches!(
            evaluate_policy(&run, &params, 0, 0, 0.0),
            Err(Error::Parameter(_))
        ));
    }
}
