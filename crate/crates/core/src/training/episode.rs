//! Episode records and rollouts.
//!
//! A record keeps the environment state behind every step instead of the
//! observations themselves: observations are a pure function of the state,
//! so they and the observation windows are regenerated bit-exactly when an
//! episode is replayed. The partition and edge noise in effect at acting time
//! are stored verbatim.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{self, Action, EnvConfig, EnvState, Observation, N_ACTIONS};
use crate::error::{Error, Result};
use crate::graph::{self, EdgeNoise, GroupPartition};
use crate::numerics::rng::Purpose;
use crate::numerics::{Graph, ParameterSet, RngStream};
use crate::policy::{self, StepBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// State the actions were chosen in.
    pub state: EnvState,
    pub partition: GroupPartition,
    pub noise: EdgeNoise,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub final_state: EnvState,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn prey_captured(&self) -> usize {
        self.final_state.prey_captured()
    }

    /// Non-empty, consistent agent counts, terminal flag on the last step only.
    pub fn validate(&self) -> Result<()> {
        let last = self
            .steps
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Contract("episode has no steps".into()))?;
        let n = self.final_state.agents.len();
        for (t, s) in self.steps.iter().enumerate() {
            if s.done != (t == last) {
                return Err(Error::Contract(format!("done flag misplaced at step {t}")));
            }
            if s.actions.len() != n || s.state.agents.len() != n || s.partition.n() != n {
                return Err(Error::Contract(format!("agent count changes at step {t}")));
            }
        }
        Ok(())
    }

    /// Observations of every agent at every step.
    pub fn observations(&self, config: &EnvConfig) -> Vec<Vec<Observation>> {
        self.steps.iter().map(|s| env::observe_all(config, &s.state)).collect()
    }
}

/// Flattened windows of the last `k` observations per agent at step `t`,
/// oldest first, zero-padded before the episode start.
pub fn window_rows(history: &[Vec<Observation>], t: usize, k: usize) -> Vec<Vec<f64>> {
    let n = history[t].len();
    let d = history[t][0].len();
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; k * d];
            for slot in 0..k {
                let back = k - 1 - slot;
                if back <= t {
                    row[slot * d..(slot + 1) * d].copy_from_slice(&history[t - back][i]);
                }
            }
            row
        })
        .collect()
}

/// Independent streams behind one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRngs {
    pub env: RngStream,
    pub explore: RngStream,
    pub groups: RngStream,
    pub edges: RngStream,
}

impl EpisodeRngs {
    pub fn training(seed: u64, episode: u64) -> Self {
        Self {
            env: RngStream::for_purpose(seed, Purpose::Env, episode),
            explore: RngStream::for_purpose(seed, Purpose::Explore, episode),
            groups: RngStream::for_purpose(seed, Purpose::Groups, episode),
            edges: RngStream::for_purpose(seed, Purpose::Edges, episode),
        }
    }

    pub fn evaluation(seed: u64, episode: u64) -> Self {
        Self {
            env: RngStream::for_purpose(seed, Purpose::EvalEnv, episode),
            explore: RngStream::for_purpose(seed, Purpose::EvalExplore, episode),
            groups: RngStream::for_purpose(seed, Purpose::EvalGroups, episode),
            edges: RngStream::for_purpose(seed, Purpose::EvalEdges, episode),
        }
    }
}

/// Partition for one step, or the single group when grouping is off.
pub fn step_partition(
    run: &RunConfig,
    windows: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<GroupPartition> {
    match run.effective_groups() {
        Some(m) => graph::divide_groups(windows, m, run.group.k, rng),
        None => Ok(GroupPartition::single(windows.len(), run.group.k)),
    }
}

/// Network inputs for steps `range` of one episode, given its observation
/// history.
pub fn step_batch(
    run: &RunConfig,
    history: &[Vec<Observation>],
    steps: &[&StepRecord],
    times: &[usize],
) -> StepBatch {
    let n = run.env.n_agents;
    let mut b = StepBatch {
        batch: 0,
        n,
        ..StepBatch::default()
    };
    append_steps(&mut b, run, history, steps, times);
    b
}

pub(crate) fn append_steps(
    b: &mut StepBatch,
    run: &RunConfig,
    history: &[Vec<Observation>],
    steps: &[&StepRecord],
    times: &[usize],
) {
    for (s, &t) in steps.iter().zip(times) {
        for o in &history[t] {
            b.obs.extend_from_slice(o);
        }
        for w in window_rows(history, t, run.group.k) {
            b.windows.extend(w);
        }
        b.noise.push(s.noise.clone());
        b.factors.push(graph::covariance_factors(&s.partition, run.graph.covariance));
        b.batch += 1;
    }
}

/// Linear ε schedule over environment steps.
pub fn epsilon_at(run: &RunConfig, env_step: u64) -> f64 {
    let t = &run.train;
    if t.epsilon_anneal_steps == 0 {
        return t.epsilon_end;
    }
    let frac = (env_step as f64 / t.epsilon_anneal_steps as f64).min(1.0);
    t.epsilon_start * (1.0 - frac) + t.epsilon_end * frac
}

/// Plays one episode. `epsilon(t)` gives the exploration rate at step `t`
/// of the episode.
pub fn run_episode(
    run: &RunConfig,
    params: &ParameterSet,
    rngs: &mut EpisodeRngs,
    epsilon: &dyn Fn(usize) -> f64,
) -> Result<EpisodeRecord> {
    let cfg = &run.env;
    let n = cfg.n_agents;
    let mode = run.effective_mode();
    let variance = run.graph.sigma2 + run.graph.jitter;
    let (mut state, first) = env::reset(cfg, &mut rngs.env)?;
    let mut history = vec![first];
    let mut steps = Vec::new();
    loop {
        let t = steps.len();
        let windows = window_rows(&history, t, run.group.k);
        let partition = step_partition(run, &windows, &mut rngs.groups)?;
        let factors = graph::covariance_factors(&partition, run.graph.covariance);
        let noise = graph::draw_noise(mode, n * n, factors.len(), variance, &mut rngs.edges);

        let mut inputs = StepBatch {
            batch: 1,
            n,
            obs: history[t].concat(),
            windows: windows.concat(),
            noise: vec![noise],
            factors: vec![factors],
        };
        let q = {
            let mut g = Graph::new();
            let b = g.bind(params, false);
            let out = policy::joint_forward(&mut g, &b, &inputs)?;
            g.value(out.q).to_vec()
        };
        let actions = policy::select_actions(&q, N_ACTIONS, epsilon(t), &mut rngs.explore)?;
        let moves: Vec<Action> = actions.iter().map(|&a| Action::from_index(a)).collect();
        let out = env::step(cfg, &state, &moves, &mut rngs.env)?;
        steps.push(StepRecord {
            state,
            partition,
            noise: inputs.noise.pop().expect("one noise draw"),
            actions,
            reward: out.reward,
            done: out.done,
        });
        state = out.state;
        if out.done {
            break;
        }
        history.push(out.observations);
    }
    Ok(EpisodeRecord {
        steps,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::init_model;

    fn small_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.env.grid_size = 5;
        run.env.n_agents = 3;
        run.env.n_scouts = 1;
        run.env.n_prey = 1;
        run.env.scout_radius = 2;
        run.env.episode_limit = 8;
        run.model.encoder_hidden = 8;
        run.model.d_h = 4;
        run.model.d_k = 4;
        run.model.agent_hidden = 8;
        run.model.mixer_embed = 4;
        run.group.k = 3;
        run
    }

    #[test]
    fn windows_pad_then_slide() {
        let h: Vec<Vec<Observation>> = (0..4).map(|t| vec![vec![t as f64 + 1.0; 2]]).collect();
        assert_eq!(window_rows(&h, 0, 3), vec![vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(window_rows(&h, 3, 3), vec![vec![2.0, 2.0, 3.0, 3.0, 4.0, 4.0]]);
        assert_eq!(window_rows(&h, 2, 1), vec![vec![3.0, 3.0]]);
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let run = RunConfig::default();
        assert_eq!(epsilon_at(&run, 0), 1.0);
        assert!((epsilon_at(&run, 5_000) - 0.525).abs() < 1e-12);
        assert_eq!(epsilon_at(&run, 10_000), 0.05);
        assert_eq!(epsilon_at(&run, 90_000), 0.05);
    }

    #[test]
    fn rollouts_are_reproducible_and_well_formed() {
        let run = small_run();
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let play = || run_episode(&run, &params, &mut EpisodeRngs::training(3, 0), &|_| 0.3).unwrap();
        let a = play();
        assert_eq!(a, play());
        a.validate().unwrap();
        assert!(a.len() <= run.env.episode_limit);
        for s in &a.steps {
            s.partition.validate().unwrap();
            assert_eq!(s.partition.m, 2);
            assert!(matches!(&s.noise, EdgeNoise::Shared(z) if z.len() == 1));
        }
    }

    #[test]
    fn grouping_off_uses_one_group_and_no_noise() {
        let mut run = small_run();
        run.group.m = 0;
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let ep = run_episode(&run, &params, &mut EpisodeRngs::training(1, 0), &|_| 1.0).unwrap();
        for s in &ep.steps {
            assert_eq!(s.partition.labels, vec![0; 3]);
            assert_eq!(s.noise, EdgeNoise::None);
        }
    }
}
